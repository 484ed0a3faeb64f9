//! Synthetic parallel-beam CT: phantoms, projection, metal corruption, LI
//! completion, reconstruction, and the on-disk dataset layout.

pub mod corrupt;
pub mod dataset;
pub mod phantom;
pub mod radon;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corrupt::{corrupt_sinogram, li_complete, CorruptionConfig, MetalTrace};
pub use phantom::{generate_phantom, MetalConfig, Phantom, PhantomConfig, SizeClass};
pub use radon::{fbp, radon, Sinogram};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scanner geometry. Line integrals are in physical units: one pixel spans
/// `fov / size`, so water (0.2 per unit length) across the body gives
/// sinogram values of a few units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    pub n_angles: usize,
    pub n_dets: usize,
    pub fov: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::for_size(128)
    }
}

impl Geometry {
    pub fn for_size(size: usize) -> Self {
        Self {
            n_angles: size * 3 / 2,
            n_dets: size * 3 / 2,
            fov: 20.0,
        }
    }

    pub fn pixel_size(&self, size: usize) -> f64 {
        self.fov / size as f64
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.n_angles == 0 {
            return Err(Error::config("geometry.n_angles", "must be positive"));
        }
        let diagonal = (2.0f64).sqrt() * size as f64;
        if (self.n_dets as f64) < diagonal {
            return Err(Error::config(
                "geometry.n_dets",
                format!("must cover the image diagonal ({diagonal:.1} px)"),
            ));
        }
        if !(self.fov > 0.0 && self.fov.is_finite()) {
            return Err(Error::config("geometry.fov", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub phantom: PhantomConfig,
    pub geometry: Geometry,
    pub corruption: CorruptionConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self::for_size(128)
    }
}

impl SampleConfig {
    pub fn for_size(size: usize) -> Self {
        Self {
            phantom: PhantomConfig::for_size(size),
            geometry: Geometry::for_size(size),
            corruption: CorruptionConfig::default(),
        }
    }

    pub fn size(&self) -> usize {
        self.phantom.size
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.geometry.validate(self.phantom.size)?;
        self.corruption.validate()
    }
}

/// One training/evaluation example. All images are `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtSample {
    pub id: String,
    /// Metal-corrupted reconstruction.
    pub y: Tensor,
    pub x_gt: Tensor,
    /// Non-metal mask: 1 off metal, 0 on metal.
    pub mask: Tensor,
    /// LI reconstruction.
    pub x0: Tensor,
    pub size_class: SizeClass,
    pub no_metal: bool,
}

impl CtSample {
    pub fn check(&self) -> Result<()> {
        let (c, h, w) = self.y.chw()?;
        if c != 1 {
            return Err(Error::Dimension(format!(
                "sample `{}` must be single-channel",
                self.id
            )));
        }
        for (name, t) in [("x_gt", &self.x_gt), ("mask", &self.mask), ("x0", &self.x0)] {
            if t.chw()? != (1, h, w) {
                return Err(Error::Dimension(format!(
                    "sample `{}`: {name} has shape {:?}, Y has {:?}",
                    self.id,
                    t.shape(),
                    self.y.shape()
                )));
            }
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!(
                "sample `{}`: mask is not binary",
                self.id
            )));
        }
        Ok(())
    }

    pub fn extent(&self) -> (usize, usize) {
        let (_, h, w) = self.y.chw().expect("checked sample");
        (h, w)
    }
}

/// Everything `make_sample` knows about a sample besides its images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub size: usize,
    pub size_class: SizeClass,
    pub no_metal: bool,
    pub metal_area: usize,
    pub geometry: Geometry,
    pub corruption: CorruptionConfig,
}

/// Intermediate products of [`make_sample`], kept for inspection and tests.
#[derive(Clone, Debug)]
pub struct SampleParts {
    pub phantom: Phantom,
    pub clean: Sinogram,
    pub corrupted: Sinogram,
    pub completed: Sinogram,
    pub trace: MetalTrace,
}

fn project(image: &Tensor, g: &Geometry, px: f64) -> Result<Sinogram> {
    let s = radon(image, g.n_angles, g.n_dets)?;
    Sinogram::new(s.data.scale(px))
}

fn reconstruct(s: &Sinogram, size: usize, px: f64) -> Result<Tensor> {
    fbp(s, size)?.scale(1.0 / px).into_shape(&[1, size, size])
}

/// Phantom → sinograms → corruption → LI → reconstructions, all driven by `seed`.
pub fn make_sample_parts(
    id: &str,
    seed: u64,
    cfg: &SampleConfig,
) -> Result<(CtSample, SampleMeta, SampleParts)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.size();
    let g = cfg.geometry;
    let px = g.pixel_size(size);

    let phantom = generate_phantom(&cfg.phantom, &mut rng)?;
    let metal = phantom.metal_mask();
    let area = metal.sum() as usize;
    let trace = MetalTrace::from_metal_mask(&metal, g.n_angles, g.n_dets)?;

    let clean = project(&phantom.tissue, &g, px)?;
    let measured = project(&phantom.image, &g, px)?;
    let corrupted = corrupt_sinogram(&measured, &trace, &cfg.corruption, &mut rng)?;
    let completed = li_complete(&corrupted, &trace)?;

    let sample = CtSample {
        id: id.to_string(),
        y: reconstruct(&corrupted, size, px)?,
        x_gt: reconstruct(&clean, size, px)?,
        mask: metal.map(|m| 1.0 - m).into_shape(&[1, size, size])?,
        x0: reconstruct(&completed, size, px)?,
        size_class: SizeClass::from_area(area, size, size),
        no_metal: area == 0,
    };
    let meta = SampleMeta {
        id: id.to_string(),
        seed,
        size,
        size_class: sample.size_class,
        no_metal: sample.no_metal,
        metal_area: area,
        geometry: g,
        corruption: cfg.corruption,
    };
    let parts = SampleParts {
        phantom,
        clean,
        corrupted,
        completed,
        trace,
    };
    Ok((sample, meta, parts))
}

pub fn make_sample(id: &str, seed: u64, cfg: &SampleConfig) -> Result<(CtSample, SampleMeta)> {
    let (s, m, _) = make_sample_parts(id, seed, cfg)?;
    Ok((s, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_truncation() {
        let g = Geometry {
            n_dets: 80,
            ..Geometry::for_size(64)
        };
        assert!(
            matches!(g.validate(64), Err(Error::Config { key, .. }) if key == "geometry.n_dets")
        );
        assert!(Geometry::for_size(64).validate(64).is_ok());
    }

    #[test]
    fn sample_is_deterministic_and_complementary() {
        let cfg = SampleConfig::for_size(32);
        let (a, ma) = make_sample("s", 11, &cfg).unwrap();
        let (b, mb) = make_sample("s", 11, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        a.check().unwrap();
        assert_eq!(a.y.shape(), &[1, 32, 32]);
        assert!(!a.no_metal);
        assert_eq!(
            a.mask.data().iter().filter(|&&v| v == 0.0).count(),
            ma.metal_area
        );
    }

    #[test]
    fn check_rejects_nonbinary_mask() {
        let cfg = SampleConfig::for_size(32);
        let (mut s, _) = make_sample("s", 1, &cfg).unwrap();
        s.mask.data_mut()[0] = 0.5;
        assert!(matches!(s.check(), Err(Error::Contract(_))));
    }
}
