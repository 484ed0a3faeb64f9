//! Random ellipse phantoms with embedded metal disks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WATER: f64 = 0.2;
pub const METAL_THRESHOLD: f64 = 2.0;
const MAX_TRIES: usize = 200;

/// Metal-area class boundaries in pixels for a 128×128 image.
pub const SMALL_AREA_128: f64 = 80.0;
pub const MEDIUM_AREA_128: f64 = 300.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Large,
    Medium,
    Small,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Large, SizeClass::Medium, SizeClass::Small];

    /// Classifies a metal area, with the 128² thresholds scaled by image area.
    pub fn from_area(area: usize, h: usize, w: usize) -> Self {
        let scale = (h * w) as f64 / (128.0 * 128.0);
        let a = area as f64;
        if a < SMALL_AREA_128 * scale {
            SizeClass::Small
        } else if a < MEDIUM_AREA_128 * scale {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Large => "large",
            SizeClass::Medium => "medium",
            SizeClass::Small => "small",
        }
    }
}

impl std::fmt::Display for SizeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center `(x, y)` in pixels relative to the image center, y up.
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    pub value: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }

    /// Whether `other` grown by `margin` fits inside `self`, checked on
    /// boundary samples.
    fn encloses(&self, other: &Ellipse, margin: f64) -> bool {
        let (s, c) = other.angle.sin_cos();
        (0..32).all(|k| {
            let t = k as f64 * std::f64::consts::TAU / 32.0;
            let (a, b) = (other.axes.0 + margin, other.axes.1 + margin);
            let (u, v) = (a * t.cos(), b * t.sin());
            let x = other.center.0 + u * c - v * s;
            let y = other.center.1 + u * s + v * c;
            self.contains(x, y)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetalConfig {
    pub count: usize,
    /// Disk radii in pixels, drawn uniformly from `[min, max]`.
    pub radius_range: [f64; 2],
    pub value: f64,
}

impl Default for MetalConfig {
    fn default() -> Self {
        Self {
            count: 2,
            radius_range: [2.5, 9.0],
            value: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub n_ellipses: usize,
    pub metal: MetalConfig,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 128,
            n_ellipses: 6,
            metal: MetalConfig::default(),
        }
    }
}

impl PhantomConfig {
    /// Defaults scaled to a `size × size` grid.
    pub fn for_size(size: usize) -> Self {
        let k = size as f64 / 128.0;
        let mut cfg = Self::default();
        cfg.size = size;
        cfg.metal.radius_range = [cfg.metal.radius_range[0] * k, cfg.metal.radius_range[1] * k];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_power_of_two() {
            return Err(Error::config(
                "phantom.size",
                "must be a power of two and at least 16",
            ));
        }
        let [lo, hi] = self.metal.radius_range;
        if !(lo > 0.0 && hi >= lo && hi < self.size as f64 / 6.0) {
            return Err(Error::config(
                "phantom.metal.radius_range",
                "need 0 < min <= max < size/6",
            ));
        }
        if !(self.metal.value >= METAL_THRESHOLD) {
            return Err(Error::config(
                "phantom.metal.value",
                format!("must be at least {METAL_THRESHOLD}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// Attenuation image including metal.
    pub image: Tensor,
    /// The same image with metal replaced by the underlying tissue.
    pub tissue: Tensor,
    pub ellipses: Vec<Ellipse>,
    pub metal: Vec<Ellipse>,
}

impl Phantom {
    pub fn metal_mask(&self) -> Tensor {
        self.image
            .map(|v| if v >= METAL_THRESHOLD { 1.0 } else { 0.0 })
    }

    pub fn metal_area(&self) -> usize {
        self.metal_mask().sum() as usize
    }
}

fn paint(size: usize, shapes: &[Ellipse], base: Option<&Tensor>) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let mut img = base
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[size, size]));
    for (i, v) in img.data_mut().iter_mut().enumerate() {
        let (x, y) = ((i % size) as f64 - c, c - (i / size) as f64);
        for e in shapes {
            if e.contains(x, y) {
                *v = e.value;
            }
        }
    }
    img
}

/// Body ellipse, internal soft-tissue/bone ellipses, then metal disks
/// placed strictly inside the body.
pub fn generate_phantom(cfg: &PhantomConfig, rng: &mut impl Rng) -> Result<Phantom> {
    cfg.validate()?;
    let n = cfg.size as f64;
    let body = Ellipse {
        center: (
            rng.random_range(-0.03..0.03) * n,
            rng.random_range(-0.03..0.03) * n,
        ),
        axes: (
            rng.random_range(0.36..0.42) * n,
            rng.random_range(0.28..0.38) * n,
        ),
        angle: rng.random_range(-0.3..0.3),
        value: WATER,
    };
    let mut ellipses = vec![body];
    let mut tries = 0;
    while ellipses.len() < cfg.n_ellipses + 1 {
        tries += 1;
        if tries > MAX_TRIES * (cfg.n_ellipses + 1) {
            return Err(Error::Generation("could not place tissue ellipses".into()));
        }
        let bone = rng.random_bool(0.3);
        let value = if bone {
            rng.random_range(0.45..0.6)
        } else {
            rng.random_range(0.15..0.28)
        };
        let e = Ellipse {
            center: (
                body.center.0 + rng.random_range(-0.7..0.7) * body.axes.0,
                body.center.1 + rng.random_range(-0.7..0.7) * body.axes.1,
            ),
            axes: (
                rng.random_range(0.03..0.14) * n,
                rng.random_range(0.03..0.14) * n,
            ),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value,
        };
        if body.encloses(&e, 1.0) {
            ellipses.push(e);
        }
    }

    let mut metal = Vec::with_capacity(cfg.metal.count);
    let [lo, hi] = cfg.metal.radius_range;
    let mut tries = 0;
    while metal.len() < cfg.metal.count {
        tries += 1;
        if tries > MAX_TRIES * cfg.metal.count {
            return Err(Error::Generation(
                "could not place metal inside the body".into(),
            ));
        }
        let r = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let d = Ellipse {
            center: (
                body.center.0 + rng.random_range(-0.75..0.75) * body.axes.0,
                body.center.1 + rng.random_range(-0.75..0.75) * body.axes.1,
            ),
            axes: (r, r),
            angle: 0.0,
            value: cfg.metal.value,
        };
        if body.encloses(&d, 2.0) {
            metal.push(d);
        }
    }

    let tissue = paint(cfg.size, &ellipses, None);
    let image = paint(cfg.size, &metal, Some(&tissue));
    let phantom = Phantom {
        image,
        tissue,
        ellipses,
        metal,
    };
    if touches_border(&phantom.metal_mask(), cfg.size) {
        return Err(Error::Generation("metal touches the image border".into()));
    }
    if cfg.metal.count > 0 && phantom.metal_area() == 0 {
        return Err(Error::Generation("metal disks cover no pixel".into()));
    }
    Ok(phantom)
}

fn touches_border(mask: &Tensor, n: usize) -> bool {
    let d = mask.data();
    (0..n).any(|i| {
        d[i] != 0.0 || d[(n - 1) * n + i] != 0.0 || d[i * n] != 0.0 || d[i * n + n - 1] != 0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_in_seed() {
        let cfg = PhantomConfig::for_size(64);
        let a = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn value_ranges_and_metal_threshold() {
        let cfg = PhantomConfig::for_size(64);
        for seed in 0..10 {
            let p = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(p.image.data().iter().all(|&v| v >= 0.0));
            assert!(p.tissue.data().iter().all(|&v| v < METAL_THRESHOLD));
            let mask = p.metal_mask();
            for ((&v, &t), &m) in p.image.data().iter().zip(p.tissue.data()).zip(mask.data()) {
                if m == 0.0 {
                    assert_eq!(v, t);
                } else {
                    assert_eq!(v, cfg.metal.value);
                    assert!(t > 0.0, "metal outside body");
                }
            }
            assert!(p.metal_area() > 0);
        }
    }

    #[test]
    fn no_metal_config() {
        let mut cfg = PhantomConfig::for_size(32);
        cfg.metal.count = 0;
        let p = generate_phantom(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.metal_area(), 0);
        assert_eq!(p.image, p.tissue);
    }

    #[test]
    fn size_class_thresholds() {
        assert_eq!(SizeClass::from_area(79, 128, 128), SizeClass::Small);
        assert_eq!(SizeClass::from_area(80, 128, 128), SizeClass::Medium);
        assert_eq!(SizeClass::from_area(299, 128, 128), SizeClass::Medium);
        assert_eq!(SizeClass::from_area(300, 128, 128), SizeClass::Large);
        // a 64² image scales the thresholds by 1/4
        assert_eq!(SizeClass::from_area(19, 64, 64), SizeClass::Small);
        assert_eq!(SizeClass::from_area(20, 64, 64), SizeClass::Medium);
        assert_eq!(SizeClass::from_area(75, 64, 64), SizeClass::Large);
    }

    #[test]
    fn invalid_config_names_key() {
        let mut cfg = PhantomConfig::for_size(64);
        cfg.metal.radius_range = [3.0, 1.0];
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "phantom.metal.radius_range"),
            other => panic!("{other:?}"),
        }
    }
}
