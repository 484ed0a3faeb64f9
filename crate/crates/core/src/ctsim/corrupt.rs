//! Metal trace, beam-hardening/noise corruption, and LI sinogram completion.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::radon::{radon, Sinogram};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TRACE_TOL: f64 = 1e-9;

/// Sinogram bins whose rays pass through metal.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalTrace {
    pub mask: Tensor,
}

impl MetalTrace {
    pub fn from_metal_mask(metal: &Tensor, n_angles: usize, n_dets: usize) -> Result<Self> {
        let p = radon(metal, n_angles, n_dets)?;
        Ok(Self {
            mask: p.data.map(|v| if v > TRACE_TOL { 1.0 } else { 0.0 }),
        })
    }

    pub fn empty(n_angles: usize, n_dets: usize) -> Self {
        Self {
            mask: Tensor::zeros(&[n_angles, n_dets]),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0)
    }

    fn on(&self, i: usize) -> bool {
        self.mask.data()[i] != 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// Strength of the `p + β·p²` hardening on the metal trace.
    pub beta: f64,
    /// Noise variance is `noise_scale · exp(p)` with `p` the unhardened value.
    pub noise_scale: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            noise_scale: 1e-4,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("corruption.beta", "must be finite and >= 0"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config(
                "corruption.noise_scale",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }
}

fn check_trace(sino: &Sinogram, trace: &MetalTrace) -> Result<()> {
    sino.data.check_same_shape(&trace.mask)
}

/// Hardens the trace and adds Poisson-surrogate Gaussian noise everywhere.
pub fn corrupt_sinogram(
    sino: &Sinogram,
    trace: &MetalTrace,
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<Sinogram> {
    check_trace(sino, trace)?;
    cfg.validate()?;
    let mut out = sino.data.clone();
    for (i, p) in out.data_mut().iter_mut().enumerate() {
        // photon statistics follow the true attenuation, not the hardened value
        let std = (cfg.noise_scale * p.exp()).sqrt();
        if trace.on(i) {
            *p += cfg.beta * *p * *p;
        }
        if cfg.noise_scale > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            *p += std * z;
        }
    }
    Sinogram::new(out)
}

/// Bridges every on-trace run of each angle row linearly between its
/// off-trace neighbors.
pub fn li_complete(sino: &Sinogram, trace: &MetalTrace) -> Result<Sinogram> {
    check_trace(sino, trace)?;
    let (na, nd) = (sino.n_angles(), sino.n_dets());
    let mut out = sino.data.clone();
    for a in 0..na {
        let base = a * nd;
        let row = &mut out.data_mut()[base..base + nd];
        let mut j = 0;
        while j < nd {
            if !trace.on(base + j) {
                j += 1;
                continue;
            }
            let start = j;
            while j < nd && trace.on(base + j) {
                j += 1;
            }
            if start == 0 || j == nd {
                return Err(Error::Completion(format!(
                    "metal trace touches the detector edge at angle {a}"
                )));
            }
            let (l, r) = (start - 1, j);
            let (vl, vr) = (row[l], row[r]);
            let span = (r - l) as f64;
            for (k, v) in row.iter_mut().enumerate().take(r).skip(start) {
                let t = (k - l) as f64 / span;
                *v = vl + t * (vr - vl);
            }
        }
    }
    Sinogram::new(out)
}
