//! Frequency-domain building blocks: the trainable Gaussian spectral gain,
//! Fourier Unit (FU), Local Fourier Unit (LFU) and the two-branch GFFC
//! convolution that mixes a spatial local branch with a spectral global one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::fft::check_pow2;
use crate::numerics::tape::{gain_value, Var};
use crate::params::{BatchNorm, Conv, Forward, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// ε in the gain's denominator.
pub const GAIN_EPS: f64 = 1e-6;
pub const SIGMA_INIT: f64 = 1.0;
pub const CENTER_INIT: f64 = 0.0;

/// Normalized radial frequency distance of every real-FFT bin.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub distance: Tensor,
}

/// `D(u, v) = sqrt((f_u² + f_v²)/2)` with `f_u = min(u, H−u)/(H/2)` and
/// `f_v = v/(W/2)`, over `u ∈ [0, H)`, `v ∈ [0, W/2]`.
pub fn frequency_grid(h: usize, w: usize) -> Result<FrequencyGrid> {
    check_pow2(h, w)?;
    if h < 2 {
        return Err(Error::UnsupportedSize(format!(
            "frequency grid needs H, W >= 2, got {h}x{w}"
        )));
    }
    let wf = w / 2 + 1;
    let (hh, hw) = ((h / 2) as f64, (w / 2) as f64);
    let distance = Tensor::from_fn(&[h, wf], |i| {
        let (u, v) = (i / wf, i % wf);
        let fu = u.min(h - u) as f64 / hh;
        let fv = v as f64 / hw;
        ((fu * fu + fv * fv) / 2.0).sqrt()
    });
    Ok(FrequencyGrid { distance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFilterParams {
    pub sigma: f64,
    pub center: f64,
    pub epsilon: f64,
}

impl Default for GaussianFilterParams {
    fn default() -> Self {
        Self {
            sigma: SIGMA_INIT,
            center: CENTER_INIT,
            epsilon: GAIN_EPS,
        }
    }
}

/// `G(u, v) = exp(−((D² − c²)/(D·σ + ε))²)` on every bin of `grid`.
///
/// At `D = 0` with `c ≠ 0` the denominator is exactly `ε` and the gain is
/// (numerically) zero; that is the closed form's literal value.
pub fn gaussian_gain(grid: &FrequencyGrid, params: &GaussianFilterParams) -> Result<Tensor> {
    if params.epsilon <= 0.0 {
        return Err(Error::config("epsilon", "must be positive"));
    }
    Ok(grid
        .distance
        .map(|d| gain_value(d, params.sigma, params.center, params.epsilon)))
}

/// Inverse of softplus, for initializing reparameterized positives.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Split `c` channels into `(local, global)` by `round(α·c)`, keeping at least
/// one local channel whenever `α < 1`.
pub fn channel_split(alpha: f64, c: usize) -> (usize, usize) {
    let mut global = (alpha * c as f64).round() as usize;
    global = global.min(c);
    if alpha < 1.0 && global == c && c > 0 {
        global = c - 1;
    }
    (c - global, global)
}

/// Switches for the Gaussian gain in the spectral path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    /// Apply the trainable Gaussian gain before the spectral 1×1 conv.
    pub gaussian: bool,
    /// Also apply it inside the LFU (only when `gaussian` is on).
    pub gaussian_in_lfu: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            gaussian: true,
            gaussian_in_lfu: true,
        }
    }
}

/// Learnable `(σ, c)`; σ is stored through softplus, c is clamped to `[0, 1]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianFilter {
    pub sigma_raw: ParamId,
    pub center: ParamId,
}

impl GaussianFilter {
    pub fn new(b: &mut ParamBuilder<'_>) -> Self {
        let sigma_raw = b.learnable("sigma", Tensor::scalar(softplus_inv(SIGMA_INIT)));
        let center = b.learnable("center", Tensor::scalar(CENTER_INIT));
        let store = b.store_mut();
        store.entry_mut(center).clamp = Some((0.0, 1.0));
        store.entry_mut(sigma_raw).no_decay = true;
        store.entry_mut(center).no_decay = true;
        Self { sigma_raw, center }
    }

    pub fn gain(&self, f: &mut Forward<'_>, h: usize, w: usize) -> Result<Var> {
        let grid = frequency_grid(h, w)?;
        let raw = f.param(self.sigma_raw);
        let sigma = f.tape.softplus(raw);
        let center = f.param(self.center);
        f.tape
            .gaussian_gain(&grid.distance, sigma, center, GAIN_EPS)
    }

    /// Current `(σ, c, ε)` in natural units.
    pub fn values(&self, store: &crate::params::ParamStore) -> GaussianFilterParams {
        let raw = store.get(self.sigma_raw).item();
        GaussianFilterParams {
            sigma: if raw > 30.0 { raw } else { raw.exp().ln_1p() },
            center: store.get(self.center).item(),
            epsilon: GAIN_EPS,
        }
    }
}

/// FFT → optional Gaussian gain → 1×1 conv over stacked (re, im) → BN → ReLU → IFFT.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub filter: GaussianFilter,
    pub use_gaussian: bool,
}

impl FourierUnit {
    /// Spectral conv maps `2·c_in` to `2·c_out` stacked channels.
    pub fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, use_gaussian: bool) -> Self {
        let conv = Conv::new(b, "conv", 2 * c_in, 2 * c_out, 1);
        let bn = BatchNorm::new(b, "bn", 2 * c_out);
        let filter = GaussianFilter::new(b);
        Self {
            conv,
            bn,
            filter,
            use_gaussian,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let (_, h, w) = f.value(x).chw()?;
        let mut spec = f.tape.rfft2(x)?;
        if self.use_gaussian {
            let gain = self.filter.gain(f, h, w)?;
            spec = f.tape.mul_plane(spec, gain)?;
        }
        let y = self.conv.forward(f, spec)?;
        let y = self.bn.forward(f, y)?;
        let y = f.tape.relu(y);
        f.tape.irfft2(y)
    }
}

/// Quadrant split to channels, FU on the half-size grid, then 2×2 tiling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalFourierUnit {
    pub fu: FourierUnit,
}

impl LocalFourierUnit {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize, use_gaussian: bool) -> Self {
        Self {
            fu: FourierUnit::new(b, 4 * channels, channels, use_gaussian),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let q = f.tape.quad_stack(x)?;
        let y = self.fu.forward(f, q)?;
        f.tape.tile2(y)
    }
}

/// Global-path transform: 1×1 channel adaptation `r`, then `r + FU(r) + LFU(r)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralTransform {
    pub reduce: Conv,
    pub fu: FourierUnit,
    pub lfu: LocalFourierUnit,
}

impl SpectralTransform {
    pub fn new(b: &mut ParamBuilder<'_>, c_in: usize, c_out: usize, cfg: SpectralConfig) -> Self {
        let reduce = Conv::new(b, "reduce", c_in, c_out, 1);
        let fu = FourierUnit::new(&mut b.sub("fu"), c_out, c_out, cfg.gaussian);
        let lfu = LocalFourierUnit::new(
            &mut b.sub("lfu"),
            c_out,
            cfg.gaussian && cfg.gaussian_in_lfu,
        );
        Self { reduce, fu, lfu }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let r = self.reduce.forward(f, x)?;
        let a = self.fu.forward(f, r)?;
        let l = self.lfu.forward(f, r)?;
        let s = f.tape.add(r, a)?;
        f.tape.add(s, l)
    }
}

/// A feature map split into local and (possibly empty) global channels.
#[derive(Clone, Copy, Debug)]
pub struct Branches {
    pub local: Var,
    pub global: Option<Var>,
}

/// The raw two-branch convolution (no normalization or activation):
/// `local' = conv_ll(local) + conv_gl(global)`,
/// `global' = conv_lg(local) + spectral(global)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GffcConv {
    pub local_in: usize,
    pub global_in: usize,
    pub local_out: usize,
    pub global_out: usize,
    pub ll: Conv,
    pub lg: Option<Conv>,
    pub gl: Option<Conv>,
    pub gg: Option<SpectralTransform>,
}

impl GffcConv {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        channels_in: usize,
        channels_out: usize,
        alpha_in: f64,
        alpha_out: f64,
        cfg: SpectralConfig,
    ) -> Result<Self> {
        for (key, a) in [("alpha_in", alpha_in), ("alpha_out", alpha_out)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config(key, format!("{a} is outside [0, 1]")));
            }
        }
        let (local_in, global_in) = channel_split(alpha_in, channels_in);
        let (local_out, global_out) = channel_split(alpha_out, channels_out);
        if local_in == 0 || local_out == 0 {
            return Err(Error::config(
                "alpha",
                "the local branch needs at least one channel",
            ));
        }
        let ll = Conv::new(b, "ll", local_in, local_out, 3);
        let lg = (global_out > 0).then(|| Conv::new(b, "lg", local_in, global_out, 3));
        let gl = (global_in > 0).then(|| Conv::new(b, "gl", global_in, local_out, 3));
        let gg = (global_in > 0 && global_out > 0)
            .then(|| SpectralTransform::new(&mut b.sub("spectral"), global_in, global_out, cfg));
        Ok(Self {
            local_in,
            global_in,
            local_out,
            global_out,
            ll,
            lg,
            gl,
            gg,
        })
    }

    fn check(&self, f: &Forward<'_>, x: Branches) -> Result<()> {
        let lc = f.value(x.local).shape()[0];
        let gc = x.global.map_or(0, |g| f.value(g).shape()[0]);
        if lc != self.local_in || gc != self.global_in {
            return Err(Error::config(
                "gffc",
                format!(
                    "branch channels ({lc}, {gc}) do not match split ({}, {})",
                    self.local_in, self.global_in
                ),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Branches) -> Result<Branches> {
        self.check(f, x)?;
        let mut local = self.ll.forward(f, x.local)?;
        if let (Some(gl), Some(g)) = (&self.gl, x.global) {
            let t = gl.forward(f, g)?;
            local = f.tape.add(local, t)?;
        }
        let global = match &self.lg {
            None => None,
            Some(lg) => {
                let mut out = lg.forward(f, x.local)?;
                if let (Some(gg), Some(g)) = (&self.gg, x.global) {
                    let t = gg.forward(f, g)?;
                    out = f.tape.add(out, t)?;
                }
                Some(out)
            }
        };
        Ok(Branches { local, global })
    }
}

/// Per-branch batch norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BranchNorm {
    pub local: BatchNorm,
    pub global: Option<BatchNorm>,
}

impl BranchNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, local: usize, global: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            local: BatchNorm::new(&mut b, "local", local),
            global: (global > 0).then(|| BatchNorm::new(&mut b, "global", global)),
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Branches) -> Result<Branches> {
        let local = self.local.forward(f, x.local)?;
        let global = match (&self.global, x.global) {
            (Some(bn), Some(g)) => Some(bn.forward(f, g)?),
            (None, None) => None,
            _ => return Err(Error::config("gffc", "branch norm / branch mismatch")),
        };
        Ok(Branches { local, global })
    }
}

pub fn relu_branches(f: &mut Forward<'_>, x: Branches) -> Branches {
    Branches {
        local: f.tape.relu(x.local),
        global: x.global.map(|g| f.tape.relu(g)),
    }
}

/// GFFC block: two-branch convolution, per-branch BN, ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GffcBlock {
    pub conv: GffcConv,
    pub norm: BranchNorm,
}

impl GffcBlock {
    pub fn new(
        b: &mut ParamBuilder<'_>,
        channels_in: usize,
        channels_out: usize,
        alpha_in: f64,
        alpha_out: f64,
        cfg: SpectralConfig,
    ) -> Result<Self> {
        let conv = GffcConv::new(b, channels_in, channels_out, alpha_in, alpha_out, cfg)?;
        let norm = BranchNorm::new(b, "bn", conv.local_out, conv.global_out);
        Ok(Self { conv, norm })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Branches) -> Result<Branches> {
        let y = self.conv.forward(f, x)?;
        let y = self.norm.forward(f, y)?;
        Ok(relu_branches(f, y))
    }
}

/// Splits a `[C, H, W]` node into branches by the given channel counts.
pub fn split_branches(
    f: &mut Forward<'_>,
    x: Var,
    local: usize,
    global: usize,
) -> Result<Branches> {
    let l = f.tape.slice_channels(x, 0, local)?;
    let g = if global > 0 {
        Some(f.tape.slice_channels(x, local, global)?)
    } else {
        None
    };
    Ok(Branches {
        local: l,
        global: g,
    })
}

pub fn merge_branches(f: &mut Forward<'_>, x: Branches) -> Result<Var> {
    match x.global {
        Some(g) => f.tape.concat(&[x.local, g]),
        None => Ok(x.local),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::batchnorm::Mode;
    use crate::params::{seeded_rng, ParamStore};

    #[test]
    fn grid_reference_values() {
        let g = frequency_grid(8, 8).unwrap();
        let d = |u: usize, v: usize| g.distance.data()[u * 5 + v];
        assert_eq!(g.distance.shape(), &[8, 5]);
        assert_eq!(d(0, 0), 0.0);
        assert_eq!(d(4, 4), 1.0);
        assert!((d(0, 2) - (0.25f64 / 2.0).sqrt()).abs() < 1e-15);
        // min(u, H−u) folds negative frequencies
        assert_eq!(d(1, 3), d(7, 3));
        assert!(g.distance.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(frequency_grid(6, 8).is_err());
    }

    #[test]
    fn gain_reference_values() {
        let grid = FrequencyGrid {
            distance: Tensor::new(&[3], vec![0.5, 0.3, 0.0]).unwrap(),
        };
        let p = GaussianFilterParams {
            sigma: 1.0,
            center: 0.0,
            epsilon: 1e-6,
        };
        let g = gaussian_gain(&grid, &p).unwrap();
        let expect = (-(0.25f64 / 0.500001).powi(2)).exp();
        assert!((g.data()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.77880).abs() < 1e-5);
        assert_eq!(g.data()[2], 1.0);

        let at_center = GaussianFilterParams { center: 0.3, ..p };
        assert_eq!(gaussian_gain(&grid, &at_center).unwrap().data()[1], 1.0);
        // DC bin with c ≠ 0: denominator is ε
        assert!(gaussian_gain(&grid, &at_center).unwrap().data()[2] < 1e-12);

        let wide = GaussianFilterParams { sigma: 1e6, ..p };
        let g = gaussian_gain(&frequency_grid(8, 8).unwrap(), &wide).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let bad = GaussianFilterParams { epsilon: 0.0, ..p };
        assert!(gaussian_gain(&grid, &bad).is_err());
    }

    #[test]
    fn channel_split_rules() {
        assert_eq!(channel_split(0.0, 16), (16, 0));
        assert_eq!(channel_split(0.5, 16), (8, 8));
        assert_eq!(channel_split(0.8, 16), (3, 13));
        assert_eq!(channel_split(0.9, 2), (1, 1));
        assert_eq!(channel_split(1.0, 4), (0, 4));
    }

    #[test]
    fn zero_alpha_has_no_global_parameters() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let block = GffcBlock::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            4,
            4,
            0.0,
            0.0,
            SpectralConfig::default(),
        )
        .unwrap();
        assert!(block.conv.lg.is_none() && block.conv.gl.is_none() && block.conv.gg.is_none());
        assert!(block.norm.global.is_none());
        assert!(store
            .manifest()
            .iter()
            .all(|e| !e.name.contains("spectral")));
    }

    #[test]
    fn split_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(1);
        let conv = GffcConv::new(
            &mut ParamBuilder::new(&mut store, &mut rng),
            4,
            4,
            0.5,
            0.5,
            SpectralConfig::default(),
        )
        .unwrap();
        let mut f = Forward::new(&store, Mode::Infer);
        let l = f.leaf(Tensor::zeros(&[3, 8, 8]));
        let g = f.leaf(Tensor::zeros(&[1, 8, 8]));
        let r = conv.forward(
            &mut f,
            Branches {
                local: l,
                global: Some(g),
            },
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }
}
