//! The unrolled network: dictionary-kernel artifact synthesis, per-stage
//! M-Net / X-Net proximal-gradient updates with FE-ResNet proximal
//! operators, and the stage schedule of the global-branch ratio α.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctsim::{CtSample, Geometry};
use crate::error::{Error, Result};
use crate::fnt;
use crate::numerics::batchnorm::Mode;
use crate::numerics::tape::Var;
use crate::params::{
    seeded_rng, BatchNorm, BnUpdates, Conv, Forward, ManifestEntry, ParamBuilder, ParamId,
    ParamStore,
};
use crate::spectral::{
    channel_split, merge_branches, softplus_inv, split_branches, BranchNorm, Branches, GffcBlock,
    GffcConv, SpectralConfig,
};
use crate::tensor::Tensor;

pub const ALPHA_MAX: f64 = 0.8;
pub const ETA1_INIT: f64 = 0.1;
pub const ETA2_INIT: f64 = 0.5;

/// Global-branch ratio `(α_in, α_out)` of stage `s ∈ [0, S)`.
///
/// Zero at the first stage, then `min(0.8, 0.8·s/⌈0.6·S⌉)` rounded to a
/// multiple of 0.1, so the ratio saturates at 0.8 after the first 60% of
/// the stages.
pub fn alpha_schedule(s: usize, stages: usize) -> (f64, f64) {
    assert!(s < stages, "stage {s} out of range for {stages} stages");
    if s == 0 {
        return (0.0, 0.0);
    }
    let ramp = (0.6 * stages as f64).ceil().max(1.0);
    let a = (ALPHA_MAX * s as f64 / ramp).min(ALPHA_MAX);
    let a = (a * 10.0).round() / 10.0;
    (a, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MInit {
    /// A small FE-ResNet on `Kᵀ(I ⊙ (Y − X⁽⁰⁾))`.
    Network,
    /// `M⁽⁰⁾ = 0`.
    Zeros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stages: usize,
    pub n_kernels: usize,
    pub kernel_size: usize,
    pub blocks: usize,
    pub width: usize,
    pub spectral: SpectralConfig,
    /// Force α ≡ 0 in every stage (plain-convolution ResBlocks).
    pub alpha_zero: bool,
    pub m_init: MInit,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: 10,
            n_kernels: 8,
            kernel_size: 9,
            blocks: 2,
            width: 16,
            spectral: SpectralConfig::default(),
            alpha_zero: false,
            m_init: MInit::Network,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("stages", self.stages >= 1, "must be at least 1"),
            ("n_kernels", self.n_kernels >= 1, "must be at least 1"),
            ("kernel_size", self.kernel_size % 2 == 1, "must be odd"),
            ("blocks", self.blocks >= 1, "must be at least 1"),
            ("width", self.width >= 2, "must be at least 2"),
        ];
        for (key, ok, why) in checks {
            if !ok {
                return Err(Error::config(format!("model.{key}"), why));
            }
        }
        Ok(())
    }

    pub fn alphas(&self) -> Vec<f64> {
        (0..self.stages)
            .map(|s| {
                if self.alpha_zero {
                    0.0
                } else {
                    alpha_schedule(s, self.stages).0
                }
            })
            .collect()
    }
}

/// `x ↦ ReLU(BN(gffc(x)))` followed by `BN(gffc(·))` and a skip connection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeResBlock {
    pub first: GffcBlock,
    pub second: GffcConv,
    pub norm: BranchNorm,
}

impl FeResBlock {
    fn new(
        b: &mut ParamBuilder<'_>,
        width: usize,
        alpha: f64,
        cfg: SpectralConfig,
    ) -> Result<Self> {
        let first = GffcBlock::new(&mut b.sub("first"), width, width, alpha, alpha, cfg)?;
        let second = GffcConv::new(&mut b.sub("second"), width, width, alpha, alpha, cfg)?;
        let norm = BranchNorm::new(b, "bn", second.local_out, second.global_out);
        Ok(Self {
            first,
            second,
            norm,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Branches) -> Result<Branches> {
        let h = self.first.forward(f, x)?;
        let h = self.second.forward(f, h)?;
        let h = self.norm.forward(f, h)?;
        let local = f.tape.add(x.local, h.local)?;
        let global = match (x.global, h.global) {
            (Some(a), Some(b)) => Some(f.tape.add(a, b)?),
            _ => None,
        };
        Ok(Branches { local, global })
    }
}

/// Frequency-enhanced residual network used as a learned proximal operator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeResNet {
    pub lift: Conv,
    pub blocks: Vec<FeResBlock>,
    pub project: Conv,
    pub local: usize,
    pub global: usize,
}

impl FeResNet {
    /// The projection starts at zero, so a fresh network is the identity.
    pub fn new(
        b: &mut ParamBuilder<'_>,
        channels: usize,
        width: usize,
        blocks: usize,
        alpha: f64,
        cfg: SpectralConfig,
    ) -> Result<Self> {
        let lift = Conv::new(b, "lift", channels, width, 3);
        let blocks = (1..=blocks)
            .map(|i| FeResBlock::new(&mut b.sub(&format!("block{i}")), width, alpha, cfg))
            .collect::<Result<Vec<_>>>()?;
        let project = Conv::zeros(b, "project", width, channels, 3);
        let (local, global) = channel_split(alpha, width);
        Ok(Self {
            lift,
            blocks,
            project,
            local,
            global,
        })
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.lift.forward(f, x)?;
        let mut br = split_branches(f, h, self.local, self.global)?;
        for block in &self.blocks {
            br = block.forward(f, br)?;
        }
        let h = merge_branches(f, br)?;
        let r = self.project.forward(f, h)?;
        f.tape.add(x, r)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    /// η₁ = softplus(raw).
    pub eta1: ParamId,
    /// η₂ = sigmoid(raw).
    pub eta2: ParamId,
    pub alpha: f64,
    pub mnet: FeResNet,
    pub xnet: FeResNet,
}

/// Stage outputs kept on the tape for the loss.
#[derive(Clone, Debug)]
pub struct StageVars {
    /// X⁽ˢ⁾ for s = 0..=S.
    pub x: Vec<Var>,
    /// A⁽ˢ⁾ for s = 1..=S (index s−1).
    pub a: Vec<Var>,
    /// M⁽ˢ⁾ for s = 0..=S.
    pub m: Vec<Var>,
}

/// Concrete stage outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTrace {
    pub x: Vec<Tensor>,
    pub a: Vec<Tensor>,
    pub m: Vec<Tensor>,
}

impl StageTrace {
    pub fn stages(&self) -> usize {
        self.a.len()
    }

    pub fn final_x(&self) -> &Tensor {
        self.x.last().expect("trace holds X⁽⁰⁾")
    }
}

/// Constant inputs of one forward pass, bound as tape leaves.
#[derive(Clone, Copy, Debug)]
pub struct SampleVars {
    pub y: Var,
    pub mask: Var,
    pub x0: Var,
    pub ones: Var,
}

impl SampleVars {
    pub fn bind(f: &mut Forward<'_>, sample: &CtSample) -> Result<Self> {
        sample.check()?;
        Ok(Self {
            y: f.leaf(sample.y.clone()),
            mask: f.leaf(sample.mask.clone()),
            x0: f.leaf(sample.x0.clone()),
            ones: f.leaf(Tensor::ones(sample.y.shape())),
        })
    }
}

/// Layout of every learnable piece of the network; values live in a [`ParamStore`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FindNetLayout {
    pub kernels: ParamId,
    pub m_init: Option<FeResNet>,
    pub stages: Vec<Stage>,
}

pub struct FindNet {
    pub config: ModelConfig,
    pub layout: FindNetLayout,
    pub params: ParamStore,
    /// The data the weights were fitted to, once known.
    pub data: Option<DataShape>,
}

/// Image size and acquisition geometry of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataShape {
    pub size: usize,
    pub geometry: Geometry,
}

impl FindNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(config.init_seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let (n, k) = (config.n_kernels, config.kernel_size);

        let mut kernels = b.normal(&[n, 1, k, k], 1.0);
        for kernel in kernels.data_mut().chunks_exact_mut(k * k) {
            let norm = kernel.iter().map(|v| v * v).sum::<f64>().sqrt();
            kernel.iter_mut().for_each(|v| *v /= norm);
        }
        let kernels = b.learnable("kernels", kernels);

        let no_spectral = SpectralConfig {
            gaussian: false,
            gaussian_in_lfu: false,
        };
        let m_init = match config.m_init {
            MInit::Network => Some(FeResNet::new(
                &mut b.sub("m_init"),
                n,
                config.width,
                1,
                0.0,
                no_spectral,
            )?),
            MInit::Zeros => None,
        };

        let alphas = config.alphas();
        let mut stages = Vec::with_capacity(config.stages);
        for (i, &alpha) in alphas.iter().enumerate() {
            let mut sb = b.sub(&format!("stage{}", i + 1));
            let eta1 = sb.learnable("eta1", Tensor::scalar(softplus_inv(ETA1_INIT)));
            let eta2 = sb.learnable("eta2", Tensor::scalar((ETA2_INIT / (1.0 - ETA2_INIT)).ln()));
            for id in [eta1, eta2] {
                sb.store_mut().entry_mut(id).no_decay = true;
            }
            let mnet = FeResNet::new(
                &mut sb.sub("mnet"),
                n,
                config.width,
                config.blocks,
                alpha,
                config.spectral,
            )?;
            let xnet = FeResNet::new(
                &mut sb.sub("xnet"),
                1,
                config.width,
                config.blocks,
                alpha,
                config.spectral,
            )?;
            stages.push(Stage {
                eta1,
                eta2,
                alpha,
                mnet,
                xnet,
            });
        }
        Ok(Self {
            config,
            layout: FindNetLayout {
                kernels,
                m_init,
                stages,
            },
            params,
            data: None,
        })
    }

    /// `A = Σₙ Kₙ ⊗ Mₙ` with same padding.
    pub fn artifact_synthesis(&self, f: &mut Forward<'_>, m: Var) -> Result<Var> {
        let k = self.dictionary(f)?;
        f.tape.conv2d(m, k, self.config.kernel_size / 2)
    }

    /// Kernels as a `[1, N, k, k]` convolution (same memory as `[N, 1, k, k]`).
    fn dictionary(&self, f: &mut Forward<'_>) -> Result<Var> {
        let k = f.param(self.layout.kernels);
        let (n, ks) = (self.config.n_kernels, self.config.kernel_size);
        f.tape.reshape(k, &[1, n, ks, ks])
    }

    /// `Kᵀ(I ⊙ r)` for a one-channel residual `r`.
    fn adjoint_residual(&self, f: &mut Forward<'_>, s: &SampleVars, r: Var) -> Result<Var> {
        let k = self.dictionary(f)?;
        let masked = f.tape.mul(s.mask, r)?;
        f.tape
            .conv2d_transpose(masked, k, self.config.kernel_size / 2)
    }

    /// `G = Kᵀ(I ⊙ (A_prev + X_prev − Y))` with `A_prev` synthesized from `M_prev`.
    pub fn code_gradient(
        &self,
        f: &mut Forward<'_>,
        s: &SampleVars,
        m_prev: Var,
        x_prev: Var,
    ) -> Result<Var> {
        let a_prev = self.artifact_synthesis(f, m_prev)?;
        let sum = f.tape.add(a_prev, x_prev)?;
        let r = f.tape.sub(sum, s.y)?;
        self.adjoint_residual(f, s, r)
    }

    /// `M_next = mnet(M_prev − η₁·G)` with `G` from [`FindNet::code_gradient`].
    pub fn mnet_update(
        &self,
        f: &mut Forward<'_>,
        stage: &Stage,
        s: &SampleVars,
        m_prev: Var,
        x_prev: Var,
    ) -> Result<Var> {
        let g = self.code_gradient(f, s, m_prev, x_prev)?;
        let raw = f.param(stage.eta1);
        let eta1 = f.tape.softplus(raw);
        let step = f.tape.scalar_mul(g, eta1)?;
        let z = f.tape.sub(m_prev, step)?;
        stage.mnet.forward(f, z)
    }

    /// `Z = (1 − η₂·I) ⊙ X_prev + η₂·I ⊙ (Y − A_next)` and `X_next = xnet(Z)`.
    pub fn xnet_update(
        &self,
        f: &mut Forward<'_>,
        stage: &Stage,
        s: &SampleVars,
        x_prev: Var,
        a_next: Var,
    ) -> Result<Var> {
        let raw = f.param(stage.eta2);
        let eta2 = f.tape.sigmoid(raw);
        let ei = f.tape.scalar_mul(s.mask, eta2)?;
        let keep = f.tape.sub(s.ones, ei)?;
        let kept = f.tape.mul(keep, x_prev)?;
        let data = f.tape.sub(s.y, a_next)?;
        let pulled = f.tape.mul(ei, data)?;
        let z = f.tape.add(kept, pulled)?;
        stage.xnet.forward(f, z)
    }

    /// Initial artifact code `M⁽⁰⁾`.
    pub fn initial_code(&self, f: &mut Forward<'_>, s: &SampleVars) -> Result<Var> {
        match &self.layout.m_init {
            Some(net) => {
                let r = f.tape.sub(s.y, s.x0)?;
                let g = self.adjoint_residual(f, s, r)?;
                net.forward(f, g)
            }
            None => {
                let (_, h, w) = f.value(s.y).chw()?;
                Ok(f.leaf(Tensor::zeros(&[self.config.n_kernels, h, w])))
            }
        }
    }

    /// Records the full unrolled pass on `f`'s tape.
    pub fn forward_on(&self, f: &mut Forward<'_>, sample: &CtSample) -> Result<StageVars> {
        let (_, h, w) = sample.y.chw()?;
        crate::numerics::fft::check_pow2(h, w)?;
        let s = SampleVars::bind(f, sample)?;
        self.forward_bound(f, &s)
    }

    /// Like [`FindNet::forward_on`] with the sample inputs already on the tape.
    pub fn forward_bound(&self, f: &mut Forward<'_>, s: &SampleVars) -> Result<StageVars> {
        let (_, h, w) = f.value(s.y).chw()?;
        crate::numerics::fft::check_pow2(h, w)?;
        let mut x = s.x0;
        let mut m = self.initial_code(f, s)?;
        let mut vars = StageVars {
            x: vec![x],
            a: Vec::with_capacity(self.layout.stages.len()),
            m: vec![m],
        };
        for stage in &self.layout.stages {
            m = self.mnet_update(f, stage, s, m, x)?;
            let a = self.artifact_synthesis(f, m)?;
            x = self.xnet_update(f, stage, s, x, a)?;
            vars.m.push(m);
            vars.a.push(a);
            vars.x.push(x);
        }
        Ok(vars)
    }

    /// Runs the network and returns every stage's outputs. Train mode uses
    /// batch statistics and returns the running-statistics updates.
    pub fn forward(&self, sample: &CtSample, mode: Mode) -> Result<(StageTrace, BnUpdates)> {
        let mut f = Forward::new(&self.params, mode);
        let vars = self.forward_on(&mut f, sample)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| f.value(v).clone()).collect();
        let trace = StageTrace {
            x: grab(&vars.x),
            a: grab(&vars.a),
            m: grab(&vars.m),
        };
        Ok((trace, f.into_bn_updates()))
    }

    pub fn infer(&self, sample: &CtSample) -> Result<StageTrace> {
        Ok(self.forward(sample, Mode::Infer)?.0)
    }

    pub fn eta(&self, stage: usize) -> (f64, f64) {
        let st = &self.layout.stages[stage];
        let r1 = self.params.get(st.eta1).item();
        let r2 = self.params.get(st.eta2).item();
        let eta1 = if r1 > 30.0 { r1 } else { r1.exp().ln_1p() };
        (eta1, 1.0 / (1.0 + (-r2).exp()))
    }

    /// Overwrites the raw step-size parameters so that `η₁`, `η₂` take the given
    /// values (`η₁ = 0` and `η₂ = 1` are reached through saturation).
    pub fn set_eta(&mut self, stage: usize, eta1: f64, eta2: f64) {
        let st = &self.layout.stages[stage];
        let raw1 = if eta1 <= 0.0 {
            -1e3
        } else {
            softplus_inv(eta1)
        };
        let raw2 = if eta2 >= 1.0 {
            1e3
        } else if eta2 <= 0.0 {
            -1e3
        } else {
            (eta2 / (1.0 - eta2)).ln()
        };
        let (e1, e2) = (st.eta1, st.eta2);
        self.params.get_mut(e1).data_mut()[0] = raw1;
        self.params.get_mut(e2).data_mut()[0] = raw2;
    }

    /// Batch-norm layers, for callers that need to inspect running statistics.
    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        fn from_net<'a>(net: &'a FeResNet, out: &mut Vec<&'a BatchNorm>) {
            for b in &net.blocks {
                out.push(&b.first.norm.local);
                out.extend(b.first.norm.global.iter());
                out.push(&b.norm.local);
                out.extend(b.norm.global.iter());
            }
        }
        let mut out = Vec::new();
        if let Some(n) = &self.layout.m_init {
            from_net(n, &mut out);
        }
        for s in &self.layout.stages {
            from_net(&s.mnet, &mut out);
            from_net(&s.xnet, &mut out);
        }
        out
    }

    pub fn save_checkpoint(&self, stem: &Path, step: u64) -> Result<()> {
        let manifest = CheckpointManifest {
            model: self.config.clone(),
            alphas: self.config.alphas(),
            step,
            params: self.params.manifest(),
            data: self.data,
        };
        self.params.save_fnt(&stem.with_extension("fnt"))?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        fnt::write_atomic(&stem.with_extension("json"), &json)
    }

    /// Rebuilds the network described by a checkpoint manifest and loads its values.
    pub fn load_checkpoint(stem: &Path) -> Result<(Self, CheckpointManifest)> {
        let mpath = stem.with_extension("json");
        let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
        let mut net = Self::new(manifest.model.clone())?;
        if net.params.manifest() != manifest.params {
            return Err(Error::config(
                "checkpoint",
                "parameter manifest does not match the model configuration",
            ));
        }
        net.params.load_fnt_file(&stem.with_extension("fnt"))?;
        net.data = manifest.data;
        Ok((net, manifest))
    }

    /// Errors (key `geometry`) when the network was fitted to differently shaped data.
    pub fn check_data(&self, data: &DataShape) -> Result<()> {
        match &self.data {
            Some(own) if own != data => Err(Error::config(
                "geometry",
                format!("checkpoint was trained on {own:?}, data is {data:?}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub alphas: Vec<f64>,
    pub step: u64,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub data: Option<DataShape>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_schedule_endpoints_and_midpoint() {
        assert_eq!(alpha_schedule(0, 10), (0.0, 0.0));
        assert_eq!(alpha_schedule(0, 1), (0.0, 0.0));
        assert_eq!(alpha_schedule(9, 10), (0.8, 0.8));
        assert_eq!(alpha_schedule(3, 10), (0.4, 0.4));
        assert_eq!(alpha_schedule(6, 10), (0.8, 0.8));
        let s3: Vec<f64> = (0..3).map(|s| alpha_schedule(s, 3).0).collect();
        assert_eq!(s3, vec![0.0, 0.4, 0.8]);
    }

    #[test]
    fn alpha_schedule_is_monotone_and_bounded() {
        for stages in 1..=24 {
            let mut prev = 0.0;
            for s in 0..stages {
                let (a, b) = alpha_schedule(s, stages);
                assert_eq!(a, b);
                assert!(a >= prev && a <= ALPHA_MAX);
                assert!(((a * 10.0).round() - a * 10.0).abs() < 1e-12);
                prev = a;
            }
        }
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = ModelConfig {
            kernel_size: 4,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.kernel_size"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kernels_are_unit_norm() {
        let net = FindNet::new(ModelConfig {
            stages: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let k = net.params.get(net.layout.kernels);
        assert_eq!(k.shape(), &[8, 1, 9, 9]);
        for kernel in k.data().chunks_exact(81) {
            let n: f64 = kernel.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let (e1, e2) = net.eta(0);
        assert!((e1 - ETA1_INIT).abs() < 1e-12 && (e2 - ETA2_INIT).abs() < 1e-12);
    }

    #[test]
    fn parameter_names_follow_stage_layout() {
        let net = FindNet::new(ModelConfig {
            stages: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let names: Vec<String> = net.params.manifest().into_iter().map(|e| e.name).collect();
        assert!(names.contains(&"stage3.mnet.block1.first.spectral.fu.sigma".to_string()));
        assert!(names.contains(&"stage2.xnet.block2.second.spectral.lfu.center".to_string()));
        // first stage has α = 0: no spectral path
        assert!(!names
            .iter()
            .any(|n| n.starts_with("stage1.") && n.contains("spectral")));
    }
}
