//! Stage-weighted reconstruction loss, AdamW with decoupled weight decay,
//! warmup + cosine learning-rate schedule, and the epoch loop with early
//! stopping and exact resumption.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::load_json;
use crate::ctsim::dataset::{load_split, read_manifest};
use crate::ctsim::{CtSample, Geometry};
use crate::error::{Error, Result};
use crate::fnt;
use crate::model::{DataShape, FindNet, ModelConfig, SampleVars, StageTrace, StageVars};
use crate::numerics::batchnorm::Mode;
use crate::numerics::tape::Var;
use crate::params::{Forward, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Per-stage weights `ω_s` (length S+1) and the two L1 weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub omega: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl LossWeights {
    /// `ω_s = 0.1` for intermediate stages, `ω_S = 1`, `γ₁ = γ₂ = 5e-4`.
    pub fn for_stages(stages: usize) -> Self {
        let mut omega = vec![0.1; stages + 1];
        omega[stages] = 1.0;
        Self {
            omega,
            gamma1: 5e-4,
            gamma2: 5e-4,
        }
    }

    pub fn stages(&self) -> usize {
        self.omega.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega.is_empty() {
            return Err(Error::config("loss.omega", "needs at least one weight"));
        }
        if let Some(i) = self
            .omega
            .iter()
            .position(|w| !(*w >= 0.0 && w.is_finite()))
        {
            return Err(Error::config(
                format!("loss.omega[{i}]"),
                "must be finite and ≥ 0",
            ));
        }
        if self.omega[self.stages()] <= 0.0 {
            return Err(Error::config(
                "loss.omega",
                "final-stage weight must be > 0",
            ));
        }
        for (key, v) in [("loss.gamma1", self.gamma1), ("loss.gamma2", self.gamma2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and ≥ 0"));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            omega: self.omega.iter().map(|w| w * c).collect(),
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    fn check_stages(&self, stages: usize) -> Result<()> {
        if self.stages() != stages {
            return Err(Error::Dimension(format!(
                "loss has {} stage weights, trace has {} stages",
                self.omega.len(),
                stages
            )));
        }
        Ok(())
    }
}

/// Records the loss on `f`'s tape.
pub fn loss_on_tape(
    f: &mut Forward<'_>,
    vars: &StageVars,
    s: &SampleVars,
    x_gt: Var,
    w: &LossWeights,
) -> Result<Var> {
    w.check_stages(vars.a.len())?;
    let t = &mut f.tape;
    let mut terms = Vec::with_capacity(2 * vars.x.len());
    for (stage, &x) in vars.x.iter().enumerate() {
        let d = t.sub(x_gt, x)?;
        let d = t.mul(s.mask, d)?;
        let sq = t.square(d);
        let sq = t.sum(sq);
        let ab = t.abs(d);
        let ab = t.sum(ab);
        let ab = t.scale(ab, w.gamma1);
        let term = t.add(sq, ab)?;
        terms.push(t.scale(term, w.omega[stage]));
    }
    let residual = t.sub(s.y, x_gt)?;
    for (i, &a) in vars.a.iter().enumerate() {
        let r = t.sub(residual, a)?;
        let r = t.mul(s.mask, r)?;
        let r = t.abs(r);
        let r = t.sum(r);
        terms.push(t.scale(r, w.gamma2 * w.omega[i + 1]));
    }
    let mut total = terms[0];
    for &term in &terms[1..] {
        total = t.add(total, term)?;
    }
    Ok(total)
}

/// The loss evaluated on concrete stage outputs.
pub fn loss_total(trace: &StageTrace, sample: &CtSample, w: &LossWeights) -> Result<f64> {
    w.check_stages(trace.a.len())?;
    if trace.x.len() != trace.a.len() + 1 {
        return Err(Error::Dimension(
            "trace must hold S+1 images and S artifacts".into(),
        ));
    }
    let mask = sample.mask.data();
    let mut total = 0.0;
    for (stage, x) in trace.x.iter().enumerate() {
        sample.x_gt.check_same_shape(x)?;
        let (mut sq, mut ab) = (0.0, 0.0);
        for ((g, v), m) in sample.x_gt.data().iter().zip(x.data()).zip(mask) {
            let d = m * (g - v);
            sq += d * d;
            ab += d.abs();
        }
        total += w.omega[stage] * (sq + w.gamma1 * ab);
    }
    for (i, a) in trace.a.iter().enumerate() {
        sample.y.check_same_shape(a)?;
        let mut ab = 0.0;
        for (((y, g), v), m) in sample
            .y
            .data()
            .iter()
            .zip(sample.x_gt.data())
            .zip(a.data())
            .zip(mask)
        {
            ab += (m * (y - g - v)).abs();
        }
        total += w.gamma2 * w.omega[i + 1] * ab;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before every step.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 10.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("base_lr", self.base_lr > 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("clip_norm", self.clip_norm > 0.0),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::config(format!("optimizer.{key}"), "out of range"));
            }
        }
        Ok(())
    }
}

/// First/second moments for every parameter slot (buffers keep empty moments).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape()))
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Non-finite gradient; nothing changed.
    Rejected,
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`, then any per-parameter clamp.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepOutcome> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Contract(format!(
            "learning rate must be > 0, got {lr}"
        )));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Dimension(format!(
            "{} gradients / {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (e, g) in store.entries().iter().zip(grads) {
        e.value.check_same_shape(g)?;
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::Rejected);
    }
    let c = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let ids: Vec<_> = store.ids().collect();
    for (i, (g, id)) in grads.iter().zip(ids).enumerate() {
        let entry = store.entry_mut(id);
        if entry.kind != ParamKind::Learnable {
            continue;
        }
        let wd = if entry.no_decay { 0.0 } else { c.weight_decay };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((p, g), m), v) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m)
            .zip(v)
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * (mh / (vh.sqrt() + c.eps) + wd * *p);
        }
        if let Some((lo, hi)) = entry.clamp {
            entry
                .value
                .data_mut()
                .iter_mut()
                .for_each(|p| *p = p.clamp(lo, hi));
        }
    }
    state.step = t;
    Ok(StepOutcome::Applied)
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr_fraction: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(
                "schedule.warmup_steps",
                format!("must be below the total step count {}", self.total_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config(
                "schedule.min_lr_fraction",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine annealing to `min_lr_fraction·base_lr`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig, base_lr: f64) -> f64 {
    let floor = cfg.min_lr_fraction;
    if step < cfg.warmup_steps {
        return base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return base_lr * floor;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    base_lr * (floor + (1.0 - floor) * cosine)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPaths {
    pub dataset: PathBuf,
    pub out: PathBuf,
}

impl Default for TrainPaths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/train"),
        }
    }
}

/// Loss weights as configured; `omega` defaults to [`LossWeights::for_stages`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub omega: Option<Vec<f64>>,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::for_stages(1);
        Self {
            omega: None,
            gamma1: w.gamma1,
            gamma2: w.gamma2,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, stages: usize) -> Result<LossWeights> {
        let omega = match &self.omega {
            Some(o) if o.len() != stages + 1 => {
                return Err(Error::config(
                    "loss.omega",
                    format!(
                        "needs {} entries for {stages} stages, got {}",
                        stages + 1,
                        o.len()
                    ),
                ))
            }
            Some(o) => o.clone(),
            None => LossWeights::for_stages(stages).omega,
        };
        let w = LossWeights {
            omega,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSettings {
    pub warmup_steps: u64,
    pub min_lr_fraction: f64,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            min_lr_fraction: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            patience: 10,
            min_delta: 1e-6,
        }
    }
}

/// The training config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub paths: TrainPaths,
    /// When set, must equal the dataset's geometry.
    pub geometry: Option<Geometry>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleSettings,
    pub epochs: usize,
    pub early_stopping: EarlyStopping,
    /// Use only the first `n` training samples.
    pub max_train_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: TrainPaths::default(),
            geometry: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            schedule: ScheduleSettings::default(),
            epochs: 50,
            early_stopping: EarlyStopping::default(),
            max_train_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.loss.weights(self.model.stages)?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.early_stopping.min_delta >= 0.0) {
            return Err(Error::config("early_stopping.min_delta", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.schedule.min_lr_fraction) {
            return Err(Error::config(
                "schedule.min_lr_fraction",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    pub fn schedule_for(&self, n_train: usize) -> Result<ScheduleConfig> {
        let s = ScheduleConfig {
            warmup_steps: self.schedule.warmup_steps,
            total_steps: (self.epochs * n_train) as u64,
            min_lr_fraction: self.schedule.min_lr_fraction,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub applied: bool,
}

/// Everything needed to continue a run bit-exactly after the last finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub epochs_done: usize,
    pub step: u64,
    /// Applied optimizer steps (rejected steps do not advance the moments).
    pub opt_step: u64,
    /// `None` until some epoch produced a finite validation loss.
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<HistoryRow>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub rejected_steps: usize,
}

/// One forward/backward pass; returns the loss and the gradient of every slot.
pub fn loss_and_grads(
    model: &FindNet,
    sample: &CtSample,
    w: &LossWeights,
) -> Result<(f64, Vec<Tensor>, crate::params::BnUpdates)> {
    let mut f = Forward::new(&model.params, Mode::Train);
    let s = SampleVars::bind(&mut f, sample)?;
    let x_gt = f.leaf(sample.x_gt.clone());
    let vars = model.forward_bound(&mut f, &s)?;
    let loss = loss_on_tape(&mut f, &vars, &s, x_gt, w)?;
    let value = f.value(loss).item();
    let grads = f.tape.backward(loss)?;
    let grads = f.param_grads(&grads);
    Ok((value, grads, f.into_bn_updates()))
}

/// Mean inference-mode loss over `samples`.
pub fn mean_loss(model: &FindNet, samples: &[CtSample], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let trace = model.infer(s).map_err(|e| Error::Sample {
            id: s.id.clone(),
            source: Box::new(e),
        })?;
        total += loss_total(&trace, s, w)?;
    }
    Ok(total / samples.len() as f64)
}

/// Where [`fit`] writes per-epoch state, best/last checkpoints and the history.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last")
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join("history.csv")
    }

    pub fn state(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    pub fn has_state(&self) -> bool {
        self.state().exists()
    }
}

/// Optimizer moments and parameter values at full precision (FNT1 is f32).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorState {
    params: Vec<Vec<f64>>,
    best: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SavedState {
    run: ResumeState,
    tensors: TensorState,
}

fn save_state(
    files: &RunFiles,
    params: &ParamStore,
    best: &ParamStore,
    opt: &OptimizerState,
    run: &ResumeState,
) -> Result<()> {
    let flat = |ts: &[Tensor]| ts.iter().map(|t| t.data().to_vec()).collect();
    let saved = SavedState {
        run: run.clone(),
        tensors: TensorState {
            params: params.snapshot(),
            best: best.snapshot(),
            m: flat(&opt.m),
            v: flat(&opt.v),
        },
    };
    let bytes = serde_json::to_vec(&saved)?;
    fnt::write_atomic(&files.state(), &bytes)
}

fn load_state(
    files: &RunFiles,
    params: &mut ParamStore,
    best: &mut ParamStore,
    opt: &mut OptimizerState,
) -> Result<ResumeState> {
    let saved: SavedState = load_json(&files.state())?;
    let t = saved.tensors;
    params.restore(&t.params)?;
    best.restore(&t.best)?;
    for (slots, values) in [(&mut opt.m, t.m), (&mut opt.v, t.v)] {
        if values.len() != slots.len() {
            return Err(Error::config(
                "state",
                "optimizer state does not match the model",
            ));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            *slot = Tensor::new(slot.shape(), v)?;
        }
    }
    opt.step = saved.run.opt_step;
    Ok(saved.run)
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Evaluation(format!("csv flush: {e}")))?;
    fnt::write_atomic(path, &bytes)
}

/// Tracks the best validation loss and the run of non-improving epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopper {
    pub rule: EarlyStopping,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(rule: EarlyStopping) -> Self {
        Self {
            rule,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best - self.rule.min_delta {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return Verdict::Improved;
        }
        self.bad_epochs += 1;
        if self.should_stop() {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn should_stop(&self) -> bool {
        self.best_epoch > 0 && self.bad_epochs >= self.rule.patience
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Per-epoch state, checkpoints and history are written here.
    pub files: Option<RunFiles>,
    /// Continue from the state in `files` when present.
    pub resume: bool,
    /// Return after this many epochs in this call (the schedule still spans
    /// the configured epoch count), leaving a resumable state behind.
    pub epoch_limit: Option<usize>,
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
pub fn fit(
    model: &mut FindNet,
    train: &[CtSample],
    val: &[CtSample],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome> {
    let files = opts.files.as_ref();
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(
            "paths.dataset",
            "training and validation splits must be nonempty",
        ));
    }
    let weights = cfg.loss.weights(model.config.stages)?;
    let schedule = cfg.schedule_for(train.len())?;
    let base_lr = cfg.optimizer.base_lr;
    let mut opt = OptimizerState::new(&model.params, cfg.optimizer);
    let mut best = model.params.clone();
    let mut st = ResumeState {
        epochs_done: 0,
        step: 0,
        opt_step: 0,
        best_val: None,
        best_epoch: 0,
        bad_epochs: 0,
        history: Vec::new(),
        steps: Vec::new(),
    };
    if let Some(files) = files {
        fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
        if opts.resume && files.has_state() {
            st = load_state(files, &mut model.params, &mut best, &mut opt)?;
        }
    }

    let mut stopper = EarlyStopper {
        rule: cfg.early_stopping,
        best: st.best_val.unwrap_or(f64::INFINITY),
        best_epoch: st.best_epoch,
        bad_epochs: st.bad_epochs,
    };
    let mut stopped_early = stopper.should_stop();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut this_call = 0;
    while !stopped_early
        && st.epochs_done < cfg.epochs
        && opts.epoch_limit.is_none_or(|n| this_call < n)
    {
        this_call += 1;
        let epoch = st.epochs_done + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut lr = base_lr;
        for &i in &order {
            let sample = &train[i];
            lr = lr_at(st.step, &schedule, base_lr);
            let (loss, mut grads, bn) =
                loss_and_grads(model, sample, &weights).map_err(|e| Error::Sample {
                    id: sample.id.clone(),
                    source: Box::new(e),
                })?;
            let grad_norm = clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            let applied = loss.is_finite()
                && adamw_step(&mut model.params, &grads, &mut opt, lr)? == StepOutcome::Applied;
            if applied {
                bn.apply(&mut model.params);
            }
            st.step += 1;
            st.steps.push(StepRecord {
                step: st.step,
                loss,
                lr,
                grad_norm,
                applied,
            });
            epoch_loss += loss;
        }

        let val_loss = mean_loss(model, val, &weights)?;
        st.history.push(HistoryRow {
            epoch,
            step: st.step,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            lr,
        });
        let verdict = stopper.observe(epoch, val_loss);
        if verdict == Verdict::Improved {
            best = model.params.clone();
        }
        stopped_early = verdict == Verdict::Stop;
        st.best_val = stopper.best.is_finite().then_some(stopper.best);
        st.best_epoch = stopper.best_epoch;
        st.bad_epochs = stopper.bad_epochs;
        st.epochs_done = epoch;
        st.opt_step = opt.step;

        if let Some(files) = files {
            model.save_checkpoint(&files.last(), st.step)?;
            save_state(files, &model.params, &best, &opt, &st)?;
            write_history_csv(&files.history(), &st.history)?;
        }
    }

    model.params = best;
    if let Some(files) = files {
        model.save_checkpoint(&files.best(), st.step)?;
    }
    Ok(FitOutcome {
        rejected_steps: st.steps.iter().filter(|s| !s.applied).count(),
        history: st.history,
        steps: st.steps,
        best_epoch: st.best_epoch,
        best_val: st.best_val.unwrap_or(f64::INFINITY),
        stopped_early,
    })
}

/// Loads the dataset named by `cfg`, checks its geometry, builds the model and fits it.
pub fn train_from_config(cfg: &TrainConfig, resume: bool) -> Result<(FindNet, FitOutcome)> {
    cfg.validate()?;
    let root = &cfg.paths.dataset;
    let manifest = read_manifest(root)?;
    let data_geometry = manifest.config.sample.geometry;
    if let Some(g) = cfg.geometry {
        if g != data_geometry {
            return Err(Error::config(
                "geometry",
                format!("config {g:?} differs from dataset {data_geometry:?}"),
            ));
        }
    }
    let size = manifest.config.sample.size();
    crate::numerics::fft::check_pow2(size, size)
        .map_err(|e| Error::config("geometry", e.to_string()))?;
    let mut train = load_split(root, "train")?;
    if let Some(n) = cfg.max_train_samples {
        train.truncate(n);
    }
    let val = load_split(root, "val")?;
    let mut model = FindNet::new(cfg.model.clone())?;
    model.data = Some(DataShape {
        size,
        geometry: data_geometry,
    });
    let opts = FitOptions {
        files: Some(RunFiles::new(&cfg.paths.out)),
        resume,
        epoch_limit: None,
    };
    let outcome = fit(&mut model, &train, &val, cfg, &opts)?;
    Ok((model, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn hand_value_is_fourteen() {
        let sample = CtSample {
            id: "p".into(),
            y: scalar(3.0),
            x_gt: scalar(0.0),
            mask: scalar(1.0),
            x0: scalar(2.0),
            size_class: crate::ctsim::SizeClass::Small,
            no_metal: false,
        };
        let trace = StageTrace {
            x: vec![scalar(2.0), scalar(2.0)],
            a: vec![scalar(1.0)],
            m: vec![],
        };
        let w = LossWeights {
            omega: vec![1.0, 1.0],
            gamma1: 1.0,
            gamma2: 1.0,
        };
        assert_eq!(loss_total(&trace, &sample, &w).unwrap(), 14.0);
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = ScheduleConfig {
            warmup_steps: 10,
            total_steps: 110,
            min_lr_fraction: 0.0,
        };
        assert_eq!(lr_at(10, &cfg, 1e-3), 1e-3);
        assert_eq!(lr_at(110, &cfg, 1e-3), 0.0);
        assert_eq!(lr_at(60, &cfg, 1e-3), 5e-4);
        assert_eq!(lr_at(0, &cfg, 1e-3), 1e-4);
        assert_eq!(lr_at(500, &cfg, 1e-3), 0.0);
    }

    #[test]
    fn weights_validation_names_keys() {
        let mut w = LossWeights::for_stages(2);
        w.omega[1] = -1.0;
        match w.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "loss.omega[1]"),
            other => panic!("{other:?}"),
        }
        let bad = ScheduleConfig {
            warmup_steps: 5,
            total_steps: 5,
            min_lr_fraction: 0.0,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn early_stopper_contract() {
        let mut e = EarlyStopper::new(EarlyStopping {
            patience: 1,
            min_delta: 1e-6,
        });
        assert_eq!(e.observe(1, 1.0), Verdict::Improved);
        assert_eq!(e.observe(2, 1.5), Verdict::Stop);
        assert_eq!(e.best_epoch, 1);

        let mut e = EarlyStopper::new(EarlyStopping {
            patience: 2,
            min_delta: 0.1,
        });
        assert_eq!(e.observe(1, 1.0), Verdict::Improved);
        // improvement smaller than min_delta counts as a bad epoch
        assert_eq!(e.observe(2, 0.95), Verdict::Continue);
        assert_eq!(e.observe(3, 0.5), Verdict::Improved);
        assert_eq!(e.observe(4, 0.6), Verdict::Continue);
        assert_eq!(e.observe(5, 0.7), Verdict::Stop);
        assert_eq!((e.best_epoch, e.best), (3, 0.5));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::full(&[4], 10.0), Tensor::full(&[2], -10.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 600f64.sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
