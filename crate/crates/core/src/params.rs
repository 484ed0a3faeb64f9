//! Named parameter storage, layer building blocks, and the per-pass binding
//! of parameters onto a [`Tape`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnt;
use crate::numerics::batchnorm::{update_running, Mode};
use crate::numerics::gradcheck::probe_error;
use crate::numerics::tape::{BatchStats, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trained by the optimizer.
    Learnable,
    /// State carried along but not trained (running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    /// Optional projection interval applied after every optimizer step.
    pub clamp: Option<(f64, f64)>,
    /// Excluded from decoupled weight decay.
    pub no_decay: bool,
}

/// Ordered collection of named tensors; the order is the manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// One line of a checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            kind,
            value,
            clamp: None,
            no_decay: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                kind: e.kind,
            })
            .collect()
    }

    /// All tensors as concatenated FNT1 records in manifest order.
    pub fn to_fnt(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for e in &self.entries {
            fnt::encode_into(&e.value, &mut buf);
        }
        buf
    }

    /// Replaces values from an FNT1 container written by [`Self::to_fnt`] for
    /// a store with the same manifest.
    pub fn load_fnt(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = fnt::decode_all(bytes)?;
        if tensors.len() != self.entries.len() {
            return Err(Error::config(
                "checkpoint",
                format!(
                    "expected {} tensors, container holds {}",
                    self.entries.len(),
                    tensors.len()
                ),
            ));
        }
        for (e, t) in self.entries.iter_mut().zip(tensors) {
            if e.value.shape() != t.shape() {
                return Err(Error::config(
                    e.name.clone(),
                    format!(
                        "shape {:?} in checkpoint, model expects {:?}",
                        t.shape(),
                        e.value.shape()
                    ),
                ));
            }
            e.value = t;
        }
        Ok(())
    }

    /// Full-precision snapshot of every value, for exact resumption.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|e| e.value.data().to_vec())
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::config("snapshot", "parameter count mismatch"));
        }
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            if v.len() != e.value.len() {
                return Err(Error::config(e.name.clone(), "snapshot length mismatch"));
            }
            e.value.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn save_fnt(&self, path: &Path) -> Result<()> {
        fnt::write_atomic(path, &self.to_fnt())
    }

    pub fn load_fnt_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_fnt(&bytes)
    }
}

/// Registers parameters under a dotted name prefix with seeded initialization.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            prefix: String::new(),
            rng,
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            prefix,
            rng: self.rng,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn learnable(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, ParamKind::Learnable, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, ParamKind::Buffer, value)
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// One forward pass: a fresh tape plus lazily bound parameter leaves.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn record_bn(&mut self, mean: ParamId, var: ParamId, stats: BatchStats) {
        self.bn_updates.push(BnUpdate { mean, var, stats });
    }

    /// Gradients of every learnable parameter (zero where not reached).
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.store
            .entries()
            .iter()
            .zip(&self.bound)
            .map(|(e, b)| match (e.kind, b) {
                (ParamKind::Learnable, Some(v)) => grads.get(*v),
                _ => Tensor::zeros(e.value.shape()),
            })
            .collect()
    }

    /// Ends the pass, keeping the running-statistics updates observed in
    /// train mode so they can be applied once the store is writable again.
    pub fn into_bn_updates(self) -> BnUpdates {
        BnUpdates(self.bn_updates)
    }
}

/// Pending running-statistics updates from a train-mode pass.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(Vec<BnUpdate>);

impl BnUpdates {
    pub fn apply(self, store: &mut ParamStore) {
        for u in self.0 {
            let mut rm = store.get(u.mean).data().to_vec();
            let mut rv = store.get(u.var).data().to_vec();
            update_running(&mut rm, &mut rv, &u.stats.mean, &u.stats.var, u.stats.count);
            store.get_mut(u.mean).data_mut().copy_from_slice(&rm);
            store.get_mut(u.var).data_mut().copy_from_slice(&rv);
        }
    }
}

/// Stride-1 convolution layer without bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv {
    pub kernels: ParamId,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    /// He-normal initialization.
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let init = b.normal(&[c_out, c_in, k, k], std);
        Self::with_init(b, name, init)
    }

    pub fn zeros(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        Self::with_init(b, name, Tensor::zeros(&[c_out, c_in, k, k]))
    }

    fn with_init(b: &mut ParamBuilder<'_>, name: &str, init: Tensor) -> Self {
        let s = init.shape().to_vec();
        let kernels = b.learnable(&format!("{name}.weight"), init);
        Self {
            kernels,
            padding: s[2] / 2,
            c_in: s[1],
            c_out: s[0],
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let k = f.param(self.kernels);
        f.tape.conv2d(x, k, self.padding)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let mut b = b.sub(name);
        let scale = b.learnable("scale", Tensor::ones(&[channels]));
        let shift = b.learnable("shift", Tensor::zeros(&[channels]));
        let running_mean = b.buffer("running_mean", Tensor::zeros(&[channels]));
        let running_var = b.buffer("running_var", Tensor::ones(&[channels]));
        b.store_mut().entry_mut(scale).no_decay = true;
        b.store_mut().entry_mut(shift).no_decay = true;
        Self {
            scale,
            shift,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let scale = f.param(self.scale);
        let shift = f.param(self.shift);
        match f.mode() {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm_train(x, scale, shift)?;
                f.record_bn(self.running_mean, self.running_var, stats);
                Ok(y)
            }
            Mode::Infer => {
                let rm = f.store().get(self.running_mean).data().to_vec();
                let rv = f.store().get(self.running_var).data().to_vec();
                f.tape.batch_norm_infer(x, scale, shift, &rm, &rv)
            }
        }
    }
}

/// Outcome of [`grad_check_module`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst error occurred, e.g. `input0[3]` or `stage1.eta1[0]`.
    pub worst: String,
    pub probes: usize,
}

/// Finite-difference check of a module pass with respect to its inputs and
/// every learnable parameter it reaches.
pub fn grad_check_module<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    f: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<'_>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |store: &ParamStore, values: &[Tensor]| -> Result<f64> {
        let mut fwd = Forward::new(store, mode);
        let vars: Vec<Var> = values.iter().map(|v| fwd.leaf(v.clone())).collect();
        let out = f(&mut fwd, &vars)?;
        let v = fwd.value(out);
        if v.len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        Ok(v.item())
    };

    let mut fwd = Forward::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|v| fwd.leaf(v.clone())).collect();
    let out = f(&mut fwd, &vars)?;
    let grads = fwd.tape.backward(out)?;
    let param_grads = fwd.param_grads(&grads);
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    let reached: Vec<bool> = fwd.bound.iter().map(Option::is_some).collect();

    let stride = |n: usize| match max_coords {
        Some(m) if m > 0 && n > m => n.div_ceil(m),
        _ => 1,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
    };
    let mut record = |err: f64, at: &dyn Fn() -> String| {
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = at();
        }
    };
    let mut probe = inputs.to_vec();
    for (k, analytic) in input_grads.iter().enumerate() {
        for i in (0..analytic.len()).step_by(stride(analytic.len())) {
            let orig = probe[k].data()[i];
            let err = probe_error(analytic.data()[i], step, |d| {
                probe[k].data_mut()[i] = orig + d;
                let v = eval(store, &probe);
                probe[k].data_mut()[i] = orig;
                v
            })?;
            record(err, &|| format!("input{k}[{i}]"));
        }
    }
    let mut pstore = store.clone();
    for (p, analytic) in param_grads.iter().enumerate() {
        if !reached[p] || store.entries[p].kind != ParamKind::Learnable {
            continue;
        }
        let id = ParamId(p);
        for i in (0..analytic.len()).step_by(stride(analytic.len())) {
            let orig = store.get(id).data()[i];
            let err = probe_error(analytic.data()[i], step, |d| {
                pstore.get_mut(id).data_mut()[i] = orig + d;
                let v = eval(&pstore, inputs);
                pstore.get_mut(id).data_mut()[i] = orig;
                v
            })?;
            record(err, &|| format!("{}[{i}]", store.entries[p].name));
        }
    }
    Ok(report)
}
