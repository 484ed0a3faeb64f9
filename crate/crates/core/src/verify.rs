//! Finite-difference verification of every tape operator, the spectral
//! modules across the α schedule, and an assembled two-stage network.
//!
//! Each case reduces its output to a scalar by projecting onto a fixed random
//! tensor, so a wrong adjoint cannot hide behind a symmetric upstream gradient.

use crate::error::{Error, Result};
use crate::model::{FeResNet, FindNet, ModelConfig, SampleVars};
use crate::numerics::gradcheck::{grad_check_many, DEFAULT_STEP};
use crate::numerics::tape::OPERATORS;
use crate::numerics::{Mode, Tape, Var};
use crate::params::{grad_check_module, seeded_rng, Forward, ParamBuilder, ParamStore};
use crate::spectral::{
    channel_split, frequency_grid, merge_branches, split_branches, FourierUnit, GffcBlock,
    LocalFourierUnit, SpectralConfig, GAIN_EPS,
};
use crate::tensor::Tensor;
use crate::training::{loss_on_tape, LossWeights};
use rand::Rng;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// The α values the spectral modules are checked at.
pub const ALPHAS: [f64; 3] = [0.0, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckRow {
    fn new(name: impl Into<String>, max_rel_error: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_error,
            passed: max_rel_error < TOLERANCE,
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in [0.2, 1] with random sign, keeping kinks out of the stencil.
fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = random(t.value(out).shape(), seed);
    let w = t.mul_const(out, &r)?;
    Ok(t.sum(w))
}

fn check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_many(f, inputs, DEFAULT_STEP, None)
}

/// Worst relative error of one registered operator.
pub fn operator_case(name: &str) -> Result<f64> {
    let a = random(&[2, 4, 4], 1);
    let b = random(&[2, 4, 4], 2);
    let err = match name {
        "add" => check(
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 9)
            },
            &[a, b],
        )?,
        "sub" => check(
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y, 9)
            },
            &[a, b],
        )?,
        "mul" => check(
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 9)
            },
            &[a, b],
        )?,
        "scale" => check(
            |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y, 9)
            },
            &[a],
        )?,
        "mul_const" => {
            let c = random(&[2, 4, 4], 3);
            check(
                |t, v| {
                    let y = t.mul_const(v[0], &c)?;
                    Ok(t.sum(y))
                },
                &[a],
            )?
        }
        "scalar_mul" => check(
            |t, v| {
                let y = t.scalar_mul(v[0], v[1])?;
                project(t, y, 9)
            },
            &[a, Tensor::scalar(0.7)],
        )?,
        "relu" => check(
            |t, v| {
                let y = t.relu(v[0]);
                project(t, y, 9)
            },
            &[off_zero(&[2, 4, 4], 4)],
        )?,
        "abs" => check(
            |t, v| {
                let y = t.abs(v[0]);
                project(t, y, 9)
            },
            &[off_zero(&[2, 4, 4], 5)],
        )?,
        "square" => check(
            |t, v| {
                let y = t.square(v[0]);
                project(t, y, 9)
            },
            &[a],
        )?,
        "sum" => check(|t, v| Ok(t.sum(v[0])), &[a])?,
        "softplus" => check(
            |t, v| {
                let y = t.softplus(v[0]);
                project(t, y, 9)
            },
            &[a.scale(3.0)],
        )?,
        "sigmoid" => check(
            |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, 9)
            },
            &[a.scale(3.0)],
        )?,
        "conv2d" => check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1)?;
                project(t, y, 9)
            },
            &[random(&[2, 6, 6], 6), random(&[3, 2, 3, 3], 7)],
        )?,
        "conv2d_transpose" => check(
            |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], 1)?;
                project(t, y, 9)
            },
            &[random(&[3, 6, 6], 6), random(&[3, 2, 3, 3], 7)],
        )?,
        "batch_norm" => {
            let train = check(
                |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                    project(t, y, 9)
                },
                &[a.clone(), random(&[2], 8), random(&[2], 10)],
            )?;
            let infer = check(
                |t, v| {
                    let y = t.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0])?;
                    project(t, y, 9)
                },
                &[a, random(&[2], 8), random(&[2], 10)],
            )?;
            train.max(infer)
        }
        "concat" => check(
            |t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                project(t, y, 9)
            },
            &[a, random(&[1, 4, 4], 11)],
        )?,
        "slice" => check(
            |t, v| {
                let y = t.slice_channels(v[0], 1, 1)?;
                project(t, y, 9)
            },
            &[a],
        )?,
        "reshape" => check(
            |t, v| {
                let y = t.reshape(v[0], &[4, 2, 4])?;
                project(t, y, 9)
            },
            &[a],
        )?,
        "rfft2" => check(
            |t, v| {
                let y = t.rfft2(v[0])?;
                project(t, y, 9)
            },
            &[random(&[2, 8, 8], 12)],
        )?,
        "irfft2" => check(
            |t, v| {
                let y = t.irfft2(v[0])?;
                project(t, y, 9)
            },
            &[random(&[4, 8, 5], 13)],
        )?,
        "mul_plane" => check(
            |t, v| {
                let y = t.mul_plane(v[0], v[1])?;
                project(t, y, 9)
            },
            &[a, random(&[4, 4], 14)],
        )?,
        "gaussian_gain" => {
            let distance = frequency_grid(8, 8)?.distance;
            check(
                |t, v| {
                    let y = t.gaussian_gain(&distance, v[0], v[1], GAIN_EPS)?;
                    project(t, y, 9)
                },
                &[Tensor::scalar(0.7), Tensor::scalar(0.3)],
            )?
        }
        "quad_stack" => check(
            |t, v| {
                let y = t.quad_stack(v[0])?;
                project(t, y, 9)
            },
            &[random(&[2, 8, 8], 15)],
        )?,
        "tile2" => check(
            |t, v| {
                let y = t.tile2(v[0])?;
                project(t, y, 9)
            },
            &[a],
        )?,
        other => {
            return Err(Error::Contract(format!(
                "no gradient case for operator {other}"
            )));
        }
    };
    Ok(err)
}

fn set_all(store: &mut ParamStore, suffix: &str, value: f64) {
    let ids: Vec<_> = store
        .entries()
        .iter()
        .filter(|e| e.name.ends_with(suffix))
        .map(|e| store.find(&e.name).expect("entry listed by the store"))
        .collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = value);
    }
}

fn module_check<F>(store: &ParamStore, x: Tensor, max_coords: Option<usize>, f: F) -> Result<f64>
where
    F: Fn(&mut Forward<'_>, Var) -> Result<Var>,
{
    let report = grad_check_module(
        store,
        &[x],
        Mode::Train,
        |fw, v| {
            let y = f(fw, v[0])?;
            project(&mut fw.tape, y, 21)
        },
        DEFAULT_STEP,
        max_coords,
    )?;
    Ok(report.max_rel_error)
}

/// FU and LFU on the global channel count a width-4 block gets at `alpha`.
/// Returns `None` when that count is zero (no spectral path at α = 0).
fn spectral_units(alpha: f64) -> Result<Option<(f64, f64)>> {
    let (_, global) = channel_split(alpha, 4);
    if global == 0 {
        return Ok(None);
    }
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(31);
    let mut b = ParamBuilder::new(&mut store, &mut rng);
    let fu = FourierUnit::new(&mut b.sub("fu"), global, global, true);
    let lfu = LocalFourierUnit::new(&mut b.sub("lfu"), global, true);
    set_all(&mut store, "center", 0.3);
    let x = random(&[global, 8, 8], 32);
    let fu_err = module_check(&store, x.clone(), None, |f, v| fu.forward(f, v))?;
    let lfu_err = module_check(&store, x, None, |f, v| lfu.forward(f, v))?;
    Ok(Some((fu_err, lfu_err)))
}

fn gffc_block(alpha: f64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(41);
    let block = GffcBlock::new(
        &mut ParamBuilder::new(&mut store, &mut rng),
        4,
        4,
        alpha,
        alpha,
        SpectralConfig::default(),
    )?;
    set_all(&mut store, "center", 0.3);
    let (l, g) = (block.conv.local_in, block.conv.global_in);
    module_check(&store, random(&[4, 8, 8], 42), Some(40), |f, v| {
        let br = split_branches(f, v, l, g)?;
        let y = block.forward(f, br)?;
        merge_branches(f, y)
    })
}

/// Gives every zero-initialised output projection small random weights so the
/// inner layers receive gradient.
fn perturb_projections(net: &mut FindNet, seed: u64) {
    let mut nets: Vec<&FeResNet> = net.layout.m_init.iter().collect();
    for st in &net.layout.stages {
        nets.push(&st.mnet);
        nets.push(&st.xnet);
    }
    let ids: Vec<_> = nets.iter().map(|n| n.project.kernels).collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = net.params.get(id).shape().to_vec();
        *net.params.get_mut(id) = random(&shape, seed + i as u64).scale(0.05);
    }
}

/// Loss gradient of a two-stage network on a 16×16 sample, with respect to
/// the inputs and every learnable parameter (three coordinates per tensor).
pub fn full_model_case() -> Result<f64> {
    let mut net = FindNet::new(ModelConfig {
        stages: 2,
        ..ModelConfig::default()
    })?;
    perturb_projections(&mut net, 51);
    set_all(&mut net.params, "center", 0.2);
    let n = 16;
    let mut mask = Tensor::ones(&[1, n, n]);
    for i in [n * n / 2 + n / 2, n * n / 2 + n / 2 + 1] {
        mask.data_mut()[i] = 0.0;
    }
    let x0 = random(&[1, n, n], 52);
    let w = LossWeights::for_stages(2);
    let report = grad_check_module(
        &net.params,
        &[random(&[1, n, n], 53), random(&[1, n, n], 54)],
        Mode::Train,
        |f, v| {
            let sv = SampleVars {
                y: v[0],
                mask: f.leaf(mask.clone()),
                x0: f.leaf(x0.clone()),
                ones: f.leaf(Tensor::ones(&[1, n, n])),
            };
            let vars = net.forward_bound(f, &sv)?;
            loss_on_tape(f, &vars, &sv, v[1], &w)
        },
        DEFAULT_STEP,
        Some(3),
    )?;
    Ok(report.max_rel_error)
}

/// Every check, in report order: operators, spectral modules per α, then the
/// full model.
pub fn run_all() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for name in OPERATORS {
        rows.push(CheckRow::new(*name, operator_case(name)?));
    }
    for alpha in ALPHAS {
        if let Some((fu, lfu)) = spectral_units(alpha)? {
            rows.push(CheckRow::new(format!("fu[alpha={alpha}]"), fu));
            rows.push(CheckRow::new(format!("lfu[alpha={alpha}]"), lfu));
        }
        rows.push(CheckRow::new(
            format!("gffc[alpha={alpha}]"),
            gffc_block(alpha)?,
        ));
    }
    rows.push(CheckRow::new("findnet[S=2,16x16]", full_model_case()?));
    Ok(rows)
}
