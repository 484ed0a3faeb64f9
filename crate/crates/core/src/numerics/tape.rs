//! Tape-based reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records one forward pass. Every operation appends a node whose
//! inputs were created before it, so the node order is a topological order
//! and [`Tape::backward`] simply walks it in reverse.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::numerics::batchnorm::{self, BN_EPS};
use crate::numerics::{conv, fft};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

thread_local! {
    static BROKEN_ADJOINT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Debug hook: makes the adjoint of the named operator wrong on this thread.
/// Used to prove that gradient checking actually detects broken adjoints.
pub fn set_broken_adjoint(op: Option<&'static str>) {
    BROKEN_ADJOINT.with(|b| b.set(op));
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    ScalarMul(Var, Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Softplus(Var),
    Sigmoid(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        padding: usize,
    },
    Conv2dTranspose {
        input: Var,
        kernels: Var,
        padding: usize,
    },
    BatchNormTrain {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Rfft2(Var),
    Irfft2(Var),
    MulPlane(Var, Var),
    GaussianGain {
        sigma: Var,
        center: Var,
        distance: Tensor,
        eps: f64,
    },
    QuadStack(Var),
    Tile2(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dTranspose { .. } => "conv2d_transpose",
            Op::BatchNormTrain { .. } | Op::BatchNormInfer { .. } => "batch_norm",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Rfft2(_) => "rfft2",
            Op::Irfft2(_) => "irfft2",
            Op::MulPlane(..) => "mul_plane",
            Op::GaussianGain { .. } => "gaussian_gain",
            Op::QuadStack(_) => "quad_stack",
            Op::Tile2(_) => "tile2",
        }
    }
}

/// Names of every differentiable operator the tape supports.
pub const OPERATORS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "scalar_mul",
    "relu",
    "abs",
    "square",
    "sum",
    "softplus",
    "sigmoid",
    "conv2d",
    "conv2d_transpose",
    "batch_norm",
    "concat",
    "slice",
    "reshape",
    "rfft2",
    "irfft2",
    "mul_plane",
    "gaussian_gain",
    "quad_stack",
    "tile2",
];

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-channel statistics observed by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zero if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn expect_shape(v: &Tensor, shape: &[usize], what: &str) -> Result<()> {
    if v.shape() != shape {
        return Err(Error::Dimension(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            v.shape()
        )));
    }
    Ok(())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (parameter, input or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    /// Element-wise product with a constant tensor (e.g. a mask).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(a).mul(c)?;
        Ok(self.push(Op::MulConst(a, c.clone()), v))
    }

    /// Product of a tensor with a one-element tensor node.
    pub fn scalar_mul(&mut self, a: Var, s: Var) -> Result<Var> {
        expect_shape(self.value(s), &[1], "scalar_mul factor")?;
        let v = self.value(a).scale(self.value(s).item());
        Ok(self.push(Op::ScalarMul(a, s), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, padding: usize) -> Result<Var> {
        let v = conv::conv2d(self.value(input), self.value(kernels), padding)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                padding,
            },
            v,
        ))
    }

    pub fn conv2d_transpose(&mut self, input: Var, kernels: Var, padding: usize) -> Result<Var> {
        let v = conv::conv2d_transpose(self.value(input), self.value(kernels), padding)?;
        Ok(self.push(
            Op::Conv2dTranspose {
                input,
                kernels,
                padding,
            },
            v,
        ))
    }

    /// Train-mode batch norm; also returns the batch statistics so the caller
    /// can update running averages.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (b, _, plane) = batchnorm::layout(xv)?;
        if b * plane < 2 {
            return Err(Error::Contract(
                "train-mode batch norm needs at least two values per channel".into(),
            ));
        }
        let (mean, var) = batchnorm::batch_stats(xv)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = batchnorm::normalize(
            xv,
            &mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        )?;
        let stats = BatchStats {
            mean,
            var,
            count: b * plane,
        };
        let out = self.push(
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            y,
        );
        Ok((out, stats))
    }

    /// Infer-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (y, xhat) = batchnorm::normalize(
            self.value(x),
            running_mean,
            &inv_std,
            self.value(scale).data(),
            self.value(shift).data(),
        )?;
        Ok(self.push(
            Op::BatchNormInfer {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            y,
        ))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start == 0 && len == self.value(x).shape()[0] {
            return Ok(x);
        }
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.push(Op::Slice { x, start }, v))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    /// `[C, H, W]` → stacked spectrum `[2C, H, W/2+1]`.
    pub fn rfft2(&mut self, x: Var) -> Result<Var> {
        let v = fft::rfft2_stacked(self.value(x))?;
        Ok(self.push(Op::Rfft2(x), v))
    }

    /// Stacked spectrum `[2C, H, W/2+1]` → `[C, H, W]`.
    pub fn irfft2(&mut self, z: Var) -> Result<Var> {
        let v = fft::irfft2_stacked(self.value(z))?;
        Ok(self.push(Op::Irfft2(z), v))
    }

    /// `[C, H, W] ⊙ [H, W]`, broadcasting the plane over channels.
    pub fn mul_plane(&mut self, x: Var, plane: Var) -> Result<Var> {
        let xv = self.value(x);
        let pv = self.value(plane);
        let (c, h, w) = xv.chw()?;
        if pv.len() != h * w || pv.shape().last() != Some(&w) {
            return Err(Error::Dimension(format!(
                "plane {:?} does not broadcast over {:?}",
                pv.shape(),
                xv.shape()
            )));
        }
        let mut v = xv.clone();
        for ch in 0..c {
            v.data_mut()[ch * h * w..(ch + 1) * h * w]
                .iter_mut()
                .zip(pv.data())
                .for_each(|(a, b)| *a *= b);
        }
        Ok(self.push(Op::MulPlane(x, plane), v))
    }

    /// `exp(−((D² − c²)/(D·σ + ε))²)` over a fixed distance grid, with `σ` and
    /// `c` one-element nodes.
    pub fn gaussian_gain(
        &mut self,
        distance: &Tensor,
        sigma: Var,
        center: Var,
        eps: f64,
    ) -> Result<Var> {
        expect_shape(self.value(sigma), &[1], "gaussian sigma")?;
        expect_shape(self.value(center), &[1], "gaussian center")?;
        let s = self.value(sigma).item();
        let c = self.value(center).item();
        let v = distance.map(|d| gain_value(d, s, c, eps));
        Ok(self.push(
            Op::GaussianGain {
                sigma,
                center,
                distance: distance.clone(),
                eps,
            },
            v,
        ))
    }

    /// `[C, H, W]` → `[4C, H/2, W/2]`; quadrant-major (TL, TR, BL, BR).
    pub fn quad_stack(&mut self, x: Var) -> Result<Var> {
        let v = quad_stack(self.value(x))?;
        Ok(self.push(Op::QuadStack(x), v))
    }

    /// `[C, h, w]` → `[C, 2h, 2w]` by 2×2 periodic repetition.
    pub fn tile2(&mut self, x: Var) -> Result<Var> {
        let v = tile2(self.value(x))?;
        Ok(self.push(Op::Tile2(x), v))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let broken = BROKEN_ADJOINT.with(|b| b.get());
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contribs = self.adjoint(&node.op, &node.value, &g)?;
            if broken == Some(node.op.name()) {
                for (_, t) in contribs.iter_mut() {
                    *t = t.scale(1.5);
                }
            }
            for (v, t) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn adjoint(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::MulConst(a, c) => vec![(*a, g.mul(c)?)],
            Op::ScalarMul(a, s) => vec![
                (*a, g.scale(val(*s).item())),
                (*s, Tensor::scalar(g.dot(val(*a))?)),
            ],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })?,
            )],
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sign(x))?)],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Softplus(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sigmoid(x))?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, y| g * y * (1.0 - y))?)],
            Op::Conv2d {
                input,
                kernels,
                padding,
            } => {
                let k = val(*kernels).shape()[2];
                vec![
                    (*input, conv::conv2d_transpose(g, val(*kernels), *padding)?),
                    (
                        *kernels,
                        conv::conv2d_kernel_grad(val(*input), g, k, *padding)?,
                    ),
                ]
            }
            Op::Conv2dTranspose {
                input,
                kernels,
                padding,
            } => {
                // y = Kᵀ x, so ∂/∂x = K g and ∂/∂K pairs g (conv input side) with x (output side).
                let k = val(*kernels).shape()[2];
                vec![
                    (*input, conv::conv2d(g, val(*kernels), *padding)?),
                    (
                        *kernels,
                        conv::conv2d_kernel_grad(g, val(*input), k, *padding)?,
                    ),
                ]
            }
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (b, c, plane) = batchnorm::layout(g)?;
                let gamma = val(*scale).data();
                let n = (b * plane) as f64;
                let mut dx = Tensor::zeros(g.shape());
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    let (mut sg, mut sgx) = (0.0, 0.0);
                    for r in batchnorm::channel_iter(b, c, plane, ch) {
                        for (gv, hv) in g.data()[r.clone()].iter().zip(&xhat.data()[r]) {
                            sg += gv;
                            sgx += gv * hv;
                        }
                    }
                    dscale[ch] = sgx;
                    dshift[ch] = sg;
                    let f = gamma[ch] * inv_std[ch] / n;
                    for r in batchnorm::channel_iter(b, c, plane, ch) {
                        for ((d, gv), hv) in dx.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&xhat.data()[r])
                        {
                            *d = f * (n * gv - sg - hv * sgx);
                        }
                    }
                }
                vec![
                    (*x, dx),
                    (*scale, Tensor::new(&[c], dscale)?),
                    (*shift, Tensor::new(&[c], dshift)?),
                ]
            }
            Op::BatchNormInfer {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let (b, c, plane) = batchnorm::layout(g)?;
                let gamma = val(*scale).data();
                let mut dx = g.clone();
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for ch in 0..c {
                    for r in batchnorm::channel_iter(b, c, plane, ch) {
                        for ((d, gv), hv) in dx.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(&g.data()[r.clone()])
                            .zip(&xhat.data()[r])
                        {
                            *d = gv * gamma[ch] * inv_std[ch];
                            dscale[ch] += gv * hv;
                            dshift[ch] += gv;
                        }
                    }
                }
                vec![
                    (*x, dx),
                    (*scale, Tensor::new(&[c], dscale)?),
                    (*shift, Tensor::new(&[c], dshift)?),
                ]
            }
            Op::Concat(parts) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[0];
                    res.push((p, g.slice_channels(start, len)?));
                    start += len;
                }
                res
            }
            Op::Slice { x, start } => {
                let xs = val(*x).shape();
                let plane: usize = xs[1..].iter().product();
                let mut dx = Tensor::zeros(xs);
                dx.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Rfft2(x) => vec![(*x, fft::rfft2_stacked_adjoint(g)?)],
            Op::Irfft2(z) => vec![(*z, fft::irfft2_stacked_adjoint(g)?)],
            Op::MulPlane(x, plane) => {
                let pv = val(*plane);
                let xv = val(*x);
                let hw = pv.len();
                let mut dx = g.clone();
                let mut dp = vec![0.0; hw];
                for (ch, dchunk) in dx.data_mut().chunks_exact_mut(hw).enumerate() {
                    let xchunk = &xv.data()[ch * hw..(ch + 1) * hw];
                    for i in 0..hw {
                        dp[i] += dchunk[i] * xchunk[i];
                        dchunk[i] *= pv.data()[i];
                    }
                }
                vec![(*x, dx), (*plane, Tensor::new(pv.shape(), dp)?)]
            }
            Op::GaussianGain {
                sigma,
                center,
                distance,
                eps,
            } => {
                let s = val(*sigma).item();
                let c = val(*center).item();
                let (mut ds, mut dc) = (0.0, 0.0);
                for ((&d, &gain), &gv) in distance.data().iter().zip(out.data()).zip(g.data()) {
                    let den = d * s + eps;
                    let r = (d * d - c * c) / den;
                    ds += gv * 2.0 * r * r * d * gain / den;
                    dc += gv * 4.0 * r * c * gain / den;
                }
                vec![(*sigma, Tensor::scalar(ds)), (*center, Tensor::scalar(dc))]
            }
            Op::QuadStack(x) => vec![(*x, quad_unstack(g)?)],
            Op::Tile2(x) => vec![(*x, tile2_adjoint(g)?)],
        })
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn gain_value(d: f64, sigma: f64, center: f64, eps: f64) -> f64 {
    let r = (d * d - center * center) / (d * sigma + eps);
    (-r * r).exp()
}

fn quad_stack(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::UnsupportedSize(format!(
            "quadrant split needs even extents, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(x.len());
    for q in 0..4 {
        let (oy, ox) = ((q / 2) * h2, (q % 2) * w2);
        for ch in 0..c {
            for y in 0..h2 {
                let row = (ch * h + oy + y) * w + ox;
                out.extend_from_slice(&x.data()[row..row + w2]);
            }
        }
    }
    Tensor::new(&[4 * c, h2, w2], out)
}

fn quad_unstack(g: &Tensor) -> Result<Tensor> {
    let (c4, h2, w2) = g.chw()?;
    let c = c4 / 4;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; c * h * w];
    for q in 0..4 {
        let (oy, ox) = ((q / 2) * h2, (q % 2) * w2);
        for ch in 0..c {
            for y in 0..h2 {
                let src = ((q * c + ch) * h2 + y) * w2;
                let dst = (ch * h + oy + y) * w + ox;
                out[dst..dst + w2].copy_from_slice(&g.data()[src..src + w2]);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

fn tile2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let mut out = Vec::with_capacity(4 * x.len());
    for ch in 0..c {
        for y in 0..2 * h {
            let row = &x.data()[(ch * h + y % h) * w..(ch * h + y % h + 1) * w];
            out.extend_from_slice(row);
            out.extend_from_slice(row);
        }
    }
    Tensor::new(&[c, 2 * h, 2 * w], out)
}

fn tile2_adjoint(g: &Tensor) -> Result<Tensor> {
    let (c, hh, ww) = g.chw()?;
    let (h, w) = (hh / 2, ww / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..hh {
            for x in 0..ww {
                out[(ch * h + y % h) * w + x % w] += g.data()[(ch * hh + y) * ww + x];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}
