//! Per-channel batch normalization over `[C, H, W]` (unit batch) or
//! `[B, C, H, W]` activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// `(batch, channels, plane)` view of an activation tensor.
pub(crate) fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((1, c, h * w)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::Dimension(format!(
            "batch norm expects [C,H,W] or [B,C,H,W], got {:?}",
            x.shape()
        ))),
    }
}

pub(crate) fn channel_iter(
    b: usize,
    c: usize,
    plane: usize,
    ch: usize,
) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..b).map(move |bi| {
        let start = (bi * c + ch) * plane;
        start..start + plane
    })
}

/// Batch mean and biased variance per channel.
pub(crate) fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, plane) = layout(x)?;
    let n = (b * plane) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let m = channel_iter(b, c, plane, ch)
            .map(|r| d[r].iter().sum::<f64>())
            .sum::<f64>()
            / n;
        let v = channel_iter(b, c, plane, ch)
            .map(|r| d[r].iter().map(|v| (v - m) * (v - m)).sum::<f64>())
            .sum::<f64>()
            / n;
        mean[ch] = m;
        var[ch] = v;
    }
    Ok((mean, var))
}

/// `y = (x − mean)·inv_std·scale + shift` per channel.
pub(crate) fn normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (b, c, plane) = layout(x)?;
    if [mean.len(), inv_std.len(), scale.len(), shift.len()]
        .iter()
        .any(|&l| l != c)
    {
        return Err(Error::Dimension(format!(
            "batch norm state has wrong channel count for input {:?}",
            x.shape()
        )));
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    for ch in 0..c {
        for r in channel_iter(b, c, plane, ch) {
            for (h, o) in xhat.data_mut()[r.clone()]
                .iter_mut()
                .zip(&mut y.data_mut()[r])
            {
                *h = (*h - mean[ch]) * inv_std[ch];
                *o = *h * scale[ch] + shift[ch];
            }
        }
    }
    Ok((y, xhat))
}

/// Learnable affine parameters and running statistics of one BN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// Running-statistics update with momentum; the variance uses the unbiased estimate.
pub(crate) fn update_running(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    mean: &[f64],
    var: &[f64],
    count: usize,
) {
    let correction = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean[ch];
        running_var[ch] =
            (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * var[ch] * correction;
    }
}

/// Stand-alone batch normalization. Train mode normalizes with batch statistics
/// and updates `state`'s running statistics; infer mode uses them.
pub fn batch_norm(input: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor> {
    let (b, _, plane) = layout(input)?;
    match mode {
        Mode::Train => {
            if b * plane < 2 {
                return Err(Error::Contract(
                    "train-mode batch norm needs at least two values per channel".into(),
                ));
            }
            let (mean, var) = batch_stats(input)?;
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let (y, _) = normalize(input, &mean, &inv_std, &state.scale, &state.shift)?;
            update_running(
                &mut state.running_mean,
                &mut state.running_var,
                &mean,
                &var,
                b * plane,
            );
            Ok(y)
        }
        Mode::Infer => {
            let inv_std: Vec<f64> = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + BN_EPS).sqrt())
                .collect();
            let (y, _) = normalize(
                input,
                &state.running_mean,
                &inv_std,
                &state.scale,
                &state.shift,
            )?;
            Ok(y)
        }
    }
}
