//! Real-to-complex 2-D DFTs over the last two axes, backed by `rustfft`.
//!
//! The forward transform is unnormalized and keeps `W/2 + 1` columns; the
//! inverse applies `1/(H·W)`. The stacked variants used inside the network
//! lay the real parts of all channels first and the imaginary parts after
//! them, so a `[C, H, W]` image maps to a real `[2C, H, W/2 + 1]` tensor.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, direction))
}

pub fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() || w < 2 {
        return Err(Error::UnsupportedSize(format!(
            "FFT extents must be powers of two (W >= 2), got {h}x{w}"
        )));
    }
    Ok(())
}

/// In-place unnormalized 2-D complex DFT of `c` planes of size `h × w`.
fn fft2_planes(buf: &mut [Complex64], c: usize, h: usize, w: usize, direction: FftDirection) {
    let row = plan(w, direction);
    row.process(buf);
    if h == 1 {
        return;
    }
    let col = plan(h, direction);
    let mut t = vec![Complex64::default(); h * w];
    for plane in buf.chunks_exact_mut(h * w).take(c) {
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = plane[y * w + x];
            }
        }
        col.process(&mut t);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = t[x * h + y];
            }
        }
    }
}

fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Forward transform of every channel; result planes are `H × (W/2 + 1)`.
fn forward_half(x: &Tensor) -> Result<(Vec<Complex64>, usize, usize, usize)> {
    let (c, h, w) = x.chw()?;
    check_pow2(h, w)?;
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_planes(&mut buf, c, h, w, FftDirection::Forward);
    let wf = half_width(w);
    let mut half = Vec::with_capacity(c * h * wf);
    for row in buf.chunks_exact(w) {
        half.extend_from_slice(&row[..wf]);
    }
    Ok((half, c, h, w))
}

/// `Re Σ_{u, v ≤ W/2} weight(v)·Z[u,v]·e^{+iθ}` for every channel, where the
/// half spectrum is zero-extended to the full grid before an unnormalized
/// inverse transform.
fn inverse_from_half(
    half: &[Complex64],
    c: usize,
    h: usize,
    w: usize,
    weight: impl Fn(usize) -> f64,
) -> Vec<f64> {
    let wf = half_width(w);
    let mut buf = vec![Complex64::default(); c * h * w];
    for (dst, src) in buf.chunks_exact_mut(w).zip(half.chunks_exact(wf)) {
        for (v, z) in src.iter().enumerate() {
            dst[v] = z * weight(v);
        }
    }
    fft2_planes(&mut buf, c, h, w, FftDirection::Inverse);
    buf.iter().map(|z| z.re).collect()
}

/// Hermitian multiplicity of a half-spectrum column.
fn column_multiplicity(v: usize, w: usize) -> f64 {
    if v == 0 || v == w / 2 {
        1.0
    } else {
        2.0
    }
}

pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (half, c, h, w) = forward_half(x)?;
    let shape = [c, h, half_width(w)];
    let re = Tensor::new(&shape, half.iter().map(|z| z.re).collect())?;
    let im = Tensor::new(&shape, half.iter().map(|z| z.im).collect())?;
    ComplexTensor::new(re, im)
}

/// Inverse of [`fft2`]; the spatial width is recovered as `2·(W_f − 1)`.
pub fn ifft2(z: &ComplexTensor) -> Result<Tensor> {
    let (c, h, wf) = z.re.chw()?;
    let w = 2 * (wf - 1);
    check_pow2(h, w)?;
    let half: Vec<Complex64> =
        z.re.data()
            .iter()
            .zip(z.im.data())
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect();
    let norm = 1.0 / (h * w) as f64;
    let data = inverse_from_half(&half, c, h, w, |v| column_multiplicity(v, w) * norm);
    Tensor::new(&[c, h, w], data)
}

fn stacked_to_half(z: &Tensor) -> Result<(Vec<Complex64>, usize, usize, usize)> {
    let (c2, h, wf) = z.chw()?;
    if c2 % 2 != 0 || wf < 2 {
        return Err(Error::Dimension(format!(
            "stacked spectrum needs an even channel count, got {:?}",
            z.shape()
        )));
    }
    let c = c2 / 2;
    let plane = h * wf;
    let (re, im) = z.data().split_at(c * plane);
    let half = re
        .iter()
        .zip(im)
        .map(|(&a, &b)| Complex64::new(a, b))
        .collect();
    Ok((half, c, h, 2 * (wf - 1)))
}

fn half_to_stacked(half: &[Complex64], c: usize, h: usize, wf: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(2 * half.len());
    data.extend(half.iter().map(|z| z.re));
    data.extend(half.iter().map(|z| z.im));
    Tensor::new(&[2 * c, h, wf], data)
}

/// `[C, H, W]` → `[2C, H, W/2+1]` with real parts first.
pub fn rfft2_stacked(x: &Tensor) -> Result<Tensor> {
    let (half, c, h, w) = forward_half(x)?;
    half_to_stacked(&half, c, h, half_width(w))
}

/// Adjoint of [`rfft2_stacked`]: `[2C, H, W/2+1]` → `[C, H, W]`.
pub fn rfft2_stacked_adjoint(g: &Tensor) -> Result<Tensor> {
    let (half, c, h, w) = stacked_to_half(g)?;
    check_pow2(h, w)?;
    Tensor::new(&[c, h, w], inverse_from_half(&half, c, h, w, |_| 1.0))
}

/// `[2C, H, W/2+1]` → `[C, H, W]`, the stacked form of [`ifft2`].
pub fn irfft2_stacked(z: &Tensor) -> Result<Tensor> {
    let (half, c, h, w) = stacked_to_half(z)?;
    check_pow2(h, w)?;
    let norm = 1.0 / (h * w) as f64;
    let data = inverse_from_half(&half, c, h, w, |v| column_multiplicity(v, w) * norm);
    Tensor::new(&[c, h, w], data)
}

/// Adjoint of [`irfft2_stacked`]: `[C, H, W]` → `[2C, H, W/2+1]`.
pub fn irfft2_stacked_adjoint(g: &Tensor) -> Result<Tensor> {
    let (mut half, c, h, w) = forward_half(g)?;
    let wf = half_width(w);
    let norm = 1.0 / (h * w) as f64;
    for row in half.chunks_exact_mut(wf) {
        for (v, z) in row.iter_mut().enumerate() {
            *z *= column_multiplicity(v, w) * norm;
        }
    }
    half_to_stacked(&half, c, h, wf)
}
