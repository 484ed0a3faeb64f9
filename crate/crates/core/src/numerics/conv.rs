//! Stride-1 2-D cross-correlation, its adjoint, and the kernel gradient.
//!
//! Activations are `[C, H, W]`, kernels `[C_out, C_in, k, k]` with odd `k`.
//! Out-of-bounds reads are zero (explicit zero padding).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn kernel_dims(kernels: &Tensor) -> Result<(usize, usize, usize)> {
    match *kernels.shape() {
        [co, ci, kh, kw] if kh == kw && kh % 2 == 1 => Ok((co, ci, kh)),
        _ => Err(Error::Dimension(format!(
            "kernels must be [C_out, C_in, k, k] with odd k, got {:?}",
            kernels.shape()
        ))),
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "expected [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// Index range of output columns `x` for which `x + d - pad` lands in `0..len_in`.
#[inline]
fn valid_range(d: usize, pad: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (len_in + pad).saturating_sub(d).min(len_out);
    (lo, hi.max(lo))
}

pub fn conv2d(input: &Tensor, kernels: &Tensor, padding: usize) -> Result<Tensor> {
    let (ci, h, w) = plane_dims(input)?;
    let (co, kci, k) = kernel_dims(kernels)?;
    if kci != ci {
        return Err(Error::Dimension(format!(
            "kernels expect {kci} input channels, input has {ci}"
        )));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::Dimension(format!(
            "kernel {k} larger than padded input {h}x{w} (padding {padding})"
        )));
    }
    let ho = h + 2 * padding - k + 1;
    let wo = w + 2 * padding - k + 1;
    let mut out = vec![0.0; co * ho * wo];
    let x = input.data();
    let kd = kernels.data();
    for o in 0..co {
        let out_c = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let in_c = &x[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = valid_range(dy, padding, h, ho);
                for dx in 0..k {
                    let wgt = kd[((o * ci + i) * k + dy) * k + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(dx, padding, w, wo);
                    for y in y0..y1 {
                        let yi = y + dy - padding;
                        let src = &in_c[yi * w + x0 + dx - padding..yi * w + x1 + dx - padding];
                        let dst = &mut out_c[y * wo + x0..y * wo + x1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co, ho, wo], out)
}

/// Adjoint of [`conv2d`] with respect to its input.
///
/// `input` has the shape of a `conv2d` output; the result has the shape of
/// the `conv2d` input that would have produced it.
pub fn conv2d_transpose(input: &Tensor, kernels: &Tensor, padding: usize) -> Result<Tensor> {
    let (co, ho, wo) = plane_dims(input)?;
    let (kco, ci, k) = kernel_dims(kernels)?;
    if kco != co {
        return Err(Error::Dimension(format!(
            "kernels expect {kco} output channels, input has {co}"
        )));
    }
    if ho + k - 1 < 2 * padding + 1 || wo + k - 1 < 2 * padding + 1 {
        return Err(Error::Dimension(format!(
            "transpose output would be empty for {ho}x{wo}, k={k}, padding={padding}"
        )));
    }
    let h = ho + k - 1 - 2 * padding;
    let w = wo + k - 1 - 2 * padding;
    let mut out = vec![0.0; ci * h * w];
    let g = input.data();
    let kd = kernels.data();
    for o in 0..co {
        let g_c = &g[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let out_c = &mut out[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = valid_range(dy, padding, h, ho);
                for dx in 0..k {
                    let wgt = kd[((o * ci + i) * k + dy) * k + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(dx, padding, w, wo);
                    for y in y0..y1 {
                        let yi = y + dy - padding;
                        let src = &g_c[y * wo + x0..y * wo + x1];
                        let dst =
                            &mut out_c[yi * w + x0 + dx - padding..yi * w + x1 + dx - padding];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[ci, h, w], out)
}

/// Gradient of `<conv2d(input, K), grad_out>` with respect to `K`.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    grad_out: &Tensor,
    k: usize,
    padding: usize,
) -> Result<Tensor> {
    let (ci, h, w) = plane_dims(input)?;
    let (co, ho, wo) = plane_dims(grad_out)?;
    if ho + k != h + 2 * padding + 1 || wo + k != w + 2 * padding + 1 {
        return Err(Error::Dimension(format!(
            "kernel gradient shape mismatch: input {h}x{w}, output {ho}x{wo}, k={k}"
        )));
    }
    let x = input.data();
    let g = grad_out.data();
    let mut out = vec![0.0; co * ci * k * k];
    for o in 0..co {
        let g_c = &g[o * ho * wo..(o + 1) * ho * wo];
        for i in 0..ci {
            let in_c = &x[i * h * w..(i + 1) * h * w];
            for dy in 0..k {
                let (y0, y1) = valid_range(dy, padding, h, ho);
                for dx in 0..k {
                    let (x0, x1) = valid_range(dx, padding, w, wo);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let yi = y + dy - padding;
                        let src = &in_c[yi * w + x0 + dx - padding..yi * w + x1 + dx - padding];
                        let gr = &g_c[y * wo + x0..y * wo + x1];
                        acc += src.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[((o * ci + i) * k + dy) * k + dx] = acc;
                }
            }
        }
    }
    Tensor::new(&[co, ci, k, k], out)
}
