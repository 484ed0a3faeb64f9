//! Masked MAE / PSNR / SSIM and per-size-class evaluation reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctsim::{CtSample, SizeClass};
use crate::error::{Error, Result};
use crate::fnt;
use crate::tensor::Tensor;

/// Returned by [`psnr`] when the masked error is exactly zero.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check(x: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    x.check_same_shape(y)?;
    x.check_same_shape(mask)?;
    let n = mask.sum();
    if n <= 0.0 {
        return Err(Error::Evaluation("mask selects no pixels".into()));
    }
    Ok(n)
}

/// `Σ I⊙|x−y| / Σ I`.
pub fn mae(x: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    let n = check(x, y, mask)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .zip(mask.data())
        .map(|((a, b), m)| if *m != 0.0 { m * (a - b).abs() } else { 0.0 })
        .sum();
    Ok(s / n)
}

pub fn masked_mse(x: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    let n = check(x, y, mask)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .zip(mask.data())
        .map(|((a, b), m)| {
            if *m != 0.0 {
                m * (a - b) * (a - b)
            } else {
                0.0
            }
        })
        .sum();
    Ok(s / n)
}

/// `10·log10(peak² / masked-MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, y: &Tensor, mask: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Evaluation(format!(
            "PSNR peak must be > 0, got {peak}"
        )));
    }
    let mse = masked_mse(x, y, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) and
/// `C₁ = (0.01·peak)²`, `C₂ = (0.03·peak)²`, averaged over pixels with `I = 1`.
///
/// Local statistics are weighted by the window times the mask and
/// renormalized, so masked-out pixels never enter any window; with a full
/// mask this is the usual Gaussian-window SSIM (renormalized at the border).
pub fn ssim(x: &Tensor, y: &Tensor, mask: &Tensor, peak: f64) -> Result<f64> {
    check(x, y, mask)?;
    if !(peak > 0.0) {
        return Err(Error::Evaluation(format!(
            "SSIM peak must be > 0, got {peak}"
        )));
    }
    let (h, w) = match *x.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::Dimension(format!(
                "SSIM expects a single plane, got {:?}",
                x.shape()
            )))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Evaluation(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let g = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let (xd, yd, md) = (x.data(), y.data(), mask.data());
    let (mut total, mut count) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if md[i * w + j] == 0.0 {
                continue;
            }
            let (mut sw, mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, gi) in g.iter().enumerate() {
                let ii = i + di;
                if ii < r || ii - r >= h {
                    continue;
                }
                let row = (ii - r) * w;
                for (dj, gj) in g.iter().enumerate() {
                    let jj = j + dj;
                    if jj < r || jj - r >= w {
                        continue;
                    }
                    let k = row + jj - r;
                    let wt = gi * gj * md[k];
                    if wt == 0.0 {
                        continue;
                    }
                    let (a, b) = (xd[k], yd[k]);
                    sw += wt;
                    sx += wt * a;
                    sy += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let (mx, my) = (sx / sw, sy / sw);
            let vx = (sxx / sw - mx * mx).max(0.0);
            let vy = (syy / sw - my * my).max(0.0);
            let cxy = sxy / sw - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1.0;
        }
    }
    Ok(total / count)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub size_class: SizeClass,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

/// One summary line; the improvement columns are empty without a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub mae_impr_pct: Option<f64>,
    pub ssim_impr_pct: Option<f64>,
    pub psnr_impr_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// PSNR/SSIM peak: the largest masked ground-truth value in the split.
    pub peak: f64,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
}

pub const AVERAGE: &str = "average";

fn means(rows: &[&MetricRow]) -> (f64, f64, f64) {
    let n = rows.len() as f64;
    let sum = |f: fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    (sum(|r| r.mae), sum(|r| r.ssim), sum(|r| r.psnr))
}

/// Group means per size class (in large → small order) plus the overall mean.
pub fn summarize(rows: &[MetricRow], baseline: Option<&[MetricRow]>) -> Vec<SummaryRow> {
    let groups = |rows: &[MetricRow]| {
        let mut out: Vec<(String, (f64, f64, f64))> = Vec::new();
        for class in SizeClass::ALL {
            let members: Vec<&MetricRow> = rows.iter().filter(|r| r.size_class == class).collect();
            if !members.is_empty() {
                out.push((class.name().to_string(), means(&members)));
            }
        }
        if !rows.is_empty() {
            out.push((AVERAGE.to_string(), means(&rows.iter().collect::<Vec<_>>())));
        }
        out
    };
    let base: BTreeMap<String, (f64, f64, f64)> = baseline
        .map(|b| groups(b).into_iter().collect())
        .unwrap_or_default();
    groups(rows)
        .into_iter()
        .map(|(group, (mae, ssim, psnr))| {
            let b = base.get(&group);
            SummaryRow {
                mae_impr_pct: b.map(|b| 100.0 * (b.0 - mae) / b.0),
                ssim_impr_pct: b.map(|b| 100.0 * (ssim - b.1) / b.1),
                psnr_impr_pct: b.map(|b| 100.0 * (psnr - b.2) / b.2),
                group,
                mae,
                ssim,
                psnr,
            }
        })
        .collect()
}

/// Largest ground-truth value on the mask over a split.
pub fn split_peak(samples: &[CtSample]) -> Result<f64> {
    let peak = samples
        .iter()
        .flat_map(|s| s.x_gt.data().iter().zip(s.mask.data()))
        .filter(|(_, m)| **m != 0.0)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Evaluation(format!(
            "ground-truth peak must be > 0, got {peak}"
        )));
    }
    Ok(peak)
}

/// Scores `predict(sample)` against `X_gt` on every sample of a split.
pub fn evaluate<F>(
    samples: &[CtSample],
    mut predict: F,
    baseline: Option<&[MetricRow]>,
) -> Result<MetricsReport>
where
    F: FnMut(&CtSample) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(Error::Evaluation("split is empty".into()));
    }
    let peak = split_peak(samples)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let wrap = |e: Error| Error::Sample {
            id: s.id.clone(),
            source: Box::new(e),
        };
        let pred = predict(s).map_err(wrap)?;
        if pred.shape() != s.x_gt.shape() {
            return Err(wrap(Error::Evaluation(format!(
                "prediction shape {:?} does not match data {:?}",
                pred.shape(),
                s.x_gt.shape()
            ))));
        }
        rows.push(MetricRow {
            id: s.id.clone(),
            size_class: s.size_class,
            mae: mae(&pred, &s.x_gt, &s.mask).map_err(wrap)?,
            ssim: ssim(&pred, &s.x_gt, &s.mask, peak).map_err(wrap)?,
            psnr: psnr(&pred, &s.x_gt, &s.mask, peak).map_err(wrap)?,
        });
    }
    let summary = summarize(&rows, baseline);
    Ok(MetricsReport {
        peak,
        rows,
        summary,
    })
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::Evaluation(format!("csv flush: {e}")))
}

impl MetricsReport {
    pub fn rows_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.rows)
    }

    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        to_csv(&self.summary)
    }

    pub fn write(&self, report: &Path, summary: &Path) -> Result<()> {
        fnt::write_atomic(report, &self.rows_csv()?)?;
        fnt::write_atomic(summary, &self.summary_csv()?)
    }

    pub fn group(&self, name: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.group == name)
    }

    pub fn average(&self) -> &SummaryRow {
        self.group(AVERAGE)
            .expect("a report always has an average row")
    }
}

/// Reads a per-sample report CSV written by [`MetricsReport::write`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Evaluation(format!("{}: {other:?}", path.display())),
    })?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(n: usize, f: impl FnMut(usize) -> f64) -> Tensor {
        Tensor::from_fn(&[1, n, n], f)
    }

    #[test]
    fn mae_examples() {
        let x = plane(4, |i| i as f64);
        let ones = Tensor::ones(&[1, 4, 4]);
        assert_eq!(mae(&x, &x, &ones).unwrap(), 0.0);
        assert_eq!(mae(&x.map(|v| v + 0.5), &x, &ones).unwrap(), 0.5);
        let mut mask = ones.clone();
        mask.data_mut()[3] = 0.0;
        let mut y = x.clone();
        y.data_mut()[3] += 9.0;
        assert_eq!(mae(&y, &x, &mask).unwrap(), 0.0);
        assert!(mae(&x, &x, &Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn psnr_examples() {
        let x = plane(4, |i| i as f64 * 0.01);
        let ones = Tensor::ones(&[1, 4, 4]);
        assert_eq!(psnr(&x, &x, &ones, 1.0).unwrap(), PSNR_CAP);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&y, &x, &ones, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z = x.map(|v| v + 2.0);
        assert!(psnr(&z, &x, &ones, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_examples() {
        let n = 16;
        let ones = Tensor::ones(&[1, n, n]);
        let x = plane(n, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        assert!((ssim(&x, &x, &ones, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let mean = x.sum() / x.len() as f64;
        let xc = x.map(|v| v - mean);
        assert!(ssim(&xc, &xc.scale(-1.0), &ones, 1.0).unwrap() < 0.0);

        let (c, peak) = (0.3, 1.0);
        let a = Tensor::full(&[1, n, n], c);
        let b = Tensor::full(&[1, n, n], c + peak);
        let c1 = (0.01 * peak) * (0.01 * peak);
        let expect = (2.0 * c * (c + peak) + c1) / (c * c + (c + peak) * (c + peak) + c1);
        assert!((ssim(&a, &b, &ones, peak).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(
            &plane(8, |_| 0.0),
            &plane(8, |_| 0.0),
            &Tensor::ones(&[1, 8, 8]),
            1.0
        )
        .is_err());
    }
}
