//! Evaluation metrics: PSNR, SSIM and the 3 px / 5 % flow error.

use serde::{Deserialize, Serialize};

use crate::error::{dims_mismatch, Error, Result};
use crate::types::{FlowField, Image, ValidityMask};

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)
}

/// `10·log10(1 / MSE)` with the squared error pooled over all pixels and
/// channels; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_masked(a, b, None)
}

/// [`psnr`] restricted to pixels with non-zero validity weight.
pub fn psnr_masked(a: &Image, b: &Image, mask: Option<&ValidityMask>) -> Result<f64> {
    check_same(a, b)?;
    if let Some(m) = mask {
        if m.len() != a.pixel_count() {
            return Err(dims_mismatch(a.dims(), (m.len() / a.width().max(1), a.width())));
        }
    }
    let channels = a.channels();
    let (mut total, mut count) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.is_none_or(|m| m.is_valid(i / channels)) {
            total += (x - y) * (x - y);
            count += 1;
        }
    }
    if count == 0 || total == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (count as f64 / total).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable filtering keeping only windows fully inside the image.
fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = kernel.iter().enumerate().map(|(j, kv)| kv * plane[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = kernel.iter().enumerate().map(|(j, kv)| kv * rows[(r + j) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) inside the image,
/// averaged over channels, for intensities with dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    let size = 2 * SSIM_RADIUS + 1;
    if h.min(w) < size {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: size,
        });
    }
    let kernel = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for (pa, pb) in a.planes().iter().zip(b.planes()) {
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mu_a, ..) = filter_valid(pa, h, w, &kernel);
        let (mu_b, ..) = filter_valid(&pb, h, w, &kernel);
        let (saa, ..) = filter_valid(&prod(pa, pa), h, w, &kernel);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &kernel);
        let (sab, ..) = filter_valid(&prod(pa, &pb), h, w, &kernel);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Percentage of pixels valid in both fields whose endpoint error exceeds
/// both 3 px and 5 % of the true flow magnitude. Not symmetric in its
/// arguments.
pub fn flow_error(estimated: &FlowField, truth: &FlowField) -> Result<f64> {
    Ok(flow_error_counts(estimated, truth)?.0)
}

fn flow_error_counts(estimated: &FlowField, truth: &FlowField) -> Result<(f64, usize)> {
    if estimated.dims() != truth.dims() {
        return Err(dims_mismatch(truth.dims(), estimated.dims()));
    }
    let (mut bad, mut count) = (0usize, 0usize);
    for i in 0..truth.data().len() {
        if !(truth.valid()[i] && estimated.valid()[i]) {
            continue;
        }
        let (e, t) = (estimated.data()[i], truth.data()[i]);
        let epe = ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt();
        let magnitude = (t[0] * t[0] + t[1] * t[1]).sqrt();
        count += 1;
        if epe > 3.0 && epe > 0.05 * magnitude {
            bad += 1;
        }
    }
    let pct = if count == 0 { 0.0 } else { 100.0 * bad as f64 / count as f64 };
    Ok((pct, count))
}

/// Mean endpoint error over pixels valid in both fields.
pub fn mean_endpoint_error(estimated: &FlowField, truth: &FlowField) -> Result<f64> {
    if estimated.dims() != truth.dims() {
        return Err(dims_mismatch(truth.dims(), estimated.dims()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..truth.data().len() {
        if truth.valid()[i] && estimated.valid()[i] {
            let (e, t) = (estimated.data()[i], truth.data()[i]);
            total += ((e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2)).sqrt();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Image and flow quality of one result against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flow_error_pct: Option<f64>,
    pub valid_pixels: usize,
}

impl EvalReport {
    /// Compares `result` with `clean`, and the flows when both are given.
    pub fn evaluate(result: &Image, clean: &Image, flows: Option<(&FlowField, &FlowField)>) -> Result<Self> {
        let (flow_error_pct, valid_pixels) = match flows {
            Some((est, truth)) => {
                let (pct, count) = flow_error_counts(est, truth)?;
                (Some(pct), count)
            }
            None => (None, result.pixel_count()),
        };
        Ok(Self {
            psnr: psnr(result, clean)?,
            ssim: ssim(result, clean)?,
            flow_error_pct,
            valid_pixels,
        })
    }

    /// `key=value` lines; an infinite PSNR prints as `inf`.
    pub fn to_key_value(&self) -> String {
        let mut out = format!("psnr={}\nssim={}\n", format_metric(self.psnr), format_metric(self.ssim));
        if let Some(f) = self.flow_error_pct {
            out.push_str(&format!("flowErrorPct={}\n", format_metric(f)));
        }
        out.push_str(&format!("validPixels={}\n", self.valid_pixels));
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "evaluation report",
            detail: e.to_string(),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            what: "evaluation report",
            detail: e.to_string(),
        })
    }
}

fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}
