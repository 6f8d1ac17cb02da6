//! Signal-to-noise metrics and the derivative-accuracy report.

use serde::{Deserialize, Serialize};

use crate::data::{bilinear_resize, DerivativeField};
use crate::error::{Error, Result};
use crate::model::FunkNN;
use crate::sampler::{self, ImageGrid, PatchSpec};

/// Reported in place of an infinite SNR.
pub const SNR_CAP_DB: f64 = 300.0;
const RESIDUAL_FLOOR: f64 = 1e-30;

fn check_pair(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("snr of empty signals".into()));
    }
    Ok(())
}

fn snr_from_powers(signal: f64, residual: f64) -> f64 {
    if residual < RESIDUAL_FLOOR {
        SNR_CAP_DB
    } else {
        (10.0 * (signal / residual).log10()).min(SNR_CAP_DB)
    }
}

/// `10 log10(|x|^2 / |x - x_hat|^2)` with `x` the reference.
pub fn snr(x_hat: &[f32], x: &[f32]) -> Result<f64> {
    check_pair(x_hat, x)?;
    let signal: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
    if signal == 0.0 {
        return Err(Error::Invalid("snr against an all-zero reference".into()));
    }
    let residual: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(snr_from_powers(signal, residual))
}

/// Least-squares `(a, b)` minimizing `|a x_hat + b - x|^2`.
pub fn affine_fit(x_hat: &[f32], x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mh = x_hat.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (&h, &r) in x_hat.iter().zip(x) {
        let dh = h as f64 - mh;
        cov += dh * (r as f64 - mx);
        var += dh * dh;
    }
    let a = if var > 0.0 { cov / var } else { 0.0 };
    (a, mx - a * mh)
}

/// SNR after the optimal affine intensity map of `x_hat` onto `x`.
pub fn si_snr(x_hat: &[f32], x: &[f32]) -> Result<f64> {
    check_pair(x_hat, x)?;
    let (a, b) = affine_fit(x_hat, x);
    let signal: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
    let residual: f64 = x_hat
        .iter()
        .zip(x)
        .map(|(&h, &r)| (a * h as f64 + b - r as f64).powi(2))
        .sum();
    if residual < RESIDUAL_FLOOR {
        return Ok(SNR_CAP_DB);
    }
    if signal == 0.0 {
        return Err(Error::Invalid("si-snr against an all-zero reference".into()));
    }
    Ok(snr_from_powers(signal, residual))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, values: Vec<f64>, meta: serde_json::Value) -> Self {
        let mean = if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            metric: metric.into(),
            values,
            mean,
            meta,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("item,{}\n", self.metric);
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s.push_str(&format!("mean,{}\n", self.mean));
        s
    }
}

/// One held-out item for [`derivative_report`].
#[derive(Clone, Debug)]
pub struct DerivativeItem {
    pub low_res: ImageGrid,
    pub high_res: ImageGrid,
    /// Ground truth on the high-res pixel-center grid.
    pub field: DerivativeField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeReport {
    pub image: MetricReport,
    pub gradient: MetricReport,
    pub laplacian: MetricReport,
}

/// Image, gradient-field and Laplacian SNRs of `model` on `items`.
pub fn derivative_report(model: &FunkNN, items: &[DerivativeItem]) -> Result<DerivativeReport> {
    let mut img = Vec::new();
    let mut grad = Vec::new();
    let mut lap = Vec::new();
    for item in items {
        let truth_lap = item
            .field
            .laplacians
            .as_ref()
            .ok_or_else(|| Error::Invalid("derivative item without Laplacian ground truth".into()))?;
        let coords = &item.field.coords;
        let values = model.evaluate(&item.low_res, coords)?;
        let d = model.spatial_derivatives(&item.low_res, coords, 2)?;
        img.push(snr(values.data(), item.high_res.data())?);
        grad.push(snr(d.gradient.data(), item.field.gradients.data())?);
        lap.push(snr(d.laplacian.as_ref().expect("order 2").data(), truth_lap.data())?);
    }
    let meta = serde_json::json!({ "items": items.len() });
    Ok(DerivativeReport {
        image: MetricReport::new("image_snr_db", img, meta.clone()),
        gradient: MetricReport::new("gradient_snr_db", grad, meta.clone()),
        laplacian: MetricReport::new("laplacian_snr_db", lap, meta),
    })
}

/// SNR of bilinear upsampling of `low_res` to the size of `high_res`.
pub fn bilinear_snr(low_res: &ImageGrid, high_res: &ImageGrid) -> Result<f64> {
    let up = bilinear_resize(low_res, high_res.height, high_res.width)?;
    snr(up.data(), high_res.data())
}

/// SNR of plain bicubic upsampling (the untrained FunkNN).
pub fn bicubic_snr(low_res: &ImageGrid, high_res: &ImageGrid) -> Result<f64> {
    let spec = PatchSpec { p: 1, ..PatchSpec::default() };
    let mut out = Vec::with_capacity(high_res.data().len());
    for coord in sampler::pixel_centers(high_res.height, high_res.width) {
        out.extend(sampler::extract_patch(low_res, coord, &spec, false)?.values.into_data());
    }
    snr(&out, high_res.data())
}
