//! Reconstruction quality (MSE, PSNR, SSIM) and pixel-level detection
//! scores (IoU at a threshold, average precision).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_kernel, ImageTensor};

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Intensity range of the compared images (`[-1, 1]` gives 2).
    pub data_range: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Uptake-scale threshold applied to the anomaly map for IoU.
    pub iou_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            data_range: 2.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            iou_threshold: 0.05,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_range > 0.0) {
            return Err(Error::config("metrics.data_range must be positive"));
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::config("metrics.ssim_window must be odd"));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::config("metrics.ssim_sigma must be positive"));
        }
        if !self.iou_threshold.is_finite() {
            return Err(Error::config("metrics.iou_threshold must be finite"));
        }
        Ok(())
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, data_range: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM over all fully contained Gaussian windows.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, cfg: &MetricsConfig) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w) = a.shape();
    let win = cfg.ssim_window;
    if h < win || w < win {
        return Err(Error::domain(format!(
            "ssim needs at least {win}x{win} images, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel(cfg.ssim_sigma, win / 2);
    let c1 = (0.01 * cfg.data_range).powi(2);
    let c2 = (0.03 * cfg.data_range).powi(2);

    let (av, bv) = (a.as_slice(), b.as_slice());
    let channels: [Vec<f64>; 5] = [
        av.to_vec(),
        bv.to_vec(),
        av.iter().map(|x| x * x).collect(),
        bv.iter().map(|y| y * y).collect(),
        av.iter().zip(bv).map(|(x, y)| x * y).collect(),
    ];
    let (oh, ow) = (h - win + 1, w - win + 1);
    let filtered: Vec<Vec<f64>> = channels.iter().map(|c| valid_filter(c, h, w, &kernel)).collect();
    let [fa, fb, faa, fbb, fab] = &filtered[..] else {
        unreachable!()
    };
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (fa[i], fb[i]);
        let va = faa[i] - ma * ma;
        let vb = fbb[i] - mb * mb;
        let cov = fab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Separable correlation keeping only fully contained windows.
fn valid_filter(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = kernel.iter().enumerate().map(|(j, kv)| kv * data[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = kernel
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * rows[(r + j) * ow + c])
                .sum();
        }
    }
    out
}

fn is_positive(m: f64) -> bool {
    m > 0.5
}

/// IoU of `{map > threshold}` with the mask; 1 when both are empty.
pub fn iou_at_threshold(anomaly_map: &ImageTensor, mask: &ImageTensor, threshold: f64) -> Result<f64> {
    anomaly_map.ensure_same_shape(mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in anomaly_map.as_slice().iter().zip(mask.as_slice()) {
        let (p, t) = (v > threshold, is_positive(m));
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Pixel-level average precision: `sum (R_n - R_{n-1}) P_n` over
/// descending unique score thresholds.
pub fn average_precision(scores: &ImageTensor, mask: &ImageTensor) -> Result<f64> {
    scores.ensure_same_shape(mask)?;
    if scores.as_slice().iter().any(|s| s.is_nan()) {
        return Err(Error::domain("average precision got NaN scores"));
    }
    let positives = mask.as_slice().iter().filter(|&&m| is_positive(m)).count();
    if positives == 0 {
        return Err(Error::domain(
            "average precision is undefined for a mask without positives",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let s = scores.as_slice();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut k = 0;
    while k < order.len() {
        let level = s[order[k]];
        while k < order.len() && s[order[k]] == level {
            if is_positive(mask.as_slice()[order[k]]) {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Per-image metrics; detection scores are absent for images without a
/// simulated anomaly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub subject_id: usize,
    pub slice_id: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: Option<f64>,
    pub ap: Option<f64>,
}

impl ImageMetrics {
    /// Reconstruction scores from the healthy pair and detection scores
    /// from the anomaly map of the abnormal input.
    pub fn compute(
        subject_id: usize,
        slice_id: usize,
        healthy: (&ImageTensor, &ImageTensor),
        detection: Option<(&ImageTensor, &ImageTensor)>,
        cfg: &MetricsConfig,
    ) -> Result<Self> {
        let (input, recon) = healthy;
        let (iou, ap) = match detection {
            Some((map, mask)) => (
                Some(iou_at_threshold(map, mask, cfg.iou_threshold)?),
                Some(average_precision(map, mask)?),
            ),
            None => (None, None),
        };
        Ok(Self {
            subject_id,
            slice_id,
            mse: mse(input, recon)?,
            psnr: psnr(input, recon, cfg.data_range)?,
            ssim: ssim(input, recon, cfg)?,
            iou,
            ap,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

pub const CSV_HEADER: [&str; 7] = ["subject_id", "slice_id", "mse", "psnr", "ssim", "iou", "ap"];

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub records: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn new(mut records: Vec<ImageMetrics>) -> Self {
        records.sort_by_key(|r| (r.subject_id, r.slice_id));
        Self { records }
    }

    /// Subject-level mean/std of one metric: slices are averaged per subject
    /// first. `None` when no image carries the metric.
    pub fn aggregate(&self, metric: impl Fn(&ImageMetrics) -> Option<f64>) -> Option<MeanStd> {
        let mut per_subject: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            if let Some(v) = metric(r) {
                per_subject.entry(r.subject_id).or_default().push(v);
            }
        }
        let means: Vec<f64> = per_subject
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        mean_std(&means)
    }

    pub fn summary(&self) -> [Option<MeanStd>; 5] {
        [
            self.aggregate(|r| Some(r.mse)),
            self.aggregate(|r| Some(r.psnr)),
            self.aggregate(|r| Some(r.ssim)),
            self.aggregate(|r| r.iou),
            self.aggregate(|r| r.ap),
        ]
    }

    /// CSV with one row per image and a final `aggregate` row holding
    /// subject-level `mean±std`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::domain(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.records {
            w.write_record([
                r.subject_id.to_string(),
                r.slice_id.to_string(),
                r.mse.to_string(),
                r.psnr.to_string(),
                r.ssim.to_string(),
                opt(r.iou),
                opt(r.ap),
            ])
            .map_err(csv_err)?;
        }
        let mut row = vec!["aggregate".to_string(), String::new()];
        row.extend(
            self.summary()
                .iter()
                .map(|a| a.map_or_else(String::new, |m| format!("{:.6}±{:.6}", m.mean, m.std))),
        );
        w.write_record(&row).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::domain(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
