//! Evaluation metrics: PSNR, SSIM, AbsRel / δ<1.25, occupancy IoU / mIoU.
//!
//! All metrics are pure functions; `EvalReport` is their JSON-serializable
//! aggregate.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// PSNR of identical images is capped here instead of +inf.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub absrel: Option<f64>,
    pub delta_1_25: Option<f64>,
    pub iou: Option<f64>,
    pub miou: Option<f64>,
    pub per_class_iou: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub per_sample: Vec<BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// 10 log10(1 / MSE) on unit-range images; identical inputs return the cap.
pub fn psnr(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Metric("psnr shape mismatch".into()));
    }
    let n = pred.len() as f64;
    let mse: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let mut w = Array2::<f64>::zeros((size, size));
    let c = (size as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            w[[y, x]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

fn ssim_channel(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, window: usize) -> f64 {
    let sigma = 1.5;
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let w = gaussian_window(window, sigma);
    let (h, wd) = pred.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - window) {
        for x0 in 0..=(wd - window) {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            for dy in 0..window {
                for dx in 0..window {
                    let wt = w[[dy, dx]];
                    mu_x += wt * pred[[y0 + dy, x0 + dx]];
                    mu_y += wt * target[[y0 + dy, x0 + dx]];
                }
            }
            let mut var_x = 0.0;
            let mut var_y = 0.0;
            let mut cov = 0.0;
            for dy in 0..window {
                for dx in 0..window {
                    let wt = w[[dy, dx]];
                    let px = pred[[y0 + dy, x0 + dx]] - mu_x;
                    let py = target[[y0 + dy, x0 + dx]] - mu_y;
                    var_x += wt * px * px;
                    var_y += wt * py * py;
                    cov += wt * px * py;
                }
            }
            let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            total += s;
            count += 1;
        }
    }
    total / count as f64
}

/// Mean local SSIM over valid (fully interior) windows, averaged across
/// channels. Window default is 11 with Gaussian sigma 1.5, C1 = 0.01²,
/// C2 = 0.03² on unit range.
pub fn ssim(pred: ArrayView3<'_, f64>, target: ArrayView3<'_, f64>, window: usize) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Metric("ssim shape mismatch".into()));
    }
    let (h, w, c) = pred.dim();
    if h < window || w < window {
        return Err(Error::Metric(format!(
            "image {h}x{w} smaller than ssim window {window}"
        )));
    }
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_channel(
            pred.index_axis(ndarray::Axis(2), ch),
            target.index_axis(ndarray::Axis(2), ch),
            window,
        );
    }
    Ok(total / c as f64)
}

/// AbsRel and the δ < 1.25 inlier fraction over masked pixels.
pub fn depth_metrics(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    mask: &Array2<bool>,
) -> Result<(f64, f64)> {
    if pred.dim() != target.dim() || pred.dim() != mask.dim() {
        return Err(Error::Metric("depth_metrics shape mismatch".into()));
    }
    let mut absrel = 0.0;
    let mut inliers = 0usize;
    let mut n = 0usize;
    for ((p, t), &m) in pred.iter().zip(target.iter()).zip(mask.iter()) {
        if !m {
            continue;
        }
        if *t <= 0.0 || *p <= 0.0 {
            return Err(Error::Metric("non-positive depth under mask".into()));
        }
        absrel += (p - t).abs() / t;
        if (p / t).max(t / p) < 1.25 {
            inliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("empty depth mask".into()));
    }
    Ok((absrel / n as f64, inliers as f64 / n as f64))
}

#[derive(Clone, Debug)]
pub struct OccupancyScores {
    /// Binary occupied-vs-empty IoU.
    pub iou: f64,
    /// Mean per-class IoU over semantic classes present in GT.
    pub miou: f64,
    /// Per-class IoU for classes present in GT (empty excluded).
    pub per_class: BTreeMap<u16, f64>,
}

/// Occupancy IoU (occupied vs empty) and semantic mIoU over classes present
/// in the ground truth; the empty class is excluded from the semantic part.
pub fn occupancy_metrics(
    pred: &Array3<u16>,
    gt: &Array3<u16>,
    empty_class: u16,
) -> Result<OccupancyScores> {
    if pred.dim() != gt.dim() {
        return Err(Error::Metric("occupancy grid mismatch".into()));
    }
    let mut bin_inter = 0usize;
    let mut bin_union = 0usize;
    let mut inter: BTreeMap<u16, usize> = BTreeMap::new();
    let mut union: BTreeMap<u16, usize> = BTreeMap::new();
    let mut gt_classes: std::collections::BTreeSet<u16> = std::collections::BTreeSet::new();

    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p_occ = p != empty_class;
        let g_occ = g != empty_class;
        if p_occ && g_occ {
            bin_inter += 1;
        }
        if p_occ || g_occ {
            bin_union += 1;
        }
        if g_occ {
            gt_classes.insert(g);
        }
        if p_occ || g_occ {
            if p == g {
                *inter.entry(g).or_default() += 1;
                *union.entry(g).or_default() += 1;
            } else {
                if p_occ {
                    *union.entry(p).or_default() += 1;
                }
                if g_occ {
                    *union.entry(g).or_default() += 1;
                }
            }
        }
    }

    let iou = if bin_union == 0 {
        1.0
    } else {
        bin_inter as f64 / bin_union as f64
    };
    let mut per_class = BTreeMap::new();
    let mut miou = 0.0;
    for &c in &gt_classes {
        let i = *inter.get(&c).unwrap_or(&0) as f64;
        let u = *union.get(&c).unwrap_or(&0) as f64;
        let v = if u == 0.0 { 0.0 } else { i / u };
        per_class.insert(c, v);
        miou += v;
    }
    if !gt_classes.is_empty() {
        miou /= gt_classes.len() as f64;
    } else {
        miou = 1.0;
    }
    Ok(OccupancyScores {
        iou,
        miou,
        per_class,
    })
}
