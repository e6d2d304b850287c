//! The joint training objective: RGB reconstruction, Charbonnier depth with
//! gradient consistency, masked semantic cross-entropy, occupancy CE +
//! Lovász-Softmax, and the BEV semantic regularizer, combined by a weighted
//! sum.
//!
//! Losses take graph tensors for predictions and plain arrays for labels,
//! and return scalar tensors so gradients flow back through the model. Empty
//! supervision never NaNs: it yields an exact zero with a flag.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

fn default_one() -> f64 {
    1.0
}

/// Balancing weights of the total objective and the inner loss constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "LossWeights::default_rgb")]
    pub lambda_rgb: f64,
    #[serde(default = "LossWeights::default_depth")]
    pub lambda_depth: f64,
    #[serde(default = "LossWeights::default_sem")]
    pub lambda_sem: f64,
    #[serde(default = "LossWeights::default_occ")]
    pub lambda_occ: f64,
    #[serde(default = "LossWeights::default_reg")]
    pub lambda_reg: f64,
    #[serde(default = "default_one")]
    pub lambda_pix: f64,
    #[serde(default = "default_one")]
    pub lambda_perc: f64,
    #[serde(default = "LossWeights::default_adv")]
    pub lambda_adv: f64,
    #[serde(default = "LossWeights::default_lovasz")]
    pub lambda_lovasz: f64,
    #[serde(default = "LossWeights::default_eps")]
    pub eps_charb: f64,
    #[serde(default = "LossWeights::default_gamma")]
    pub gamma_grad: f64,
}

impl LossWeights {
    fn default_rgb() -> f64 {
        10.0
    }
    fn default_depth() -> f64 {
        0.2
    }
    fn default_sem() -> f64 {
        0.1
    }
    fn default_occ() -> f64 {
        5.0
    }
    fn default_reg() -> f64 {
        3.0
    }
    fn default_adv() -> f64 {
        0.3
    }
    fn default_lovasz() -> f64 {
        0.2
    }
    fn default_eps() -> f64 {
        1e-3
    }
    fn default_gamma() -> f64 {
        0.5
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rgb: 10.0,
            lambda_depth: 0.2,
            lambda_sem: 0.1,
            lambda_occ: 5.0,
            lambda_reg: 3.0,
            lambda_pix: 1.0,
            lambda_perc: 1.0,
            lambda_adv: 0.3,
            lambda_lovasz: 0.2,
            eps_charb: 1e-3,
            gamma_grad: 0.5,
        }
    }
}

/// Per-step loss breakdown, serialized into the metrics log.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub flags: Vec<String>,
    pub step: usize,
}

/// Hook for an adversarial critic; the objective only needs a scalar score.
pub trait Discriminator {
    /// Mean realness score of an image batch entry, [C, H, W] input.
    fn score(&self, image: &Tensor) -> Tensor;
}

/// Frozen random conv features standing in for a pretrained perceptual net.
/// Weights are fixed at construction and never trained.
pub struct PerceptualNet {
    w1: Tensor,
    w2: Tensor,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> Self {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut make = |shape: &[usize], fan_in: usize| {
            let n: usize = shape.iter().product();
            let bound = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::constant(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
        };
        PerceptualNet {
            w1: make(&[8, 3, 3, 3], 27),
            w2: make(&[8, 8, 3, 3], 72),
        }
    }

    /// Two stride-2 conv stages with GELU.
    pub fn features(&self, image: &Tensor) -> Tensor {
        let f1 = image.conv2d(&self.w1, None, 2, 1).gelu();
        f1.conv2d(&self.w2, None, 2, 1)
    }
}

/// L1 + perceptual + adversarial reconstruction loss on [C, H, W] images in
/// [0, 1]. Disabled terms contribute exactly zero.
pub fn rgb_loss(
    pred: &Tensor,
    target: &Tensor,
    weights: &LossWeights,
    perceptual: Option<&PerceptualNet>,
    discriminator: Option<&dyn Discriminator>,
) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "rgb_loss {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut loss = pred.sub(target).abs().mean().mul_scalar(weights.lambda_pix);
    if let Some(p) = perceptual {
        let lp = p
            .features(pred)
            .sub(&p.features(target))
            .abs()
            .mean()
            .mul_scalar(weights.lambda_perc);
        loss = loss.add(&lp);
    }
    if let Some(d) = discriminator {
        // non-saturating generator objective: raise the critic's score
        let ladv = d.score(pred).neg().mul_scalar(weights.lambda_adv);
        loss = loss.add(&ladv);
    }
    Ok(loss)
}

fn masked_mean(x: &Tensor, mask: &ArrayD<f64>, count: usize) -> Tensor {
    let m = Tensor::constant(mask.clone());
    x.mul(&m).sum().mul_scalar(1.0 / count as f64)
}

fn charbonnier(x: &Tensor, eps: f64) -> Tensor {
    x.mul(x).add_scalar(eps * eps).sqrt()
}

/// Charbonnier depth loss with forward-difference gradient consistency.
///
/// Each of the three terms (data, x-gradient, y-gradient) is averaged over
/// its own valid set; gradient terms require both finite-difference endpoints
/// to be supervised, which also drops the image boundary. Returns the loss
/// and an empty-supervision flag.
pub fn depth_loss(
    pred: &Tensor,
    target: &Array2<f64>,
    valid: &Array2<bool>,
    weights: &LossWeights,
) -> Result<(Tensor, bool)> {
    let (h, w) = target.dim();
    if pred.shape() != vec![h, w] {
        return Err(Error::ShapeMismatch(format!(
            "depth_loss pred {:?} vs target ({h}, {w})",
            pred.shape()
        )));
    }
    if valid.dim() != (h, w) {
        return Err(Error::ShapeMismatch("depth_loss mask shape".into()));
    }
    let eps = weights.eps_charb;
    let tgt = Tensor::constant(target.clone().into_dyn());
    let resid = pred.sub(&tgt);

    let data_mask = valid.mapv(|b| if b { 1.0 } else { 0.0 }).into_dyn();
    let n_data = valid.iter().filter(|&&b| b).count();
    let empty = n_data == 0;
    let mut loss = if n_data > 0 {
        masked_mean(&charbonnier(&resid, eps), &data_mask, n_data)
    } else {
        Tensor::scalar(0.0)
    };

    if weights.gamma_grad != 0.0 && w >= 2 {
        // forward difference along x on the residual = grad(pred) - grad(target)
        let gx = resid.slice(1, 1, w).sub(&resid.slice(1, 0, w - 1));
        let mut gx_mask = Array2::<f64>::zeros((h, w - 1));
        let mut n_gx = 0usize;
        for y in 0..h {
            for x in 0..w - 1 {
                if valid[[y, x]] && valid[[y, x + 1]] {
                    gx_mask[[y, x]] = 1.0;
                    n_gx += 1;
                }
            }
        }
        if n_gx > 0 {
            let term = masked_mean(&charbonnier(&gx, eps), &gx_mask.into_dyn(), n_gx)
                .mul_scalar(weights.gamma_grad);
            loss = loss.add(&term);
        }
    }
    if weights.gamma_grad != 0.0 && h >= 2 {
        let gy = resid.slice(0, 1, h).sub(&resid.slice(0, 0, h - 1));
        let mut gy_mask = Array2::<f64>::zeros((h - 1, w));
        let mut n_gy = 0usize;
        for y in 0..h - 1 {
            for x in 0..w {
                if valid[[y, x]] && valid[[y + 1, x]] {
                    gy_mask[[y, x]] = 1.0;
                    n_gy += 1;
                }
            }
        }
        if n_gy > 0 {
            let term = masked_mean(&charbonnier(&gy, eps), &gy_mask.into_dyn(), n_gy)
                .mul_scalar(weights.gamma_grad);
            loss = loss.add(&term);
        }
    }
    Ok((loss, empty))
}

/// Mean cross-entropy over supervised positions of flattened [P, C] logits.
/// Label 255 is ignored; anything else outside [0, C) is an error. Fully
/// ignored input returns (0, flagged).
pub fn sem_loss(logits: &Tensor, labels: &[u16], ignore: u16) -> Result<(Tensor, bool)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "sem_loss logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let n_classes = shape[1];
    let supervised: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != ignore)
        .map(|(i, _)| i)
        .collect();
    for &i in &supervised {
        if labels[i] as usize >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                n_classes,
            });
        }
    }
    if supervised.is_empty() {
        return Ok((Tensor::scalar(0.0), true));
    }
    let sel = logits.index_select(0, &supervised);
    let logp = sel.log_softmax_last();
    let mut onehot = ArrayD::<f64>::zeros(IxDyn(&[supervised.len(), n_classes]));
    for (row, &i) in supervised.iter().enumerate() {
        onehot[[row, labels[i] as usize]] = 1.0;
    }
    let picked = logp.mul(&Tensor::constant(onehot));
    let loss = picked.sum().mul_scalar(-1.0 / supervised.len() as f64);
    Ok((loss, false))
}

/// Jaccard-extension gradient for one class given sorted ground truth.
fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let p = gt_sorted.len();
    let total: usize = gt_sorted.iter().filter(|&&b| b).count();
    let mut grad = vec![0.0; p];
    let mut cum_fg = 0usize;
    let mut cum_bg = 0usize;
    let mut prev_jaccard = 0.0;
    for k in 0..p {
        if gt_sorted[k] {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let intersection = (total - cum_fg) as f64;
        let union = (total + cum_bg) as f64;
        let jaccard = 1.0 - intersection / union;
        grad[k] = if k == 0 { jaccard } else { jaccard - prev_jaccard };
        prev_jaccard = jaccard;
    }
    grad
}

/// Lovász-Softmax over flattened [P, C] probabilities (rows sum to 1).
///
/// Per class present in the labels: errors are `1 - p_c` on positives and
/// `p_c` on negatives, sorted descending (stable; ties break by index), then
/// dotted with the Jaccard-extension gradient. The permutation is treated as
/// constant, which is exactly the function's derivative away from sorting
/// ties. Result is the mean over present classes.
pub fn lovasz_softmax(probs: &Tensor, labels: &[u16], ignore: Option<u16>) -> Result<Tensor> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "lovasz_softmax probs {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let n_classes = shape[1];
    let valid: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| Some(l) != ignore)
        .map(|(i, _)| i)
        .collect();
    if valid.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let mut present: Vec<u16> = valid.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();

    let sub = probs.index_select(0, &valid);
    let mut class_losses: Vec<Tensor> = Vec::new();
    for &c in &present {
        if c as usize >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: c,
                n_classes,
            });
        }
        let p_c = sub.slice(1, c as usize, c as usize + 1).reshape(&[valid.len()]);
        // errors = fg ? 1 - p : p  ==  sign * p + offset
        let mut sign = ArrayD::<f64>::zeros(IxDyn(&[valid.len()]));
        let mut offset = ArrayD::<f64>::zeros(IxDyn(&[valid.len()]));
        let mut fg = vec![false; valid.len()];
        for (row, &i) in valid.iter().enumerate() {
            if labels[i] == c {
                sign[[row]] = -1.0;
                offset[[row]] = 1.0;
                fg[row] = true;
            } else {
                sign[[row]] = 1.0;
            }
        }
        let errors = p_c
            .mul(&Tensor::constant(sign))
            .add(&Tensor::constant(offset));
        // stable descending sort on the detached error values
        let vals = errors.to_array();
        let mut perm: Vec<usize> = (0..valid.len()).collect();
        perm.sort_by(|&a, &b| {
            vals[[b]]
                .partial_cmp(&vals[[a]])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let errors_sorted = errors.index_select(0, &perm);
        let gt_sorted: Vec<bool> = perm.iter().map(|&i| fg[i]).collect();
        let grad = lovasz_grad(&gt_sorted);
        let grad_t = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[valid.len()]), grad).unwrap());
        class_losses.push(errors_sorted.dot(&grad_t));
    }
    let mut total = class_losses[0].clone();
    for l in &class_losses[1..] {
        total = total.add(l);
    }
    Ok(total.mul_scalar(1.0 / class_losses.len() as f64))
}

/// Voxel-wise CE (empty is an ordinary class) plus weighted Lovász-Softmax
/// over the flattened volume.
pub fn occ_loss(logits: &Tensor, labels: &[u16], weights: &LossWeights) -> Result<Tensor> {
    let (ce, _) = sem_loss(logits, labels, u16::MAX)?;
    let probs = logits.softmax_last();
    let lv = lovasz_softmax(&probs, labels, None)?;
    Ok(ce.add(&lv.mul_scalar(weights.lambda_lovasz)))
}

/// Project occupancy labels onto the BEV plane with class-importance
/// weighting, then majority-vote downsample to the scene-token resolution.
///
/// Output is (h_b, w_b) with cell (iy, ix); the occupancy volume is (X, Y, Z)
/// with column (ix, iy). An all-empty column yields the empty class.
pub fn bev_reg_labels(
    occ_labels: &Array3<u16>,
    class_weights: &[f64],
    bev_shape: (usize, usize),
    empty_class: u16,
) -> Array2<u16> {
    let (nx, ny, nz) = occ_labels.dim();
    let (h_b, w_b) = bev_shape;
    // column labels at occupancy resolution, indexed (iy, ix)
    let mut column = Array2::<u16>::from_elem((ny, nx), empty_class);
    for ix in 0..nx {
        for iy in 0..ny {
            let mut best: Option<u16> = None;
            for iz in 0..nz {
                let c = occ_labels[[ix, iy, iz]];
                if c == empty_class {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(cur) => {
                        let wc = class_weights.get(c as usize).copied().unwrap_or(0.0);
                        let wcur = class_weights.get(cur as usize).copied().unwrap_or(0.0);
                        wc > wcur || (wc == wcur && c < cur)
                    }
                };
                if better {
                    best = Some(c);
                }
            }
            column[[iy, ix]] = best.unwrap_or(empty_class);
        }
    }
    // majority vote into the token grid
    let mut out = Array2::<u16>::from_elem((h_b, w_b), empty_class);
    for oy in 0..h_b {
        for ox in 0..w_b {
            let y0 = oy * ny / h_b;
            let y1 = ((oy + 1) * ny).div_ceil(h_b).max(y0 + 1).min(ny);
            let x0 = ox * nx / w_b;
            let x1 = ((ox + 1) * nx).div_ceil(w_b).max(x0 + 1).min(nx);
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for iy in y0..y1 {
                for ix in x0..x1 {
                    *counts.entry(column[[iy, ix]]).or_default() += 1;
                }
            }
            // highest count, ties to the smallest label
            let mut best = (empty_class, 0usize);
            for (&c, &n) in &counts {
                if n > best.1 {
                    best = (c, n);
                }
            }
            out[[oy, ox]] = best.0;
        }
    }
    out
}

/// Latent semantic regularizer: the occupancy composite loss applied to
/// per-token class logits against the projected BEV labels.
pub fn reg_loss(token_logits: &Tensor, bev_labels: &Array2<u16>, weights: &LossWeights) -> Result<Tensor> {
    let labels: Vec<u16> = bev_labels.iter().copied().collect();
    occ_loss(token_logits, &labels, weights)
}

/// Individual (unweighted) term values feeding the total objective.
#[derive(Default)]
pub struct LossTerms {
    pub rgb: Option<Tensor>,
    pub depth: Option<Tensor>,
    pub sem: Option<Tensor>,
    pub occ: Option<Tensor>,
    pub reg: Option<Tensor>,
    pub flags: Vec<String>,
}

/// Weighted sum per the published balancing weights; disabled terms count as
/// zero. Returns the scalar graph node and the serializable report.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, step: usize) -> (Tensor, LossReport) {
    let mut report = LossReport {
        step,
        flags: terms.flags.clone(),
        ..Default::default()
    };
    let mut total = Tensor::scalar(0.0);
    let mut add_term = |name: &str, t: &Option<Tensor>, lambda: f64, total: &mut Tensor| {
        if let Some(t) = t {
            report.terms.insert(name.to_string(), t.item());
            *total = total.add(&t.mul_scalar(lambda));
        }
    };
    add_term("rgb", &terms.rgb, weights.lambda_rgb, &mut total);
    add_term("depth", &terms.depth, weights.lambda_depth, &mut total);
    add_term("sem", &terms.sem, weights.lambda_sem, &mut total);
    add_term("occ", &terms.occ, weights.lambda_occ, &mut total);
    add_term("reg", &terms.reg, weights.lambda_reg, &mut total);
    report.total = total.item();
    (total, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare_fd, sample_coords};
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), true)
    }

    #[test]
    fn rgb_loss_fixtures_and_oracle() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = rand_tensor(&[3, 4, 5], &mut rng);
        let zero = rgb_loss(&t, &t, &w, None, None).unwrap();
        assert_eq!(zero.item(), 0.0);

        let shifted = t.add_scalar(0.1);
        let l = rgb_loss(&shifted, &t, &w, None, None).unwrap();
        assert!((l.item() - 0.1).abs() < 1e-12);

        let p = rand_tensor(&[3, 4, 5], &mut rng);
        let l = rgb_loss(&p, &t, &w, None, None).unwrap();
        let mut oracle = 0.0;
        let pv = p.to_array();
        let tv = t.to_array();
        for (a, b) in pv.iter().zip(tv.iter()) {
            oracle += (a - b).abs();
        }
        oracle /= 60.0;
        assert!((l.item() - oracle).abs() < 1e-7);
    }

    #[test]
    fn rgb_loss_perceptual_is_zero_on_identical() {
        let w = LossWeights::default();
        let net = PerceptualNet::new(7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = rand_tensor(&[3, 8, 8], &mut rng);
        let l = rgb_loss(&t, &t, &w, Some(&net), None).unwrap();
        assert_eq!(l.item(), 0.0);
        let p = rand_tensor(&[3, 8, 8], &mut rng);
        let with = rgb_loss(&p, &t, &w, Some(&net), None).unwrap();
        let without = rgb_loss(&p, &t, &w, None, None).unwrap();
        assert!(with.item() > without.item());
    }

    #[test]
    fn depth_loss_epsilon_floor_at_zero_residual() {
        let w = LossWeights::default();
        let target = Array2::from_elem((4, 6), 3.0);
        let valid = Array2::from_elem((4, 6), true);
        let pred = Tensor::new(target.clone().into_dyn(), true);
        let (l, empty) = depth_loss(&pred, &target, &valid, &w).unwrap();
        assert!(!empty);
        let expect = w.eps_charb * (1.0 + 2.0 * w.gamma_grad);
        assert!((l.item() - expect).abs() < 1e-12, "{} vs {expect}", l.item());
    }

    #[test]
    fn depth_loss_single_pixel_closed_form() {
        let w = LossWeights {
            gamma_grad: 0.0,
            ..LossWeights::default()
        };
        let target = array![[2.0]];
        let valid = array![[true]];
        let r = 0.37;
        let pred = Tensor::new(array![[2.0 + r]].into_dyn(), true);
        let (l, _) = depth_loss(&pred, &target, &valid, &w).unwrap();
        assert!((l.item() - (r * r + w.eps_charb * w.eps_charb).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_matches_double_loop_oracle() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = Array2::from_shape_fn((8, 8), |_| rng.gen_range(1.0..5.0));
        let valid = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0) < 0.8);
        let pred_arr = Array2::from_shape_fn((8, 8), |_| rng.gen_range(1.0..5.0));
        let pred = Tensor::new(pred_arr.clone().into_dyn(), true);
        let (l, _) = depth_loss(&pred, &target, &valid, &w).unwrap();

        let ch = |r: f64| (r * r + w.eps_charb * w.eps_charb).sqrt();
        let mut data = 0.0;
        let mut nd = 0;
        for y in 0..8 {
            for x in 0..8 {
                if valid[[y, x]] {
                    data += ch(pred_arr[[y, x]] - target[[y, x]]);
                    nd += 1;
                }
            }
        }
        let mut gx = 0.0;
        let mut ngx = 0;
        for y in 0..8 {
            for x in 0..7 {
                if valid[[y, x]] && valid[[y, x + 1]] {
                    let rp = pred_arr[[y, x + 1]] - pred_arr[[y, x]];
                    let rt = target[[y, x + 1]] - target[[y, x]];
                    gx += ch(rp - rt);
                    ngx += 1;
                }
            }
        }
        let mut gy = 0.0;
        let mut ngy = 0;
        for y in 0..7 {
            for x in 0..8 {
                if valid[[y, x]] && valid[[y + 1, x]] {
                    let rp = pred_arr[[y + 1, x]] - pred_arr[[y, x]];
                    let rt = target[[y + 1, x]] - target[[y, x]];
                    gy += ch(rp - rt);
                    ngy += 1;
                }
            }
        }
        let oracle =
            data / nd as f64 + w.gamma_grad * (gx / ngx as f64 + gy / ngy as f64);
        assert!((l.item() - oracle).abs() < 1e-7, "{} vs {oracle}", l.item());
    }

    #[test]
    fn depth_loss_empty_mask_flags_zero() {
        let w = LossWeights::default();
        let target = Array2::from_elem((3, 3), 2.0);
        let valid = Array2::from_elem((3, 3), false);
        let pred = Tensor::new(target.clone().into_dyn(), true);
        let (l, empty) = depth_loss(&pred, &target, &valid, &w).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(empty);
    }

    #[test]
    fn sem_loss_fixtures() {
        // all ignored
        let logits = Tensor::new(ArrayD::zeros(IxDyn(&[4, 5])), true);
        let (l, flag) = sem_loss(&logits, &[255, 255, 255, 255], 255).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(flag);

        // uniform logits, one supervised pixel -> ln C
        let (l, flag) = sem_loss(&logits, &[255, 3, 255, 255], 255).unwrap();
        assert!(!flag);
        assert!((l.item() - (5.0f64).ln()).abs() < 1e-12);

        // out of range label
        assert!(matches!(
            sem_loss(&logits, &[7, 255, 255, 255], 255),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn sem_loss_matches_manual_softmax_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = rand_tensor(&[6, 4], &mut rng);
        let labels = [1u16, 255, 0, 3, 2, 255];
        let (l, _) = sem_loss(&logits, &labels, 255).unwrap();
        let v = logits.to_array();
        let mut oracle = 0.0;
        let mut n = 0;
        for (i, &lab) in labels.iter().enumerate() {
            if lab == 255 {
                continue;
            }
            let row: Vec<f64> = (0..4).map(|c| v[[i, c]]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            oracle += -(row[lab as usize] - m - z.ln());
            n += 1;
        }
        oracle /= n as f64;
        assert!((l.item() - oracle).abs() < 1e-7);
    }

    #[test]
    fn lovasz_perfect_prediction_is_zero() {
        // exact one-hot probabilities on the true classes
        let probs = Tensor::new(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]].into_dyn(),
            true,
        );
        let l = lovasz_softmax(&probs, &[0, 1, 2, 0], None).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn lovasz_single_pixel_closed_form() {
        let p = 0.62;
        let probs = Tensor::new(array![[p, 1.0 - p]].into_dyn(), true);
        let l = lovasz_softmax(&probs, &[0], None).unwrap();
        assert!((l.item() - (1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn lovasz_matches_reference_formula_oracle() {
        // 6 pixels, 3 classes: step-by-step Jaccard extension
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = rand_tensor(&[6, 3], &mut rng);
        let probs = raw.softmax_last();
        let labels = [0u16, 1, 2, 1, 0, 2];
        let got = lovasz_softmax(&probs, &labels, None).unwrap().item();

        let pv = probs.to_array();
        let mut oracle = 0.0;
        for c in 0..3u16 {
            let fg: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let errors: Vec<f64> = (0..6)
                .map(|i| {
                    if fg[i] {
                        1.0 - pv[[i, c as usize]]
                    } else {
                        pv[[i, c as usize]]
                    }
                })
                .collect();
            let mut perm: Vec<usize> = (0..6).collect();
            perm.sort_by(|&a, &b| {
                errors[b]
                    .partial_cmp(&errors[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let total: usize = fg.iter().filter(|&&b| b).count();
            let mut cum_fg = 0;
            let mut cum_bg = 0;
            let mut prev_j = 0.0;
            for (k, &i) in perm.iter().enumerate() {
                if fg[i] {
                    cum_fg += 1;
                } else {
                    cum_bg += 1;
                }
                let jac = 1.0 - (total - cum_fg) as f64 / (total + cum_bg) as f64;
                let g = if k == 0 { jac } else { jac - prev_j };
                prev_j = jac;
                oracle += errors[i] * g / 3.0;
            }
        }
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn lovasz_invariant_to_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let raw = rand_tensor(&[5, 4], &mut rng);
        let labels = [0u16, 1, 2, 3, 1];
        let a = lovasz_softmax(&raw.softmax_last(), &labels, None).unwrap().item();
        let b = lovasz_softmax(&raw.add_scalar(7.5).softmax_last(), &labels, None)
            .unwrap()
            .item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn occ_loss_fixtures() {
        let w = LossWeights::default();
        // uniform logits over 5 classes: CE term is ln 5, Lovász adds nonneg
        let logits = Tensor::new(ArrayD::zeros(IxDyn(&[8, 5])), true);
        let labels = [0u16, 1, 2, 3, 4, 0, 1, 2];
        let l = occ_loss(&logits, &labels, &w).unwrap();
        let ce_part = (5.0f64).ln();
        assert!(l.item() >= ce_part - 1e-12);

        // large-margin perfect logits: loss under 1e-3
        let mut strong = ArrayD::<f64>::zeros(IxDyn(&[8, 5]));
        for (i, &lab) in labels.iter().enumerate() {
            for c in 0..5 {
                strong[[i, c]] = if c == lab as usize { 20.0 } else { -20.0 };
            }
        }
        let l = occ_loss(&Tensor::new(strong, true), &labels, &w).unwrap();
        assert!(l.item() < 1e-3, "{}", l.item());
    }

    #[test]
    fn occ_loss_composition_oracle() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = rand_tensor(&[10, 4], &mut rng);
        let labels: Vec<u16> = (0..10).map(|_| rng.gen_range(0u16..4)).collect();
        let combined = occ_loss(&logits, &labels, &w).unwrap().item();
        let (ce, _) = sem_loss(&logits, &labels, u16::MAX).unwrap();
        let lv = lovasz_softmax(&logits.softmax_last(), &labels, None).unwrap();
        assert!((combined - (ce.item() + 0.2 * lv.item())).abs() < 1e-6);
    }

    #[test]
    fn bev_reg_label_fixtures() {
        // single-class column
        let mut occ = Array3::<u16>::zeros((2, 2, 3));
        occ[[0, 0, 0]] = 2; // car at column (ix=0, iy=0)
        occ[[0, 0, 1]] = 2;
        let weights = vec![0.0, 1.0, 1.0, 1.0, 1.0, 5.0];
        let labels = bev_reg_labels(&occ, &weights, (2, 2), 0);
        assert_eq!(labels[[0, 0]], 2);
        assert_eq!(labels[[1, 1]], 0);

        // importance weighting: 10 road vs 1 pedestrian, pedestrian wins
        let mut occ = Array3::<u16>::zeros((1, 1, 11));
        for z in 0..10 {
            occ[[0, 0, z]] = 1;
        }
        occ[[0, 0, 10]] = 5;
        let labels = bev_reg_labels(&occ, &weights, (1, 1), 0);
        assert_eq!(labels[[0, 0]], 5);
    }

    #[test]
    fn bev_reg_labels_match_column_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let occ = Array3::<u16>::from_shape_fn((8, 8, 4), |_| rng.gen_range(0u16..6));
        let weights = vec![0.0, 0.5, 3.0, 1.0, 0.8, 4.0];
        let labels = bev_reg_labels(&occ, &weights, (8, 8), 0);
        for iy in 0..8 {
            for ix in 0..8 {
                let mut best: Option<u16> = None;
                for iz in 0..4 {
                    let c = occ[[ix, iy, iz]];
                    if c == 0 {
                        continue;
                    }
                    best = match best {
                        None => Some(c),
                        Some(cur) => {
                            if weights[c as usize] > weights[cur as usize]
                                || (weights[c as usize] == weights[cur as usize] && c < cur)
                            {
                                Some(c)
                            } else {
                                Some(cur)
                            }
                        }
                    };
                }
                assert_eq!(labels[[iy, ix]], best.unwrap_or(0), "column ({ix}, {iy})");
            }
        }
    }

    #[test]
    fn reg_loss_equals_occ_loss_on_token_grid() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = rand_tensor(&[16, 6], &mut rng);
        let labels = Array2::<u16>::from_shape_fn((4, 4), |_| rng.gen_range(0u16..6));
        let via_reg = reg_loss(&logits, &labels, &w).unwrap().item();
        let flat: Vec<u16> = labels.iter().copied().collect();
        let via_occ = occ_loss(&logits, &flat, &w).unwrap().item();
        assert_eq!(via_reg, via_occ);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights::default();
        let ones = LossTerms {
            rgb: Some(Tensor::scalar(1.0)),
            depth: Some(Tensor::scalar(1.0)),
            sem: Some(Tensor::scalar(1.0)),
            occ: Some(Tensor::scalar(1.0)),
            reg: Some(Tensor::scalar(1.0)),
            flags: vec![],
        };
        let (total, report) = total_loss(&ones, &w, 0);
        assert!((total.item() - 18.3).abs() < 1e-12);
        assert_eq!(report.terms.len(), 5);

        let zeros = LossTerms {
            rgb: Some(Tensor::scalar(0.0)),
            ..Default::default()
        };
        let (total, _) = total_loss(&zeros, &w, 0);
        assert_eq!(total.item(), 0.0);

        // random terms against an arithmetic oracle
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vals: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..2.0)).collect();
        let terms = LossTerms {
            rgb: Some(Tensor::scalar(vals[0])),
            depth: Some(Tensor::scalar(vals[1])),
            sem: Some(Tensor::scalar(vals[2])),
            occ: Some(Tensor::scalar(vals[3])),
            reg: Some(Tensor::scalar(vals[4])),
            flags: vec![],
        };
        let (total, report) = total_loss(&terms, &w, 3);
        let oracle = 10.0 * vals[0] + 0.2 * vals[1] + 0.1 * vals[2] + 5.0 * vals[3] + 3.0 * vals[4];
        assert!((total.item() - oracle).abs() < 1e-7);
        // report consistency: total = sum of weighted terms within 1e-6
        let recomputed: f64 = report.terms["rgb"] * 10.0
            + report.terms["depth"] * 0.2
            + report.terms["sem"] * 0.1
            + report.terms["occ"] * 5.0
            + report.terms["reg"] * 3.0;
        assert!((report.total - recomputed).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);

        // rgb (with perceptual path)
        let net = PerceptualNet::new(3);
        let pred = rand_tensor(&[3, 8, 8], &mut rng);
        let target = rand_tensor(&[3, 8, 8], &mut rng).detach();
        let coords = sample_coords(&pred.shape(), 6, &mut rng);
        let res = compare_fd(
            || rgb_loss(&pred, &Tensor::constant(target.to_array()), &w, Some(&net), None).unwrap(),
            &pred,
            &coords,
            1e-6,
        );
        assert!(res.rel_err < 1e-7, "rgb rel_err {}", res.rel_err);

        // depth
        let tgt = Array2::from_shape_fn((6, 6), |_| rng.gen_range(1.0..5.0));
        let valid = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..1.0) < 0.8);
        let pred = rand_tensor(&[6, 6], &mut rng).add_scalar(3.0);
        let coords = sample_coords(&pred.shape(), 6, &mut rng);
        let res = compare_fd(
            || depth_loss(&pred, &tgt, &valid, &w).unwrap().0,
            &pred,
            &coords,
            1e-6,
        );
        assert!(res.rel_err < 1e-7, "depth rel_err {}", res.rel_err);

        // sem
        let logits = rand_tensor(&[8, 5], &mut rng);
        let labels = [0u16, 255, 2, 4, 255, 1, 3, 0];
        let coords = sample_coords(&logits.shape(), 6, &mut rng);
        let res = compare_fd(
            || sem_loss(&logits, &labels, 255).unwrap().0,
            &logits,
            &coords,
            1e-6,
        );
        assert!(res.rel_err < 1e-7, "sem rel_err {}", res.rel_err);

        // lovasz through softmax (away from ties by random inputs)
        let raw = rand_tensor(&[7, 4], &mut rng);
        let labels = [0u16, 1, 2, 3, 1, 0, 2];
        let coords = sample_coords(&raw.shape(), 6, &mut rng);
        let res = compare_fd(
            || lovasz_softmax(&raw.softmax_last(), &labels, None).unwrap(),
            &raw,
            &coords,
            1e-6,
        );
        assert!(res.rel_err < 1e-6, "lovasz rel_err {}", res.rel_err);

        // occ composite
        let logits = rand_tensor(&[9, 6], &mut rng);
        let labels: Vec<u16> = (0..9).map(|_| rng.gen_range(0u16..6)).collect();
        let coords = sample_coords(&logits.shape(), 6, &mut rng);
        let res = compare_fd(
            || occ_loss(&logits, &labels, &w).unwrap(),
            &logits,
            &coords,
            1e-6,
        );
        assert!(res.rel_err < 1e-6, "occ rel_err {}", res.rel_err);
    }

    #[test]
    fn losses_are_nonnegative_on_random_inputs() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let p = rand_tensor(&[3, 6, 6], &mut rng);
            let t = rand_tensor(&[3, 6, 6], &mut rng);
            assert!(rgb_loss(&p, &t, &w, None, None).unwrap().item() >= 0.0);

            let tgt = Array2::from_shape_fn((5, 5), |_| rng.gen_range(1.0..5.0));
            let valid = Array2::from_elem((5, 5), true);
            let pred = rand_tensor(&[5, 5], &mut rng).add_scalar(3.0);
            assert!(depth_loss(&pred, &tgt, &valid, &w).unwrap().0.item() >= 0.0);

            let logits = rand_tensor(&[6, 4], &mut rng);
            let labels: Vec<u16> = (0..6).map(|_| rng.gen_range(0u16..4)).collect();
            assert!(sem_loss(&logits, &labels, 255).unwrap().0.item() >= 0.0);
            assert!(occ_loss(&logits, &labels, &w).unwrap().item() >= 0.0);
            assert!(
                lovasz_softmax(&logits.softmax_last(), &labels, None)
                    .unwrap()
                    .item()
                    >= -1e-12
            );
        }
    }

    #[test]
    fn depth_loss_symmetric_and_monotone_in_residual() {
        let w = LossWeights {
            gamma_grad: 0.0,
            ..LossWeights::default()
        };
        let target = array![[2.0]];
        let valid = array![[true]];
        let eval = |r: f64| {
            let pred = Tensor::new(array![[2.0 + r]].into_dyn(), false);
            depth_loss(&pred, &target, &valid, &w).unwrap().0.item()
        };
        assert!((eval(0.5) - eval(-0.5)).abs() < 1e-12);
        let mut prev = eval(0.0);
        for k in 1..10 {
            let cur = eval(k as f64 * 0.1);
            assert!(cur >= prev);
            prev = cur;
        }
    }
}
