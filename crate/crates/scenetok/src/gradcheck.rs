//! Finite-difference gradient verification.
//!
//! Central differences in f64 against the tape's analytic gradients. Used by
//! the unit tests of every op and by the acceptance suite's end-to-end checks.

use crate::tensor::Tensor;
use ndarray::IxDyn;
use rand::Rng;

pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: f64,
}

/// Relative error between two gradient vectors, measured on norms so that a
/// few near-zero components cannot dominate.
pub fn vector_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compare analytic gradients of a scalar-valued forward pass against central
/// finite differences, at the given coordinates of `wrt`.
///
/// `forward` must rebuild the graph from current parameter values on every
/// call; `wrt` is typically a leaf parameter or input.
pub fn compare_fd(
    mut forward: impl FnMut() -> Tensor,
    wrt: &Tensor,
    coords: &[Vec<usize>],
    base_step: f64,
) -> GradCheck {
    wrt.zero_grad();
    let out = forward();
    out.backward();
    let g = wrt
        .grad()
        .expect("compare_fd: wrt received no gradient — is it part of the graph?");
    let analytic: Vec<f64> = coords.iter().map(|c| g[IxDyn(c)]).collect();

    let mut numeric = Vec::with_capacity(coords.len());
    for c in coords {
        let idx = IxDyn(c);
        let orig = wrt.value()[idx.clone()];
        let h = base_step * orig.abs().max(1.0);

        let mut v = wrt.to_array();
        v[idx.clone()] = orig + h;
        wrt.set_value(v);
        let fp = forward().item();

        let mut v = wrt.to_array();
        v[idx.clone()] = orig - h;
        wrt.set_value(v);
        let fm = forward().item();

        let mut v = wrt.to_array();
        v[idx.clone()] = orig;
        wrt.set_value(v);

        numeric.push((fp - fm) / (2.0 * h));
    }

    let rel_err = vector_rel_err(&analytic, &numeric);
    GradCheck {
        analytic,
        numeric,
        rel_err,
    }
}

/// Sample up to `k` distinct coordinates of a shape, deterministically under `rng`.
pub fn sample_coords(shape: &[usize], k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let total: usize = shape.iter().product();
    let k = k.min(total);
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < k {
        picked.insert(rng.gen_range(0..total));
    }
    picked
        .into_iter()
        .map(|mut flat| {
            let mut coord = vec![0usize; shape.len()];
            for (i, &dim) in shape.iter().enumerate().rev() {
                coord[i] = flat % dim;
                flat /= dim;
            }
            coord
        })
        .collect()
}
