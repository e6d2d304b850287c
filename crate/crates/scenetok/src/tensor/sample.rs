//! Differentiable point sampling from feature maps.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};

/// Four-neighbor bilinear taps for a continuous index-space location.
///
/// `(u, v)` address columns/rows directly: `(0, 0)` is the first pixel,
/// `(w-1, h-1)` the last. Anything outside that square is out of bounds and
/// yields `None` — callers treat the sample as a zero vector, the deformable
/// attention convention for invalid offsets.
pub fn bilinear_weights(u: f64, v: f64, w: usize, h: usize) -> Option<[(usize, usize, f64); 4]> {
    if !u.is_finite() || !v.is_finite() {
        return None;
    }
    if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    Some([
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ])
}

impl Tensor {
    /// Bilinear gather from a [C, H, W] feature map at P continuous locations.
    ///
    /// `coords` is [P, 2] holding (u, v) in index space. Output is [P, C];
    /// out-of-bounds rows are zero. Gradients flow to both the feature map and
    /// the coordinates (the interpolation weights are piecewise linear in u, v).
    pub fn grid_sample_points(&self, coords: &Tensor) -> Tensor {
        let fs = self.shape();
        assert_eq!(fs.len(), 3, "grid_sample_points features must be [C,H,W]");
        let cs = coords.shape();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[1], 2);
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let p = cs[0];

        let f = self.to_array();
        let uv = coords.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[p, c]));
        for i in 0..p {
            if let Some(taps) = bilinear_weights(uv[[i, 0]], uv[[i, 1]], w, h) {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &(iy, ix, wt) in &taps {
                        acc += f[[ch, iy, ix]] * wt;
                    }
                    out[[i, ch]] = acc;
                }
            }
        }

        Tensor::from_op(
            out,
            vec![self.clone(), coords.clone()],
            Box::new(move |g, parents| {
                let f = parents[0].to_array();
                let uv = parents[1].to_array();
                let fs = f.shape();
                let (c, h, w) = (fs[0], fs[1], fs[2]);
                let p = uv.shape()[0];
                let mut gf = ArrayD::<f64>::zeros(f.raw_dim());
                let mut gc = ArrayD::<f64>::zeros(uv.raw_dim());
                for i in 0..p {
                    let u = uv[[i, 0]];
                    let v = uv[[i, 1]];
                    let Some(_) = bilinear_weights(u, v, w, h) else {
                        continue;
                    };
                    let x0 = u.floor() as usize;
                    let y0 = v.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let fx = u - x0 as f64;
                    let fy = v - y0 as f64;
                    let mut du = 0.0;
                    let mut dv = 0.0;
                    for ch in 0..c {
                        let go = g[[i, ch]];
                        if go == 0.0 {
                            continue;
                        }
                        let f00 = f[[ch, y0, x0]];
                        let f01 = f[[ch, y0, x1]];
                        let f10 = f[[ch, y1, x0]];
                        let f11 = f[[ch, y1, x1]];
                        gf[[ch, y0, x0]] += go * (1.0 - fy) * (1.0 - fx);
                        gf[[ch, y0, x1]] += go * (1.0 - fy) * fx;
                        gf[[ch, y1, x0]] += go * fy * (1.0 - fx);
                        gf[[ch, y1, x1]] += go * fy * fx;
                        // d(sample)/du and /dv of the bilinear form
                        du += go * ((1.0 - fy) * (f01 - f00) + fy * (f11 - f10));
                        dv += go * ((1.0 - fx) * (f10 - f00) + fx * (f11 - f01));
                    }
                    gc[[i, 0]] = du;
                    gc[[i, 1]] = dv;
                }
                parents[0].accumulate_grad(&gf);
                parents[1].accumulate_grad(&gc);
            }),
        )
    }
}
