//! Dense convolution and resampling ops (direct loops, CHW layout).

use super::Tensor;
use ndarray::{ArrayD, IxDyn};

fn as4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

impl Tensor {
    /// 2-D convolution. Input [C_in, H, W], weight [C_out, C_in, kh, kw],
    /// optional bias [C_out]. Output [C_out, H', W'] with
    /// H' = (H + 2p - kh) / s + 1 (floor).
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,kh,kw]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, _, kh, kw) = as4(&ws);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let x = self.to_array();
        let wt = weight.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c_out, oh, ow]));
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[[c, iy as usize, ix as usize]] * wt[[o, c, ky, kx]];
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc;
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.to_array();
            for o in 0..c_out {
                let bo = bv[[o]];
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[[o, oy, ox]] += bo;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, parents| {
                let x = parents[0].to_array();
                let wt = parents[1].to_array();
                let (c_in, h, w) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let (c_out, _, kh, kw) = as4(wt.shape());
                let gs = g.shape();
                let (oh, ow) = (gs[1], gs[2]);
                let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
                let mut gw = ArrayD::<f64>::zeros(wt.raw_dim());
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g[[o, oy, ox]];
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        gx[[c, iy as usize, ix as usize]] += go * wt[[o, c, ky, kx]];
                                        gw[[o, c, ky, kx]] += go * x[[c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
                parents[1].accumulate_grad(&gw);
                if has_bias {
                    let mut gb = ArrayD::<f64>::zeros(IxDyn(&[c_out]));
                    for o in 0..c_out {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc += g[[o, oy, ox]];
                            }
                        }
                        gb[[o]] = acc;
                    }
                    parents[2].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// Transposed 2-D convolution. Input [C_in, H, W], weight [C_in, C_out, kh, kw].
    /// Output [C_out, (H-1)*s + kh - 2p, (W-1)*s + kw - 2p].
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[0], "conv_transpose2d channel mismatch");
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (_, c_out, kh, kw) = as4(&ws);
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;

        let x = self.to_array();
        let wt = weight.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c_out, oh, ow]));
        for c in 0..c_in {
            for iy in 0..h {
                for ix in 0..w {
                    let xv = x[[c, iy, ix]];
                    if xv == 0.0 {
                        continue;
                    }
                    for o in 0..c_out {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[[o, oy as usize, ox as usize]] += xv * wt[[c, o, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.to_array();
            for o in 0..c_out {
                let bo = bv[[o]];
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[[o, oy, ox]] += bo;
                    }
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, parents| {
                let x = parents[0].to_array();
                let wt = parents[1].to_array();
                let (c_in, h, w) = {
                    let s = x.shape();
                    (s[0], s[1], s[2])
                };
                let (_, c_out, kh, kw) = as4(wt.shape());
                let gs = g.shape();
                let (oh, ow) = (gs[1], gs[2]);
                let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
                let mut gw = ArrayD::<f64>::zeros(wt.raw_dim());
                for c in 0..c_in {
                    for iy in 0..h {
                        for ix in 0..w {
                            let xv = x[[c, iy, ix]];
                            let mut acc = 0.0;
                            for o in 0..c_out {
                                for ky in 0..kh {
                                    let oy = (iy * stride + ky) as isize - pad as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ox = (ix * stride + kx) as isize - pad as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let go = g[[o, oy as usize, ox as usize]];
                                        acc += go * wt[[c, o, ky, kx]];
                                        gw[[c, o, ky, kx]] += go * xv;
                                    }
                                }
                            }
                            gx[[c, iy, ix]] = acc;
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
                parents[1].accumulate_grad(&gw);
                if has_bias {
                    let mut gb = ArrayD::<f64>::zeros(IxDyn(&[c_out]));
                    for o in 0..c_out {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                acc += g[[o, oy, ox]];
                            }
                        }
                        gb[[o]] = acc;
                    }
                    parents[2].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// 3-D convolution, stride 1. Input [C, D, H, W], weight [O, C, kd, kh, kw].
    pub fn conv3d(&self, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Tensor {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 5);
        assert_eq!(xs[0], ws[1]);
        let (c_in, d, h, w) = as4(&xs);
        let (c_out, _, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
        let od = d + 2 * pad - kd + 1;
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;

        let x = self.to_array();
        let wt = weight.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c_out, od, oh, ow]));
        for o in 0..c_out {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..c_in {
                            for kz in 0..kd {
                                let iz = (oz + kz) as isize - pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += x[[c, iz as usize, iy as usize, ix as usize]]
                                            * wt[[o, c, kz, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[o, oz, oy, ox]] = acc;
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.to_array();
            for o in 0..c_out {
                let bo = bv[[o]];
                out.index_axis_mut(ndarray::Axis(0), o).mapv_inplace(|v| v + bo);
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, parents| {
                let x = parents[0].to_array();
                let wt = parents[1].to_array();
                let (c_in, d, h, w) = as4(x.shape());
                let ws = wt.shape();
                let (c_out, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
                let gs = g.shape();
                let (od, oh, ow) = (gs[1], gs[2], gs[3]);
                let mut gx = ArrayD::<f64>::zeros(x.raw_dim());
                let mut gw = ArrayD::<f64>::zeros(wt.raw_dim());
                for o in 0..c_out {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[[o, oz, oy, ox]];
                                if go == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    for kz in 0..kd {
                                        let iz = (oz + kz) as isize - pad as isize;
                                        if iz < 0 || iz >= d as isize {
                                            continue;
                                        }
                                        for ky in 0..kh {
                                            let iy = (oy + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                gx[[c, iz as usize, iy as usize, ix as usize]] +=
                                                    go * wt[[o, c, kz, ky, kx]];
                                                gw[[o, c, kz, ky, kx]] +=
                                                    go * x[[c, iz as usize, iy as usize, ix as usize]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
                parents[1].accumulate_grad(&gw);
                if has_bias {
                    let mut gb = ArrayD::<f64>::zeros(IxDyn(&[c_out]));
                    for o in 0..c_out {
                        gb[[o]] = g.index_axis(ndarray::Axis(0), o).sum();
                    }
                    parents[2].accumulate_grad(&gb);
                }
            }),
        )
    }

    /// Bilinear resize of a [C, H, W] map to [C, oh, ow] (half-pixel centers,
    /// edge-clamped). Linear in the input, so the backward pass scatters the
    /// same weights.
    pub fn resize_bilinear2d(&self, oh: usize, ow: usize) -> Tensor {
        let xs = self.shape();
        assert_eq!(xs.len(), 3);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let plan = resize_plan(h, w, oh, ow);
        let x = self.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, oh, ow]));
        for ch in 0..c {
            for (oi, taps) in plan.iter().enumerate() {
                let oy = oi / ow;
                let ox = oi % ow;
                let mut acc = 0.0;
                for &(iy, ix, wt) in taps {
                    acc += x[[ch, iy, ix]] * wt;
                }
                out[[ch, oy, ox]] = acc;
            }
        }
        let plan_saved = plan;
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let xs = parents[0].shape();
                let (c, _, _) = (xs[0], xs[1], xs[2]);
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&xs));
                let gsh = g.shape();
                let ow = gsh[2];
                for ch in 0..c {
                    for (oi, taps) in plan_saved.iter().enumerate() {
                        let oy = oi / ow;
                        let ox = oi % ow;
                        let go = g[[ch, oy, ox]];
                        for &(iy, ix, wt) in taps {
                            gx[[ch, iy, ix]] += go * wt;
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }

    /// Trilinear resize of a [C, D, H, W] volume to [C, od, oh, ow].
    pub fn resize_trilinear3d(&self, od: usize, oh: usize, ow: usize) -> Tensor {
        let xs = self.shape();
        assert_eq!(xs.len(), 4);
        let (c, d, h, w) = as4(&xs);
        if od == d && oh == h && ow == w {
            // identity retarget
            return self.mul_scalar(1.0);
        }
        let zt = axis_taps(d, od);
        let yt = axis_taps(h, oh);
        let xt = axis_taps(w, ow);
        let x = self.to_array();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, od, oh, ow]));
        for ch in 0..c {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for &(iz, wz) in &zt[oz] {
                            for &(iy, wy) in &yt[oy] {
                                for &(ix, wx) in &xt[ox] {
                                    acc += x[[ch, iz, iy, ix]] * wz * wy * wx;
                                }
                            }
                        }
                        out[[ch, oz, oy, ox]] = acc;
                    }
                }
            }
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, parents| {
                let xs = parents[0].shape();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&xs));
                let gsh = g.shape();
                let (c, od, oh, ow) = (gsh[0], gsh[1], gsh[2], gsh[3]);
                for ch in 0..c {
                    for oz in 0..od {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[[ch, oz, oy, ox]];
                                if go == 0.0 {
                                    continue;
                                }
                                for &(iz, wz) in &zt[oz] {
                                    for &(iy, wy) in &yt[oy] {
                                        for &(ix, wx) in &xt[ox] {
                                            gx[[ch, iz, iy, ix]] += go * wz * wy * wx;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accumulate_grad(&gx);
            }),
        )
    }
}

type Tap2 = Vec<Vec<(usize, usize, f64)>>;

fn resize_plan(h: usize, w: usize, oh: usize, ow: usize) -> Tap2 {
    let ys = axis_taps(h, oh);
    let xs = axis_taps(w, ow);
    let mut plan = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut taps = Vec::with_capacity(4);
            for &(iy, wy) in &ys[oy] {
                for &(ix, wx) in &xs[ox] {
                    taps.push((iy, ix, wy * wx));
                }
            }
            plan.push(taps);
        }
    }
    plan
}

/// Per-output-index linear taps for one axis, half-pixel convention with
/// clamping at the borders (matches the usual align_corners=false resize).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}
