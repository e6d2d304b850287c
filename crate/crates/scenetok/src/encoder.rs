//! Scene encoding: image backbones, FPN fusion, metric BEV positional
//! encoding, and the geometry-guided deformable lift into the fixed-budget
//! scene-token grid.
//!
//! The lift projects each BEV cell center (at the grid's height bins) into
//! every camera, gathers pyramid features at learned offsets around the
//! reference pixels, and combines them with attention weights normalized
//! jointly over (cameras x levels x offsets) per head. Cells visible in no
//! camera keep their residual query value untouched. The token grid shape is
//! fixed by the BEV grid alone, so the token budget never depends on camera
//! count or image resolution.

use crate::error::{Error, Result};
use crate::geometry::{project_points, BevGridSpec, CameraRig};
use crate::tensor::{Init, ParamStore, Tensor};
use nalgebra::Vector3;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    TinyConv,
    TinyPatch,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    /// Shared channel width of every pyramid level.
    pub channels: usize,
    /// Scene-token width C_b (must be divisible by `n_heads`).
    pub bev_channels: usize,
    pub n_levels: usize,
    /// Learned sampling offsets per (head, level).
    pub n_offsets: usize,
    pub n_heads: usize,
    /// Sinusoidal frequency pairs per axis in the BEV positional encoding.
    pub fourier_freqs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: BackboneKind::TinyConv,
            channels: 32,
            bev_channels: 64,
            n_levels: 4,
            n_offsets: 4,
            n_heads: 4,
            fourier_freqs: 6,
        }
    }
}

/// First-level stride of both backbones.
pub const PATCH_STRIDE: usize = 4;

/// Per-level, per-camera feature maps, all `channels` wide, strictly
/// decreasing in spatial size.
pub struct FeaturePyramid {
    /// `levels[l][cam]` is a [C, H_l, W_l] tensor.
    pub levels: Vec<Vec<Tensor>>,
    /// Full image size the pyramid was computed from.
    pub image_size: (usize, usize),
}

impl FeaturePyramid {
    pub fn n_cameras(&self) -> usize {
        self.levels.first().map_or(0, |l| l.len())
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_size(&self, l: usize) -> (usize, usize) {
        let s = self.levels[l][0].shape();
        (s[1], s[2])
    }

    fn validate(&self) -> Result<()> {
        let mut prev: Option<(usize, usize)> = None;
        let c = self.levels[0][0].shape()[0];
        for level in &self.levels {
            for t in level {
                let s = t.shape();
                if s[0] != c {
                    return Err(Error::ShapeMismatch(
                        "pyramid levels must share channel width".into(),
                    ));
                }
            }
            let s = level[0].shape();
            if let Some((ph, pw)) = prev {
                if s[1] >= ph || s[2] >= pw {
                    return Err(Error::ShapeMismatch(
                        "pyramid spatial sizes must strictly decrease".into(),
                    ));
                }
            }
            prev = Some((s[1], s[2]));
        }
        Ok(())
    }
}

/// Backbone + FPN + query grid + deformable lift, parameters registered under
/// one store scope.
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    pub grid: BevGridSpec,
    // backbone
    bk_stem_w: Tensor,
    bk_stem_b: Tensor,
    bk_stage_w: Vec<Tensor>,
    bk_stage_b: Vec<Tensor>,
    // fpn
    fpn_lateral_w: Vec<Tensor>,
    fpn_lateral_b: Vec<Tensor>,
    fpn_out_w: Vec<Tensor>,
    fpn_out_b: Vec<Tensor>,
    // queries + positional encoding
    query_content: Tensor,
    pos_proj_w: Tensor,
    pos_proj_b: Tensor,
    // deformable lift
    offset_w: Tensor,
    offset_b: Tensor,
    attn_w: Tensor,
    attn_b: Tensor,
    geo_w: Tensor,
    geo_b: Tensor,
    value_w: Vec<Tensor>,
    out_w: Tensor,
    out_b: Tensor,
}

/// Unit-budget scene tokens B on the BEV grid.
pub struct SceneTokenGrid {
    /// [H_b, W_b, C_b].
    pub tokens: Tensor,
}

impl SceneTokenGrid {
    pub fn h_b(&self) -> usize {
        self.tokens.shape()[0]
    }
    pub fn w_b(&self) -> usize {
        self.tokens.shape()[1]
    }
    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Raw sinusoidal features of the metric cell centers: [H_b*W_b, 4F]
/// (sin/cos per frequency per axis). Absolute coordinates: translating the
/// grid's range changes the features.
pub fn bev_fourier_features(grid: &BevGridSpec, n_freqs: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((grid.n_cells(), 4 * n_freqs));
    for iy in 0..grid.h_b {
        for ix in 0..grid.w_b {
            let (x, y) = grid.cell_center(iy, ix);
            let row = grid.flat_index(iy, ix);
            for k in 0..n_freqs {
                let omega = std::f64::consts::PI * (1 << k) as f64 / 64.0;
                out[[row, 4 * k]] = (omega * x).sin();
                out[[row, 4 * k + 1]] = (omega * x).cos();
                out[[row, 4 * k + 2]] = (omega * y).sin();
                out[[row, 4 * k + 3]] = (omega * y).cos();
            }
        }
    }
    out
}

const VIS_PENALTY: f64 = 1e30;

/// Per-camera lift geometry: reference pixels per height bin and validity.
struct CameraRefs {
    /// [bins][Nq] of (u, v) in image pixels; invalid projections are parked
    /// far out of bounds so any gather at them returns zero.
    uv: Vec<Vec<(f64, f64)>>,
    /// visible[j]: any bin projects validly for query j.
    visible: Vec<bool>,
    /// Mean valid (u, v) normalized to [0, 1], zero for blind queries.
    mean_uv_norm: Vec<(f64, f64)>,
}

fn camera_refs(cam: &crate::geometry::CameraModel, grid: &BevGridSpec) -> Result<CameraRefs> {
    let heights = grid.height_bin_centers();
    let nq = grid.n_cells();
    let mut uv = vec![vec![(0.0, 0.0); nq]; heights.len()];
    let mut visible = vec![false; nq];
    let mut sum_uv = vec![(0.0, 0.0, 0usize); nq];
    for (b, &z) in heights.iter().enumerate() {
        let mut points = Vec::with_capacity(nq);
        for iy in 0..grid.h_b {
            for ix in 0..grid.w_b {
                let (x, y) = grid.cell_center(iy, ix);
                points.push(Vector3::new(x, y, z));
            }
        }
        let projs = project_points(&points, cam)?;
        for (j, p) in projs.iter().enumerate() {
            if p.valid {
                uv[b][j] = (p.u, p.v);
                visible[j] = true;
                sum_uv[j].0 += p.u;
                sum_uv[j].1 += p.v;
                sum_uv[j].2 += 1;
            } else {
                uv[b][j] = (-1e6, -1e6);
            }
        }
    }
    let mean_uv_norm = sum_uv
        .iter()
        .map(|&(su, sv, n)| {
            if n == 0 {
                (0.0, 0.0)
            } else {
                (
                    su / n as f64 / cam.width as f64,
                    sv / n as f64 / cam.height as f64,
                )
            }
        })
        .collect();
    Ok(CameraRefs {
        uv,
        visible,
        mean_uv_norm,
    })
}

impl SceneEncoder {
    pub fn new(store: &ParamStore, cfg: &EncoderConfig, grid: &BevGridSpec) -> Result<Self> {
        if cfg.bev_channels % cfg.n_heads != 0 {
            return Err(Error::Config(
                "bev_channels must be divisible by n_heads".into(),
            ));
        }
        if cfg.n_levels < 1 {
            return Err(Error::Config("need at least one pyramid level".into()));
        }
        let s = store.scope("encoder");
        let c = cfg.channels;
        let cb = cfg.bev_channels;
        let nq = grid.n_cells();
        let hlk = cfg.n_heads * cfg.n_levels * cfg.n_offsets;

        let bk = s.scope("backbone");
        let bk_stem_w = bk.param(
            "stem.weight",
            &[c, 3, PATCH_STRIDE, PATCH_STRIDE],
            Init::KaimingFanIn(3 * PATCH_STRIDE * PATCH_STRIDE),
        );
        let bk_stem_b = bk.param("stem.bias", &[c], Init::Zeros);
        let mut bk_stage_w = Vec::new();
        let mut bk_stage_b = Vec::new();
        // tiny-conv halves with strided k2 convs; tiny-patch pools then mixes
        // with a 1x1 — both land on floor(n/2) sizes, keeping the shape
        // contract identical across backbones
        let stage_k = match cfg.backbone {
            BackboneKind::TinyConv => 2,
            BackboneKind::TinyPatch => 1,
        };
        for l in 1..cfg.n_levels {
            bk_stage_w.push(bk.param(
                &format!("stage{l}.weight"),
                &[c, c, stage_k, stage_k],
                Init::KaimingFanIn(c * stage_k * stage_k),
            ));
            bk_stage_b.push(bk.param(&format!("stage{l}.bias"), &[c], Init::Zeros));
        }

        let fp = s.scope("fpn");
        let mut fpn_lateral_w = Vec::new();
        let mut fpn_lateral_b = Vec::new();
        let mut fpn_out_w = Vec::new();
        let mut fpn_out_b = Vec::new();
        for l in 0..cfg.n_levels {
            fpn_lateral_w.push(fp.param(
                &format!("lateral{l}.weight"),
                &[c, c, 1, 1],
                Init::KaimingFanIn(c),
            ));
            fpn_lateral_b.push(fp.param(&format!("lateral{l}.bias"), &[c], Init::Zeros));
            fpn_out_w.push(fp.param(
                &format!("out{l}.weight"),
                &[c, c, 3, 3],
                Init::KaimingFanIn(c * 9),
            ));
            fpn_out_b.push(fp.param(&format!("out{l}.bias"), &[c], Init::Zeros));
        }

        let lift = s.scope("lift");
        let query_content = lift.param("queries", &[nq, cb], Init::Normal(0.02));
        let pos_proj_w = lift.param(
            "pos_proj.weight",
            &[4 * cfg.fourier_freqs, cb],
            Init::KaimingFanIn(4 * cfg.fourier_freqs),
        );
        let pos_proj_b = lift.param("pos_proj.bias", &[cb], Init::Zeros);
        // offsets start near zero: early training is close to a pure
        // geometric gather at the reference points
        let offset_w = lift.param("offset.weight", &[cb, hlk * 2], Init::Uniform(1e-3));
        let offset_b = lift.param("offset.bias", &[hlk * 2], Init::Zeros);
        let attn_w = lift.param("attn.weight", &[cb, hlk], Init::Uniform(1e-3));
        let attn_b = lift.param("attn.bias", &[hlk], Init::Zeros);
        let geo_w = lift.param("geo.weight", &[2, cfg.n_heads], Init::Uniform(1e-3));
        let geo_b = lift.param("geo.bias", &[cfg.n_heads], Init::Zeros);
        let mut value_w = Vec::new();
        for l in 0..cfg.n_levels {
            value_w.push(lift.param(
                &format!("value{l}.weight"),
                &[c, cb],
                Init::KaimingFanIn(c),
            ));
        }
        let out_w = lift.param("out.weight", &[cb, cb], Init::KaimingFanIn(cb));
        let out_b = lift.param("out.bias", &[cb], Init::Zeros);

        Ok(SceneEncoder {
            cfg: cfg.clone(),
            grid: grid.clone(),
            bk_stem_w,
            bk_stem_b,
            bk_stage_w,
            bk_stage_b,
            fpn_lateral_w,
            fpn_lateral_b,
            fpn_out_w,
            fpn_out_b,
            query_content,
            pos_proj_w,
            pos_proj_b,
            offset_w,
            offset_b,
            attn_w,
            attn_b,
            geo_w,
            geo_b,
            value_w,
            out_w,
            out_b,
        })
    }

    /// Backbone + FPN. `images` are per-camera [3, H, W] in [0, 1]; H and W
    /// must be divisible by the stem stride.
    pub fn encode_images(&self, images: &[Tensor]) -> Result<FeaturePyramid> {
        if images.is_empty() {
            return Err(Error::Config("need at least one camera image".into()));
        }
        let s = images[0].shape();
        let (h, w) = (s[1], s[2]);
        if h % PATCH_STRIDE != 0 || w % PATCH_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} not divisible by stem stride {PATCH_STRIDE}"
            )));
        }
        let mut raw: Vec<Vec<Tensor>> = vec![Vec::new(); self.cfg.n_levels];
        for img in images {
            if img.shape() != vec![3, h, w] {
                return Err(Error::ShapeMismatch("camera images must share shape".into()));
            }
            let mut level = match self.cfg.backbone {
                BackboneKind::TinyConv => img
                    .conv2d(&self.bk_stem_w, Some(&self.bk_stem_b), PATCH_STRIDE, 0)
                    .gelu(),
                BackboneKind::TinyPatch => {
                    // explicit patch embedding: unfold 4x4 patches, shared linear
                    let hp = h / PATCH_STRIDE;
                    let wp = w / PATCH_STRIDE;
                    let grid = img
                        .reshape(&[3, hp, PATCH_STRIDE, wp, PATCH_STRIDE])
                        .permute(&[1, 3, 0, 2, 4])
                        .reshape(&[hp * wp, 3 * PATCH_STRIDE * PATCH_STRIDE]);
                    let stem = self
                        .bk_stem_w
                        .reshape(&[self.cfg.channels, 3 * PATCH_STRIDE * PATCH_STRIDE])
                        .t2();
                    grid.matmul(&stem)
                        .add_bias(&self.bk_stem_b)
                        .reshape(&[hp, wp, self.cfg.channels])
                        .permute(&[2, 0, 1])
                        .gelu()
                }
            };
            raw[0].push(level.clone());
            for l in 1..self.cfg.n_levels {
                level = match self.cfg.backbone {
                    BackboneKind::TinyConv => level
                        .conv2d(&self.bk_stage_w[l - 1], Some(&self.bk_stage_b[l - 1]), 2, 0)
                        .gelu(),
                    BackboneKind::TinyPatch => {
                        // factor-2 bilinear resize is an exact 2x2 mean pool
                        // on even sizes; a 1x1 conv then mixes channels
                        let sh = level.shape();
                        level
                            .resize_bilinear2d(sh[1] / 2, sh[2] / 2)
                            .conv2d(&self.bk_stage_w[l - 1], Some(&self.bk_stage_b[l - 1]), 1, 0)
                            .gelu()
                    }
                };
                raw[l].push(level.clone());
            }
        }

        // top-down FPN fusion
        let n_cams = images.len();
        let mut fused: Vec<Vec<Tensor>> = vec![Vec::new(); self.cfg.n_levels];
        for cam in 0..n_cams {
            let mut top: Option<Tensor> = None;
            for l in (0..self.cfg.n_levels).rev() {
                let lat = raw[l][cam].conv2d(&self.fpn_lateral_w[l], Some(&self.fpn_lateral_b[l]), 1, 0);
                let merged = match top {
                    Some(t) => {
                        let s = lat.shape();
                        lat.add(&t.resize_bilinear2d(s[1], s[2]))
                    }
                    None => lat,
                };
                let out = merged.conv2d(&self.fpn_out_w[l], Some(&self.fpn_out_b[l]), 1, 1);
                top = Some(merged);
                fused[l].push(out);
            }
        }
        debug_assert!(fused.iter().all(|level| level.len() == n_cams));

        let pyramid = FeaturePyramid {
            levels: fused,
            image_size: (h, w),
        };
        pyramid.validate()?;
        Ok(pyramid)
    }

    /// Metric sinusoidal positional encoding projected to C_b: [Nq, C_b].
    pub fn bev_positional_encoding(&self) -> Tensor {
        let raw = bev_fourier_features(&self.grid, self.cfg.fourier_freqs);
        Tensor::constant(raw.into_dyn()).linear(&self.pos_proj_w, Some(&self.pos_proj_b))
    }

    /// Content + positional queries, [Nq, C_b].
    pub fn queries(&self) -> Tensor {
        self.query_content.add(&self.bev_positional_encoding())
    }

    pub fn lift_to_bev(&self, pyramid: &FeaturePyramid, rig: &CameraRig) -> Result<SceneTokenGrid> {
        Ok(self.lift_with_details(pyramid, rig)?.0)
    }

    /// The lift plus the post-softmax attention weights
    /// [Nq, heads, cams * levels * K] for inspection in tests.
    pub fn lift_with_details(
        &self,
        pyramid: &FeaturePyramid,
        rig: &CameraRig,
    ) -> Result<(SceneTokenGrid, ArrayD<f64>)> {
        let cfg = &self.cfg;
        if pyramid.n_cameras() != rig.len() {
            return Err(Error::ShapeMismatch(format!(
                "pyramid has {} cameras, rig has {}",
                pyramid.n_cameras(),
                rig.len()
            )));
        }
        if pyramid.n_levels() != cfg.n_levels {
            return Err(Error::ShapeMismatch("pyramid level count mismatch".into()));
        }
        let nq = self.grid.n_cells();
        let n_cams = rig.len();
        let heads = cfg.n_heads;
        let k = cfg.n_offsets;
        let levels = cfg.n_levels;
        let dh = cfg.bev_channels / heads;
        let bins = self.grid.n_height_bins;
        let (img_h, img_w) = pyramid.image_size;

        let q = self.queries(); // [Nq, C_b]
        // offsets in image pixels, [Nq, heads, levels, K, 2]
        let offsets = q.linear(&self.offset_w, Some(&self.offset_b)).reshape(&[
            nq,
            heads,
            levels,
            k,
            2,
        ]);
        // content attention logits [Nq, heads, levels*K]
        let content_logits = q.linear(&self.attn_w, Some(&self.attn_b)).reshape(&[
            nq,
            heads,
            levels * k,
        ]);

        let refs: Vec<CameraRefs> = rig
            .cameras
            .iter()
            .map(|cam| camera_refs(cam, &self.grid))
            .collect::<Result<Vec<_>>>()?;

        // per-camera logits with the visibility penalty, stacked later
        let mut cam_logits: Vec<Tensor> = Vec::with_capacity(n_cams);
        // per-camera bin-averaged values [Nq, heads, levels*K, dh]
        let mut cam_values: Vec<Tensor> = Vec::with_capacity(n_cams);

        for (ci, cref) in refs.iter().enumerate() {
            // geometry logits from the normalized mean reference pixel
            let mut geo_in = ArrayD::<f64>::zeros(IxDyn(&[nq, 2]));
            for j in 0..nq {
                geo_in[[j, 0]] = cref.mean_uv_norm[j].0;
                geo_in[[j, 1]] = cref.mean_uv_norm[j].1;
            }
            let geo = Tensor::constant(geo_in).linear(&self.geo_w, Some(&self.geo_b)); // [Nq, heads]
            let geo_expanded = geo
                .reshape(&[nq, heads, 1])
                .index_select(2, &vec![0; levels * k]); // [Nq, heads, levels*K]

            let mut penalty = ArrayD::<f64>::zeros(IxDyn(&[nq, heads, levels * k]));
            for j in 0..nq {
                if !cref.visible[j] {
                    for h in 0..heads {
                        for s in 0..levels * k {
                            penalty[[j, h, s]] = -VIS_PENALTY;
                        }
                    }
                }
            }
            cam_logits.push(
                content_logits
                    .add(&geo_expanded)
                    .add(&Tensor::constant(penalty)),
            );

            // gather values: per level, coords [Nq*heads*K*bins, 2] built as a
            // graph expression of the offsets so their gradients flow through
            // the bilinear sampling weights
            let mut level_vals: Vec<Tensor> = Vec::with_capacity(levels);
            for l in 0..levels {
                let feat = &pyramid.levels[l][ci];
                let fs = feat.shape();
                let (fh, fw) = (fs[1], fs[2]);
                let sx = fw as f64 / img_w as f64;
                let sy = fh as f64 / img_h as f64;
                let p_count = nq * heads * k * bins;
                // base[i] = (u_ref * sx - 0.5, v_ref * sy - 0.5), scale = (sx, sy)
                let mut base = ArrayD::<f64>::zeros(IxDyn(&[p_count, 2]));
                let mut scale = ArrayD::<f64>::zeros(IxDyn(&[p_count, 2]));
                let mut idx = 0usize;
                for j in 0..nq {
                    for _h in 0..heads {
                        for _kk in 0..k {
                            for b in 0..bins {
                                let (u, v) = cref.uv[b][j];
                                base[[idx, 0]] = u * sx - 0.5;
                                base[[idx, 1]] = v * sy - 0.5;
                                scale[[idx, 0]] = sx;
                                scale[[idx, 1]] = sy;
                                idx += 1;
                            }
                        }
                    }
                }
                // offsets for this level, repeated across bins in (j, h, k, b) order
                let off_l = offsets
                    .slice(2, l, l + 1)
                    .reshape(&[nq, heads, k, 1, 2])
                    .index_select(3, &vec![0; bins])
                    .reshape(&[p_count, 2]);
                let coords = off_l
                    .mul(&Tensor::constant(scale))
                    .add(&Tensor::constant(base));
                let gathered = feat.grid_sample_points(&coords); // [P, C]
                let projected = gathered.matmul(&self.value_w[l]); // [P, C_b]
                let v = projected
                    .reshape(&[nq, heads, k, bins, cfg.bev_channels])
                    .mean_axis(3); // [Nq, heads, K, C_b]
                level_vals.push(v);
            }
            // [Nq, heads, levels, K, C_b] -> [Nq, heads, levels*K, C_b]
            let stacked = Tensor::stack(&level_vals, 2).reshape(&[
                nq,
                heads,
                levels * k,
                cfg.bev_channels,
            ]);
            cam_values.push(stacked);
        }

        // softmax over all cameras' samples jointly, per query per head
        let all_logits = Tensor::concat(&cam_logits, 2); // [Nq, heads, cams*levels*K]
        let alpha = all_logits.softmax_last();
        let alpha_arr = alpha.to_array();

        let all_values = Tensor::concat(&cam_values, 2); // [Nq, heads, cams*levels*K, C_b]
        // head h uses its own slice of the projected value channels
        let s_total = n_cams * levels * k;
        let mut head_outputs: Vec<Tensor> = Vec::with_capacity(heads);
        for h in 0..heads {
            let vals_h = all_values
                .slice(1, h, h + 1)
                .slice(3, h * dh, (h + 1) * dh)
                .reshape(&[nq, s_total, dh]);
            let alpha_h = alpha
                .slice(1, h, h + 1)
                .reshape(&[nq, s_total, 1])
                .index_select(2, &vec![0; dh]);
            head_outputs.push(vals_h.mul(&alpha_h).sum_axis(1)); // [Nq, dh]
        }
        let attended = Tensor::concat(&head_outputs, 1); // [Nq, C_b]
        let out = attended.linear(&self.out_w, Some(&self.out_b));

        // blind cells keep the pure residual query
        let mut blind_mask = ArrayD::<f64>::zeros(IxDyn(&[nq, cfg.bev_channels]));
        for j in 0..nq {
            let any_visible = refs.iter().any(|r| r.visible[j]);
            if any_visible {
                for c in 0..cfg.bev_channels {
                    blind_mask[[j, c]] = 1.0;
                }
            }
        }
        let tokens = q
            .add(&out.mul(&Tensor::constant(blind_mask)))
            .reshape(&[self.grid.h_b, self.grid.w_b, cfg.bev_channels]);
        Ok((SceneTokenGrid { tokens }, alpha_arr))
    }
}

/// Images as [3, H, W] tensors from the renderer's (H, W, 3) layout.
pub fn image_to_tensor(img: &Array3<f64>) -> Tensor {
    let (h, w, c) = img.dim();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[ch, y, x]] = img[[y, x, ch]];
            }
        }
    }
    Tensor::constant(out)
}
