//! Procedural multi-camera scenes with analytically exact supervision.
//!
//! A scene is a ground plane plus labeled axis-aligned boxes, so every ray
//! intersection is closed form and the renderer doubles as its own oracle.
//! From one scene we derive aligned RGB, dense z-depth, sparse semantics,
//! occupancy labels, and sparse metric anchors.

use crate::error::{Error, Result};
use crate::geometry::{compute_plucker_ray, CameraModel, CameraRig};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Depth sentinel for sky pixels; sky is excluded from depth supervision.
pub const FAR_PLANE: f64 = 200.0;

/// Semantic label for unsupervised pixels.
pub const IGNORE_LABEL: u16 = 255;

pub const CLASS_EMPTY: u16 = 0;
pub const CLASS_ROAD: u16 = 1;
pub const CLASS_CAR: u16 = 2;
pub const CLASS_BUILDING: u16 = 3;
pub const CLASS_VEGETATION: u16 = 4;
pub const CLASS_PEDESTRIAN: u16 = 5;

/// empty + road + the four box classes.
pub const N_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; N_CLASSES] =
    ["empty", "road", "car", "building", "vegetation", "pedestrian"];

/// Box classes in sampling order.
const BOX_CLASSES: [u16; 4] = [CLASS_CAR, CLASS_BUILDING, CLASS_VEGETATION, CLASS_PEDESTRIAN];

const BASE_ALBEDO: [[f64; 3]; N_CLASSES] = [
    [0.0, 0.0, 0.0],    // empty (unused)
    [0.32, 0.32, 0.34], // road
    [0.75, 0.22, 0.2],  // car
    [0.62, 0.58, 0.5],  // building
    [0.2, 0.55, 0.22],  // vegetation
    [0.85, 0.65, 0.35], // pedestrian
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class: u16,
    pub albedo: [f64; 3],
}

impl SceneBox {
    pub fn min(&self) -> Vector3<f64> {
        Vector3::new(
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        )
    }

    pub fn max(&self) -> Vector3<f64> {
        Vector3::new(
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        )
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let lo = self.min();
        let hi = self.max();
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    }

    fn overlaps_xy(&self, other: &SceneBox, margin: f64) -> bool {
        let (alo, ahi) = (self.min(), self.max());
        let (blo, bhi) = (other.min(), other.max());
        alo.x - margin < bhi.x
            && ahi.x + margin > blo.x
            && alo.y - margin < bhi.y
            && ahi.y + margin > blo.y
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Top surface of the road slab.
    pub ground_z: f64,
    /// Vertical extent of the road slab below `ground_z` (for occupancy).
    pub ground_thickness: f64,
    pub boxes: Vec<SceneBox>,
    pub sky_color: [f64; 3],
    pub sun_dir: [f64; 3],
    pub ambient: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Semantic class of a 3D point by containment (road slab or a box).
    pub fn class_at(&self, p: &Vector3<f64>) -> u16 {
        for b in &self.boxes {
            if b.contains(p) {
                return b.class;
            }
        }
        if p.z <= self.ground_z && p.z >= self.ground_z - self.ground_thickness {
            return CLASS_ROAD;
        }
        CLASS_EMPTY
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_boxes_min: usize,
    pub n_boxes_max: usize,
    /// Placement square half-extent around the ego, meters.
    pub placement_radius: f64,
    /// Boxes never spawn closer than this to the origin (where cameras sit).
    pub clear_radius: f64,
    /// Sampling probabilities over [car, building, vegetation, pedestrian].
    pub class_probs: [f64; 4],
    pub ground_z: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_boxes_min: 3,
            n_boxes_max: 7,
            placement_radius: 20.0,
            clear_radius: 2.5,
            class_probs: [0.4, 0.25, 0.2, 0.15],
            ground_z: 0.0,
            max_retries: 200,
        }
    }
}

fn size_range(class: u16) -> ([f64; 3], [f64; 3]) {
    match class {
        CLASS_CAR => ([1.6, 3.5, 1.3], [2.1, 5.0, 1.8]),
        CLASS_BUILDING => ([4.0, 4.0, 3.0], [9.0, 9.0, 7.0]),
        CLASS_VEGETATION => ([1.0, 1.0, 1.5], [3.0, 3.0, 4.5]),
        CLASS_PEDESTRIAN => ([0.5, 0.5, 1.5], [0.8, 0.8, 1.9]),
        _ => unreachable!("not a box class"),
    }
}

/// Deterministic scene from a seed: ground plane plus non-overlapping boxes
/// resting on it.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_boxes = rng.gen_range(config.n_boxes_min..=config.n_boxes_max);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    let prob_sum: f64 = config.class_probs.iter().sum();

    for _ in 0..n_boxes {
        let mut placed = false;
        for _ in 0..config.max_retries {
            let mut pick = rng.gen_range(0.0..prob_sum);
            let mut class = BOX_CLASSES[3];
            for (i, &p) in config.class_probs.iter().enumerate() {
                if pick < p {
                    class = BOX_CLASSES[i];
                    break;
                }
                pick -= p;
            }
            let (lo, hi) = size_range(class);
            let size = [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ];
            let r = config.placement_radius;
            let cx = rng.gen_range(-r..r);
            let cy = rng.gen_range(-r..r);
            if cx.hypot(cy) < config.clear_radius + size[0].max(size[1]) / 2.0 {
                continue;
            }
            let candidate = SceneBox {
                center: [cx, cy, config.ground_z + size[2] / 2.0],
                size,
                class,
                albedo: jitter_albedo(class, &mut rng),
            };
            if boxes.iter().any(|b| candidate.overlaps_xy(b, 0.5)) {
                continue;
            }
            boxes.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place box after {} retries",
                config.max_retries
            )));
        }
    }

    Ok(SyntheticScene {
        ground_z: config.ground_z,
        ground_thickness: 0.5,
        boxes,
        sky_color: [0.55, 0.7, 0.9],
        sun_dir: normalize3([0.3, -0.2, 0.9]),
        ambient: 0.35,
        seed,
    })
}

fn jitter_albedo(class: u16, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base = BASE_ALBEDO[class as usize];
    [
        (base[0] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
        (base[1] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
        (base[2] + rng.gen_range(-0.08..0.08)).clamp(0.05, 0.95),
    ]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

// --- analytic ray casting -----------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct RayHit {
    /// Ray parameter (meters along the unit direction).
    pub t: f64,
    pub class: u16,
    pub albedo: [f64; 3],
    pub normal: Vector3<f64>,
}

const T_MIN: f64 = 1e-9;

fn ray_plane_z(origin: &Vector3<f64>, dir: &Vector3<f64>, z0: f64) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (z0 - origin.z) / dir.z;
    (t > T_MIN).then_some(t)
}

/// Slab-method ray/AABB entry point with the entry-face normal.
fn ray_aabb(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;
    let mut near_sign = -1.0f64;
    for a in 0..3 {
        let o = origin[a];
        let d = dir[a];
        if d.abs() < 1e-12 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let mut t0 = (lo[a] - o) / d;
        let mut t1 = (hi[a] - o) / d;
        let mut sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            near_axis = a;
            near_sign = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < T_MIN || t_near < T_MIN {
        // starting inside (or box behind) counts as no surface hit
        return None;
    }
    let mut normal = Vector3::zeros();
    normal[near_axis] = near_sign;
    Some((t_near, normal))
}

/// Nearest positive intersection of a ray with the scene.
pub fn intersect_scene(
    scene: &SyntheticScene,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    if let Some(t) = ray_plane_z(origin, dir, scene.ground_z) {
        best = Some(RayHit {
            t,
            class: CLASS_ROAD,
            albedo: BASE_ALBEDO[CLASS_ROAD as usize],
            normal: Vector3::new(0.0, 0.0, 1.0),
        });
    }
    for b in &scene.boxes {
        if let Some((t, normal)) = ray_aabb(origin, dir, &b.min(), &b.max()) {
            if best.as_ref().is_none_or(|h| t < h.t) {
                best = Some(RayHit {
                    t,
                    class: b.class,
                    albedo: b.albedo,
                    normal,
                });
            }
        }
    }
    best
}

fn shade(scene: &SyntheticScene, hit: &RayHit) -> [f64; 3] {
    let sun = Vector3::new(scene.sun_dir[0], scene.sun_dir[1], scene.sun_dir[2]);
    let diffuse = hit.normal.dot(&sun).max(0.0);
    let gain = scene.ambient + (1.0 - scene.ambient) * diffuse;
    [
        (hit.albedo[0] * gain).clamp(0.0, 1.0),
        (hit.albedo[1] * gain).clamp(0.0, 1.0),
        (hit.albedo[2] * gain).clamp(0.0, 1.0),
    ]
}

/// RGB / z-depth / class for a single continuous pixel coordinate.
pub fn render_pixel(
    scene: &SyntheticScene,
    camera: &CameraModel,
    pixel: (f64, f64),
) -> Result<([f64; 3], f64, u16)> {
    let ray = compute_plucker_ray(camera, pixel)?;
    let origin = camera.center();
    match intersect_scene(scene, &origin, &ray.direction) {
        Some(hit) => {
            // z-depth: with the camera center at the camera-frame origin,
            // depth = t * (R d)_z
            let cos_z = (camera.r * ray.direction).z;
            Ok((shade(scene, &hit), hit.t * cos_z, hit.class))
        }
        None => Ok((scene.sky_color, FAR_PLANE, CLASS_EMPTY)),
    }
}

/// Per-camera rendered modalities. `rgb[i]` is (H, W, 3) in [0, 1];
/// `depth[i]` is camera-frame z in meters (FAR_PLANE for sky);
/// `semantics[i]` is dense class labels.
pub struct RenderedViews {
    pub rgb: Vec<Array3<f64>>,
    pub depth: Vec<Array2<f64>>,
    pub semantics: Vec<Array2<u16>>,
}

/// Ray-cast the full rig at pixel centers (col + 0.5, row + 0.5).
pub fn render_views(scene: &SyntheticScene, rig: &CameraRig) -> Result<RenderedViews> {
    let mut rgb = Vec::with_capacity(rig.len());
    let mut depth = Vec::with_capacity(rig.len());
    let mut semantics = Vec::with_capacity(rig.len());
    for cam in &rig.cameras {
        let (h, w) = (cam.height, cam.width);
        let mut img = Array3::<f64>::zeros((h, w, 3));
        let mut dep = Array2::<f64>::zeros((h, w));
        let mut sem = Array2::<u16>::zeros((h, w));
        for row in 0..h {
            for col in 0..w {
                let (color, d, class) =
                    render_pixel(scene, cam, (col as f64 + 0.5, row as f64 + 0.5))?;
                img[[row, col, 0]] = color[0];
                img[[row, col, 1]] = color[1];
                img[[row, col, 2]] = color[2];
                dep[[row, col]] = d;
                sem[[row, col]] = class;
            }
        }
        rgb.push(img);
        depth.push(dep);
        semantics.push(sem);
    }
    Ok(RenderedViews {
        rgb,
        depth,
        semantics,
    })
}

// --- occupancy --------------------------------------------------------------

/// Metric extent and resolution of the occupancy label/prediction volume.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OccGridSpec {
    pub pc_range: [f64; 6],
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl OccGridSpec {
    pub fn new(pc_range: [f64; 6], nx: usize, ny: usize, nz: usize) -> Result<Self> {
        for a in 0..3 {
            if pc_range[a + 3] <= pc_range[a] {
                return Err(Error::Config("occ pc_range max must exceed min".into()));
            }
        }
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Config("occ grid dims must be >= 1".into()));
        }
        Ok(OccGridSpec { pc_range, nx, ny, nz })
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let [x_min, y_min, z_min, x_max, y_max, z_max] = self.pc_range;
        Vector3::new(
            x_min + (ix as f64 + 0.5) * (x_max - x_min) / self.nx as f64,
            y_min + (iy as f64 + 0.5) * (y_max - y_min) / self.ny as f64,
            z_min + (iz as f64 + 0.5) * (z_max - z_min) / self.nz as f64,
        )
    }
}

/// Voxelize a scene: each voxel takes the class of the object containing its
/// center. Output is indexed (x, y, z) — a scene property, independent of any
/// rig.
pub fn voxelize_scene(scene: &SyntheticScene, grid: &OccGridSpec) -> Array3<u16> {
    let mut labels = Array3::<u16>::zeros((grid.nx, grid.ny, grid.nz));
    for ix in 0..grid.nx {
        for iy in 0..grid.ny {
            for iz in 0..grid.nz {
                let c = scene.class_at(&grid.voxel_center(ix, iy, iz));
                labels[[ix, iy, iz]] = c;
            }
        }
    }
    labels
}

// --- supervision bundles ------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Anchor {
    /// Integer pixel coordinates.
    pub col: usize,
    pub row: usize,
    /// Metric z-depth, meters.
    pub depth: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsityConfig {
    /// Fraction of pixels keeping their semantic label (rest become 255).
    pub semantic_keep: f64,
    /// Anchors sampled per camera.
    pub n_anchors: usize,
    /// Corrupt pseudo depth with a random per-image affine + noise.
    pub corrupt_pseudo_depth: bool,
    pub pseudo_noise_std: f64,
    pub seed: u64,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        SparsityConfig {
            semantic_keep: 0.25,
            n_anchors: 128,
            corrupt_pseudo_depth: true,
            pseudo_noise_std: 0.02,
            seed: 0,
        }
    }
}

/// One training sample: all modalities consistent with the generating scene.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    /// Per camera, (H, W, 3) in [0, 1].
    pub images: Vec<Array3<f64>>,
    /// Per camera, metric z-depth (FAR_PLANE on sky).
    pub depth: Vec<Array2<f64>>,
    /// Per camera, true where depth is supervised (non-sky).
    pub depth_valid: Vec<Array2<bool>>,
    /// Per camera, sparse labels with 255 = unsupervised.
    pub semantics: Vec<Array2<u16>>,
    /// Per camera, the monocular-style depth stream: true depth through a
    /// random inverse affine plus noise (identity when corruption is off).
    pub pseudo_depth: Vec<Array2<f64>>,
    /// Per camera, the (a, b) such that `a * pseudo + b` recovers the true
    /// depth in expectation.
    pub injected_affine: Vec<(f64, f64)>,
    /// Per camera sparse metric anchors.
    pub anchors: Vec<Vec<Anchor>>,
    /// (X, Y, Z) voxel labels.
    pub occupancy: Array3<u16>,
    pub scene: SyntheticScene,
    pub rig_hash: u64,
}

/// Render a scene and assemble the aligned supervision set.
pub fn make_supervision(
    scene: &SyntheticScene,
    rig: &CameraRig,
    sparsity: &SparsityConfig,
    occ_grid: &OccGridSpec,
) -> Result<SampleRecord> {
    let views = render_views(scene, rig)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sparsity.seed ^ scene.seed.rotate_left(17));

    let mut semantics = Vec::with_capacity(rig.len());
    let mut pseudo_depth = Vec::with_capacity(rig.len());
    let mut injected = Vec::with_capacity(rig.len());
    let mut anchors = Vec::with_capacity(rig.len());
    let mut depth_valid = Vec::with_capacity(rig.len());

    for (i, cam) in rig.cameras.iter().enumerate() {
        let (h, w) = (cam.height, cam.width);
        let dense = &views.semantics[i];
        let mut sparse = Array2::<u16>::from_elem((h, w), IGNORE_LABEL);
        for row in 0..h {
            for col in 0..w {
                if sparsity.semantic_keep >= 1.0 || rng.gen_range(0.0..1.0) < sparsity.semantic_keep
                {
                    sparse[[row, col]] = dense[[row, col]];
                }
            }
        }
        semantics.push(sparse);

        let valid = views.depth[i].mapv(|d| d < FAR_PLANE);

        let (a_inj, b_inj) = if sparsity.corrupt_pseudo_depth {
            (rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0))
        } else {
            (1.0, 0.0)
        };
        // pseudo = (d - b) / a, so the alignment fit should recover (a, b)
        let mut pseudo = views.depth[i].mapv(|d| (d - b_inj) / a_inj);
        if sparsity.corrupt_pseudo_depth && sparsity.pseudo_noise_std > 0.0 {
            for v in pseudo.iter_mut() {
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                *v += sparsity.pseudo_noise_std * n;
            }
        }
        pseudo_depth.push(pseudo);
        injected.push((a_inj, b_inj));

        // anchors at non-sky pixels
        let candidates: Vec<(usize, usize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| valid[[r, c]])
            .collect();
        let mut cam_anchors = Vec::new();
        if !candidates.is_empty() {
            for _ in 0..sparsity.n_anchors {
                let (row, col) = candidates[rng.gen_range(0..candidates.len())];
                cam_anchors.push(Anchor {
                    col,
                    row,
                    depth: views.depth[i][[row, col]],
                });
            }
        }
        anchors.push(cam_anchors);
        depth_valid.push(valid);
    }

    Ok(SampleRecord {
        images: views.rgb,
        depth: views.depth,
        depth_valid,
        semantics,
        pseudo_depth,
        injected_affine: injected,
        anchors,
        occupancy: voxelize_scene(scene, occ_grid),
        scene: scene.clone(),
        rig_hash: rig.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_camera, stereo_rig};

    fn test_config() -> SceneConfig {
        SceneConfig {
            placement_radius: 14.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = test_config();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate_scene(8, &cfg).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn zero_boxes_gives_plane_and_sky_only() {
        let cfg = SceneConfig {
            n_boxes_min: 0,
            n_boxes_max: 0,
            ..test_config()
        };
        let scene = generate_scene(1, &cfg).unwrap();
        assert!(scene.boxes.is_empty());
        let rig = stereo_rig(16, 24, 12.0).unwrap();
        let views = render_views(&scene, &rig).unwrap();
        for sem in &views.semantics {
            for &c in sem.iter() {
                assert!(c == CLASS_ROAD || c == CLASS_EMPTY);
            }
        }
    }

    #[test]
    fn class_frequencies_track_config() {
        let cfg = SceneConfig {
            n_boxes_min: 5,
            n_boxes_max: 5,
            placement_radius: 24.0,
            ..test_config()
        };
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for seed in 0..1000u64 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for b in &scene.boxes {
                let idx = BOX_CLASSES.iter().position(|&c| c == b.class).unwrap();
                counts[idx] += 1;
                total += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / total as f64;
            let target = cfg.class_probs[i];
            assert!(
                (freq - target).abs() < 0.1 * target.max(0.1) + 0.03,
                "class {i}: freq {freq} vs target {target}"
            );
        }
    }

    #[test]
    fn face_on_box_depth_is_exact() {
        // camera looking along +y; box front face at y = 5
        let cam = make_camera(0, Vector3::new(0.0, 0.0, 1.0), 0.0, 0.0, 50.0, 33, 33).unwrap();
        let scene = SyntheticScene {
            ground_z: -10.0, // far below so the box is hit first
            ground_thickness: 0.5,
            boxes: vec![SceneBox {
                center: [0.0, 7.0, 1.0],
                size: [4.0, 4.0, 4.0],
                class: CLASS_CAR,
                albedo: [0.5, 0.2, 0.2],
            }],
            sky_color: [0.5, 0.5, 0.9],
            sun_dir: normalize3([0.0, 0.0, 1.0]),
            ambient: 0.3,
            seed: 0,
        };
        // principal point: exact optical axis
        let (_, depth, class) = render_pixel(&scene, &cam, (16.5, 16.5)).unwrap();
        assert!((depth - 5.0).abs() < 1e-12, "depth {depth}");
        assert_eq!(class, CLASS_CAR);
    }

    #[test]
    fn ground_depth_matches_closed_form() {
        // camera at height h pitched down by theta: central-ray depth = h / sin(theta)
        let h = 1.6;
        let theta: f64 = 0.2;
        let cam = make_camera(0, Vector3::new(0.0, 0.0, h), 0.0, theta, 60.0, 33, 33).unwrap();
        let scene = generate_scene(
            3,
            &SceneConfig {
                n_boxes_min: 0,
                n_boxes_max: 0,
                ..test_config()
            },
        )
        .unwrap();
        let (_, depth, class) = render_pixel(&scene, &cam, (16.5, 16.5)).unwrap();
        assert_eq!(class, CLASS_ROAD);
        // central ray: z-depth equals ray length
        assert!((depth - h / theta.sin()).abs() < 1e-9, "depth {depth}");
    }

    #[test]
    fn voxel_labels_follow_containment() {
        let scene = SyntheticScene {
            ground_z: 0.0,
            ground_thickness: 0.5,
            boxes: vec![SceneBox {
                center: [2.0, 2.0, 1.0],
                size: [2.0, 2.0, 2.0],
                class: CLASS_BUILDING,
                albedo: [0.5, 0.5, 0.5],
            }],
            sky_color: [0.5, 0.5, 0.9],
            sun_dir: normalize3([0.0, 0.0, 1.0]),
            ambient: 0.3,
            seed: 0,
        };
        let grid = OccGridSpec::new([-4.0, -4.0, -1.0, 4.0, 4.0, 3.0], 8, 8, 4).unwrap();
        let labels = voxelize_scene(&scene, &grid);
        // voxel containing the box interior: x = -4 + (6+0.5)*1 = 2.5 in [1, 3]
        assert_eq!(labels[[6, 6, 2]], CLASS_BUILDING);
        // free space far from the box, above ground
        assert_eq!(labels[[0, 0, 3]], CLASS_EMPTY);
        // road slab: z = -1 + (0+0.5)*1 = -0.5 within [-0.5, 0]
        assert_eq!(labels[[0, 0, 0]], CLASS_ROAD);
    }

    #[test]
    fn occupancy_ignores_rig() {
        let cfg = test_config();
        let scene = generate_scene(11, &cfg).unwrap();
        let grid = OccGridSpec::new([-16.0, -16.0, -1.0, 16.0, 16.0, 3.0], 16, 16, 4).unwrap();
        let sp = SparsityConfig::default();
        let a = make_supervision(&scene, &stereo_rig(16, 24, 12.0).unwrap(), &sp, &grid).unwrap();
        let b = make_supervision(
            &scene,
            &crate::geometry::surround_rig(16, 24, 12.0).unwrap(),
            &sp,
            &grid,
        )
        .unwrap();
        assert_eq!(a.occupancy, b.occupancy);
    }

    #[test]
    fn full_sparsity_keeps_all_labels() {
        let cfg = test_config();
        let scene = generate_scene(5, &cfg).unwrap();
        let rig = stereo_rig(12, 20, 10.0).unwrap();
        let grid = OccGridSpec::new([-16.0, -16.0, -1.0, 16.0, 16.0, 3.0], 8, 8, 4).unwrap();
        let sp = SparsityConfig {
            semantic_keep: 1.0,
            ..SparsityConfig::default()
        };
        let rec = make_supervision(&scene, &rig, &sp, &grid).unwrap();
        for sem in &rec.semantics {
            assert!(sem.iter().all(|&c| c != IGNORE_LABEL));
        }
    }

    #[test]
    fn rendered_depth_matches_slow_ray_marcher() {
        use rand::Rng;
        use rand::SeedableRng;
        let cfg = test_config();
        let scene = generate_scene(21, &cfg).unwrap();
        let cam = make_camera(0, Vector3::new(0.0, 0.0, 1.6), 0.1, 0.12, 40.0, 48, 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let mut checked = 0;
        for _ in 0..500 {
            let u = rng.gen_range(0.0..64.0);
            let v = rng.gen_range(0.0..48.0);
            let ray = compute_plucker_ray(&cam, (u, v)).unwrap();
            let origin = cam.center();
            // bracket by marching, then bisect the surface crossing
            let inside = |t: f64| {
                let p = origin + ray.direction * t;
                p.z <= scene.ground_z || scene.boxes.iter().any(|b| b.contains(&p))
            };
            let mut t_prev = 1e-6;
            let mut marched: Option<f64> = None;
            let mut t = 0.005;
            while t < 60.0 {
                if inside(t) {
                    let (mut lo, mut hi) = (t_prev, t);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if inside(mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    marched = Some(0.5 * (lo + hi));
                    break;
                }
                t_prev = t;
                t += 0.005;
            }
            let analytic = intersect_scene(&scene, &origin, &ray.direction);
            match (marched, analytic) {
                (Some(tm), Some(hit)) => {
                    assert!(
                        (tm - hit.t).abs() < 1e-4,
                        "marched {tm} vs analytic {} at ({u}, {v})",
                        hit.t
                    );
                    checked += 1;
                }
                (None, None) => {}
                (None, Some(hit)) if hit.t >= 60.0 => {}
                (m, a) => panic!(
                    "marcher and analytic disagree at ({u}, {v}): {m:?} vs {:?}",
                    a.map(|h| h.t)
                ),
            }
        }
        assert!(checked > 100, "too few surface hits checked: {checked}");
    }

    #[test]
    fn cross_modal_consistency() {
        // a supervised pixel's (depth, ray) lifted to 3D lands in an object of
        // its semantic class
        let cfg = test_config();
        let scene = generate_scene(31, &cfg).unwrap();
        let rig = stereo_rig(32, 48, 24.0).unwrap();
        let views = render_views(&scene, &rig).unwrap();
        for (i, cam) in rig.cameras.iter().enumerate() {
            for row in (0..32).step_by(5) {
                for col in (0..48).step_by(5) {
                    let class = views.semantics[i][[row, col]];
                    if class == CLASS_EMPTY {
                        continue;
                    }
                    let d = views.depth[i][[row, col]];
                    let ray =
                        compute_plucker_ray(cam, (col as f64 + 0.5, row as f64 + 0.5)).unwrap();
                    let cos_z = (cam.r * ray.direction).z;
                    let t = d / cos_z;
                    // step slightly past the surface along the ray
                    let p = cam.center() + ray.direction * (t + 1e-6);
                    assert_eq!(
                        scene.class_at(&p),
                        class,
                        "pixel ({row}, {col}) cam {i} depth {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn pseudo_depth_affine_is_recoverable_in_principle() {
        let cfg = test_config();
        let scene = generate_scene(41, &cfg).unwrap();
        let rig = stereo_rig(16, 24, 12.0).unwrap();
        let grid = OccGridSpec::new([-16.0, -16.0, -1.0, 16.0, 16.0, 3.0], 8, 8, 4).unwrap();
        let sp = SparsityConfig {
            pseudo_noise_std: 0.0,
            ..SparsityConfig::default()
        };
        let rec = make_supervision(&scene, &rig, &sp, &grid).unwrap();
        for i in 0..rig.len() {
            let (a, b) = rec.injected_affine[i];
            for &(r, c) in &[(3usize, 5usize), (10, 20)] {
                if rec.depth_valid[i][[r, c]] {
                    let lifted = a * rec.pseudo_depth[i][[r, c]] + b;
                    assert!((lifted - rec.depth[i][[r, c]]).abs() < 1e-9);
                }
            }
        }
    }
}
