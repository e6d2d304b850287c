//! Multi-camera pinhole geometry: projection, Plücker rays, bilinear
//! sampling, and frustum visibility.
//!
//! Everything here is a pure function of immutable inputs. The rest of the
//! crate treats this module as ground truth: the renderer casts its rays, the
//! encoder projects its reference points, and the decoder derives its
//! attention mask from [`compute_visibility_mask`].
//!
//! Conventions: the ego frame is the LiDAR frame of the BEV range, extrinsics
//! map ego to camera (`x_cam = R x_ego + t`), and pixel coordinates are
//! continuous with the image spanning `[0, W) x [0, H)`.

use crate::error::{Error, Result};
use crate::tensor::bilinear_weights;
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

/// Near-plane epsilon: a point counts as "in front" only if its camera-frame
/// depth exceeds this, which keeps the perspective divide away from zero.
pub const Z_EPS: f64 = 1e-4;

/// One pinhole camera: intrinsics `K`, extrinsics `[R|t]` (ego to camera),
/// and its pixel extent.
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub height: usize,
    pub width: usize,
    pub camera_id: usize,
}

impl CameraModel {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        height: usize,
        width: usize,
        camera_id: usize,
    ) -> Result<Self> {
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(Error::InvalidCamera("focal entries must be positive".into()));
        }
        if k[(1, 0)].abs() > 1e-9 || k[(2, 0)].abs() > 1e-9 || k[(2, 1)].abs() > 1e-9 {
            return Err(Error::InvalidCamera("K must be upper-triangular".into()));
        }
        let rtr = r.transpose() * r;
        if (rtr - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::InvalidCamera("R is not orthonormal".into()));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera("det(R) must be +1".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        Ok(CameraModel {
            k,
            r,
            t,
            height,
            width,
            camera_id,
        })
    }

    /// Camera center expressed in the ego frame.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }
}

/// An ordered set of cameras; ids must be `0..N-1`.
#[derive(Clone, Debug)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self> {
        for (i, cam) in cameras.iter().enumerate() {
            if cam.camera_id != i {
                return Err(Error::InvalidCamera(format!(
                    "camera ids must be 0..N-1 in order, got {} at position {i}",
                    cam.camera_id
                )));
            }
        }
        Ok(CameraRig { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Stable content hash, used to stamp derived artifacts.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        for cam in &self.cameras {
            for v in cam.k.iter().chain(cam.r.iter()).chain(cam.t.iter()) {
                h.write_f64(*v);
            }
            h.write_u64(cam.height as u64);
            h.write_u64(cam.width as u64);
        }
        h.finish()
    }
}

/// Metric extent and resolution of the BEV grid.
///
/// `pc_range` is `[x_min, y_min, z_min, x_max, y_max, z_max]` in meters;
/// cell `(iy, ix)` covers a rectangle whose center is returned by
/// [`BevGridSpec::cell_center`]. Flat cell index is `iy * w_b + ix`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BevGridSpec {
    pub pc_range: [f64; 6],
    pub h_b: usize,
    pub w_b: usize,
    pub n_height_bins: usize,
}

impl BevGridSpec {
    pub fn new(pc_range: [f64; 6], h_b: usize, w_b: usize, n_height_bins: usize) -> Result<Self> {
        for a in 0..3 {
            if pc_range[a + 3] <= pc_range[a] {
                return Err(Error::Config(format!(
                    "pc_range max must exceed min on axis {a}"
                )));
            }
        }
        if h_b == 0 || w_b == 0 || n_height_bins == 0 {
            return Err(Error::Config("grid dimensions must be >= 1".into()));
        }
        Ok(BevGridSpec {
            pc_range,
            h_b,
            w_b,
            n_height_bins,
        })
    }

    /// The published full-scale range: [-51.2, -51.2, -5.0, 51.2, 51.2, 3.0].
    pub fn standard_range() -> [f64; 6] {
        [-51.2, -51.2, -5.0, 51.2, 51.2, 3.0]
    }

    pub fn n_cells(&self) -> usize {
        self.h_b * self.w_b
    }

    /// Metric (x, y) center of cell (iy, ix).
    pub fn cell_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        let [x_min, y_min, _, x_max, y_max, _] = self.pc_range;
        let x = x_min + (ix as f64 + 0.5) * (x_max - x_min) / self.w_b as f64;
        let y = y_min + (iy as f64 + 0.5) * (y_max - y_min) / self.h_b as f64;
        (x, y)
    }

    /// Uniformly spaced height-bin centers across [z_min, z_max].
    pub fn height_bin_centers(&self) -> Vec<f64> {
        let [_, _, z_min, _, _, z_max] = self.pc_range;
        let n = self.n_height_bins;
        (0..n)
            .map(|k| z_min + (k as f64 + 0.5) * (z_max - z_min) / n as f64)
            .collect()
    }

    pub fn flat_index(&self, iy: usize, ix: usize) -> usize {
        iy * self.w_b + ix
    }

    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        for v in self.pc_range {
            h.write_f64(v);
        }
        h.write_u64(self.h_b as u64);
        h.write_u64(self.w_b as u64);
        h.write_u64(self.n_height_bins as u64);
        h.finish()
    }
}

/// A 3D line in Plücker form: unit direction and moment `m = o × d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PluckerRay {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl PluckerRay {
    /// The point on the ray at parameter `s` from the given origin.
    pub fn point_at(&self, origin: &Vector3<f64>, s: f64) -> Vector3<f64> {
        origin + self.direction * s
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.direction.x,
            self.direction.y,
            self.direction.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
        ]
    }
}

/// Result of projecting one point into one camera.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Project ego-frame points through `K [R|t]` with perspective division.
///
/// A projection is valid iff the camera-frame depth exceeds [`Z_EPS`] and the
/// pixel lands inside `[0, W) x [0, H)`. Behind-camera points still report
/// their (meaningless) pixel coordinates but are flagged invalid.
pub fn project_points(points: &[Vector3<f64>], camera: &CameraModel) -> Result<Vec<Projection>> {
    if camera.k[(0, 0)].abs() < 1e-12 || camera.k[(1, 1)].abs() < 1e-12 {
        return Err(Error::InvalidCamera("degenerate focal length".into()));
    }
    for p in points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::RejectedInput("non-finite point".into()));
        }
    }
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let pc = camera.r * p + camera.t;
        let uvw = camera.k * pc;
        let z = uvw.z;
        let (u, v) = if z.abs() > 0.0 {
            (uvw.x / z, uvw.y / z)
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        let valid = z > Z_EPS
            && u >= 0.0
            && u < camera.width as f64
            && v >= 0.0
            && v < camera.height as f64;
        out.push(Projection {
            u,
            v,
            depth: z,
            valid,
        });
    }
    Ok(out)
}

/// Back-project a pixel into its Plücker viewing ray in the ego frame.
///
/// Origin is the camera center `-Rᵀ t`; direction is the normalized
/// `Rᵀ K⁻¹ (u, v, 1)ᵀ`; moment is `o × d`.
pub fn compute_plucker_ray(camera: &CameraModel, pixel: (f64, f64)) -> Result<PluckerRay> {
    let k_inv = camera
        .k
        .try_inverse()
        .ok_or_else(|| Error::InvalidCamera("singular K".into()))?;
    let (u, v) = pixel;
    let dir_cam = k_inv * Vector3::new(u, v, 1.0);
    let dir_ego = camera.r.transpose() * dir_cam;
    let norm = dir_ego.norm();
    if norm < 1e-12 {
        return Err(Error::InvalidCamera("zero ray direction".into()));
    }
    let direction = dir_ego / norm;
    let origin = camera.center();
    Ok(PluckerRay {
        direction,
        moment: origin.cross(&direction),
    })
}

/// Bilinear interpolation on an `[H, W, C]` map at index-space `(u, v)`.
/// Out-of-bounds coordinates return the zero vector.
pub fn bilinear_sample(feature_map: ArrayView3<'_, f64>, uv: (f64, f64)) -> Vec<f64> {
    let (h, w, c) = feature_map.dim();
    let mut out = vec![0.0; c];
    if let Some(taps) = bilinear_weights(uv.0, uv.1, w, h) {
        for &(iy, ix, wt) in &taps {
            for (ch, slot) in out.iter_mut().enumerate() {
                *slot += feature_map[[iy, ix, ch]] * wt;
            }
        }
    }
    out
}

/// Boolean (camera, BEV cell) visibility relation with provenance hashes.
#[derive(Clone, Debug)]
pub struct VisibilityMask {
    /// Shape (N, H_b * W_b); `values[[i, j]]` is true iff cell j is visible
    /// from camera i.
    pub values: Array2<bool>,
    pub rig_hash: u64,
    pub grid_hash: u64,
}

impl VisibilityMask {
    pub fn n_cameras(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.values.ncols()
    }

    /// Cells visible from no camera.
    pub fn blind_cells(&self) -> Vec<usize> {
        (0..self.n_cells())
            .filter(|&j| (0..self.n_cameras()).all(|i| !self.values[[i, j]]))
            .collect()
    }
}

/// Mark cell j visible from camera i iff any of its height-bin samples at the
/// cell center projects validly (in front of the camera and inside the image).
pub fn compute_visibility_mask(rig: &CameraRig, grid: &BevGridSpec) -> Result<VisibilityMask> {
    let heights = grid.height_bin_centers();
    let mut values = Array2::from_elem((rig.len(), grid.n_cells()), false);
    for (i, cam) in rig.cameras.iter().enumerate() {
        for iy in 0..grid.h_b {
            for ix in 0..grid.w_b {
                let (x, y) = grid.cell_center(iy, ix);
                let samples: Vec<Vector3<f64>> =
                    heights.iter().map(|&z| Vector3::new(x, y, z)).collect();
                let projs = project_points(&samples, cam)?;
                if projs.iter().any(|p| p.valid) {
                    values[[i, grid.flat_index(iy, ix)]] = true;
                }
            }
        }
    }
    Ok(VisibilityMask {
        values,
        rig_hash: rig.content_hash(),
        grid_hash: grid.content_hash(),
    })
}

// --- rig (de)serialization ----------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    camera_id: usize,
    /// Row-major 3x3.
    k: [f64; 9],
    /// Row-major 3x3.
    r: [f64; 9],
    t: [f64; 3],
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct RigRecord {
    cameras: Vec<CameraRecord>,
}

impl CameraRig {
    pub fn to_json(&self) -> String {
        let rec = RigRecord {
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let mut k = [0.0; 9];
                    let mut r = [0.0; 9];
                    for row in 0..3 {
                        for col in 0..3 {
                            k[row * 3 + col] = c.k[(row, col)];
                            r[row * 3 + col] = c.r[(row, col)];
                        }
                    }
                    CameraRecord {
                        camera_id: c.camera_id,
                        k,
                        r,
                        t: [c.t.x, c.t.y, c.t.z],
                        height: c.height,
                        width: c.width,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&rec).expect("rig serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RigRecord = serde_json::from_str(text)?;
        let cameras = rec
            .cameras
            .iter()
            .map(|c| {
                CameraModel::new(
                    Matrix3::from_row_slice(&c.k),
                    Matrix3::from_row_slice(&c.r),
                    Vector3::new(c.t[0], c.t[1], c.t[2]),
                    c.height,
                    c.width,
                    c.camera_id,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        CameraRig::new(cameras)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        CameraRig::from_json(&text)
    }
}

// --- rig presets ----------------------------------------------------------------

/// Intrinsics with the principal point at the image center.
pub fn centered_intrinsics(focal: f64, height: usize, width: usize) -> Matrix3<f64> {
    Matrix3::new(
        focal,
        0.0,
        width as f64 / 2.0,
        0.0,
        focal,
        height as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    )
}

/// Rotation taking the ego frame (x right, y forward, z up) to a camera frame
/// (x right, y down, z forward) whose optical axis points along `yaw` radians
/// counterclockwise from +y, tilted down by `pitch_down` radians.
pub fn camera_rotation(yaw: f64, pitch_down: f64) -> Matrix3<f64> {
    // base: looking along +y: cam x = ego x, cam y = -ego z, cam z = ego y
    let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
    let rot_yaw = Matrix3::new(
        yaw.cos(),
        -yaw.sin(),
        0.0,
        yaw.sin(),
        yaw.cos(),
        0.0,
        0.0,
        0.0,
        1.0,
    );
    // pitch about the camera x axis, tilting the optical axis downward
    let rot_pitch = Matrix3::new(
        1.0,
        0.0,
        0.0,
        0.0,
        pitch_down.cos(),
        -pitch_down.sin(),
        0.0,
        pitch_down.sin(),
        pitch_down.cos(),
    );
    rot_pitch * base * rot_yaw.transpose()
}

/// Place a camera at `position` (ego frame) with the given yaw/pitch.
pub fn make_camera(
    camera_id: usize,
    position: Vector3<f64>,
    yaw: f64,
    pitch_down: f64,
    focal: f64,
    height: usize,
    width: usize,
) -> Result<CameraModel> {
    let r = camera_rotation(yaw, pitch_down);
    let t = -(r * position);
    CameraModel::new(
        centered_intrinsics(focal, height, width),
        r,
        t,
        height,
        width,
        camera_id,
    )
}

/// Two forward cameras with a small stereo-like yaw split.
pub fn stereo_rig(height: usize, width: usize, focal: f64) -> Result<CameraRig> {
    let cams = vec![
        make_camera(
            0,
            Vector3::new(-0.5, 0.0, 1.6),
            0.25,
            0.08,
            focal,
            height,
            width,
        )?,
        make_camera(
            1,
            Vector3::new(0.5, 0.0, 1.6),
            -0.25,
            0.08,
            focal,
            height,
            width,
        )?,
    ];
    CameraRig::new(cams)
}

/// Six cameras at 60-degree yaw spacing around the ego vehicle.
pub fn surround_rig(height: usize, width: usize, focal: f64) -> Result<CameraRig> {
    let mut cams = Vec::with_capacity(6);
    for i in 0..6 {
        let yaw = i as f64 * std::f64::consts::FRAC_PI_3;
        let offset = Vector3::new(-yaw.sin() * 0.8, yaw.cos() * 0.8, 1.6);
        cams.push(make_camera(i, offset, yaw, 0.08, focal, height, width)?);
    }
    CameraRig::new(cams)
}

// --- hashing ----------------------------------------------------------------------

/// FNV-1a; stable across runs and platforms, unlike the std hasher.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}
