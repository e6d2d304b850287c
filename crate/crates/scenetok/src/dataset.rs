//! On-disk dataset layout and the flat binary tensor format.
//!
//! A dataset directory looks like:
//!
//! ```text
//! out/
//!   manifest.json          sample list + split assignment + generation params
//!   rig.json               camera rig shared by all samples
//!   sample_00000/
//!     cam_0.png ...        rendered RGB, 8-bit
//!     depth.tsr            f64 (N, H, W) metric z-depth
//!     pseudo_depth.tsr     f64 (N, H, W) corrupted depth stream
//!     sem.tsr              u16 (N, H, W) sparse labels, 255 = unsupervised
//!     occ.tsr              u16 (X, Y, Z) occupancy labels
//!     anchors.json         per-camera sparse metric anchors + injected affine
//!     scene.json           generating scene description
//! ```
//!
//! `.tsr` files: magic `STSR`, version u8, dtype u8 (0 = f64 LE, 1 = u16 LE),
//! ndim u8, then ndim little-endian u32 dims, then the payload row-major.

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::world::{
    generate_scene, make_supervision, Anchor, OccGridSpec, SampleRecord, SceneConfig,
    SparsityConfig, SyntheticScene,
};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const TSR_MAGIC: [u8; 4] = *b"STSR";
const TSR_VERSION: u8 = 1;

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Dtype {
    F64 = 0,
    U16 = 1,
}

pub fn write_tsr_f64(path: &Path, data: &ArrayD<f64>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_header(&mut f, Dtype::F64, data.shape())?;
    let contiguous = data.as_standard_layout();
    for v in contiguous.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tsr_u16(path: &Path, data: &ArrayD<u16>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_header(&mut f, Dtype::U16, data.shape())?;
    let contiguous = data.as_standard_layout();
    for v in contiguous.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_header(f: &mut std::fs::File, dtype: Dtype, shape: &[usize]) -> Result<()> {
    f.write_all(&TSR_MAGIC)?;
    f.write_all(&[TSR_VERSION, dtype as u8, shape.len() as u8])?;
    for &d in shape {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_header(f: &mut std::fs::File) -> Result<(Dtype, Vec<usize>)> {
    let mut head = [0u8; 7];
    f.read_exact(&mut head)?;
    if head[0..4] != TSR_MAGIC {
        return Err(Error::Dataset("bad tensor magic".into()));
    }
    if head[4] != TSR_VERSION {
        return Err(Error::Dataset(format!("unsupported tensor version {}", head[4])));
    }
    let dtype = match head[5] {
        0 => Dtype::F64,
        1 => Dtype::U16,
        other => return Err(Error::Dataset(format!("unknown dtype code {other}"))),
    };
    let ndim = head[6] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    Ok((dtype, shape))
}

pub fn read_tsr_f64(path: &Path) -> Result<ArrayD<f64>> {
    let mut f = std::fs::File::open(path)?;
    let (dtype, shape) = read_header(&mut f)?;
    if dtype != Dtype::F64 {
        return Err(Error::Dataset(format!("{path:?} does not hold f64 data")));
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    f.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Dataset(e.to_string()))?)
}

pub fn read_tsr_u16(path: &Path) -> Result<ArrayD<u16>> {
    let mut f = std::fs::File::open(path)?;
    let (dtype, shape) = read_header(&mut f)?;
    if dtype != Dtype::U16 {
        return Err(Error::Dataset(format!("{path:?} does not hold u16 data")));
    }
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 2];
    f.read_exact(&mut buf)?;
    let data: Vec<u16> = buf
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Dataset(e.to_string()))?)
}

// --- sample IO --------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct AnchorFile {
    /// Per camera.
    anchors: Vec<Vec<Anchor>>,
    injected_affine: Vec<(f64, f64)>,
}

pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = record.images.len();
    for (i, img) in record.images.iter().enumerate() {
        let (h, w, _) = img.dim();
        let mut png = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (img[[y, x, 0]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (img[[y, x, 1]] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (img[[y, x, 2]] * 255.0).round().clamp(0.0, 255.0) as u8,
                ];
                png.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        png.save(dir.join(format!("cam_{i}.png")))
            .map_err(|e| Error::Dataset(e.to_string()))?;
    }

    let stack_f64 = |maps: &[Array2<f64>]| {
        let (h, w) = maps[0].dim();
        let mut out = Array3::<f64>::zeros((n, h, w));
        for (i, m) in maps.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), i).assign(m);
        }
        out.into_dyn()
    };
    write_tsr_f64(&dir.join("depth.tsr"), &stack_f64(&record.depth))?;
    write_tsr_f64(&dir.join("pseudo_depth.tsr"), &stack_f64(&record.pseudo_depth))?;

    let (h, w) = record.semantics[0].dim();
    let mut sem = Array3::<u16>::zeros((n, h, w));
    for (i, m) in record.semantics.iter().enumerate() {
        sem.index_axis_mut(ndarray::Axis(0), i).assign(m);
    }
    write_tsr_u16(&dir.join("sem.tsr"), &sem.into_dyn())?;
    write_tsr_u16(&dir.join("occ.tsr"), &record.occupancy.clone().into_dyn())?;

    let anchors = AnchorFile {
        anchors: record.anchors.clone(),
        injected_affine: record.injected_affine.clone(),
    };
    std::fs::write(
        dir.join("anchors.json"),
        serde_json::to_string_pretty(&anchors)?,
    )?;
    std::fs::write(dir.join("scene.json"), record.scene.to_json())?;
    Ok(())
}

/// A sample as loaded back from disk. RGB comes from the 8-bit PNGs, so image
/// values are quantized to 1/255 steps; all other modalities are bit exact.
pub struct LoadedSample {
    pub images: Vec<Array3<f64>>,
    pub depth: Vec<Array2<f64>>,
    pub depth_valid: Vec<Array2<bool>>,
    pub semantics: Vec<Array2<u16>>,
    pub pseudo_depth: Vec<Array2<f64>>,
    pub injected_affine: Vec<(f64, f64)>,
    pub anchors: Vec<Vec<Anchor>>,
    pub occupancy: Array3<u16>,
    pub scene: SyntheticScene,
}

pub fn read_sample(dir: &Path) -> Result<LoadedSample> {
    let depth_nd = read_tsr_f64(&dir.join("depth.tsr"))?;
    let pseudo_nd = read_tsr_f64(&dir.join("pseudo_depth.tsr"))?;
    let sem_nd = read_tsr_u16(&dir.join("sem.tsr"))?;
    let occ_nd = read_tsr_u16(&dir.join("occ.tsr"))?;
    let n = depth_nd.shape()[0];
    let (h, w) = (depth_nd.shape()[1], depth_nd.shape()[2]);

    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let png = image::open(dir.join(format!("cam_{i}.png")))
            .map_err(|e| Error::Dataset(e.to_string()))?
            .into_rgb8();
        if png.width() as usize != w || png.height() as usize != h {
            return Err(Error::Dataset(format!(
                "cam_{i}.png resolution {}x{} does not match tensors {w}x{h}",
                png.width(),
                png.height()
            )));
        }
        let mut img = Array3::<f64>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let px = png.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    img[[y, x, c]] = px.0[c] as f64 / 255.0;
                }
            }
        }
        images.push(img);
    }

    let unstack_f64 = |nd: &ArrayD<f64>| -> Vec<Array2<f64>> {
        (0..n)
            .map(|i| {
                nd.index_axis(ndarray::Axis(0), i)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
            })
            .collect()
    };
    let depth = unstack_f64(&depth_nd);
    let pseudo_depth = unstack_f64(&pseudo_nd);
    let semantics: Vec<Array2<u16>> = (0..n)
        .map(|i| {
            sem_nd
                .index_axis(ndarray::Axis(0), i)
                .to_owned()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        })
        .collect();
    let depth_valid = depth
        .iter()
        .map(|d| d.mapv(|v| v < crate::world::FAR_PLANE))
        .collect();

    let anchors_file: AnchorFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join("anchors.json"))?)?;
    let scene = SyntheticScene::from_json(&std::fs::read_to_string(dir.join("scene.json"))?)?;

    Ok(LoadedSample {
        images,
        depth,
        depth_valid,
        semantics,
        pseudo_depth,
        injected_affine: anchors_file.injected_affine,
        anchors: anchors_file.anchors,
        occupancy: occ_nd
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Dataset(e.to_string()))?,
        scene,
    })
}

// --- dataset manifest ----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub resolution: (usize, usize),
    pub rig_preset: String,
    pub occ_grid: OccGridSpec,
    pub scene_config: SceneConfig,
    pub sparsity: SparsityConfig,
    pub seed: u64,
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub rig: CameraRig,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json"))?)?;
        let rig = CameraRig::load(&root.join("rig.json"))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            rig,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.manifest.train),
            "val" => Ok(&self.manifest.val),
            "all" => Ok(&self.manifest.samples),
            other => Err(Error::Dataset(format!("unknown split {other}"))),
        }
    }

    pub fn load(&self, sample: &str) -> Result<LoadedSample> {
        read_sample(&self.root.join(sample))
    }
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub seed: u64,
    pub num_samples: usize,
    pub rig_preset: String,
    pub resolution: (usize, usize),
    pub sparsity: f64,
    pub out_dir: PathBuf,
    pub occ_grid: OccGridSpec,
    pub scene_config: SceneConfig,
    pub n_anchors: usize,
    pub focal: f64,
}

impl GenerateArgs {
    pub fn rig(&self) -> Result<CameraRig> {
        let (h, w) = self.resolution;
        match self.rig_preset.as_str() {
            "stereo" => crate::geometry::stereo_rig(h, w, self.focal),
            "surround" => crate::geometry::surround_rig(h, w, self.focal),
            other => Err(Error::Config(format!("unknown rig preset {other}"))),
        }
    }
}

/// Generate and write a dataset; every 5th sample goes to the val split.
pub fn generate_dataset(args: &GenerateArgs) -> Result<Manifest> {
    let rig = args.rig()?;
    std::fs::create_dir_all(&args.out_dir)?;
    rig.save(&args.out_dir.join("rig.json"))?;

    let mut samples = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..args.num_samples {
        let name = format!("sample_{i:05}");
        let scene = generate_scene(args.seed.wrapping_add(i as u64), &args.scene_config)?;
        let sparsity = SparsityConfig {
            semantic_keep: args.sparsity,
            n_anchors: args.n_anchors,
            corrupt_pseudo_depth: true,
            pseudo_noise_std: 0.02,
            seed: args.seed,
        };
        let record = make_supervision(&scene, &rig, &sparsity, &args.occ_grid)?;
        write_sample(&args.out_dir.join(&name), &record)?;
        if (i + 1) % 5 == 0 {
            val.push(name.clone());
        } else {
            train.push(name.clone());
        }
        samples.push(name);
    }

    let manifest = Manifest {
        samples,
        train,
        val,
        resolution: args.resolution,
        rig_preset: args.rig_preset.clone(),
        occ_grid: args.occ_grid.clone(),
        scene_config: args.scene_config.clone(),
        sparsity: SparsityConfig {
            semantic_keep: args.sparsity,
            n_anchors: args.n_anchors,
            corrupt_pseudo_depth: true,
            pseudo_noise_std: 0.02,
            seed: args.seed,
        },
        seed: args.seed,
    };
    std::fs::write(
        args.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
