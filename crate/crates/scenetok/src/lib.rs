//! Multi-view driving-scene tokenizer.
//!
//! Surround-camera images are lifted into a fixed budget of geometry-aware
//! BEV scene tokens, decoded through a visibility-masked multi-view
//! transformer, and trained jointly on RGB reconstruction, metric depth,
//! semantics, and 3D semantic occupancy. Supervision comes from an analytic
//! synthetic world, so every stage can be checked against closed-form oracles.
//!
//! Module map:
//! - [`geometry`]: pinhole projection, Plücker rays, bilinear sampling,
//!   frustum visibility — the deterministic layer everything is tested against
//! - [`encoder`]: image backbones and deformable cross-attention lifting into
//!   the scene-token grid
//! - [`decoder`]: joint scene/view transformer with visibility-guided
//!   attention bias
//! - [`heads`]: RGB / depth / semantic dense decoders and the FiLM occupancy
//!   head
//! - [`losses`]: the five-term joint objective (Charbonnier depth, masked CE,
//!   Lovász-Softmax, BEV semantic regularization)
//! - [`align`]: robust affine (scale, shift) fitting of pseudo depth to sparse
//!   metric anchors
//! - [`metrics`]: PSNR, SSIM, AbsRel/δ, occupancy IoU/mIoU
//! - [`world`]: procedural scenes, the analytic renderer, and the dataset
//!   format
//! - [`train`]: experiment harness — training loop, two-stage probes,
//!   evaluation, checkpointing
//! - [`tensor`]: the f64 reverse-mode autodiff substrate

pub mod align;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod world;

pub use error::{Error, Result};
