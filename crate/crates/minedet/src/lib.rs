//! Teacher-student mining of unlabeled lesions while training a detector
//! on partially annotated volumes.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`geometry`]: box arithmetic, IoU / projected-3D IoU, NMS and GT-NMS,
//!   anchor-relative encoding.
//! - [`phantom`]: synthetic partially-annotated volumes with oracle access
//!   to the hidden labels, plus augmentation and batching.
//! - [`detector`]: a small anchor-based detector with analytic gradients,
//!   SGD, and the biased/ideal/corrected classification-loss family.
//! - [`mining`]: the teacher-student engine — per-batch mining, pseudo-label
//!   policies, EMA teacher, training loop, hard-negative mining.
//! - [`eval`]: Kalman-filter track stitching, projected-3D matching, FROC
//!   sensitivity, average sensitivity, and average precision.
//! - [`experiment`]: config-driven experiment runner emitting CSV tables and
//!   markdown reports.
//!
//! The `examples/` directory has one runnable example per capability; the
//! `minedet` binary wraps the experiment runner.

pub mod detector;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod mining;
pub mod phantom;

pub use geometry::{Box2D, Box3D, Detection, Detection3D};
