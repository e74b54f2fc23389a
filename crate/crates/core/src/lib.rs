//! Training and evaluation of a region-based detection head with online hard
//! example mining (OHEM).
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, IoU, greedy NMS and the box-delta parameterisation.
//! - [`synthdata`]: a deterministic synthetic detection world (scenes, region
//!   proposals, per-region features) and its on-disk format.
//! - [`roihead`]: the differentiable region head (one hidden layer MLP) with the
//!   classification + smooth-L1 multi-task loss, analytic gradients and SGD.
//! - [`sampler`]: region labelling and the heuristic / all-regions / OHEM
//!   mini-batch selection strategies.
//! - [`trainer`]: the two-phase training loop, cost counters, snapshots, the
//!   sampling-independent mean-loss diagnostic and the ablation suite.
//! - [`detecteval`]: inference, iterative box refinement with weighted voting,
//!   and VOC-style average precision.

pub mod detecteval;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod roihead;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
