//! Constraint-aware, ranking-distilled token pruning for small transformer
//! encoders.
//!
//! The pipeline: train an unpruned teacher encoder, learn per-layer gate
//! masks and rank-position masks (hard concrete relaxation) under a FLOPs
//! budget enforced by a Lagrangian penalty, distill the teacher's final-layer
//! token ranking into the student's early layers, then binarize the masks
//! into a [`inference::PrunePlan`] and run hard token-dropping inference with
//! an instrumented FLOPs counter.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod flops;
pub mod inference;
pub mod io;
pub mod masks;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
