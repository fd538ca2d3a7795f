//! Desk-scale multi-teacher single-student distillation.
//!
//! One student network absorbs the output distributions of many per-vertical
//! specialist teachers through top-K soft targets, with optional structurally
//! connected (sparsely wired) top layers and a self-paced scaling head that
//! L2-normalizes each vertical's logits and rescales them with trainable
//! factors. Everything runs on a small built-in f64 autodiff engine over
//! synthetic hierarchical data, so the whole pipeline — teachers, soft
//! targets, student, evaluation — fits in minutes on one CPU.

pub mod bench;
pub mod budget;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod seeds;
pub mod taxonomy;
pub mod tensor;

pub use error::{Error, Result};
