//! Reasoning-aware structured pruning for a miniature multimodal decoder.
//!
//! The pipeline scores prunable units (SwiGLU neurons and GQA groups) with
//! first-order Taylor attribution over the whole response and over
//! reasoning-transition windows, profiles each sublayer's output
//! sensitivity and cross-modal dependency, and packs units into a global
//! parameter budget with per-layer minimum retention.

pub mod allocator;
pub mod attribution;
pub mod calibration;
pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod model;
pub mod profiling;
pub mod seed;

pub use error::{Error, Result};
pub use model::{
    apply_prune, backward, enumerate_units, forward, load_checkpoint, masked_forward,
    save_checkpoint, GradientTable, KeepSet, Model, ModelConfig, ModelWeights, Precision,
    Sequence, StructuralUnit, Sublayer, UnitKind,
};
