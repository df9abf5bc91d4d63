//! HiPTune: unified face-attack detection via hierarchical prompt tuning.
//!
//! The crate implements the full pipeline at desk scale on synthetic,
//! taxonomy-structured data:
//!
//! - [`taxonomy`] / [`dataset`]: the 3-level attack taxonomy (live /
//!   physical / digital down to 14 fine categories and 54 leaf methods), a
//!   procedural sample generator, and manifest I/O.
//! - [`encoders`]: a frozen dual encoder (vision transformer + text
//!   transformer) with a cosine-similarity classification head, plus flat
//!   prompt-context baselines.
//! - [`vptree`]: the learnable visual prompt tree, one prompt block per
//!   taxonomy node, with supervised path selection and prompt integration.
//! - [`app`]: adaptive prompt pruning — per-level gate functions (linear,
//!   CDC, FADC) and hard top-1 routing.
//! - [`dpi`]: dynamic prompt integration — probability-weighted prompt
//!   combination projected into text-encoder contexts, and the end-to-end
//!   live/fake scorer.
//! - [`training`]: cross-entropy and asymmetric triplet losses, the
//!   pretraining substitute, and the two-stage optimization loop.
//! - [`evaluation`]: ACER/AUC/EER/ACC metrics, the P1/P2/P3 protocol
//!   splits, and comparator runs.
//!
//! Batch-level work (sample generation, forward/backward passes, scoring)
//! is data-parallel via rayon behind the default `parallel` feature;
//! disabling it yields a sequential build with bit-identical outputs.

pub mod app;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dpi;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod math;
pub mod model;
pub mod parallel;
pub mod taxonomy;
pub mod training;
pub mod vptree;

pub use error::{Error, Result};
