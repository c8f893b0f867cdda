//! V-ITI lab: a self-contained toy multimodal transformer with head-level
//! visual-neglect probes and gated visual-recall activation mixing, plus the
//! analysis harnesses that verify the behavior end to end.
//!
//! Module map:
//! - [`linalg`]: dense kernels (matrices, softmax, layer norm, SiLU, RNG)
//! - [`runtime`]: the toy decoder-only transformer with activation taps
//! - [`perturb`]: visual-neglect sample construction (noising, replacement)
//! - [`vnd`]: head-level probes (train, rank, select)
//! - [`vri`]: gated visual-recall intervention and generation
//! - [`synthtask`]: grid-world VQA data, toy-model training, evaluation
//! - [`analysis`]: MI checks, degradation curves, ablations, sweeps, bench
//! - [`cli`]: the `viti` command-line entry points

pub mod artifact;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod perturb;
pub mod runtime;
pub mod synthtask;
pub mod vnd;
pub mod vri;

pub use error::{Result, VitiError};
