//! microvla: a desk-scale vision-language-action policy lab.
//!
//! The crate bundles everything needed to train and compare small VLA-style
//! policies end to end on a synthetic multi-embodiment manipulation suite:
//!
//! - [`types`] / [`dataset`] — domain types, trajectory validation, and the
//!   human-inspectable on-disk episode format;
//! - [`datapipe`] — normalization, delta/relative action parameterizations,
//!   history stacking, and three cross-embodiment action representations;
//! - [`fast`] — a DCT-based discrete action tokenizer;
//! - [`backbone`] — a toy multimodal transformer over image patches,
//!   instruction characters, proprio, and action-query tokens;
//! - [`heads`] — four interchangeable action heads (MLP regression,
//!   autoregressive discrete, flow matching, dual-system flow matching);
//! - [`envbench`] — four planar embodiments with scripted experts, a
//!   perturbation suite, and the success-rate/progress evaluation protocol;
//! - [`trainer`] — optimization loop, specialist/generalist/mid-pretraining
//!   protocols, and the ablation runner;
//! - [`cli`] / [`config`] — the `microvla` command-line front end.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod datapipe;
pub mod envbench;
pub mod error;
pub mod fast;
pub mod heads;
pub mod nn;
pub mod policy;
pub mod report;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
