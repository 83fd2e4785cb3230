//! Look-up-table super-resolution with learned sampling and bounded residual
//! fusion between groups.
//!
//! A pipeline is a chain of groups. Each group samples a 2×2 quad from a
//! `k×k` window of its two most recent inputs, blends the two quads, and reads
//! a 4-D table at the blended coordinates. The last group emits `scale²`
//! channels that are rearranged into the upscaled image.
//!
//! ```no_run
//! use autolut::{image::load_y, par::Exec, pipeline::{super_resolve, PipelineConfig}};
//! let cfg = PipelineConfig::load("model.alsr")?;
//! let lr = load_y("baby_lr.png")?;
//! let sr = super_resolve(&lr, &cfg, Exec::from_env())?;
//! # Ok::<(), autolut::Error>(())
//! ```

pub mod adarl;
pub mod autosample;
pub mod error;
pub mod eval;
pub mod export;
pub mod finetune;
pub mod image;
pub mod lut;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
pub use image::{FloatPlane, Plane};
pub use lut::LutTable;
pub use par::Exec;
pub use pipeline::{super_resolve, PipelineConfig, Preset, Topology};
