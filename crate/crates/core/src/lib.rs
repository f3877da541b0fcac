//! Multi-view skill classification from synchronized video clips.
//!
//! A shared divided space-time attention backbone encodes every view, a
//! cross-view fusion module pools the per-view features, and a linear head
//! predicts one of four proficiency levels. The backbone's dense layers are
//! adapted with LoRA and can be merged back for inference.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod layers;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
