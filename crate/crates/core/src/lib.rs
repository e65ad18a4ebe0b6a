//! Panoptic layout generation and layout-to-image synthesis.
//!
//! Scenes are lists of labelled objects on a canvas. The layout generator
//! turns a scene into stuff and instance masks; the image generator renders
//! the masks through instance- and stuff-aware normalization.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod generator;
pub mod geometry;
mod im2col;
pub mod nn;
pub mod pipeline;
pub mod plg;
pub mod render;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
pub use pipeline::{Model, ModelConfig, Synthesis};
