//! Query-based two-stage object detection head with anchor priors, static
//! top-k matching and multi-scale deformable cross-attention.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod geometry;
pub mod head;
pub mod losses;
pub mod matching;
pub mod model;
pub mod msda;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
