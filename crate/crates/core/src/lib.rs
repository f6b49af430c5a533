//! Landmark-conditioned face synthesis: a landmark converter, per-identity
//! generators and discriminators, a differentiable landmark detector, the
//! training objectives, a procedural toy-face dataset and evaluation metrics.

pub mod adversary;
pub mod config;
pub mod converter;
pub mod data;
pub mod detector;
pub mod edit;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod nn;
pub mod registry;
pub mod training;

pub use error::{Error, Result};
