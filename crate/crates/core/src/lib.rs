//! Open-vocabulary instance segmentation through robust cross-modal
//! pseudo-labeling, at desk scale.
//!
//! A teacher with an embedding head and a class-agnostic mask head is
//! trained on mask-annotated base classes. It then labels captioned images:
//! each object word in a caption is aligned to the proposal whose visual
//! embedding scores highest against the word vector, and the teacher's mask
//! on that proposal becomes a pseudo mask. A student initialized from the
//! teacher learns from ground truth and pseudo labels while a noise head
//! estimates per-pixel pseudo-mask noise; the inverse mean noise of each
//! pseudo mask reweights its cross-modal loss term.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod pseudo;
pub mod rng;
pub mod semantic;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
