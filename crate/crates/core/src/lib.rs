//! Concept-grounded single-source domain generalization.
//!
//! The crate covers the whole pipeline: a procedurally generated benchmark with
//! concept masks ([`synthbench`]), mask transfer for annotating new corpora
//! ([`annotation`]), GradCAM and concept discovery ([`saliency`]), a training
//! objective that aligns concept saliency with masks and contrasts local concept
//! features ([`training`]), and signature-based verification with iterative
//! test-time correction ([`correction`]).

pub mod annotation;
pub mod config;
pub mod correction;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod primitives;
pub mod saliency;
pub mod synthbench;
pub mod training;

pub use error::{Result, TideError};
