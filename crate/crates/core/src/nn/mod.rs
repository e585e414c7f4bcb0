//! Desk-scale convolutional network with hand-derived backward passes.

mod adam;
mod conv;
mod model;

pub use adam::{Adam, AdamState, WarmupSchedule};
pub use model::{BlockSpec, Forward, Head, ModelSpec, TideModel};
