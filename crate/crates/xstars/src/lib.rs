//! Multi-sensor self-supervised pretraining: DINO self-distillation plus a
//! dense cross-sensor alignment loss, a small Vision Transformer, a sensor
//! simulator, scratch and continual training loops, and frozen-feature probes.
//!
//! The guide in `book/` walks through each part; its code listings run as
//! doctests of this crate.

pub mod error;
pub mod losses;
pub(crate) mod ops;

pub use error::{Error, Result};
pub mod backbone;
pub mod params;
pub mod raster;
pub mod data;
pub mod seed;
pub mod checkpoint;
pub mod training;
pub mod evaluation;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/objectives.md")]
    mod objectives {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
