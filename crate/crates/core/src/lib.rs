//! Pixel-level domain adaptation for object detectors.
//!
//! A cycle-free image transformer is trained with an adversarial loss plus a
//! label-preservation loss from a frozen segmentation net, then used to
//! restyle labeled source imagery and train a detector for the target domain.
//! Everything runs on the CPU on a small built-in autodiff engine.

pub mod autodiff;
pub mod deteval;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
