//! Discrete-time survival prediction from pathology and genomics bags with
//! prompt-based class representations and missing-modality completion.

pub mod autograd;
pub mod checkpoint;
pub mod cohort;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod params;
pub mod survival;
pub mod multipro;
pub mod unipro;

pub use error::{Error, Result};
