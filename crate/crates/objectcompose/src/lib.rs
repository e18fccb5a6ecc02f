//! File formats, batch generation, evaluation and reporting on top of
//! `objectcompose-core`.

pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod generate;
pub mod imageio;
pub mod manifest;
pub mod plot;
pub mod report;
pub mod weights;

pub use error::{Error, Result};
pub use objectcompose_core as core;
