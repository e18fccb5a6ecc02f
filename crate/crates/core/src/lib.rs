#![no_std]

extern crate alloc;

pub mod attack;
pub mod autograd;
pub mod conditioning;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod seed;
pub mod tensor;
pub mod toy;

pub use error::{CoreError, Result};
