//! Deeply-fused nets: networks built by summing (or max/concatenating) the
//! intermediate representations of several base networks at a few fusion
//! stages, together with the training harness and structural analyses used
//! to study them.

pub mod analysis;
pub mod data;
mod error;
pub mod fusenet;
pub mod netspec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
