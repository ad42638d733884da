//! Training-free few-shot volumetric segmentation.
//!
//! A test volume is segmented slice by slice. For each slice the engine
//! retrieves the most similar annotated support slices, turns them (and the
//! neighbouring slice's own prediction) into memory tokens, lets the slice's
//! tokens attend to that memory and decodes a mask from the result. Prediction
//! starts at one slice and propagates towards both ends of the volume.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod grid;
pub mod volume;
pub mod encoder;
pub mod retrieval;
pub mod memory;
pub mod attention;
pub mod decoder;
pub mod pipeline;
pub mod eval;
pub mod cli;

pub use error::{Error, Result};
