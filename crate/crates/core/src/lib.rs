//! Toy vision transformers with swappable positional schemes, and tools to
//! measure and distill away positional bias in their patch features.

pub mod analysis;
pub mod distill;
pub mod error;
pub mod feat1;
pub mod features;
pub mod filters;
pub mod image;
pub mod interp;
pub mod pos_encoding;
pub mod probe;
pub mod seg;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
