//! Tensor engine and model components for the CSTF encoder-decoder.
//!
//! - [`graph`]: dense tensors recorded on a [`Tape`] with reverse-mode gradients
//! - [`patching`]: stage features to a fixed number of patch tokens
//! - [`attention`]: channel/spatial cross attention and the fusion block
//! - [`codec`]: encoder, decoder and softmax head around the block
//! - [`matching`]: dual-softmax matching confidences, loss and mutual-NN extraction

pub mod attention;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod matching;
pub mod params;
pub mod patching;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Tape, Var};
pub use params::{Bound, ParamSet};
pub use tensor::{Real, Tensor};
