//! Turns cross-attention tensors exported from text-to-image diffusion runs
//! into multi-class segmentation pseudo-masks and binary reliability maps.
//!
//! The synthesis path for one exported sample is:
//!
//! 1. [`tensor_io`]: read the attention container, average heads, resize every
//!    layer to image resolution and average the layers.
//! 2. [`mask`]: pick the token channels that spell each class, average them,
//!    normalize, and derive a background map from the absence of foreground.
//! 3. [`dcrf`]: label pixels with a fully connected CRF (mean-field inference,
//!    permutohedral-lattice filtering or an exact quadratic reference).
//! 4. [`reliability`]: gate each pixel as trusted or not, either with a constant
//!    threshold or with per-class thresholds scaled by the mean activation over
//!    the region the CRF assigned to that class.
//!
//! [`pipeline`] runs this over directories of containers, [`prompts`] curates and
//! augments the caption corpus fed to the generator, and [`losses`] is a
//! numerical reference for the reliability-gated training loss.

mod codec;
pub mod dcrf;
pub mod error;
pub mod losses;
pub mod mask;
pub mod pipeline;
pub mod prompts;
pub mod reliability;
pub mod tensor_io;

pub use codec::{read_png_raw, DecodedPng};
pub use error::{Error, Result};
