//! Attention container format and layer fusion.
//!
//! A container is a directory holding `manifest.json`, the generated image and
//! one raw little-endian `f32` file per captured attention layer, laid out as
//! `[heads][height][width][tokens]` in C order with no header.

mod container;
mod fuse;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use container::{read_attention_stack, write_attention_stack, MANIFEST_FILE};
pub use fuse::{fuse_layers, fuse_layers_for, resize_bilinear, FusedAttention, TimestepPolicy};

/// Spatial sums of each captured map must be within this of 1.
pub const SPATIAL_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub text: String,
    /// Index of the prompt word this subword token belongs to; `None` for
    /// special and padding tokens.
    pub word_index: Option<usize>,
    /// Position in the encoder sequence; also the index on a layer's token axis.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub layer_id: String,
    pub heads: usize,
    pub width: usize,
    pub height: usize,
    pub timestep: u32,
    /// `[heads][height][width][tokens]`
    pub data: Vec<f32>,
}

impl AttentionLayer {
    pub fn tokens(&self) -> usize {
        let plane = self.heads * self.width * self.height;
        self.data.len().checked_div(plane).unwrap_or(0)
    }

    #[inline]
    pub fn value(&self, head: usize, y: usize, x: usize, t: usize) -> f32 {
        let l = self.tokens();
        self.data[((head * self.height + y) * self.width + x) * l + t]
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.bin", self.layer_id, self.timestep)
    }
}

/// Everything captured for one generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub image: RgbImage,
    pub prompt: String,
    pub seed: u64,
    pub tokens: Vec<TokenMeta>,
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    /// Distinct captured timesteps in ascending order.
    pub fn timesteps_captured(&self) -> Vec<u32> {
        let mut ts: Vec<u32> = self.layers.iter().map(|l| l.timestep).collect();
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    /// Checks every structural and numeric invariant of the stack.
    pub fn validate(&self) -> crate::Result<()> {
        container::validate_stack(self)
    }
}
