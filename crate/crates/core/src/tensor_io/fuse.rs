use std::collections::BTreeMap;

use super::{AttentionStack, TokenMeta};
use crate::error::{Error, Result};

/// Which denoising steps feed the fused maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimestepPolicy {
    Single(u32),
    MeanOver(Vec<u32>),
}

impl TimestepPolicy {
    /// The middle captured timestep (lower middle for an even count).
    pub fn midpoint(stack: &AttentionStack) -> Option<Self> {
        let ts = stack.timesteps_captured();
        if ts.is_empty() {
            return None;
        }
        Some(TimestepPolicy::Single(ts[(ts.len() - 1) / 2]))
    }
}

/// Per-token attention at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedAttention {
    pub width: usize,
    pub height: usize,
    /// `[height][width][channels]`, one channel per entry of `tokens`.
    pub maps: Vec<f32>,
    pub tokens: Vec<TokenMeta>,
}

impl FusedAttention {
    pub fn channels(&self) -> usize {
        self.tokens.len()
    }

    /// Channel holding the token at sequence position `position`.
    pub fn channel_of(&self, position: usize) -> Option<usize> {
        self.tokens
            .binary_search_by_key(&position, |t| t.position)
            .ok()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, channel: usize) -> f32 {
        self.maps[(y * self.width + x) * self.channels() + channel]
    }

    /// One channel as a row-major `height x width` plane.
    pub fn channel(&self, channel: usize) -> Vec<f32> {
        let c = self.channels();
        self.maps.iter().skip(channel).step_by(c).copied().collect()
    }
}

/// Averages heads, resizes every selected layer to image resolution and
/// averages the layers uniformly (then the timesteps, under `MeanOver`).
pub fn fuse_layers(stack: &AttentionStack, policy: &TimestepPolicy) -> Result<FusedAttention> {
    let all: Vec<usize> = stack.tokens.iter().map(|t| t.position).collect();
    fuse_layers_for(stack, policy, &all)
}

/// [`fuse_layers`] restricted to the tokens at `positions`. Fusion is
/// independent per token, so each returned channel is identical to the
/// corresponding channel of the full fusion.
pub fn fuse_layers_for(
    stack: &AttentionStack,
    policy: &TimestepPolicy,
    positions: &[usize],
) -> Result<FusedAttention> {
    let mut positions = positions.to_vec();
    positions.sort_unstable();
    positions.dedup();
    let token_index: Vec<usize> = positions
        .iter()
        .map(|&p| {
            stack
                .tokens
                .binary_search_by_key(&p, |t| t.position)
                .map_err(|_| Error::Config(format!("no token at position {p}")))
        })
        .collect::<Result<_>>()?;
    let tokens: Vec<TokenMeta> = token_index.iter().map(|&i| stack.tokens[i].clone()).collect();

    let wanted: Vec<u32> = match policy {
        TimestepPolicy::Single(t) => vec![*t],
        TimestepPolicy::MeanOver(ts) => {
            let mut ts = ts.clone();
            ts.sort_unstable();
            ts.dedup();
            ts
        }
    };
    if wanted.is_empty() {
        return Err(Error::Config("empty timestep list".into()));
    }
    let mut per_step = Vec::with_capacity(wanted.len());
    for &t in &wanted {
        let count = stack.layers.iter().filter(|l| l.timestep == t).count();
        if count == 0 {
            return Err(Error::MissingTimestep(t));
        }
        per_step.push((t, count));
    }

    let (width, height) = (stack.width(), stack.height());
    let c = tokens.len();
    let l = stack.tokens.len();

    // Resizing is linear, so layers sharing a grid are averaged at native
    // resolution and resized once.
    let mut groups: BTreeMap<(usize, usize), Vec<f32>> = BTreeMap::new();
    for &(t, count) in &per_step {
        let weight = 1.0 / (wanted.len() * count) as f32;
        for layer in stack.layers.iter().filter(|l| l.timestep == t) {
            let plane = layer.width * layer.height;
            let acc = groups
                .entry((layer.width, layer.height))
                .or_insert_with(|| vec![0.0; plane * c]);
            let head_avg = average_heads(&layer.data, layer.heads, plane, l, &token_index);
            for (a, v) in acc.iter_mut().zip(&head_avg) {
                *a += weight * v;
            }
        }
    }

    let mut maps = vec![0.0f32; width * height * c];
    if groups.len() == 1 {
        let ((gw, gh), acc) = groups.into_iter().next().unwrap();
        maps = resize_bilinear(&acc, gw, gh, c, width, height);
    } else {
        for ((gw, gh), acc) in groups {
            let resized = resize_bilinear(&acc, gw, gh, c, width, height);
            for (m, r) in maps.iter_mut().zip(&resized) {
                *m += r;
            }
        }
    }

    Ok(FusedAttention {
        width,
        height,
        maps,
        tokens,
    })
}

fn average_heads(data: &[f32], heads: usize, plane: usize, l: usize, keep: &[usize]) -> Vec<f32> {
    let c = keep.len();
    let mut out = vec![0.0f32; plane * c];
    let identity = c == l && keep.iter().enumerate().all(|(i, &k)| i == k);
    for h in 0..heads {
        let block = &data[h * plane * l..(h + 1) * plane * l];
        for (dst, src) in out.chunks_exact_mut(c).zip(block.chunks_exact(l)) {
            if identity {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                for (d, &k) in dst.iter_mut().zip(keep) {
                    *d += src[k];
                }
            }
        }
    }
    if heads > 1 {
        let inv = 1.0 / heads as f32;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Source taps for one output coordinate under half-pixel-centred sampling.
fn taps(dst: usize, src: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a `[h][w][channels]` map. Interpolation is written as
/// `a + (b - a) * t` so constant inputs come out exactly constant.
pub fn resize_bilinear(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h * channels);
    if src_w == dst_w && src_h == dst_h {
        return src.to_vec();
    }
    let xs = taps(dst_w, src_w);
    let ys = taps(dst_h, src_h);
    let mut out = vec![0.0f32; dst_w * dst_h * channels];
    let mut top = vec![0.0f32; channels];
    let row = src_w * channels;
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        let r0 = &src[y0 * row..(y0 + 1) * row];
        let r1 = &src[y1 * row..(y1 + 1) * row];
        let out_row = &mut out[y * dst_w * channels..(y + 1) * dst_w * channels];
        for (dst, &(x0, x1, fx)) in out_row.chunks_exact_mut(channels).zip(&xs) {
            let a = &r0[x0 * channels..(x0 + 1) * channels];
            let b = &r0[x1 * channels..(x1 + 1) * channels];
            let cc = &r1[x0 * channels..(x0 + 1) * channels];
            let d = &r1[x1 * channels..(x1 + 1) * channels];
            for k in 0..channels {
                top[k] = a[k] + (b[k] - a[k]) * fx;
            }
            for k in 0..channels {
                let bottom = cc[k] + (d[k] - cc[k]) * fx;
                dst[k] = top[k] + (bottom - top[k]) * fy;
            }
        }
    }
    out
}
