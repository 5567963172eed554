//! Dense quadratic-time message passing, used as the reference backend.

use image::RgbImage;

use super::DcrfParams;
use crate::error::{Error, Result};

/// Largest image (in pixels) the exact backend accepts; its kernel matrix is
/// `P x P` floats.
pub const MAX_EXACT_PIXELS: usize = 8192;

/// Precomputed `K = w_s N_smooth + w_b N_bilateral`. Each
/// `N = D^-1/2 (G - I) D^-1/2` for a Gaussian kernel matrix `G` with row sums
/// `D`, so the unit self weight counts towards the mass but sends no message.
pub(crate) struct DenseKernel {
    n: usize,
    k: Vec<f32>,
}

/// `1 / sqrt(d)`, or 0 for a vanishing mass.
pub(crate) fn inv_sqrt_mass(d: f64) -> f64 {
    if d > 1e-20 {
        1.0 / d.sqrt()
    } else {
        0.0
    }
}

impl DenseKernel {
    pub(crate) fn new(image: &RgbImage, params: &DcrfParams) -> Result<Self> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let n = w * h;
        if n > MAX_EXACT_PIXELS {
            return Err(Error::Config(format!(
                "exact backend limited to {MAX_EXACT_PIXELS} pixels, image has {n}"
            )));
        }
        let pos = |i: usize| ((i % w) as f64, (i / w) as f64);
        let rgb = |i: usize| {
            let p = image.get_pixel((i % w) as u32, (i / w) as u32).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        };
        let inv_s = 1.0 / (2.0 * params.smooth_sigma_xy.powi(2));
        let inv_bp = 1.0 / (2.0 * params.bilateral_sigma_xy.powi(2));
        let inv_bc = 1.0 / (2.0 * params.bilateral_sigma_rgb.powi(2));
        let mut gs = vec![0f64; n * n];
        let mut gb = vec![0f64; n * n];
        for i in 0..n {
            let (xi, yi) = pos(i);
            let ci = rgb(i);
            for j in (i + 1)..n {
                let (xj, yj) = pos(j);
                let cj = rgb(j);
                let dp = (xi - xj).powi(2) + (yi - yj).powi(2);
                let dc: f64 = (0..3).map(|c| (ci[c] - cj[c]).powi(2)).sum();
                let s = (-dp * inv_s).exp();
                let b = (-dp * inv_bp - dc * inv_bc).exp();
                gs[i * n + j] = s;
                gs[j * n + i] = s;
                gb[i * n + j] = b;
                gb[j * n + i] = b;
            }
        }
        let norm = |g: &[f64]| -> Vec<f64> {
            g.chunks_exact(n.max(1))
                .map(|row| inv_sqrt_mass(1.0 + row.iter().sum::<f64>()))
                .collect()
        };
        let (ns, nb) = (norm(&gs), norm(&gb));
        let mut k = vec![0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                let v = params.smooth_weight * ns[i] * gs[i * n + j] * ns[j]
                    + params.bilateral_weight * nb[i] * gb[i * n + j] * nb[j];
                k[i * n + j] = v as f32;
            }
        }
        Ok(DenseKernel { n, k })
    }

    /// `out = K q` for `q` laid out as `n` rows of `channels`.
    pub(crate) fn apply(&self, q: &[f32], channels: usize, out: &mut [f32]) {
        for (i, dst) in out.chunks_exact_mut(channels).enumerate() {
            let mut acc = vec![0f64; channels];
            let row = &self.k[i * self.n..(i + 1) * self.n];
            for (&kij, qj) in row.iter().zip(q.chunks_exact(channels)) {
                for (a, &v) in acc.iter_mut().zip(qj) {
                    *a += kij as f64 * v as f64;
                }
            }
            for (d, a) in dst.iter_mut().zip(acc) {
                *d = a as f32;
            }
        }
    }
}
