//! Fully connected CRF labeling with Gaussian smoothness and bilateral
//! appearance kernels under Potts compatibility, solved by mean-field
//! iteration.

mod exact;
pub mod lattice;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ClassProbMaps;

pub use exact::MAX_EXACT_PIXELS;
use lattice::Permutohedral;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcrfParams {
    pub iterations: usize,
    pub smooth_weight: f64,
    pub smooth_sigma_xy: f64,
    pub bilateral_weight: f64,
    pub bilateral_sigma_xy: f64,
    pub bilateral_sigma_rgb: f64,
    pub unary_epsilon: f64,
}

impl Default for DcrfParams {
    fn default() -> Self {
        DcrfParams {
            iterations: 10,
            smooth_weight: 3.0,
            smooth_sigma_xy: 3.0,
            bilateral_weight: 10.0,
            bilateral_sigma_xy: 80.0,
            bilateral_sigma_rgb: 13.0,
            unary_epsilon: 1e-8,
        }
    }
}

impl DcrfParams {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.smooth_sigma_xy,
            self.bilateral_sigma_xy,
            self.bilateral_sigma_rgb,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!("dcrf sigmas must be positive: {sigmas:?}")));
        }
        if [self.smooth_weight, self.bilateral_weight]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config("dcrf kernel weights must be non-negative".into()));
        }
        if !(self.unary_epsilon > 0.0 && self.unary_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "unary epsilon must lie in (0, 1), got {}",
                self.unary_epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Direct `O(P^2)` pairwise sums; small images only.
    Exact,
    #[default]
    Lattice,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Backend::Exact),
            "lattice" => Ok(Backend::Lattice),
            other => Err(Error::Config(format!("unknown dcrf backend {other:?}"))),
        }
    }
}

/// Negative log-probabilities, `[labels][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unary {
    pub width: usize,
    pub height: usize,
    pub labels: usize,
    pub data: Vec<f32>,
}

impl Unary {
    pub fn plane(&self, label: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[label * n..(label + 1) * n]
    }

    /// Keeps only `labels` (in the given order).
    pub fn select(&self, labels: &[usize]) -> Unary {
        let data = labels.iter().flat_map(|&l| self.plane(l).iter().copied()).collect();
        Unary {
            width: self.width,
            height: self.height,
            labels: labels.len(),
            data,
        }
    }
}

/// Mean-field beliefs, `[labels][height][width]`; each pixel sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMaps {
    pub width: usize,
    pub height: usize,
    pub labels: usize,
    pub q: Vec<f32>,
}

impl MarginalMaps {
    pub fn plane(&self, label: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.q[label * n..(label + 1) * n]
    }

    /// Largest deviation of a per-pixel sum from 1.
    pub fn max_sum_error(&self) -> f32 {
        let n = self.width * self.height;
        (0..n)
            .map(|i| {
                let s: f32 = (0..self.labels).map(|l| self.q[l * n + i]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }

    fn from_pixel_major(width: usize, height: usize, labels: usize, q: &[f32]) -> Self {
        MarginalMaps {
            width,
            height,
            labels,
            q: to_planar(q, labels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    /// Row-major labels, `0` = background.
    pub s: Vec<u16>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.s[y * self.width + x]
    }
}

/// `-log p` with `p_k = clamp(A_k, eps, 1)` for background and present classes,
/// `eps` for absent ones, renormalized per pixel.
pub fn unary_from_probs(maps: &ClassProbMaps, eps: f64) -> Unary {
    let labels: Vec<usize> = (0..maps.num_labels()).collect();
    let pm = unary_pixel_major(maps, &labels, eps);
    Unary {
        width: maps.width,
        height: maps.height,
        labels: labels.len(),
        data: to_planar(&pm, labels.len()),
    }
}

/// Rows of [`unary_from_probs`] restricted to `keep`, one row per pixel.
fn unary_pixel_major(maps: &ClassProbMaps, keep: &[usize], eps: f64) -> Vec<f32> {
    let n = maps.width * maps.height;
    let labels = maps.num_labels();
    let present: Vec<bool> = (0..labels).map(|l| maps.is_present(l)).collect();
    let planes: Vec<&[f32]> = (0..labels).map(|l| maps.plane(l)).collect();
    let mut out = vec![0f32; n * keep.len()];
    let mut p = vec![0f64; labels];
    for (i, row) in out.chunks_exact_mut(keep.len()).enumerate() {
        let mut sum = 0.0;
        for (l, pl) in p.iter_mut().enumerate() {
            *pl = if present[l] {
                (planes[l][i] as f64).clamp(eps, 1.0)
            } else {
                eps
            };
            sum += *pl;
        }
        for (dst, &l) in row.iter_mut().zip(keep) {
            *dst = -((p[l] / sum) as f32).ln();
        }
    }
    out
}

/// `[labels][n]` to `n` rows of `labels`.
fn to_pixel_major(planar: &[f32], labels: usize) -> Vec<f32> {
    let n = planar.len() / labels.max(1);
    let planes: Vec<&[f32]> = planar.chunks_exact(n.max(1)).collect();
    let mut out = vec![0f32; planar.len()];
    for (i, row) in out.chunks_exact_mut(labels).enumerate() {
        for (dst, plane) in row.iter_mut().zip(&planes) {
            *dst = plane[i];
        }
    }
    out
}

/// `n` rows of `labels` to `[labels][n]`.
fn to_planar(rows: &[f32], labels: usize) -> Vec<f32> {
    let n = rows.len() / labels.max(1);
    let mut out = vec![0f32; rows.len()];
    let mut planes: Vec<&mut [f32]> = out.chunks_exact_mut(n.max(1)).collect();
    for (i, row) in rows.chunks_exact(labels).enumerate() {
        for (plane, &v) in planes.iter_mut().zip(row) {
            plane[i] = v;
        }
    }
    out
}

/// One lattice-filtered kernel `L`, used as `G = S^-1/2 L S^-1/2` with
/// `S = diag(L)` so that every point's self weight is exactly 1 as in the
/// true Gaussian, then normalized by the mass of `G`.
struct LatticeKernel {
    lattice: Permutohedral,
    weight: f32,
    // D^-1/2 S^-1/2, applied on both sides of L
    scale: Vec<f32>,
    // D^-1, the self weight of the normalized kernel
    self_norm: Vec<f32>,
}

impl LatticeKernel {
    fn new(features: &[f32], d: usize, weight: f32) -> Self {
        let lattice = Permutohedral::new(features, d);
        let n = lattice.num_points();
        let inv_self: Vec<f32> = lattice
            .self_weights()
            .iter()
            .map(|&s| exact::inv_sqrt_mass(s as f64) as f32)
            .collect();
        let mut mass = vec![0f32; n];
        lattice.filter(&inv_self, 1, &mut mass);
        let mut scale = Vec::with_capacity(n);
        let mut self_norm = Vec::with_capacity(n);
        for (&m, &is) in mass.iter().zip(&inv_self) {
            let nm = exact::inv_sqrt_mass((m * is) as f64) as f32;
            scale.push(nm * is);
            self_norm.push(nm * nm);
        }
        LatticeKernel {
            lattice,
            weight,
            scale,
            self_norm,
        }
    }

    /// `out += w D^-1/2 (G - I) D^-1/2 q`.
    fn accumulate(&self, q: &[f32], labels: usize, out: &mut [f32], scaled: &mut [f32], scratch: &mut [f32]) {
        for ((dst, src), &sc) in scaled
            .chunks_exact_mut(labels)
            .zip(q.chunks_exact(labels))
            .zip(&self.scale)
        {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * sc;
            }
        }
        self.lattice.filter(scaled, labels, scratch);
        for (i, ((o, f), qi)) in out
            .chunks_exact_mut(labels)
            .zip(scratch.chunks_exact(labels))
            .zip(q.chunks_exact(labels))
            .enumerate()
        {
            let (sc, sn) = (self.scale[i], self.self_norm[i]);
            for ((o, &f), &x) in o.iter_mut().zip(f).zip(qi) {
                *o += self.weight * (sc * f - sn * x).max(0.0);
            }
        }
    }
}

/// Pairwise message operator: `out_i = sum_{j != i} k(i, j) q_j` with the
/// normalized kernels, weights folded in.
enum Pairwise {
    Exact(exact::DenseKernel),
    Lattice(Vec<LatticeKernel>),
}

impl Pairwise {
    fn new(image: &RgbImage, params: &DcrfParams, backend: Backend) -> Result<Self> {
        match backend {
            Backend::Exact => Ok(Pairwise::Exact(exact::DenseKernel::new(image, params)?)),
            Backend::Lattice => {
                let (w, h) = (image.width() as usize, image.height() as usize);
                let mut smooth = Vec::with_capacity(w * h * 2);
                let mut bilateral = Vec::with_capacity(w * h * 5);
                let ss = params.smooth_sigma_xy as f32;
                let bs = params.bilateral_sigma_xy as f32;
                let cs = params.bilateral_sigma_rgb as f32;
                for (x, y, px) in image.enumerate_pixels() {
                    let (x, y) = (x as f32, y as f32);
                    smooth.extend([x / ss, y / ss]);
                    bilateral.extend([
                        x / bs,
                        y / bs,
                        px[0] as f32 / cs,
                        px[1] as f32 / cs,
                        px[2] as f32 / cs,
                    ]);
                }
                let mut kernels = Vec::new();
                if params.smooth_weight > 0.0 {
                    kernels.push(LatticeKernel::new(&smooth, 2, params.smooth_weight as f32));
                }
                if params.bilateral_weight > 0.0 {
                    kernels.push(LatticeKernel::new(&bilateral, 5, params.bilateral_weight as f32));
                }
                Ok(Pairwise::Lattice(kernels))
            }
        }
    }

    fn messages(&self, q: &[f32], labels: usize, out: &mut [f32], scratch: &mut [f32], scaled: &mut [f32]) {
        match self {
            Pairwise::Exact(k) => k.apply(q, labels, out),
            Pairwise::Lattice(kernels) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for k in kernels {
                    k.accumulate(q, labels, out, scaled, scratch);
                }
            }
        }
    }
}

/// In-place per-pixel softmax of `-energy`, rows of `labels` values.
fn softmax_neg_rows(rows: &mut [f32], labels: usize) {
    for row in rows.chunks_exact_mut(labels) {
        let min = row.iter().copied().fold(f32::INFINITY, f32::min);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (min - *v).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `q <- softmax(m - u)` row by row, where `q` holds the messages `m` on entry.
fn softmax_update_rows(q: &mut [f32], u: &[f32], labels: usize) {
    for (row, ur) in q.chunks_exact_mut(labels).zip(u.chunks_exact(labels)) {
        let mut max = f32::NEG_INFINITY;
        for (v, &e) in row.iter_mut().zip(ur) {
            *v -= e;
            max = max.max(*v);
        }
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

fn check_image(width: usize, height: usize, image: &RgbImage) -> Result<()> {
    if image.width() as usize != width || image.height() as usize != height {
        return Err(Error::Config(format!(
            "image is {}x{} but maps are {width}x{height}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Mean-field inference. `Q` starts at `softmax(-unary)`; each iteration
/// passes messages through both kernels and applies
/// `Q_i(l) ∝ exp(-U_i(l) - sum_{l' != l} m_i(l'))`.
pub fn mean_field_infer(
    unary: &Unary,
    image: &RgbImage,
    params: &DcrfParams,
    backend: Backend,
) -> Result<MarginalMaps> {
    run_planar(unary, image, params, backend, None)
}

/// [`mean_field_infer`] with a callback receiving the beliefs after every
/// iteration (1-based).
pub fn mean_field_infer_observed(
    unary: &Unary,
    image: &RgbImage,
    params: &DcrfParams,
    backend: Backend,
    observer: &mut dyn FnMut(usize, &MarginalMaps),
) -> Result<MarginalMaps> {
    run_planar(unary, image, params, backend, Some(observer))
}

type PlanarObserver<'a> = &'a mut dyn FnMut(usize, &MarginalMaps);
type PixelObserver<'a> = &'a mut dyn FnMut(usize, &[f32]);

fn run_planar(
    unary: &Unary,
    image: &RgbImage,
    params: &DcrfParams,
    backend: Backend,
    observer: Option<PlanarObserver>,
) -> Result<MarginalMaps> {
    let (w, h, labels) = (unary.width, unary.height, unary.labels);
    if unary.data.len() != w * h * labels {
        return Err(Error::Config(format!(
            "unary holds {} values, expected {w}x{h}x{labels}",
            unary.data.len()
        )));
    }
    let u = to_pixel_major(&unary.data, labels);
    let q = match observer {
        Some(obs) => {
            let mut cb = |it: usize, q: &[f32]| obs(it, &MarginalMaps::from_pixel_major(w, h, labels, q));
            run_mean_field(u, w, h, labels, image, params, backend, Some(&mut cb))?
        }
        None => run_mean_field(u, w, h, labels, image, params, backend, None)?,
    };
    Ok(MarginalMaps::from_pixel_major(w, h, labels, &q))
}

/// Mean-field over pixel-major unaries; returns pixel-major beliefs.
#[allow(clippy::too_many_arguments)]
fn run_mean_field(
    u: Vec<f32>,
    w: usize,
    h: usize,
    labels: usize,
    image: &RgbImage,
    params: &DcrfParams,
    backend: Backend,
    mut observer: Option<PixelObserver>,
) -> Result<Vec<f32>> {
    params.validate()?;
    check_image(w, h, image)?;
    let n = w * h;
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::Config(format!("non-finite unary potential {bad}")));
    }

    let mut q = u.clone();
    softmax_neg_rows(&mut q, labels);
    if params.iterations == 0 || labels < 2 {
        return Ok(q);
    }

    let pairwise = Pairwise::new(image, params, backend)?;
    let mut msg = vec![0f32; n * labels];
    let mut scratch = vec![0f32; n * labels];
    let mut scaled = vec![0f32; n * labels];
    for it in 1..=params.iterations {
        pairwise.messages(&q, labels, &mut msg, &mut scratch, &mut scaled);
        // Potts: sum over l' != l equals the row total minus m(l); the row
        // total is shared by every label and cancels in the normalization.
        std::mem::swap(&mut q, &mut msg);
        softmax_update_rows(&mut q, &u, labels);
        if let Some(obs) = observer.as_deref_mut() {
            obs(it, &q);
        }
    }
    Ok(q)
}

/// Unary construction, mean-field over background and the present classes,
/// then per-pixel argmax (ties to the lower label). Absent classes get zero
/// belief in the returned marginals.
pub fn dcrf_label(
    maps: &ClassProbMaps,
    image: &RgbImage,
    params: &DcrfParams,
    backend: Backend,
) -> Result<(LabelMap, MarginalMaps)> {
    params.validate()?;
    check_image(maps.width, maps.height, image)?;
    let active = maps.active_labels();
    let k = active.len();
    let u = unary_pixel_major(maps, &active, params.unary_epsilon);
    let q = run_mean_field(u, maps.width, maps.height, k, image, params, backend, None)?;

    let s = q
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            active[best] as u16
        })
        .collect();
    let n = maps.width * maps.height;
    let labels = maps.num_labels();
    let mut full = vec![0f32; n * labels];
    for (j, plane) in to_planar(&q, k).chunks_exact(n.max(1)).enumerate() {
        let l = active[j];
        full[l * n..(l + 1) * n].copy_from_slice(plane);
    }
    Ok((
        LabelMap {
            width: maps.width,
            height: maps.height,
            s,
        },
        MarginalMaps {
            width: maps.width,
            height: maps.height,
            labels,
            q: full,
        },
    ))
}
