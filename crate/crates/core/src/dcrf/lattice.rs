//! Permutohedral lattice for approximate high-dimensional Gaussian filtering.
//!
//! Points are lifted onto the hyperplane `x . 1 = 0` in `d + 1` dimensions,
//! splatted onto the vertices of their enclosing simplex with barycentric
//! weights, blurred along each of the `d + 1` lattice directions with a
//! `[1/2, 1, 1/2]` kernel, and sliced back out. Feature vectors are expected to
//! be pre-divided by the kernel standard deviations, so the filter
//! approximates `out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j`.

#[inline]
fn same(a: &[i32], b: &[i32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Open-addressing table mapping integer lattice keys to dense point indices.
struct KeyTable {
    d: usize,
    len: usize,
    keys: Vec<i32>,
    // slot -> point index + 1, 0 = empty
    slots: Vec<u32>,
    mask: usize,
}

impl KeyTable {
    fn with_capacity(d: usize, expected: usize) -> Self {
        let cap = (expected * 2).next_power_of_two().max(16);
        KeyTable {
            d,
            len: 0,
            keys: Vec::with_capacity(expected * d),
            slots: vec![0; cap],
            mask: cap - 1,
        }
    }

    fn len(&self) -> usize {
        self.len
    }

    #[inline]
    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0;
        for &k in key {
            h = h.wrapping_add(k as u32 as u64).wrapping_mul(2_531_011);
        }
        (h ^ (h >> 29)) as usize
    }

    #[inline]
    fn key(&self, idx: usize) -> &[i32] {
        &self.keys[idx * self.d..(idx + 1) * self.d]
    }

    fn find(&self, key: &[i32]) -> Option<u32> {
        let mut slot = Self::hash(key) & self.mask;
        loop {
            match self.slots[slot] {
                0 => return None,
                e if same(self.key(e as usize - 1), key) => return Some(e - 1),
                _ => slot = (slot + 1) & self.mask,
            }
        }
    }

    fn insert(&mut self, key: &[i32]) -> u32 {
        if 2 * (self.len() + 1) > self.slots.len() {
            self.grow();
        }
        let mut slot = Self::hash(key) & self.mask;
        loop {
            match self.slots[slot] {
                0 => {
                    self.keys.extend_from_slice(key);
                    self.len += 1;
                    self.slots[slot] = self.len as u32;
                    return self.len as u32 - 1;
                }
                e if same(self.key(e as usize - 1), key) => return e - 1,
                _ => slot = (slot + 1) & self.mask,
            }
        }
    }

    fn grow(&mut self) {
        let cap = self.slots.len() * 2;
        self.slots = vec![0; cap];
        self.mask = cap - 1;
        for idx in 0..self.len() {
            let mut slot = Self::hash(self.key(idx)) & self.mask;
            while self.slots[slot] != 0 {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = idx as u32 + 1;
        }
    }
}

#[inline]
fn floor_i32(v: f32) -> i32 {
    let t = v as i32;
    if t as f32 > v {
        t - 1
    } else {
        t
    }
}

/// A lattice built once for a fixed set of feature vectors and reused for any
/// number of filtering passes.
pub struct Permutohedral {
    d: usize,
    n: usize,
    points: usize,
    // per input point: enclosing simplex and d + 1 barycentric weights
    simplex: Vec<u32>,
    weights: Vec<f32>,
    // per simplex, d + 1 lattice indices + 1
    offsets: Vec<u32>,
    // per simplex, the direction leading from vertex r to r + 1
    steps: Vec<u8>,
    // per direction, per lattice point: neighbour indices + 1 (0 = absent)
    neighbors: Vec<[u32; 2]>,
}

impl Permutohedral {
    /// `features` holds `n` points of dimension `d`, row-major, `1 <= d <= 15`.
    pub fn new(features: &[f32], d: usize) -> Self {
        assert!((1..=15).contains(&d));
        assert_eq!(features.len() % d, 0);
        let n = features.len() / d;
        let d1 = d + 1;
        let inv_std = (d1 as f32) * (2.0f32 / 3.0).sqrt();
        let scale: Vec<f32> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f32).sqrt())
            .collect();
        let down = 1.0 / d1 as f32;

        let mut table = KeyTable::with_capacity(d, 1024);
        let mut simplices = KeyTable::with_capacity(2 * d1, 1024);
        let mut simplex = vec![0u32; n];
        let mut weights = vec![0f32; n * d1];
        let mut offsets = Vec::new();
        let mut steps = Vec::new();

        let mut elevated = [0f32; 16];
        let mut rem0 = [0i32; 16];
        let mut rank = [0i32; 16];
        let mut bary = [0f32; 17];
        let mut key = [0i32; 16];
        let mut prev_rem0 = [0i32; 16];
        let mut prev_rank = [0i32; 16];
        let mut sid_key = [0i32; 32];
        let di = d as i32;
        let d1i = d1 as i32;

        for (k, f) in features.chunks_exact(d).enumerate() {
            let mut sm = 0.0f32;
            for i in (1..=d).rev() {
                let cf = f[i - 1] * scale[i - 1];
                elevated[i] = sm - i as f32 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            // nearest point of the zero-remainder sublattice
            let mut sum = 0i32;
            for i in 0..d1 {
                let v = elevated[i] * down;
                let lo = floor_i32(v);
                let hi = if lo as f32 == v { lo } else { lo + 1 };
                let (up, dn) = ((hi * d1i) as f32, (lo * d1i) as f32);
                rem0[i] = if up - elevated[i] < elevated[i] - dn {
                    hi * d1i
                } else {
                    lo * d1i
                };
                sum += rem0[i];
            }
            sum /= d1i;

            rank[..d1].fill(0);
            for i in 0..d {
                let di_ = elevated[i] - rem0[i] as f32;
                for j in i + 1..d1 {
                    if di_ < elevated[j] - rem0[j] as f32 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            if sum > 0 {
                for i in 0..d1 {
                    if rank[i] >= d1i - sum {
                        rank[i] -= d1i - sum;
                        rem0[i] -= d1i;
                    } else {
                        rank[i] += sum;
                    }
                }
            } else if sum < 0 {
                for i in 0..d1 {
                    if rank[i] < -sum {
                        rank[i] += d1i + sum;
                        rem0[i] += d1i;
                    } else {
                        rank[i] += sum;
                    }
                }
            }

            bary[..d + 2].fill(0.0);
            for i in 0..d1 {
                let v = (elevated[i] - rem0[i] as f32) * down;
                bary[(di - rank[i]) as usize] += v;
                bary[(d1i - rank[i]) as usize] -= v;
            }
            bary[0] += 1.0 + bary[d1];

            weights[k * d1..(k + 1) * d1].copy_from_slice(&bary[..d1]);
            // neighbouring inputs often share a simplex
            if k > 0 && rem0 == prev_rem0 && rank == prev_rank {
                simplex[k] = simplex[k - 1];
                continue;
            }
            prev_rem0 = rem0;
            prev_rank = rank;
            sid_key[..d1].copy_from_slice(&rem0[..d1]);
            sid_key[d1..2 * d1].copy_from_slice(&rank[..d1]);
            let known = simplices.len();
            let sid = simplices.insert(&sid_key[..2 * d1]);
            simplex[k] = sid;
            if (sid as usize) < known {
                continue;
            }
            let mut st = [0u8; 16];
            for (i, &rk) in rank[..d1].iter().enumerate() {
                if rk > 0 {
                    st[(di - rk) as usize] = i as u8;
                }
            }
            steps.extend_from_slice(&st[..d1]);
            for r in 0..d1 {
                let ri = r as i32;
                for i in 0..d {
                    key[i] = rem0[i] + ri;
                    if rank[i] > di - ri {
                        key[i] -= d1i;
                    }
                }
                offsets.push(table.insert(&key[..d]) + 1);
            }
        }

        let points = table.len();
        let mut neighbors = vec![[0u32; 2]; d1 * points];
        let mut n1 = vec![0i32; d];
        let mut n2 = vec![0i32; d];
        for j in 0..d1 {
            for p in 0..points {
                let key = table.key(p);
                for i in 0..d {
                    n1[i] = key[i] - 1;
                    n2[i] = key[i] + 1;
                }
                if j < d {
                    n1[j] = key[j] + di;
                    n2[j] = key[j] - di;
                }
                neighbors[j * points + p] = [
                    table.find(&n1).map_or(0, |e| e + 1),
                    table.find(&n2).map_or(0, |e| e + 1),
                ];
            }
        }

        Permutohedral {
            d,
            n,
            points,
            simplex,
            offsets,
            weights,
            steps,
            neighbors,
        }
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn lattice_size(&self) -> usize {
        self.points
    }

    /// Each point's own contribution to its filtered value: the response at
    /// point `i` to a unit input at `i` alone.
    pub fn self_weights(&self) -> Vec<f32> {
        let d1 = self.d + 1;
        let alpha = self.alpha();
        let simplices = self.offsets.len() / d1;
        let mut mats = vec![0f32; simplices * d1 * d1];
        for (sid, m) in mats.chunks_exact_mut(d1 * d1).enumerate() {
            let verts = &self.offsets[sid * d1..(sid + 1) * d1];
            self.simplex_blur(verts, &self.steps[sid * d1..(sid + 1) * d1], m);
        }
        self.simplex
            .iter()
            .zip(self.weights.chunks_exact(d1))
            .map(|(&sid, b)| {
                let m = &mats[sid as usize * d1 * d1..(sid as usize + 1) * d1 * d1];
                // m is symmetric
                let mut s = 0.0;
                for r in 0..d1 {
                    let row = &m[r * d1..r * d1 + r];
                    let off: f32 = row.iter().zip(b).map(|(x, y)| x * y).sum();
                    s += b[r] * (2.0 * off + b[r] * m[r * d1 + r]);
                }
                alpha * s
            })
            .collect()
    }

    /// Fills `m[r][t]` with the blur weight carried from simplex vertex `t`
    /// to vertex `r`. Vertex `r + 1` is the second neighbour of vertex `r`
    /// along direction `steps[r]`, so every transfer is one of at most three
    /// monotone walks whose intermediate points may be missing from the
    /// lattice.
    fn simplex_blur(&self, verts: &[u32], steps: &[u8], m: &mut [f32]) {
        let d1 = self.d + 1;
        for r in 0..d1 {
            for t in 0..d1 {
                let (lo, hi) = (r.min(t), r.max(t));
                let in_set = steps[lo..hi].iter().fold(0u32, |m, &j| m | 1 << j);
                let in_set = |j: usize| in_set & (1 << j) != 0;
                // towards a higher vertex the walk takes second neighbours
                let side = usize::from(t > r);
                let mut total = 0.0;
                if r == t {
                    total += 1.0;
                    total += self.walk(verts[r], |_| Some(0)) + self.walk(verts[r], |_| Some(1));
                } else {
                    total += self.walk(verts[r], |j| in_set(j).then_some(side));
                    total += self.walk(verts[r], |j| (!in_set(j)).then_some(1 - side));
                }
                m[r * d1 + t] = total;
            }
        }
        // the two blur orders walk each pair in opposite directions
        for r in 0..d1 {
            for t in 0..r {
                let avg = 0.5 * (m[r * d1 + t] + m[t * d1 + r]);
                m[r * d1 + t] = avg;
                m[t * d1 + r] = avg;
            }
        }
    }

    /// Follows the blur backwards from output point `start` (index + 1),
    /// taking neighbour `pick(j)` at direction `j` or staying put. Returns the
    /// path weight, or 0 if it leaves the lattice.
    fn walk(&self, start: u32, pick: impl Fn(usize) -> Option<usize>) -> f32 {
        let mut cur = start;
        let mut w = 1.0;
        for j in (0..=self.d).rev() {
            if let Some(side) = pick(j) {
                cur = self.neighbors[j * self.points + cur as usize - 1][side];
                if cur == 0 {
                    return 0.0;
                }
                w *= 0.5;
            }
        }
        w
    }

    fn alpha(&self) -> f32 {
        1.0 / (1.0 + 2f32.powi(-(self.d as i32)))
    }

    /// Filters `input` (`n` rows of `channels` values) into `out`.
    pub fn filter(&self, input: &[f32], channels: usize, out: &mut [f32]) {
        match channels {
            1 => self.filter_with::<1>(input, 1, out),
            2 => self.filter_with::<2>(input, 2, out),
            3 => self.filter_with::<3>(input, 3, out),
            4 => self.filter_with::<4>(input, 4, out),
            c => self.filter_with::<0>(input, c, out),
        }
    }

    // V > 0 fixes the channel count at compile time
    fn filter_with<const V: usize>(&self, input: &[f32], channels: usize, out: &mut [f32]) {
        let vd = if V > 0 { V } else { channels };
        assert_eq!(input.len(), self.n * vd);
        assert_eq!(out.len(), self.n * vd);
        let d1 = self.d + 1;
        // slot 0 is a permanent zero row standing in for absent neighbours
        let mut values = vec![0f32; (self.points + 1) * vd];
        let mut scratch = vec![0f32; (self.points + 1) * vd];

        for (i, row) in input.chunks_exact(vd).enumerate() {
            let sid = self.simplex[i] as usize;
            let offs = &self.offsets[sid * d1..(sid + 1) * d1];
            let ws = &self.weights[i * d1..(i + 1) * d1];
            for (&o, &w) in offs.iter().zip(ws) {
                let o = o as usize * vd;
                for (a, &b) in values[o..o + vd].iter_mut().zip(row) {
                    *a += w * b;
                }
            }
        }

        // The directional blurs do not commute once lattice points are
        // missing, so both orders are run and averaged to keep the operator
        // symmetric.
        let mut reverse = values.clone();
        self.blur::<V>(&mut values, &mut scratch, vd, 0..d1);
        self.blur::<V>(&mut reverse, &mut scratch, vd, (0..d1).rev());

        for (a, &b) in values.iter_mut().zip(&reverse) {
            *a += b;
        }

        let alpha = 0.5 * self.alpha();
        for (i, dst) in out.chunks_exact_mut(vd).enumerate() {
            let sid = self.simplex[i] as usize;
            let offs = &self.offsets[sid * d1..(sid + 1) * d1];
            let ws = &self.weights[i * d1..(i + 1) * d1];
            let o = offs[0] as usize * vd;
            for (a, &b) in dst.iter_mut().zip(&values[o..o + vd]) {
                *a = ws[0] * alpha * b;
            }
            for (&o, &w) in offs[1..].iter().zip(&ws[1..]) {
                let o = o as usize * vd;
                let w = w * alpha;
                for (a, &b) in dst.iter_mut().zip(&values[o..o + vd]) {
                    *a += w * b;
                }
            }
        }
    }

    fn blur<const V: usize>(&self, values: &mut Vec<f32>, scratch: &mut Vec<f32>, vd: usize, dirs: impl Iterator<Item = usize>) {
        let vd = if V > 0 { V } else { vd };
        for j in dirs {
            let nb = &self.neighbors[j * self.points..(j + 1) * self.points];
            for (p, &[a, b]) in nb.iter().enumerate() {
                let o = (p + 1) * vd;
                let (a, b) = (a as usize * vd, b as usize * vd);
                let center = &values[o..o + vd];
                let left = &values[a..a + vd];
                let right = &values[b..b + vd];
                let dst = &mut scratch[o..o + vd];
                for k in 0..vd {
                    dst[k] = center[k] + 0.5 * (left[k] + right[k]);
                }
            }
            std::mem::swap(values, scratch);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(features: &[f32], d: usize, input: &[f32], vd: usize) -> Vec<f32> {
        let n = features.len() / d;
        let mut out = vec![0f32; n * vd];
        for i in 0..n {
            for j in 0..n {
                let d2: f32 = (0..d)
                    .map(|k| (features[i * d + k] - features[j * d + k]).powi(2))
                    .sum();
                let w = (-0.5 * d2).exp();
                for c in 0..vd {
                    out[i * vd + c] += w * input[j * vd + c];
                }
            }
        }
        out
    }

    #[test]
    fn self_weights_match_impulse_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..=5 {
            for spread in [0.5f32, 2.0, 6.0] {
                let n = 40;
                let f: Vec<f32> = (0..n * d).map(|_| rng.random_range(0.0..spread)).collect();
                let lat = Permutohedral::new(&f, d);
                let sw = lat.self_weights();
                let mut out = vec![0f32; n];
                for i in 0..n {
                    let mut e = vec![0f32; n];
                    e[i] = 1.0;
                    lat.filter(&e, 1, &mut out);
                    assert!(
                        (out[i] - sw[i]).abs() < 1e-5,
                        "d={d} spread={spread} i={i}: {} vs {}",
                        out[i],
                        sw[i]
                    );
                }
            }
        }
    }

    #[test]
    fn barycentric_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=5 {
            let f: Vec<f32> = (0..50 * d).map(|_| rng.random_range(-20.0..20.0)).collect();
            let lat = Permutohedral::new(&f, d);
            for w in lat.weights.chunks_exact(d + 1) {
                let s: f32 = w.iter().sum();
                assert!((s - 1.0).abs() < 1e-4, "d={d} sum={s}");
                assert!(w.iter().all(|&x| x >= -1e-5));
            }
        }
    }

    #[test]
    fn identical_points_share_lattice_vertices() {
        let f = vec![0.3f32, -1.2, 0.3, -1.2, 0.3, -1.2];
        let lat = Permutohedral::new(&f, 2);
        assert_eq!(lat.lattice_size(), 3);
    }

    #[test]
    fn filter_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Vec<f32> = (0..40 * 3).map(|_| rng.random_range(0.0..4.0)).collect();
        let lat = Permutohedral::new(&f, 3);
        let a: Vec<f32> = (0..40).map(|_| rng.random()).collect();
        let b: Vec<f32> = (0..40).map(|_| rng.random()).collect();
        let ab: Vec<f32> = a.iter().zip(&b).map(|(x, y)| 2.0 * x + y).collect();
        let (mut fa, mut fb, mut fab) = (vec![0.0; 40], vec![0.0; 40], vec![0.0; 40]);
        lat.filter(&a, 1, &mut fa);
        lat.filter(&b, 1, &mut fb);
        lat.filter(&ab, 1, &mut fab);
        for i in 0..40 {
            assert!((fab[i] - (2.0 * fa[i] + fb[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn filter_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [2, 5] {
            let n = 30;
            let f: Vec<f32> = (0..n * d).map(|_| rng.random_range(0.0..3.0)).collect();
            let lat = Permutohedral::new(&f, d);
            let mut m = vec![0f32; n * n];
            let mut out = vec![0f32; n];
            for j in 0..n {
                let mut e = vec![0f32; n];
                e[j] = 1.0;
                lat.filter(&e, 1, &mut out);
                for i in 0..n {
                    m[i * n + j] = out[i];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    assert!((m[i * n + j] - m[j * n + i]).abs() < 1e-5, "d={d} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn rescaled_filter_approximates_gaussian_sums() {
        // 16x16 grid at sigma 3 plus a smooth colour ramp: the setting of the
        // smoothness and bilateral kernels on small images. The raw lattice
        // loses mass as d grows; scaling by the self weights restores it.
        for (d, make) in [
            (2usize, Box::new(|x: f32, y: f32| vec![x / 3.0, y / 3.0]) as Box<dyn Fn(f32, f32) -> Vec<f32>>),
            (
                5,
                Box::new(|x: f32, y: f32| {
                    vec![x / 8.0, y / 8.0, (x * 9.0) / 13.0, (y * 7.0) / 13.0, 40.0 / 13.0]
                }),
            ),
        ] {
            let mut f = Vec::new();
            for y in 0..16 {
                for x in 0..16 {
                    f.extend(make(x as f32, y as f32));
                }
            }
            let lat = Permutohedral::new(&f, d);
            let inv: Vec<f32> = lat.self_weights().iter().map(|s| 1.0 / s.sqrt()).collect();
            let mut approx = vec![0f32; 256];
            lat.filter(&inv, 1, &mut approx);
            let exact = brute(&f, d, &[1f32; 256], 1);
            let mean_rel: f32 = approx
                .iter()
                .zip(&inv)
                .zip(&exact)
                .map(|((a, s), e)| (a * s - e).abs() / e)
                .sum::<f32>()
                / 256.0;
            assert!(mean_rel < 0.15, "d={d}: mean relative error {mean_rel}");
        }
    }
}
