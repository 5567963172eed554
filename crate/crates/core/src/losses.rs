//! Reference values for the reliability-gated co-training loss.
//!
//! Reliable pixels are supervised by the pseudo-label through branch A's
//! cross-entropy. Unreliable pixels only ask the two branches to agree: each
//! branch is pulled toward the other's hard prediction (treated as a constant
//! target), and the two terms are averaged.

use crate::dcrf::LabelMap;
use crate::error::{Error, Result};
use crate::reliability::ReliabilityMap;

const LOG_EPS: f64 = 1e-8;

/// Per-pixel class distributions, `[labels][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMaps {
    pub width: usize,
    pub height: usize,
    pub labels: usize,
    pub p: Vec<f32>,
}

impl PredictionMaps {
    pub fn new(width: usize, height: usize, labels: usize, p: Vec<f32>) -> Result<Self> {
        if p.len() != width * height * labels {
            return Err(Error::Config(format!(
                "prediction buffer has {} values, expected {}",
                p.len(),
                width * height * labels
            )));
        }
        let maps = PredictionMaps { width, height, labels, p };
        let n = width * height;
        for i in 0..n {
            let s: f64 = (0..labels).map(|l| maps.p[l * n + i] as f64).sum();
            if (s - 1.0).abs() > 1e-5 || (0..labels).any(|l| maps.p[l * n + i] < 0.0) {
                return Err(Error::Config(format!("pixel {i} is not a distribution (sum {s})")));
            }
        }
        Ok(maps)
    }

    #[inline]
    fn at(&self, label: usize, i: usize) -> f32 {
        self.p[label * self.width * self.height + i]
    }

    fn argmax(&self, i: usize) -> usize {
        let mut best = 0;
        for l in 1..self.labels {
            if self.at(l, i) > self.at(best, i) {
                best = l;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub supervised_term: f64,
    pub consistency_term: f64,
    pub reliable_pixels: usize,
    pub unreliable_pixels: usize,
}

fn nll(p: f32) -> f64 {
    -(p as f64).max(LOG_EPS).ln()
}

pub fn reliability_gated_loss(
    p_a: &PredictionMaps,
    p_b: &PredictionMaps,
    s: &LabelMap,
    rmap: &ReliabilityMap,
    lambda: f64,
) -> Result<LossReport> {
    let dims = (p_a.width, p_a.height);
    if (p_b.width, p_b.height) != dims
        || (s.width, s.height) != dims
        || (rmap.width, rmap.height) != dims
        || p_a.labels != p_b.labels
    {
        return Err(Error::Config("loss inputs disagree in shape".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }

    let (mut sup, mut cons) = (0.0f64, 0.0f64);
    let (mut reliable, mut unreliable) = (0usize, 0usize);
    for (i, (&gate, &label)) in rmap.r.iter().zip(&s.s).enumerate() {
        if gate == 1 {
            let label = label as usize;
            if label >= p_a.labels {
                return Err(Error::Config(format!("label {label} outside prediction classes")));
            }
            sup += nll(p_a.at(label, i));
            reliable += 1;
        } else {
            let target_a = p_b.argmax(i);
            let target_b = p_a.argmax(i);
            cons += 0.5 * (nll(p_a.at(target_a, i)) + nll(p_b.at(target_b, i)));
            unreliable += 1;
        }
    }
    let supervised_term = if reliable > 0 { sup / reliable as f64 } else { 0.0 };
    let consistency_term = if unreliable > 0 { cons / unreliable as f64 } else { 0.0 };
    Ok(LossReport {
        total: supervised_term + lambda * consistency_term,
        supervised_term,
        consistency_term,
        reliable_pixels: reliable,
        unreliable_pixels: unreliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(labels: &[usize], k: usize) -> PredictionMaps {
        let n = labels.len();
        let mut p = vec![0.0; n * k];
        for (i, &l) in labels.iter().enumerate() {
            p[l * n + i] = 1.0;
        }
        PredictionMaps::new(n, 1, k, p).unwrap()
    }

    fn gate(r: Vec<u8>) -> ReliabilityMap {
        ReliabilityMap { width: r.len(), height: 1, r }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let s = LabelMap { width: 3, height: 1, s: vec![0, 2, 1] };
        let p = one_hot(&[0, 2, 1], 3);
        let rep = reliability_gated_loss(&p, &p, &s, &gate(vec![1, 1, 1]), 1.0).unwrap();
        assert_eq!(rep.total, 0.0);
        assert_eq!((rep.reliable_pixels, rep.unreliable_pixels), (3, 0));
    }

    #[test]
    fn agreeing_branches_have_zero_consistency() {
        let s = LabelMap { width: 2, height: 1, s: vec![1, 1] };
        let p = one_hot(&[0, 1], 2);
        let rep = reliability_gated_loss(&p, &p, &s, &gate(vec![0, 0]), 1.0).unwrap();
        assert_eq!(rep.consistency_term, 0.0);
        assert_eq!(rep.supervised_term, 0.0);
    }

    #[test]
    fn log_is_clamped() {
        let s = LabelMap { width: 1, height: 1, s: vec![1] };
        let p = one_hot(&[0], 2);
        let rep = reliability_gated_loss(&p, &p, &s, &gate(vec![1]), 0.0).unwrap();
        assert!((rep.supervised_term - (-(1e-8f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_distributions_and_shape_mismatch() {
        assert!(PredictionMaps::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(PredictionMaps::new(1, 1, 2, vec![0.5]).is_err());
        let s = LabelMap { width: 2, height: 1, s: vec![0, 0] };
        let p = one_hot(&[0], 2);
        assert!(reliability_gated_loss(&p, &p, &s, &gate(vec![1]), 1.0).is_err());
    }
}
