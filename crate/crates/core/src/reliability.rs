//! Binary reliability gates over pseudo-labels.
//!
//! Spatially normalized generative attention spreads a fixed mass over the
//! whole object, so large objects get weak per-pixel activations. The
//! adaptive gate compares each pixel against a threshold proportional to the
//! mean activation of its label over the region labeling assigned to it,
//! rather than against one global constant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dcrf::LabelMap;
use crate::error::{Error, Result};
use crate::mask::ClassProbMaps;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "threshold")]
pub enum ReliabilityMode {
    Constant(f32),
    #[default]
    Adaptive,
}


impl std::str::FromStr for ReliabilityMode {
    type Err = Error;

    /// `adaptive` or `constant:<r>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(ReliabilityMode::Adaptive);
        }
        if let Some(r) = s.strip_prefix("constant:").or_else(|| s.strip_prefix("constant=")) {
            let r: f32 = r
                .parse()
                .map_err(|_| Error::Config(format!("bad constant threshold {r:?}")))?;
            return Ok(ReliabilityMode::Constant(r));
        }
        Err(Error::Config(format!(
            "unknown reliability mode {s:?} (expected adaptive or constant:<r>)"
        )))
    }
}

/// Per-label thresholds for the labels occurring in a label map.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    pub thresholds: BTreeMap<u16, f32>,
    pub alpha: f32,
}

impl ThresholdTable {
    pub fn get(&self, label: u16) -> Option<f32> {
        self.thresholds.get(&label).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReliabilityMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, 1 = reliable.
    pub r: Vec<u8>,
}

impl ReliabilityMap {
    pub fn reliable_count(&self) -> usize {
        self.r.iter().filter(|&&v| v == 1).count()
    }

    pub fn reliable_fraction(&self) -> f64 {
        if self.r.is_empty() {
            0.0
        } else {
            self.reliable_count() as f64 / self.r.len() as f64
        }
    }
}

/// Reliable wherever the strongest of the `N + 1` maps reaches `r`.
pub fn constant_reliability(maps: &ClassProbMaps, r: f32) -> ReliabilityMap {
    let n = maps.width * maps.height;
    let labels = maps.num_labels();
    let out = (0..n)
        .map(|i| {
            let max = (0..labels)
                .map(|l| maps.maps[l * n + i])
                .fold(f32::NEG_INFINITY, f32::max);
            u8::from(max >= r)
        })
        .collect();
    ReliabilityMap {
        width: maps.width,
        height: maps.height,
        r: out,
    }
}

fn check_shapes(maps: &ClassProbMaps, s: &LabelMap) -> Result<()> {
    if maps.width != s.width || maps.height != s.height {
        return Err(Error::Config(format!(
            "label map is {}x{} but class maps are {}x{}",
            s.width, s.height, maps.width, maps.height
        )));
    }
    Ok(())
}

/// `r_c = alpha * mean of A_c over {S = c}` for every label occurring in `s`.
pub fn adaptive_thresholds(maps: &ClassProbMaps, s: &LabelMap, alpha: f32) -> Result<ThresholdTable> {
    check_shapes(maps, s)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let n = maps.width * maps.height;
    let labels = maps.num_labels();
    let mut sums: BTreeMap<u16, (f64, u64)> = BTreeMap::new();
    for (i, &label) in s.s.iter().enumerate() {
        if label as usize >= labels {
            return Err(Error::Config(format!("label {label} outside {labels} class maps")));
        }
        let e = sums.entry(label).or_insert((0.0, 0));
        e.0 += maps.maps[label as usize * n + i] as f64;
        e.1 += 1;
    }
    let thresholds = sums
        .into_iter()
        .map(|(label, (sum, count))| (label, (alpha as f64 * (sum / count as f64)) as f32))
        .collect();
    Ok(ThresholdTable { thresholds, alpha })
}

/// Reliable where the activation of the assigned label reaches that label's
/// threshold (inclusive).
pub fn reliability_map(maps: &ClassProbMaps, s: &LabelMap, table: &ThresholdTable) -> Result<ReliabilityMap> {
    check_shapes(maps, s)?;
    let n = maps.width * maps.height;
    let r = s
        .s
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let t = table
                .get(label)
                .ok_or_else(|| Error::Config(format!("no threshold for label {label}")))?;
            Ok(u8::from(maps.maps[label as usize * n + i] >= t))
        })
        .collect::<Result<_>>()?;
    Ok(ReliabilityMap {
        width: maps.width,
        height: maps.height,
        r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(w: usize, h: usize, planes: Vec<Vec<f32>>) -> ClassProbMaps {
        let present = (1..planes.len() as u32).collect();
        ClassProbMaps {
            width: w,
            height: h,
            maps: planes.concat(),
            beta: 0.1,
            present,
        }
    }

    #[test]
    fn constant_threshold_cases() {
        let m = maps(2, 1, vec![vec![0.3, 0.1], vec![0.2, 0.7]]);
        assert_eq!(constant_reliability(&m, 0.0).r, vec![1, 1]);
        assert_eq!(constant_reliability(&m, 1.0 + 1e-6).r, vec![0, 0]);
        assert_eq!(constant_reliability(&m, 0.5).r, vec![0, 1]);
    }

    #[test]
    fn threshold_is_scaled_region_mean() {
        let m = maps(2, 2, vec![vec![0.0; 4], vec![0.6, 0.6, 0.6, 0.6]]);
        let s = LabelMap { width: 2, height: 2, s: vec![1; 4] };
        let t = adaptive_thresholds(&m, &s, 0.5).unwrap();
        assert!((t.get(1).unwrap() - 0.3).abs() < 1e-7);
        assert_eq!(t.get(0), None);
    }

    #[test]
    fn uniform_region_is_fully_reliable_at_alpha_one() {
        let m = maps(3, 1, vec![vec![0.9, 0.0, 0.0], vec![0.1, 0.37, 0.37]]);
        let s = LabelMap { width: 3, height: 1, s: vec![0, 1, 1] };
        let t = adaptive_thresholds(&m, &s, 1.0).unwrap();
        assert_eq!(reliability_map(&m, &s, &t).unwrap().r, vec![1, 1, 1]);
    }

    #[test]
    fn huge_alpha_rejects_everything() {
        let m = maps(2, 1, vec![vec![0.5, 0.0], vec![0.2, 0.8]]);
        let s = LabelMap { width: 2, height: 1, s: vec![0, 1] };
        let t = adaptive_thresholds(&m, &s, 1e6).unwrap();
        assert_eq!(reliability_map(&m, &s, &t).unwrap().r, vec![0, 0]);
    }

    #[test]
    fn missing_threshold_is_a_config_error() {
        let m = maps(2, 1, vec![vec![0.5, 0.0], vec![0.2, 0.8]]);
        let s = LabelMap { width: 2, height: 1, s: vec![0, 1] };
        let table = ThresholdTable {
            thresholds: BTreeMap::from([(0, 0.1)]),
            alpha: 1.0,
        };
        assert!(matches!(reliability_map(&m, &s, &table), Err(Error::Config(_))));
    }

    #[test]
    fn zero_thresholds_accept_everything() {
        let m = maps(2, 1, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = LabelMap { width: 2, height: 1, s: vec![0, 1] };
        let table = ThresholdTable {
            thresholds: BTreeMap::from([(0, 0.0), (1, 0.0)]),
            alpha: 1.0,
        };
        assert_eq!(reliability_map(&m, &s, &table).unwrap().r, vec![1, 1]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("adaptive".parse::<ReliabilityMode>().unwrap(), ReliabilityMode::Adaptive);
        assert_eq!(
            "constant:0.4".parse::<ReliabilityMode>().unwrap(),
            ReliabilityMode::Constant(0.4)
        );
        assert!("fixed".parse::<ReliabilityMode>().is_err());
    }
}
