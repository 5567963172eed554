use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub container_id: String,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
    pub reliability: String,
    pub present_classes: Vec<u32>,
    pub reliable_fraction: f64,
    /// Pixel count per label, index 0 = background.
    pub class_pixels: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub container_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Label names, index 0 = background.
    pub labels: Vec<String>,
    pub samples: Vec<SampleEntry>,
    /// Pixel count per label over all samples.
    pub class_histogram: Vec<u64>,
    pub failures: Vec<FailureEntry>,
}

impl DatasetManifest {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Human-readable summary: per-label pixel shares, mean reliable fraction and
/// the failure count.
pub fn dataset_stats(manifest: &DatasetManifest) -> String {
    let total: u64 = manifest.class_histogram.iter().sum();
    let mean_reliable = if manifest.samples.is_empty() {
        0.0
    } else {
        manifest.samples.iter().map(|s| s.reliable_fraction).sum::<f64>() / manifest.samples.len() as f64
    };
    let mut out = String::new();
    let _ = writeln!(out, "samples: {}", manifest.samples.len());
    let _ = writeln!(out, "failures: {}", manifest.failures.len());
    let _ = writeln!(out, "mean reliable fraction: {mean_reliable:.6}");
    let _ = writeln!(out, "pixel shares:");
    for (i, name) in manifest.labels.iter().enumerate() {
        let count = manifest.class_histogram.get(i).copied().unwrap_or(0);
        let share = if total == 0 { 0.0 } else { count as f64 / total as f64 };
        let _ = writeln!(out, "  {i:>3} {name:<16} {share:.6}");
    }
    out
}

/// Per-label shares as numbers, in label order.
pub fn pixel_shares(manifest: &DatasetManifest) -> Vec<f64> {
    let total: u64 = manifest.class_histogram.iter().sum();
    manifest
        .labels
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let c = manifest.class_histogram.get(i).copied().unwrap_or(0);
            if total == 0 {
                0.0
            } else {
                c as f64 / total as f64
            }
        })
        .collect()
}
