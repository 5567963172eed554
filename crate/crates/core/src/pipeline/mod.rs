//! Batch dataset generation from a directory of attention containers.

mod manifest;
mod voc;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dcrf::{dcrf_label, Backend, DcrfParams, LabelMap};
use crate::error::{Error, Result};
use crate::mask::{
    aggregate_class_maps, background_map, build_token_index, normalize_maps, ClassProbMaps,
    ClassTable, NormMode,
};
use crate::reliability::{
    adaptive_thresholds, constant_reliability, reliability_map, ReliabilityMap, ReliabilityMode,
};
use crate::tensor_io::{fuse_layers_for, read_attention_stack, AttentionStack, TimestepPolicy};

pub use manifest::{dataset_stats, pixel_shares, DatasetManifest, FailureEntry, SampleEntry};
pub use voc::{emit_reliability_png, emit_voc_mask, read_voc_mask, voc_palette};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepChoice {
    /// The middle captured timestep of each container.
    #[default]
    Midpoint,
    Single(u32),
    MeanOver(Vec<u32>),
}

impl TimestepChoice {
    pub fn resolve(&self, stack: &AttentionStack) -> Result<TimestepPolicy> {
        match self {
            TimestepChoice::Midpoint => TimestepPolicy::midpoint(stack)
                .ok_or_else(|| Error::Corrupt("container has no attention layers".into())),
            TimestepChoice::Single(t) => Ok(TimestepPolicy::Single(*t)),
            TimestepChoice::MeanOver(ts) => Ok(TimestepPolicy::MeanOver(ts.clone())),
        }
    }
}

impl std::str::FromStr for TimestepChoice {
    type Err = Error;

    /// `midpoint`, a single step such as `50`, or `mean:10,50,90`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad timestep policy {s:?}"));
        if s == "midpoint" {
            Ok(TimestepChoice::Midpoint)
        } else if let Some(list) = s.strip_prefix("mean:") {
            let ts = list
                .split(',')
                .map(|t| t.trim().parse::<u32>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            Ok(TimestepChoice::MeanOver(ts))
        } else {
            s.parse().map(TimestepChoice::Single).map_err(|_| bad())
        }
    }
}

/// Everything that shapes the maps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSettings {
    pub beta: f32,
    pub alpha: f32,
    pub norm: NormMode,
    pub dcrf: DcrfParams,
    pub backend: Backend,
    pub timestep: TimestepChoice,
    pub reliability: ReliabilityMode,
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            beta: 0.1,
            alpha: 1.0,
            norm: NormMode::PerClassMax,
            dcrf: DcrfParams::default(),
            backend: Backend::Lattice,
            timestep: TimestepChoice::Midpoint,
            reliability: ReliabilityMode::Adaptive,
        }
    }
}

impl SynthesisSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let ReliabilityMode::Constant(r) = self.reliability {
            if !(r.is_finite() && r >= 0.0) {
                return Err(Error::Config(format!("constant threshold must be >= 0, got {r}")));
            }
        }
        self.dcrf.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub classes_file: PathBuf,
    pub settings: SynthesisSettings,
    /// Worker threads; 0 = one per core.
    pub jobs: usize,
}

/// Maps derived from one container.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub probs: ClassProbMaps,
    pub labels: LabelMap,
    pub reliability: ReliabilityMap,
}

/// Fusion, class aggregation, background prior, CRF labeling and the
/// reliability gate for one stack.
pub fn synthesize(stack: &AttentionStack, table: &ClassTable, settings: &SynthesisSettings) -> Result<Synthesis> {
    let rel = build_token_index(&stack.tokens, table);
    let positions = rel.all_positions();
    if positions.is_empty() {
        return Err(Error::Config(format!("prompt {:?} matched no class", stack.prompt)));
    }
    let policy = settings.timestep.resolve(stack)?;
    let fused = fuse_layers_for(stack, &policy, &positions)?;
    let raw = aggregate_class_maps(&fused, &rel);
    let normalized = normalize_maps(&raw, settings.norm);
    let probs = background_map(&normalized, settings.beta)?;
    let (labels, _) = dcrf_label(&probs, &stack.image, &settings.dcrf, settings.backend)?;
    let reliability = match settings.reliability {
        ReliabilityMode::Constant(r) => constant_reliability(&probs, r),
        ReliabilityMode::Adaptive => {
            let table = adaptive_thresholds(&probs, &labels, settings.alpha)?;
            reliability_map(&probs, &labels, &table)?
        }
    };
    Ok(Synthesis {
        probs,
        labels,
        reliability,
    })
}

fn list_containers(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(input)
        .map_err(|e| Error::Config(format!("cannot read input dir {}: {e}", input.display())))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(input, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn process_one(
    id: &str,
    dir: &Path,
    table: &ClassTable,
    config: &PipelineConfig,
) -> Result<SampleEntry> {
    let stack = read_attention_stack(dir)?;
    let out = synthesize(&stack, table, &config.settings)?;

    let image = format!("images/{id}.png");
    let mask = format!("masks/{id}.png");
    let reliability = format!("reliability/{id}.png");
    let root = &config.output_dir;
    voc::atomic_write(&root.join(&image), |w| {
        crate::codec::encode_rgb(&root.join(&image), w, &stack.image)
    })?;
    emit_voc_mask(&out.labels, table, root.join(&mask))?;
    emit_reliability_png(&out.reliability, root.join(&reliability))?;

    let mut class_pixels = vec![0u64; table.len() + 1];
    for &l in &out.labels.s {
        class_pixels[l as usize] += 1;
    }
    Ok(SampleEntry {
        container_id: id.to_string(),
        image,
        mask,
        reliability,
        present_classes: out.probs.present.clone(),
        reliable_fraction: out.reliability.reliable_fraction(),
        class_pixels,
    })
}

/// Processes every container directory under `input_dir` and writes the
/// dataset plus `manifest.json` under `output_dir`. Per-container failures
/// are recorded in the manifest instead of aborting the run.
pub fn run_pipeline(config: &PipelineConfig) -> Result<DatasetManifest> {
    config.settings.validate()?;
    let table = ClassTable::from_file(&config.classes_file)
        .map_err(|e| Error::Config(format!("classes file: {e}")))?;
    if table.len() > 255 {
        return Err(Error::Config(format!(
            "{} classes do not fit an 8-bit palette mask",
            table.len()
        )));
    }
    let containers = list_containers(&config.input_dir)?;
    for sub in ["images", "masks", "reliability"] {
        let d = config.output_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    info!("processing {} containers", containers.len());
    let results: Vec<(String, Result<SampleEntry>)> = pool.install(|| {
        containers
            .par_iter()
            .map(|(id, dir)| (id.clone(), process_one(id, dir, &table, config)))
            .collect()
    });

    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut class_histogram = vec![0u64; table.len() + 1];
    for (id, res) in results {
        match res {
            Ok(entry) => {
                for (h, c) in class_histogram.iter_mut().zip(&entry.class_pixels) {
                    *h += c;
                }
                samples.push(entry);
            }
            Err(e) => {
                warn!("skipping {id}: {e}");
                failures.push(FailureEntry {
                    container_id: id,
                    error: e.to_string(),
                });
            }
        }
    }

    let labels = std::iter::once("background".to_string())
        .chain(table.classes().iter().map(|c| c.name.clone()))
        .collect();
    let manifest = DatasetManifest {
        version: 1,
        labels,
        samples,
        class_histogram,
        failures,
    };
    let path = config.output_dir.join(MANIFEST_FILE);
    voc::atomic_write(&path, |w| {
        std::io::Write::write_all(w, manifest.to_json().as_bytes()).map_err(|e| Error::io(&path, e))
    })?;
    Ok(manifest)
}
