use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnforge::pipeline::{PipelineConfig, SynthesisSettings};
use serde::Deserialize;

/// Flat settings for `synth`; keys mirror the command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, clap::Args)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// Directory of attention containers, one per subdirectory
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Dataset output directory
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Class table (JSON)
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Background offset subtracted from the inverted foreground
    #[arg(long)]
    pub beta: Option<f32>,
    /// Scale of the adaptive reliability thresholds
    #[arg(long)]
    pub alpha: Option<f32>,
    /// per-class-max or global-max
    #[arg(long)]
    pub norm: Option<String>,
    /// adaptive or constant:R
    #[arg(long)]
    pub reliability: Option<String>,
    /// Mean-field iterations
    #[arg(long)]
    #[serde(alias = "dcrf_iters")]
    pub dcrf_iters: Option<usize>,
    /// midpoint, a step such as 50, or mean:10,50,90
    #[arg(long)]
    pub timestep: Option<String>,
    /// lattice or exact
    #[arg(long)]
    pub backend: Option<String>,
    /// Worker threads (0 = one per core)
    #[arg(long)]
    pub jobs: Option<usize>,
}

impl SynthArgs {
    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set here win over `base`.
    pub fn over(self, base: SynthArgs) -> SynthArgs {
        SynthArgs {
            input: self.input.or(base.input),
            output: self.output.or(base.output),
            classes: self.classes.or(base.classes),
            beta: self.beta.or(base.beta),
            alpha: self.alpha.or(base.alpha),
            norm: self.norm.or(base.norm),
            reliability: self.reliability.or(base.reliability),
            dcrf_iters: self.dcrf_iters.or(base.dcrf_iters),
            timestep: self.timestep.or(base.timestep),
            backend: self.backend.or(base.backend),
            jobs: self.jobs.or(base.jobs),
        }
    }

    pub fn into_config(self) -> Result<PipelineConfig> {
        let mut settings = SynthesisSettings::default();
        if let Some(v) = self.beta {
            settings.beta = v;
        }
        if let Some(v) = self.alpha {
            settings.alpha = v;
        }
        if let Some(v) = self.norm {
            settings.norm = v.parse()?;
        }
        if let Some(v) = self.reliability {
            settings.reliability = v.parse()?;
        }
        if let Some(v) = self.dcrf_iters {
            settings.dcrf.iterations = v;
        }
        if let Some(v) = self.timestep {
            settings.timestep = v.parse()?;
        }
        if let Some(v) = self.backend {
            settings.backend = v.parse()?;
        }
        settings.validate()?;
        let (Some(input_dir), Some(output_dir), Some(classes_file)) = (self.input, self.output, self.classes) else {
            bail!("--input, --output and --classes are required (on the command line or in --config)");
        };
        Ok(PipelineConfig {
            input_dir,
            output_dir,
            classes_file,
            settings,
            jobs: self.jobs.unwrap_or(0),
        })
    }
}
