use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use attnforge::mask::ClassTable;
use attnforge::pipeline::{dataset_stats, run_pipeline, DatasetManifest};
use attnforge::prompts::{
    attach_scores, augment, curate, filter_by_score, read_jsonl, write_jsonl, AugmentPolicy, PromptRecord,
    ScoreFilter, SynonymTable,
};
use clap::{Args, Parser, Subcommand};
use log::info;

mod config;

use config::SynthArgs;

#[derive(Parser)]
#[command(name = "attnforge", version, about = "Segmentation pseudo-masks from diffusion cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a directory of attention containers into masks and reliability maps
    Synth {
        /// TOML or JSON file with the same keys as the flags
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        args: SynthArgs,
    },
    /// Caption corpus tools
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Summarize a dataset manifest
    Stats { manifest: PathBuf },
}

#[derive(Subcommand)]
enum PromptsCommand {
    /// Keep captions that mention a class (one caption per line)
    Curate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Add synonym variants of curated records
    Augment {
        /// Curated records (JSONL)
        #[arg(long)]
        input: PathBuf,
        /// Class name to synonym list (JSON)
        #[arg(long)]
        synonyms: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        /// Variants drawn per record
        #[arg(long, default_value_t = 1)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emit every (word, synonym) variant instead of sampling
        #[arg(long, conflicts_with_all = ["sample", "seed"])]
        all: bool,
        #[command(flatten)]
        out: Output,
    },
    /// Keep records by alignment score
    Filter {
        #[arg(long)]
        input: PathBuf,
        /// `index<TAB>score` sidecar; otherwise scores must already be in the records
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, conflicts_with = "min_score", required_unless_present = "min_score")]
        top_k: Option<usize>,
        #[arg(long)]
        min_score: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Args)]
struct Output {
    /// Output JSONL (stdout when omitted)
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Output {
    fn write(&self, records: &[PromptRecord]) -> Result<()> {
        match &self.output {
            Some(path) => {
                let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                let mut w = BufWriter::new(file);
                write_jsonl(&mut w, records)?;
                w.flush()?;
            }
            None => write_jsonl(io::stdout().lock(), records)?,
        }
        info!("wrote {} records", records.len());
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn synth(config: Option<PathBuf>, args: SynthArgs) -> Result<ExitCode> {
    let base = match config {
        Some(path) => SynthArgs::from_file(&path)?,
        None => SynthArgs::default(),
    };
    let cfg = args.over(base).into_config()?;
    let manifest = run_pipeline(&cfg)?;
    println!(
        "{} samples written, {} failed",
        manifest.samples.len(),
        manifest.failures.len()
    );
    Ok(if manifest.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn prompts(cmd: PromptsCommand) -> Result<()> {
    match cmd {
        PromptsCommand::Curate { corpus, classes, out } => {
            let table = ClassTable::from_file(&classes)?;
            let text = read_text(&corpus)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            out.write(&curate(&lines, &table))
        }
        PromptsCommand::Augment {
            input,
            synonyms,
            classes,
            sample,
            seed,
            all,
            out,
        } => {
            let table = ClassTable::from_file(&classes)?;
            let syn = SynonymTable::from_file(&synonyms, &table)?;
            let policy = if all {
                AugmentPolicy::OnePerSynonym
            } else {
                AugmentPolicy::Sample { k: sample, seed }
            };
            out.write(&augment(&read_jsonl(&input)?, &syn, policy))
        }
        PromptsCommand::Filter {
            input,
            scores,
            top_k,
            min_score,
            out,
        } => {
            let mut records = read_jsonl(&input)?;
            if let Some(path) = scores {
                attach_scores(&mut records, &read_text(&path)?)?;
            }
            let filter = match (top_k, min_score) {
                (Some(k), _) => ScoreFilter::TopK(k),
                (None, Some(t)) => ScoreFilter::AtLeast(t),
                (None, None) => bail!("one of --top-k or --min-score is required"),
            };
            out.write(&filter_by_score(&records, filter)?)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { config, args } => synth(config, args),
        Command::Prompts(cmd) => prompts(cmd).map(|_| ExitCode::SUCCESS),
        Command::Stats { manifest } => {
            let m = DatasetManifest::from_file(&manifest)?;
            print!("{}", dataset_stats(&m));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
