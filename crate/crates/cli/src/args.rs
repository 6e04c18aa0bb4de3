use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maf_core::algorithms::{Algorithm, DEFAULT_STEPS};
use maf_core::analysis::DEFAULT_SHRINKAGE;
use maf_core::protocols::{AblationMode, Protocol};
use maf_core::synthworld::PerceptorMode;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "mafbench",
    version,
    about = "Modality-agnostic forgery detection benchmark on synthetic multimodal worlds"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resolve a world configuration and write it to OUT/world.json.
    GenWorld(GenWorldArgs),
    /// Train and evaluate a single run.
    Run(RunArgs),
    /// Train every (held-out modality, algorithm, trial, seed) run and select per protocol.
    Sweep(SweepArgs),
    /// Redo model selection and the report for an existing runs.jsonl.
    Select(SelectArgs),
    /// ERM under the full, single-modality and random-init ablations.
    Ablate(AblateArgs),
    /// Train one run and analyze its semantic and forensic feature spaces.
    Analyze(AnalyzeArgs),
    /// Aggregate runs.jsonl into report.csv, or verify a manifest.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Semantic perceptors shared across modalities.
    Weak,
    /// Isolated self-supervised perceptors.
    Strong,
}

impl Setting {
    pub fn mode(self) -> PerceptorMode {
        match self {
            Setting::Weak => PerceptorMode::Semantic,
            Setting::Strong => PerceptorMode::Isolated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolArg {
    /// Validation splits of the training modalities.
    Tm,
    /// Leave one training modality out.
    Loo,
    /// Validation split of the held-out modality.
    Oracle,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Tm => Protocol::Tm,
            ProtocolArg::Loo => Protocol::Loo,
            ProtocolArg::Oracle => Protocol::Oracle,
        }
    }
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    let a: Algorithm = s.parse().map_err(|e: maf_core::Error| e.to_string())?;
    if !a.is_implemented() {
        return Err(format!("algorithm '{a}' is not implemented"));
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct AlgorithmList(pub Vec<Algorithm>);

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ModeList(pub Vec<AblationMode>);

/// Comma-separated algorithm names, or `all`.
pub fn parse_algorithms(s: &str) -> Result<AlgorithmList, String> {
    if s.trim() == "all" {
        return Ok(AlgorithmList(Algorithm::IMPLEMENTED.to_vec()));
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let a = parse_algorithm(part)?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    Ok(AlgorithmList(out))
}

/// Comma-separated ablation modes, or `all`.
pub fn parse_modes(s: &str) -> Result<ModeList, String> {
    if s.trim() == "all" {
        return Ok(ModeList(AblationMode::ALL.to_vec()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<AblationMode>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()
        .map(ModeList)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Exec {
    /// Worker threads for independent runs (0 uses every core).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Root of every derived random stream.
    #[arg(long, default_value_t = 0)]
    pub global_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenWorldArgs {
    /// World configuration JSON; missing keys take defaults, unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's world seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// World configuration (as written by gen-world).
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_enum, default_value_t = Setting::Weak)]
    pub setting: Setting,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Tm)]
    pub protocol: ProtocolArg,
    #[arg(long, value_parser = parse_algorithm)]
    pub algorithm: Algorithm,
    /// Held-out modality (defaults to the last one).
    #[arg(long)]
    pub test_modality: Option<usize>,
    /// Hyperparameter trial; trial 0 uses the defaults.
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: Exec,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    /// World configuration (as written by gen-world).
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_enum, default_value_t = Setting::Weak)]
    pub setting: Setting,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Tm)]
    pub protocol: ProtocolArg,
    /// Comma-separated algorithm names, or `all`.
    #[arg(long, value_parser = parse_algorithms, default_value = "all")]
    pub algorithms: AlgorithmList,
    /// Hyperparameter trials per algorithm; trial 0 uses the defaults.
    #[arg(long, default_value_t = 9)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: Exec,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    /// runs.jsonl of a sweep.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Comma-separated modes (full, single_modality, random_init), or `all`.
    #[arg(long, value_parser = parse_modes, default_value = "all")]
    pub modes: ModeList,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: Exec,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long, value_parser = parse_algorithm, default_value = "irm")]
    pub algorithm: Algorithm,
    #[arg(long, value_enum, default_value_t = Setting::Weak)]
    pub setting: Setting,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Oracle)]
    pub protocol: ProtocolArg,
    /// Held-out modality (defaults to the last one).
    #[arg(long)]
    pub test_modality: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub trial: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: usize,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Neurons per modality in the co-activation sets (defaults to a quarter of the width).
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Covariance shrinkage toward the scaled identity.
    #[arg(long, default_value_t = DEFAULT_SHRINKAGE)]
    pub shrinkage: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub exec: Exec,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["runs", "verify"]))]
pub struct ReportArgs {
    /// runs.jsonl to aggregate (selection flags as recorded).
    #[arg(long, requires = "out")]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory whose manifest.json should be checked against the files.
    #[arg(long, conflicts_with = "runs")]
    pub verify: Option<PathBuf>,
}
