//! `dgow`: build word graphs, analyze class similarity, train, evaluate,
//! predict and run the window/aggregator ablations.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dgow::spectral::{DEFAULT_DIM, DEFAULT_SAMPLE};
use dgow::{Aggregator, Construction, DatasetProfile, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "dgow", version, about = "Walk-based text classification over per-class word graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the graph of a corpus and write it as a graph file.
    BuildGraph(BuildGraph),
    /// Spectral similarity between the sentences of each class pair.
    AnalyzeSimilarity(AnalyzeSimilarity),
    /// Train repeated models and write the best one as a bundle.
    Train(Train),
    /// Score a bundle on the test split of a corpus.
    Evaluate(Evaluate),
    /// Classify raw sentences, one per line.
    Predict(Predict),
    /// Train at several window sizes.
    AblateWindow(AblateWindow),
    /// Train with each aggregator.
    AblateAggregator(AblateAggregator),
}

/// Experiment settings. Flags override the `--config` file, which overrides
/// the defaults.
#[derive(Args, Debug, Default)]
pub struct ExperimentArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus TSV (`split<TAB>label<TAB>text`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Preprocessing profile: default, mr, sentiment, r8, r52, ohsumed, ...
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    keep_stopwords: bool,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    construction: Option<Construction>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gcn_layers: Option<usize>,
    #[arg(long)]
    gcn_hidden: Option<usize>,
    #[arg(long)]
    lstm_hidden: Option<usize>,
    #[arg(long)]
    aggregator: Option<Aggregator>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    prod_window: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl ExperimentArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.dataset {
            c.dataset = Some(p.clone());
        }
        if let Some(name) = &self.profile {
            c.profile = DatasetProfile::by_name(name).with_context(|| format!("unknown profile {name:?}"))?;
        }
        if self.keep_stopwords {
            c.profile.keep_stopwords = true;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            min_count => min_count,
            window => window,
            construction => construction,
            val_fraction => val_fraction,
            seed => seed,
            gcn_layers => model.gcn_layers,
            gcn_hidden => model.gcn_hidden,
            lstm_hidden => model.lstm_hidden,
            aggregator => model.aggregator,
            mlp_hidden => model.mlp_hidden,
            lr => train.lr,
            max_epochs => train.max_epochs,
            patience => train.patience,
            repeats => train.repeats,
            batch_size => train.batch_size,
        );
        if self.prod_window.is_some() {
            c.model.prod_window = self.prod_window;
        }
        if self.clip_norm.is_some() {
            c.train.clip_norm = self.clip_norm;
        }
        if let Some(seed) = self.seed {
            c.train.seed = seed;
        }
        if let Some(out) = &self.out {
            c.output_dir = Some(out.clone());
        }
        c.validate()?;
        Ok(c)
    }

    pub fn force(&self) -> bool {
        self.force
    }
}

pub fn dataset_of(c: &ExperimentConfig) -> Result<PathBuf> {
    match &c.dataset {
        Some(p) => Ok(p.clone()),
        None => bail!("no dataset given (--dataset or \"dataset\" in the config)"),
    }
}

pub fn output_of(c: &ExperimentConfig) -> Result<PathBuf> {
    match &c.output_dir {
        Some(p) => Ok(p.clone()),
        None => bail!("no output directory given (--out or \"output_dir\" in the config)"),
    }
}

#[derive(Args, Debug)]
pub struct BuildGraph {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
pub struct AnalyzeSimilarity {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Graph file from `build-graph`; its window and construction are used.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Comma-separated window sizes; ignored with --graph.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 5, 10])]
    windows: Vec<usize>,
    /// Spectral embedding dimension.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    /// Sentences sampled per class.
    #[arg(long, default_value_t = DEFAULT_SAMPLE)]
    sample: usize,
    /// Only the most frequent classes.
    #[arg(long)]
    top_classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    /// Bundle directory written by `train`.
    #[arg(long)]
    bundle: PathBuf,
    /// Corpus TSV; its test split is scored.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct Predict {
    #[arg(long)]
    bundle: PathBuf,
    /// Raw sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
pub struct AblateWindow {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [2, 5, 10])]
    windows: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct AblateAggregator {
    #[command(flatten)]
    exp: ExperimentArgs,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildGraph(a) => commands::build_graph(&a.exp),
        Command::AnalyzeSimilarity(a) => commands::analyze_similarity(&a),
        Command::Train(a) => commands::train(&a.exp),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::AblateWindow(a) => commands::ablate_window(&a.exp, &a.windows),
        Command::AblateAggregator(a) => commands::ablate_aggregator(&a.exp),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
