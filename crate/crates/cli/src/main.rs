use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Joinable table discovery over column repositories.
#[derive(Debug, Parser)]
#[command(name = "lakejoin", version, propagate_version = true)]
pub struct Cli {
    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for data-parallel steps.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a repository from CSV/TSV tables or JSON-lines columns.
    Ingest(IngestArgs),
    /// Render repository columns to text.
    Transform(TransformArgs),
    /// Embed a repository and build an HNSW index.
    Index(IndexArgs),
    /// Top-k search with an HNSW index, MinHash sketches or the exact oracle.
    Search(SearchArgs),
    /// Exact top-k joinability search.
    Oracle(OracleArgs),
    /// Generate contrastive training pairs and batches.
    Traingen(TraingenArgs),
    /// Score result files against exact results.
    Eval(EvalArgs),
    /// Generate a synthetic lake and time a search method.
    Bench(BenchArgs),
    /// Serve the hash embedder over the embedder protocol.
    #[command(hide = true)]
    ServeHash(ServeHashArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Csv,
    Tsv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Input files or directories (directories are scanned for .csv, .tsv and .jsonl).
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Input format; inferred from the file extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Key column of each table: explicit:<n> or maxdistinct.
    #[arg(long, default_value = "maxdistinct")]
    pub key: String,
    /// Minimum distinct cells for a column to be admitted.
    #[arg(long)]
    pub min_cells: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RenderArgs {
    /// Column-to-text pattern, e.g. title-colname-stat-col.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Cell sampling for long columns: frequency, random:<seed> or truncate.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Token budget of the rendered text.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Cell length unit in statistics: chars or words.
    #[arg(long)]
    pub stat_unit: Option<String>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub repo: PathBuf,
    #[command(flatten)]
    pub render: RenderArgs,
    /// Count tokens with this embedder instead of whitespace splitting.
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct HnswArgs {
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub ef_construction: Option<usize>,
    #[arg(long)]
    pub ef_search: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub repo: PathBuf,
    /// hash:<dim>:<seed> or external:<host:port|command>.
    #[arg(long)]
    pub embedder: Option<String>,
    #[command(flatten)]
    pub render: RenderArgs,
    #[command(flatten)]
    pub hnsw: HnswArgs,
    /// Seed for HNSW level assignment.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ann,
    Minhash,
    Oracle,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_enum, default_value = "ann")]
    pub method: Method,
    /// HNSW index (ann).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Repository (minhash, oracle; for ann it supplies document frequencies).
    #[arg(long)]
    pub repo: Option<PathBuf>,
    /// Query columns as JSON lines.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Overrides the embedder recorded in the index.
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub ef_search: Option<usize>,
    /// Number of MinHash functions (minhash).
    #[arg(long)]
    pub m: Option<usize>,
    /// MinHash seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JoinModeArg {
    Equi,
    Semantic,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub repo: PathBuf,
    #[arg(long, value_enum, default_value = "equi")]
    pub mode: JoinModeArg,
    /// Distance threshold for semantic matches.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub queries: PathBuf,
    /// Cell embedder for semantic mode.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Pivots for semantic pruning (0 disables pruning).
    #[arg(long, default_value_t = lakejoin::oracle::DEFAULT_PIVOTS)]
    pub pivots: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraingenArgs {
    #[arg(long)]
    pub repo: PathBuf,
    #[arg(long, value_enum, default_value = "equi")]
    pub mode: JoinModeArg,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Joinability threshold for positives.
    #[arg(long, default_value_t = 0.7)]
    pub t: f64,
    /// Shuffle augmentation rate.
    #[arg(long, default_value_t = 0.2)]
    pub r: f64,
    /// Batch size.
    #[arg(long = "N", default_value_t = 32)]
    pub n: usize,
    /// Self-join on a sample of at most this many columns.
    #[arg(long, default_value_t = lakejoin::trainprep::DEFAULT_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cell embedder for semantic mode.
    #[arg(long)]
    pub embedder: Option<String>,
    #[command(flatten)]
    pub render: RenderArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Batch manifest; defaults to <out>.batches.jsonl.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Exact results (JSON lines from `oracle`).
    #[arg(long)]
    pub exact: PathBuf,
    /// Result files to score; repeat to compare methods.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Comma-separated cutoffs.
    #[arg(long, default_value = "10,20,30,40,50", value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Label pool for pooled precision/recall/F1.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// JSON report path; the text table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Corpus spec as JSON; built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "oracle")]
    pub method: Method,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub embedder: Option<String>,
    #[command(flatten)]
    pub render: RenderArgs,
    #[command(flatten)]
    pub hnsw: HnswArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeHashArgs {
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub budget: usize,
    /// Listen on this TCP address instead of serving stdio.
    #[arg(long)]
    pub listen: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
