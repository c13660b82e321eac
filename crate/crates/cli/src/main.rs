//! `sparsealign` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 malformed or
//! corrupt data, 1 anything else (numerical failure).

mod commands;
mod explain;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use failure::Failure;

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "SPARSEALIGN_THREADS";

#[derive(Parser)]
#[command(
    name = "sparsealign",
    version,
    about = "Multi-vector retrieval as sparse token alignment"
)]
struct Cli {
    /// Worker threads (default: $SPARSEALIGN_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted relevance.
    Synth(SynthArgs),
    /// Build a token index over an embedding store.
    Index(IndexArgs),
    /// Retrieve and write a TREC run.
    Search(SearchArgs),
    /// Score a TREC run against qrels.
    Eval(EvalArgs),
    /// Choose an alignment strategy from a few annotated queries.
    Adapt(AdaptArgs),
    /// Show salient tokens and their alignments for one query-document pair.
    Explain(ExplainArgs),
    /// Fit the query and document salience heads.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// A few planted evidence tokens per relevant document.
    Planted,
    /// Evidence spread over many tokens of long documents.
    Distributed,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Output directory; receives docs.mvix, queries.mvix and qrels.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "planted")]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 1000)]
    pub docs: usize,
    #[arg(long, default_value_t = 32)]
    pub tokens_per_doc: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 50)]
    pub queries: usize,
    /// Evidence perturbation norm for the planted corpus.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    Flat,
    Ivf,
}

#[derive(Args, Debug, Serialize)]
pub struct IndexArgs {
    /// Document store (MVIX).
    pub store: PathBuf,
    /// Output index (MVIK).
    pub out: PathBuf,
    /// Fraction of each document's tokens kept, ranked by salience.
    #[arg(long, default_value_t = 1.0)]
    pub beta_d: f64,
    #[arg(long, value_enum, default_value = "flat")]
    pub kind: KindArg,
    /// IVF cell count.
    #[arg(long, default_value_t = 64)]
    pub nlist: usize,
    /// Salience heads (JSON) used to rank document tokens.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    /// Every query token to its k most similar document tokens.
    TopK,
    /// Top-k with k proportional to document length.
    TopP,
    /// First query token against the best of the first k document tokens.
    #[value(alias = "me-bert")]
    FirstK,
    /// First token against first token.
    #[value(alias = "dpr")]
    SingleVector,
    /// Best document token sharing the query token's vocabulary id.
    ExactMatch,
    /// Entropy-regularized relaxed top-k.
    #[value(alias = "da")]
    Differentiable,
}

/// Options shared by every command that retrieves.
#[derive(Args, Debug, Serialize)]
pub struct RetrievalArgs {
    /// Token neighbors fetched per query token.
    #[arg(long, default_value_t = 4000)]
    pub neighbors: usize,
    /// Documents kept per query after refinement.
    #[arg(long, default_value_t = 1000)]
    pub top_n: usize,
    /// IVF cells probed per query token.
    #[arg(long, default_value_t = 8)]
    pub nprobe: usize,
    /// Fraction of query tokens searched, ranked by salience.
    #[arg(long, default_value_t = 1.0)]
    pub beta_q: f64,
    /// Query gate budget ratio.
    #[arg(long, default_value_t = 0.5)]
    pub alpha_q: f64,
    /// Document gate budget ratio.
    #[arg(long, default_value_t = 0.4)]
    pub alpha_d: f64,
    /// Entropy weight for the differentiable strategy and the salience gate.
    #[arg(long, default_value_t = 0.002)]
    pub epsilon: f64,
    /// Salience heads (JSON); enables salience-weighted scoring.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    /// Score the raw alignment sum instead of dividing by its mass.
    #[arg(long)]
    pub no_normalize: bool,
    /// Refine against every stored document token, not only indexed ones.
    #[arg(long)]
    pub full_store: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    pub index: PathBuf,
    pub store: PathBuf,
    /// Query embeddings (MVIX).
    pub queries: PathBuf,
    #[arg(long, value_enum, default_value = "top-k")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long, default_value_t = 0.015)]
    pub p: f64,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Output TREC run.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sparsealign")]
    pub tag: String,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    pub run: PathBuf,
    pub qrels: PathBuf,
    /// ndcg@K, mrr@K or recall@K; repeatable.
    #[arg(long, default_values_t = vec!["ndcg@10".to_string()])]
    pub metric: Vec<String>,
    /// Per-query TSV: query_id then one column per metric.
    #[arg(long)]
    pub plot_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AdaptArgs {
    pub index: PathBuf,
    pub store: PathBuf,
    pub queries: PathBuf,
    /// Annotated queries (TREC qrels).
    pub qrels: PathBuf,
    /// Top-k values searched; pass the flag with no value for none.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = vec![1usize, 2, 4, 6, 8])]
    pub grid_k: Vec<usize>,
    /// Top-p values searched; pass the flag with no value for none.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_values_t = vec![0.005f64, 0.01, 0.015, 0.02])]
    pub grid_p: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub fold_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-fold TSV.
    #[arg(long)]
    pub plot_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    pub store: PathBuf,
    pub queries: PathBuf,
    #[arg(long)]
    pub query_id: String,
    /// Document to explain; defaults to the query's best top-1 match.
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Fraction of query tokens shown, most salient first.
    #[arg(long, default_value_t = 0.5)]
    pub top_query_frac: f64,
    /// Fraction of document tokens highlighted, most salient first.
    #[arg(long, default_value_t = 0.2)]
    pub top_doc_frac: f64,
    /// Salience heads; without them the stored salience is used.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    /// Vocabulary file, one token per line, line n labelling id n.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    pub store: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    /// Output heads (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace (CSV: step,loss).
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_queries: usize,
    #[arg(long, default_value_t = 7)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0.002)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha_q: f64,
    #[arg(long, default_value_t = 0.4)]
    pub alpha_d: f64,
    /// Solver iterations unrolled per gate.
    #[arg(long, default_value_t = 8)]
    pub unroll_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.01)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                Failure::config(format!("{THREADS_ENV}={v:?} is not a thread count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::config("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Index(a) => commands::index(&a),
        Command::Search(a) => commands::search(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Adapt(a) => commands::adapt(&a),
        Command::Explain(a) => explain::explain(&a),
        Command::Train(a) => commands::train(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
