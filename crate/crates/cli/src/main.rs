//! `permgnn` — staged link-prediction pipeline over on-disk artifacts.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use permgnn::Error;

#[derive(Parser, Debug)]
#[command(
    name = "permgnn",
    version,
    about = "Permutation-trained LSTM link prediction with LSH retrieval"
)]
struct Cli {
    /// `key = value` file applied on top of the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GraphArgs {
    /// Edge list, one `u v` pair per line.
    #[arg(long, conflicts_with_all = ["content", "cites"])]
    edges: Option<PathBuf>,
    /// Dense feature rows, one per node.
    #[arg(long, requires = "edges")]
    features: Option<PathBuf>,
    /// LINQS `.content` file (with --cites).
    #[arg(long, requires = "cites")]
    content: Option<PathBuf>,
    /// LINQS `.cites` file (with --content).
    #[arg(long, requires = "content")]
    cites: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-query train/val/test split.
    Split {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"])]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder; writes a checkpoint and a trace CSV.
    Train {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        /// permgnn, one_perm or multi_perm(m).
        #[arg(long)]
        mode: Option<String>,
        /// Dataset hyperparameters: cora, citeseer, twitter, google+, pb.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Embed every node with a trained encoder.
    Embed {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binary codes (and optionally the bucket index) from embeddings.
    Hash {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_parser = ["learned", "hyperplane"])]
        hash: Option<String>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long = "J")]
        j: Option<usize>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Top-K partners per query.
    Predict {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Required unless --hash none.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long, value_parser = ["learned", "hyperplane", "none"])]
        hash: Option<String>,
        #[arg(long = "J")]
        j: Option<usize>,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long, value_parser = ["potential", "test"])]
        candidates: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MAP/MRR/NDCG on the test fold.
    Evaluate {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        /// Stored ranked lists.
        #[arg(long, conflicts_with_all = ["embeddings", "scorer"])]
        predictions: Option<PathBuf>,
        /// Rank test folds by cosine similarity.
        #[arg(long, conflicts_with = "scorer")]
        embeddings: Option<PathBuf>,
        /// Heuristic baseline on the training graph.
        #[arg(long, value_parser = ["cn", "aa"])]
        scorer: Option<String>,
        #[arg(long)]
        cutoff: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Comparisons, time and NDCG retention across hashing schemes.
    Bench {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        bits: Option<usize>,
        #[arg(long = "J", value_delimiter = ',')]
        js: Option<Vec<usize>>,
        #[arg(long = "L", value_delimiter = ',')]
        ls: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Validation problems exit 1, internal failures 3 (usage errors exit 2
/// through clap).
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } | Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| commands::run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(_) => {
            eprintln!("error: internal failure");
            ExitCode::from(3)
        }
    }
}
