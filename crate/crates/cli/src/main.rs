mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::{Table, Value};
use villa_core::pipeline::Method;

/// Extract viral mutations from publications with two-stage retrieval.
#[derive(Debug, Parser)]
#[command(name = "villa", version)]
struct Cli {
    /// Workspace root holding corpus/, stores/, runs/ and results/.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    workspace: PathBuf,

    /// Settings file; defaults to villa.toml in the workspace if present.
    #[arg(long, short = 'c', global = true)]
    config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(long, short = 'v', global = true)]
    verbose: bool,

    #[command(flatten)]
    tuning: Tuning,

    #[command(subcommand)]
    command: Command,
}

/// Overrides for config-file keys.
#[derive(Debug, Args, Default)]
struct Tuning {
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Distance threshold for both retrieval levels.
    #[arg(long, global = true)]
    t: Option<f64>,
    #[arg(long = "k-a", global = true)]
    k_a: Option<usize>,
    #[arg(long = "k-c", global = true)]
    k_c: Option<usize>,
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    #[arg(long, global = true)]
    chunk_overlap: Option<usize>,
    #[arg(long, global = true)]
    abstract_size: Option<usize>,
    #[arg(long, global = true)]
    iterations: Option<u32>,
    /// Concurrent requests to remote backends.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    virus: Option<String>,
    #[arg(long, global = true, value_enum)]
    query_mode: Option<QueryModeArg>,
    /// `mock` or `remote:MODEL`.
    #[arg(long, global = true)]
    embedder: Option<String>,
    /// `mock:oracle`, `mock:empty` or `remote:MODEL`.
    #[arg(long, global = true)]
    responder: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QueryModeArg {
    Prompt,
    Short,
}

impl Tuning {
    fn to_table(&self) -> Table {
        let mut t = Table::new();
        let mut int = |k: &str, v: Option<usize>| {
            if let Some(v) = v {
                t.insert(k.into(), Value::Integer(v as i64));
            }
        };
        int("k", self.k);
        int("k_a", self.k_a);
        int("k_c", self.k_c);
        int("chunk_size", self.chunk_size);
        int("chunk_overlap", self.chunk_overlap);
        int("abstract_size", self.abstract_size);
        int("jobs", self.jobs);
        int("iterations", self.iterations.map(|v| v as usize));
        if let Some(v) = self.t {
            t.insert("t".into(), Value::Float(v));
        }
        for (k, v) in [
            ("virus", &self.virus),
            ("embedder", &self.embedder),
            ("responder", &self.responder),
        ] {
            if let Some(v) = v {
                t.insert(k.into(), Value::String(v.clone()));
            }
        }
        if let Some(m) = self.query_mode {
            let s = match m {
                QueryModeArg::Prompt => "prompt",
                QueryModeArg::Short => "short",
            };
            t.insert("query_mode".into(), Value::String(s.into()));
        }
        t
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus and ground truth and copy them into the workspace.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
    },
    /// Write the built-in synthetic corpus, ground truth and matching settings.
    Synth {
        #[arg(long, value_enum, default_value = "spread")]
        placement: PlacementArg,
    },
    /// Build the abstract and full-text datastores.
    Embed,
    /// Run one method over the ground-truth proteins and write a run manifest.
    Run {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Comma-separated; defaults to every protein in the ground truth.
        #[arg(long, value_delimiter = ',')]
        proteins: Vec<String>,
        /// Manifest path; defaults to runs/<method>.json.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Pin timestamps so identical inputs give identical manifests.
        #[arg(long)]
        fixed_clock: bool,
    },
    /// Score run manifests against the ground truth.
    Evaluate {
        /// Defaults to every manifest in runs/.
        #[arg(long = "run", num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Run the two-stage method over a k_a x k_c grid.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        k_a_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        k_c_values: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        proteins: Vec<String>,
    },
    /// Compare prompt-to-abstract distances of relevant and other publications.
    AnalyzeDistances {
        #[arg(long, value_delimiter = ',')]
        proteins: Vec<String>,
    },
    /// Start the review service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// JSON token file; REVIEW_ADMIN_TOKEN adds an admin token.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Run manifests to ingest before serving.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PlacementArg {
    Spread,
    FirstChunk,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { tracing::Level::INFO } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
