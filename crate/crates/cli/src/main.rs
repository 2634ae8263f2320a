use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use tracedup::adapters::Adapter;
use tracedup::commands::{self, PipelineKind};
use tracedup::config::PipelineConfig;
use tracedup::state::StateDir;
use tracedup_core::index::SearchMode;
use tracedup_core::Error;

#[derive(Parser)]
#[command(
    name = "tracedup",
    version,
    about = "Stack trace deduplication: retrieval, reranking, and evaluation"
)]
struct Cli {
    /// Directory holding the dataset and trained artifacts.
    #[arg(long, global = true, default_value = "./state")]
    state: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    Native,
    Ubuntu,
    Eclipse,
    Netbeans,
    Gnome,
}

impl From<AdapterArg> for Adapter {
    fn from(a: AdapterArg) -> Adapter {
        match a {
            AdapterArg::Native => Adapter::Native,
            AdapterArg::Ubuntu => Adapter::Ubuntu,
            AdapterArg::Eclipse => Adapter::Eclipse,
            AdapterArg::Netbeans => Adapter::Netbeans,
            AdapterArg::Gnome => Adapter::Gnome,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SearchModeArg {
    Auto,
    Exact,
    Ann,
}

impl From<SearchModeArg> for SearchMode {
    fn from(m: SearchModeArg) -> SearchMode {
        match m {
            SearchModeArg::Auto => SearchMode::Auto,
            SearchModeArg::Exact => SearchMode::Exact,
            SearchModeArg::Ann => SearchMode::Ann,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Embedder,
    Reranked,
    Lerch,
    Edit,
    Remote,
}

impl From<PipelineArg> for PipelineKind {
    fn from(p: PipelineArg) -> PipelineKind {
        match p {
            PipelineArg::Embedder => PipelineKind::Embedder,
            PipelineArg::Reranked => PipelineKind::Reranked,
            PipelineArg::Lerch => PipelineKind::Lerch,
            PipelineArg::Edit => PipelineKind::Edit,
            PipelineArg::Remote => PipelineKind::Remote,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert crash report dumps into the native dataset.
    Ingest {
        /// Input format.
        #[arg(long, value_enum, default_value_t = AdapterArg::Native)]
        adapter: AdapterArg,
        /// Abort on the first malformed record instead of skipping it.
        #[arg(long)]
        strict: bool,
        /// JSONL files to convert.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train the tokenizer, models, index, and decision threshold.
    Train {
        /// TOML configuration; omitted fields fall back to defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train and use the embedder alone, with no reranking stage.
        #[arg(long)]
        no_reranker: bool,
        /// Candidates retrieved per query.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        search_mode: Option<SearchModeArg>,
        /// Seed for every random component (weights, batching, graph).
        #[arg(long)]
        seed: Option<u64>,
        /// Cap on training epochs for both models.
        #[arg(long)]
        epochs: Option<usize>,
        /// Tokenizer vocabulary budget.
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Assign incoming reports to categories, one JSON decision per line.
    Dedup {
        /// JSONL report stream; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Decision destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay the held-out window and compare pipeline variants.
    Eval {
        /// Variants to evaluate.
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "embedder,reranked,lerch,edit"
        )]
        pipelines: Vec<PipelineArg>,
    },
    /// Measure retrieval and reranking latency against a synthetic store.
    Bench {
        /// Number of stored reports.
        #[arg(long, default_value_t = 10_000)]
        size: usize,
        /// Number of timed queries.
        #[arg(long, default_value_t = 200)]
        queries: usize,
        /// Repetitions for variance estimation.
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Print artifact versions and headline statistics.
    Inspect,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Artifact { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> tracedup_core::Result<()> {
    let state = StateDir::open(&cli.state)?;
    match cli.command {
        Command::Ingest { adapter, strict, inputs } => {
            let summary = commands::run_ingest(&state, &inputs, adapter.into(), strict)?;
            eprintln!("{summary}");
        }
        Command::Train { config, no_reranker, k, search_mode, seed, epochs, vocab_size } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::default(),
            };
            if no_reranker {
                cfg.use_reranker = false;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(mode) = search_mode {
                cfg.search_mode = mode.into();
            }
            if let Some(seed) = seed {
                cfg.embedder.seed = seed;
                cfg.reranker.seed = seed;
                cfg.ann.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.embedder.max_epochs = epochs;
                cfg.reranker.max_epochs = epochs;
            }
            if let Some(vocab_size) = vocab_size {
                cfg.tokenizer.vocab_size = vocab_size;
            }
            cfg.apply_remote_env();
            let summary = commands::run_train(&state, &cfg)?;
            eprintln!("{summary}");
        }
        Command::Dedup { input, output } => {
            let summary = match (input, output) {
                (Some(inp), Some(out)) => {
                    let reader = open_reader(&inp)?;
                    let mut writer = open_writer(&out)?;
                    commands::run_dedup(&state, reader, &mut writer)?
                }
                (Some(inp), None) => {
                    let reader = open_reader(&inp)?;
                    commands::run_dedup(&state, reader, &mut std::io::stdout().lock())?
                }
                (None, Some(out)) => {
                    let mut writer = open_writer(&out)?;
                    commands::run_dedup(&state, std::io::stdin().lock(), &mut writer)?
                }
                (None, None) => commands::run_dedup(
                    &state,
                    std::io::stdin().lock(),
                    &mut std::io::stdout().lock(),
                )?,
            };
            eprintln!("{summary}");
        }
        Command::Eval { pipelines } => {
            let kinds: Vec<PipelineKind> = pipelines.into_iter().map(Into::into).collect();
            let (_, table) = commands::run_eval(&state, &kinds)?;
            println!("{table}");
        }
        Command::Bench { size, queries, runs } => {
            let report = commands::run_bench(&state, size, queries, runs)?;
            println!("{report}");
        }
        Command::Inspect => {
            println!("{}", commands::run_inspect(&state)?);
        }
    }
    Ok(())
}

fn open_reader(path: &PathBuf) -> tracedup_core::Result<impl BufRead> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::artifact(path, format!("unreadable input: {e}")))?;
    Ok(std::io::BufReader::new(file))
}

fn open_writer(path: &PathBuf) -> tracedup_core::Result<impl Write> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::artifact(path, format!("cannot create output: {e}")))?;
    Ok(std::io::BufWriter::new(file))
}
