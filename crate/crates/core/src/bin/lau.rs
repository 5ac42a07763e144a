use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lau::embedder::{Fallback, DEFAULT_HASH_DIM};
use lau::experiment::{
    format_significant, generate_corpus, run_drift, run_evaluate, run_sweep, run_train,
    EvaluateArgs, ExperimentConfig, ExperimentError, ProviderKind, ProviderSpec,
};
use lau::losses::SemanticKind;

#[derive(Parser)]
#[command(
    name = "lau",
    version,
    about = "Semantically regularized CTC speech translation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Hash,
    Cache,
}

#[derive(Clone, Copy, ValueEnum)]
enum FallbackArg {
    Error,
    Hash,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus described by a config.
    GenerateCorpus {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train one model per (semantic kind, lambda) pair from a shared initialization.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "cosine")]
        kinds: Vec<SemanticKind>,
    },
    /// Decode a test manifest with a checkpoint and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        #[arg(long, value_enum, default_value = "hash")]
        provider: ProviderArg,
        /// JSON-lines embedding cache (for --provider cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "error")]
        fallback: FallbackArg,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long, default_value_t = 0)]
        hash_seed: u64,
        /// JSON-lines questions `{id, question, expected}` scored with the offline judge.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        kmeans_seed: u64,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// L2 distance between the encoder parameters of two checkpoints.
    Drift {
        initial: PathBuf,
        #[arg(name = "final")]
        last: PathBuf,
        /// Also write the JSON record here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn load_config(
    path: &Path,
    output_dir: Option<PathBuf>,
) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenerateCorpus {
            config,
            output_dir,
            force,
        } => {
            let cfg = load_config(&config, output_dir)?;
            let summary = generate_corpus(&cfg, force)?;
            println!("{summary}");
            println!("written to {}", cfg.output_dir.display());
        }
        Command::Train { config, output_dir } => {
            let cfg = load_config(&config, output_dir)?;
            let summary = run_train(&cfg)?;
            let last = summary
                .outcome
                .log
                .last_step()
                .expect("training ran at least one step");
            println!(
                "step {}: seq_loss={} semantic_loss={} total={}",
                last.step, last.seq_loss, last.semantic_loss, last.total
            );
            if summary.outcome.infeasible_total > 0 {
                println!(
                    "skipped {} infeasible utterance(s)",
                    summary.outcome.infeasible_total
                );
            }
            println!("drift {}", format_significant(summary.record.drift));
            println!("checkpoint {}", summary.final_checkpoint.display());
        }
        Command::Sweep {
            config,
            output_dir,
            lambdas,
            kinds,
        } => {
            let cfg = load_config(&config, output_dir)?;
            let rows = run_sweep(&cfg, &lambdas, &kinds)?;
            for r in &rows {
                let drift = r.drift.map_or_else(|| "-".to_string(), format_significant);
                println!(
                    "{:<7} lambda={:<6} drift={drift:<12} {}",
                    r.kind.to_string(),
                    r.lambda,
                    r.status
                );
            }
            println!("written to {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Evaluate {
            checkpoint,
            testset,
            provider,
            cache,
            fallback,
            embed_dim,
            hash_seed,
            questions,
            kmeans_seed,
            name,
            out,
        } => {
            let spec = match provider {
                ProviderArg::Hash => {
                    ProviderSpec::hash(embed_dim.unwrap_or(DEFAULT_HASH_DIM), hash_seed)
                }
                ProviderArg::Cache => ProviderSpec {
                    kind: ProviderKind::Cache,
                    dim: embed_dim,
                    seed: hash_seed,
                    path: Some(cache.ok_or_else(|| {
                        ExperimentError::Usage("--provider cache requires --cache <path>".into())
                    })?),
                    fallback: match fallback {
                        FallbackArg::Error => Fallback::Error,
                        FallbackArg::Hash => Fallback::Hash,
                    },
                },
            };
            let (report, table) = run_evaluate(&EvaluateArgs {
                checkpoint: &checkpoint,
                testset: &testset,
                provider: &spec,
                questions: questions.as_deref(),
                out_dir: &out,
                kmeans_seed,
                model_name: name.as_deref(),
            })?;
            print!("{table}");
            if report.clustering_omitted {
                println!("clustering omitted: test set has no topic labels");
            }
        }
        Command::Drift {
            initial,
            last,
            json,
        } => {
            let record = run_drift(&initial, &last)?;
            println!("{}", format_significant(record.drift));
            let text = serde_json::to_string(&record).expect("drift record serializes");
            println!("{text}");
            if let Some(path) = json {
                std::fs::write(path, text + "\n")?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
