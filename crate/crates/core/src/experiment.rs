//! Config-driven experiment commands behind the `lau` binary.
//!
//! An experiment is described by a TOML file:
//!
//! ```toml
//! output_dir = "runs/demo"
//!
//! [corpus]
//! holdout_every = 5            # every 5th utterance is held out for validation
//! [corpus.toy]                 # or: manifest = "data/train.jsonl"
//! n_utterances = 100
//! n_topics = 3
//! feature_dim = 16
//! seed = 7
//! frames_per_token = 4
//! noise_scale = 0.1
//!
//! [model]
//! encoder_layers = 2
//! encoder_hidden = 32
//! subsample = 2
//! seed = 1
//!
//! [train]
//! steps = 500
//! batch_size = 8
//! warmup_steps = 100
//! lr_scale = 2.0
//! semantic_kind = "cosine"
//! seed = 3
//! eval_every = 100
//! weights = { lambda = 1.0 }
//!
//! [provider]
//! kind = "hash"                # or "cache" with path = "..." and fallback = "error" | "hash"
//! dim = 64
//! seed = 0
//! ```
//!
//! Relative paths inside the file resolve against the file's directory.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    self, build_vocab, generate_toy_corpus, load_manifest, Corpus, CorpusError, ToyCorpusSpec,
    Vocabulary,
};
use crate::embedder::{load_cache, EmbedError, Fallback, Provider, DEFAULT_HASH_DIM};
use crate::evalmetrics::{
    attach_qa, evaluate_run, format_table, load_questions, EvalOptions, EvalReport, MetricError,
    MockJudge, TableRow,
};
use crate::losses::{LossWeights, SemanticKind};
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelError,
};
use crate::plot;
use crate::trainer::{
    parameter_drift, train, EncoderSnapshot, TrainConfig, TrainError, TrainOutcome, TrainingLog,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Bad invocation or missing configuration (exit code 2).
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("refusing to write into non-empty directory {} (use --force)", .0.display())]
    OutputNotEmpty(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn default_holdout() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    #[serde(default)]
    pub toy: Option<ToyCorpusSpec>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "default_holdout")]
    pub holdout_every: usize,
}

/// Model shape; feature and vocabulary sizes come from the corpus, the
/// embedding size from the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub subsample: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hash,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_fallback")]
    pub fallback: Fallback,
}

fn default_fallback() -> Fallback {
    Fallback::Error
}

impl ProviderSpec {
    pub fn hash(dim: usize, seed: u64) -> Self {
        Self {
            kind: ProviderKind::Hash,
            dim: Some(dim),
            seed,
            path: None,
            fallback: Fallback::Hash,
        }
    }

    pub fn build(&self) -> Result<Provider> {
        Ok(match self.kind {
            ProviderKind::Hash => Provider::hash(self.dim.unwrap_or(DEFAULT_HASH_DIM), self.seed)?,
            ProviderKind::Cache => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| ExperimentError::Config("cache provider needs a path".into()))?;
                Provider::cache(load_cache(path)?, self.fallback, self.dim, self.seed)?
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub provider: Option<ProviderSpec>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Parses the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            ExperimentError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        if let Some(m) = cfg.corpus.manifest.as_mut() {
            resolve(m);
        }
        if let Some(p) = cfg.provider.as_mut().and_then(|p| p.path.as_mut()) {
            resolve(p);
        }
        Ok(cfg)
    }

    fn model_section(&self) -> Result<&ModelSection> {
        self.model
            .as_ref()
            .ok_or_else(|| ExperimentError::Usage("config has no [model] section".into()))
    }

    fn train_section(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| ExperimentError::Usage("config has no [train] section".into()))
    }

    fn provider_spec(&self) -> ProviderSpec {
        self.provider
            .clone()
            .unwrap_or_else(|| ProviderSpec::hash(DEFAULT_HASH_DIM, 0))
    }
}

/// The full corpus plus its train/validation split and vocabulary.
#[derive(Debug, Clone)]
pub struct Data {
    pub full: Corpus,
    pub train: Corpus,
    pub validation: Option<Corpus>,
    pub vocab: Vocabulary,
}

pub fn load_data(section: &CorpusSection) -> Result<Data> {
    let full = match (&section.toy, &section.manifest) {
        (Some(spec), None) => generate_toy_corpus(spec)?,
        (None, Some(path)) => load_manifest(path)?,
        (Some(_), Some(_)) => {
            return Err(ExperimentError::Config(
                "corpus must set exactly one of [corpus.toy] or corpus.manifest".into(),
            ))
        }
        (None, None) => return Err(ExperimentError::Usage("config has no corpus source".into())),
    };
    let vocab = build_vocab(&full)?;
    let (train, validation) = full.split_holdout(section.holdout_every)?;
    Ok(Data {
        full,
        train,
        validation,
        vocab,
    })
}

pub fn model_config(section: &ModelSection, data: &Data, embed_dim: usize) -> ModelConfig {
    ModelConfig {
        feature_dim: data.full.feature_dim(),
        encoder_layers: section.encoder_layers,
        encoder_hidden: section.encoder_hidden,
        subsample: section.subsample,
        vocab_size: data.vocab.len(),
        embed_dim,
        seed: section.seed,
    }
}

fn ensure_empty_or_force(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(ExperimentError::OutputNotEmpty(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub n_utterances: usize,
    pub n_topics: usize,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl std::fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "corpus: N={} topics={} F={} (train {}, held-out {})",
            self.n_utterances, self.n_topics, self.feature_dim, self.n_train, self.n_heldout
        )
    }
}

/// Writes `manifest.jsonl`, `train.jsonl`, `heldout.jsonl` and `features/` for the toy corpus.
pub fn generate_corpus(cfg: &ExperimentConfig, force: bool) -> Result<CorpusSummary> {
    let spec = cfg.corpus.toy.as_ref().ok_or_else(|| {
        ExperimentError::Usage("generate-corpus needs a [corpus.toy] section".into())
    })?;
    ensure_empty_or_force(&cfg.output_dir, force)?;
    let full = generate_toy_corpus(spec)?;
    let (train_part, held) = full.split_holdout(cfg.corpus.holdout_every)?;
    corpus::write_manifest(&full, &cfg.output_dir, "manifest.jsonl")?;
    corpus::write_manifest(&train_part, &cfg.output_dir, "train.jsonl")?;
    if let Some(h) = &held {
        corpus::write_manifest(h, &cfg.output_dir, "heldout.jsonl")?;
    }
    Ok(CorpusSummary {
        n_utterances: full.len(),
        n_topics: spec.n_topics,
        feature_dim: full.feature_dim(),
        n_train: train_part.len(),
        n_heldout: held.map_or(0, |h| h.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub semantic_kind: SemanticKind,
    pub lambda: f64,
    pub drift: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub record: DriftRecord,
    pub final_checkpoint: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_step{step}")
}

fn write_logs(dir: &Path, log: &TrainingLog) -> Result<()> {
    log.write_csv(BufWriter::new(fs::File::create(dir.join("train_log.csv"))?))?;
    if !log.evals.is_empty() {
        log.write_eval_csv(BufWriter::new(fs::File::create(dir.join("valid_log.csv"))?))?;
    }
    Ok(())
}

/// Trains one run into `dir`: checkpoints, logs, drift record and loss-curve plot.
pub fn train_into(
    dir: &Path,
    data: &Data,
    model: &ModelSection,
    tcfg: &TrainConfig,
    provider: &Provider,
) -> Result<TrainSummary> {
    fs::create_dir_all(dir)?;
    let mcfg = model_config(model, data, provider.dim());
    let params = init_model(&mcfg)?;
    save_checkpoint(
        &dir.join(checkpoint_name(0)),
        &Checkpoint {
            params: params.clone(),
            vocab: Some(data.vocab.clone()),
            step: Some(0),
        },
    )?;
    let outcome = match train(
        tcfg,
        &data.train,
        &data.vocab,
        params,
        provider,
        data.validation.as_ref(),
    ) {
        Ok(o) => o,
        Err(TrainError::NonFinite {
            step,
            breakdown,
            log,
        }) => {
            write_logs(dir, &log)?;
            return Err(TrainError::NonFinite {
                step,
                breakdown,
                log,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    write_logs(dir, &outcome.log)?;
    let final_checkpoint = dir.join(checkpoint_name(tcfg.steps));
    save_checkpoint(
        &final_checkpoint,
        &Checkpoint {
            params: outcome.params.clone(),
            vocab: Some(data.vocab.clone()),
            step: Some(tcfg.steps),
        },
    )?;
    let record = DriftRecord {
        semantic_kind: tcfg.semantic_kind,
        lambda: tcfg.weights.lambda(),
        drift: outcome.drift(),
    };
    fs::write(
        dir.join("drift.json"),
        serde_json::to_string_pretty(&record).unwrap() + "\n",
    )?;
    let svg = plot::loss_curves_svg(
        &outcome.log,
        &format!("{} lambda={}", record.semantic_kind, record.lambda),
    );
    fs::write(dir.join("loss_curves.svg"), svg)?;
    Ok(TrainSummary {
        record,
        final_checkpoint,
        outcome,
    })
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let data = load_data(&cfg.corpus)?;
    let provider = cfg.provider_spec().build()?;
    train_into(
        &cfg.output_dir,
        &data,
        cfg.model_section()?,
        cfg.train_section()?,
        &provider,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: SemanticKind,
    pub lambda: f64,
    pub drift: Option<f64>,
    pub final_seq_loss: Option<f64>,
    pub final_semantic_loss: Option<f64>,
    pub status: String,
}

pub const SWEEP_COLUMNS: [&str; 6] = [
    "kind",
    "lambda",
    "drift",
    "final_seq_loss",
    "final_semantic_loss",
    "status",
];

pub fn sweep_run_dir(kind: SemanticKind, lambda: f64) -> String {
    format!("{kind}_lambda{lambda}")
}

/// One run per `(kind, lambda)`, all from the same initial checkpoint; failures are recorded and skipped.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    lambdas: &[f64],
    kinds: &[SemanticKind],
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(ExperimentError::Usage(
            "sweep needs at least one lambda".into(),
        ));
    }
    if kinds.is_empty() {
        return Err(ExperimentError::Usage(
            "sweep needs at least one semantic kind".into(),
        ));
    }
    let data = load_data(&cfg.corpus)?;
    let provider = cfg.provider_spec().build()?;
    let model = cfg.model_section()?;
    let base = cfg.train_section()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    for &kind in kinds {
        for &lambda in lambdas {
            let dir = cfg.output_dir.join(sweep_run_dir(kind, lambda));
            let outcome = LossWeights::new(lambda, base.weights.alpha())
                .map_err(|e| ExperimentError::Config(e.to_string()))
                .and_then(|weights| {
                    let tcfg = TrainConfig {
                        weights,
                        semantic_kind: kind,
                        ..base.clone()
                    };
                    train_into(&dir, &data, model, &tcfg, &provider)
                });
            rows.push(match outcome {
                Ok(s) => {
                    let (seq, sem) = match s.outcome.log.last_eval() {
                        Some(e) => (e.seq_loss, e.semantic_loss),
                        None => {
                            let last = s.outcome.log.last_step().expect("at least one step");
                            (last.seq_loss, last.semantic_loss)
                        }
                    };
                    SweepRow {
                        kind,
                        lambda,
                        drift: Some(s.record.drift),
                        final_seq_loss: Some(seq),
                        final_semantic_loss: Some(sem),
                        status: "ok".into(),
                    }
                }
                Err(e) => {
                    log::error!("sweep run {kind} lambda={lambda} failed: {e}");
                    SweepRow {
                        kind,
                        lambda,
                        drift: None,
                        final_seq_loss: None,
                        final_semantic_loss: None,
                        status: format!("failed: {e}"),
                    }
                }
            });
        }
    }
    write_sweep_csv(&cfg.output_dir.join("sweep.csv"), &rows)?;
    fs::write(
        cfg.output_dir.join("drift_bars.svg"),
        plot::drift_bars_svg(&rows),
    )?;
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.lambda.to_string(),
            opt(r.drift),
            opt(r.final_seq_loss),
            opt(r.final_semantic_loss),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub testset: &'a Path,
    pub provider: &'a ProviderSpec,
    pub questions: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub kmeans_seed: u64,
    pub model_name: Option<&'a str>,
}

/// Writes `eval_report.json` and `eval_table.txt`; returns the report and the table text.
pub fn run_evaluate(args: &EvaluateArgs<'_>) -> Result<(EvalReport, String)> {
    let ckpt = load_checkpoint(args.checkpoint)?;
    let vocab = ckpt
        .vocab
        .clone()
        .ok_or_else(|| ExperimentError::Config("checkpoint carries no vocabulary".into()))?;
    let testset = load_manifest(args.testset)?;
    if let Some(u) = testset
        .utterances()
        .iter()
        .find(|u| !vocab.covers(&u.translation))
    {
        return Err(MetricError::VocabularyMismatch(format!(
            "translation of '{}' has characters outside the checkpoint vocabulary",
            u.id
        ))
        .into());
    }
    if testset.feature_dim() != ckpt.params.config.feature_dim {
        return Err(ModelError::DimensionMismatch {
            expected: ckpt.params.config.feature_dim,
            found: testset.feature_dim(),
        }
        .into());
    }
    let provider = args.provider.build()?;
    let options = EvalOptions {
        kmeans_seed: args.kmeans_seed,
        ..Default::default()
    };
    let mut report = evaluate_run(&ckpt.params, &vocab, &testset, &provider, &options)?;
    if let Some(qpath) = args.questions {
        let questions = load_questions(qpath)?;
        attach_qa(&mut report, &MockJudge, &questions);
    }
    let name = args.model_name.map(str::to_string).unwrap_or_else(|| {
        format!(
            "{} (ctc)",
            args.checkpoint
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
        )
    });
    let table = format_table(&[TableRow::from_report(name, &report)]);
    fs::create_dir_all(args.out_dir)?;
    fs::write(
        args.out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).unwrap() + "\n",
    )?;
    fs::write(args.out_dir.join("eval_table.txt"), &table)?;
    Ok((report, table))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftOutput {
    pub initial: String,
    #[serde(rename = "final")]
    pub last: String,
    pub drift: f64,
}

/// Encoder drift between two checkpoint files.
pub fn run_drift(a: &Path, b: &Path) -> Result<DriftOutput> {
    let ca = load_checkpoint(a)?;
    let cb = load_checkpoint(b)?;
    let sa = EncoderSnapshot::capture(&ca.params, ca.step.unwrap_or(0));
    let sb = EncoderSnapshot::capture(&cb.params, cb.step.unwrap_or(0));
    Ok(DriftOutput {
        initial: a.display().to_string(),
        last: b.display().to_string(),
        drift: parameter_drift(&sa, &sb)?,
    })
}

/// Six significant digits; zero prints as `0.000000`.
pub fn format_significant(x: f64) -> String {
    if x == 0.0 {
        return "0.000000".to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}
