//! Training loop, optimizer schedule, gradient-routing audit and encoder drift.

mod drift;
mod objective;
mod optim;

pub use drift::{parameter_drift, EncoderSnapshot};
pub use objective::{
    batch_objective, evaluate_losses, prepare_examples, Example, GradMode, Objective,
    SequenceLossTerm,
};
pub use optim::{noam_lr, AdamW, BETA1, BETA2, EPSILON, WEIGHT_DECAY};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Utterance, Vocabulary};
use crate::embedder::{EmbedError, Provider};
use crate::losses::{LossBreakdown, LossError, LossWeights, SemanticKind};
use crate::model::{Component, ModelError, ModelParams};

/// Shuffled utterances are sorted by length within pools of this many batches.
const BUCKET_POOL_BATCHES: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: seq={} semantic={} total={}", breakdown.seq_loss, breakdown.semantic_loss, breakdown.total)]
    NonFinite {
        step: u64,
        breakdown: LossBreakdown,
        log: Box<TrainingLog>,
    },
    #[error("snapshot layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("embedding provider failed: {0}")]
    Provider(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub weights: LossWeights,
    pub semantic_kind: SemanticKind,
    pub seed: u64,
    /// Validation cadence in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: u64,
    /// Scheduler dimension; defaults to the encoder width.
    #[serde(default)]
    pub d_model: Option<usize>,
    /// Take an encoder snapshot at every evaluation, not just first and last.
    #[serde(default)]
    pub snapshot_at_eval: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.steps == 0 {
            return bad("steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be >= 1");
        }
        if !(self.lr_scale > 0.0 && self.lr_scale.is_finite()) {
            return bad("lr_scale must be > 0");
        }
        if self.d_model == Some(0) {
            return bad("d_model must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub seq_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
    /// Cumulative count of utterances skipped by the sequence term.
    pub infeasible_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub seq_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "step,lr,seq_loss,semantic_loss,total,infeasible_count";
pub const EVAL_LOG_HEADER: &str = "step,seq_loss,semantic_loss,total";

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        for r in &self.steps {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.lr, r.seq_loss, r.semantic_loss, r.total, r.infeasible_count
            )?;
        }
        Ok(())
    }

    pub fn write_eval_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{EVAL_LOG_HEADER}")?;
        for r in &self.evals {
            writeln!(
                w,
                "{},{},{},{}",
                r.step, r.seq_loss, r.semantic_loss, r.total
            )?;
        }
        Ok(())
    }

    pub fn last_step(&self) -> Option<&StepRecord> {
        self.steps.last()
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainingLog,
    /// Encoder snapshots; the first is step 0, the last is the final step.
    pub snapshots: Vec<EncoderSnapshot>,
    pub infeasible_total: u64,
}

impl TrainOutcome {
    pub fn drift(&self) -> f64 {
        let first = self.snapshots.first().expect("initial snapshot");
        let last = self.snapshots.last().expect("final snapshot");
        parameter_drift(first, last).expect("snapshots share a layout")
    }
}

/// Seeded length-bucketed batch order for one epoch.
fn epoch_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * BUCKET_POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lengths[i]);
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub struct Trainer {
    config: TrainConfig,
    second: Option<Box<dyn SequenceLossTerm>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            second: None,
        }
    }

    /// Installs the sequence term weighted by `1 - alpha`.
    pub fn with_second_loss(mut self, term: Box<dyn SequenceLossTerm>) -> Self {
        self.second = Some(term);
        self
    }

    pub fn run(
        &self,
        corpus: &Corpus,
        vocab: &Vocabulary,
        params: ModelParams,
        provider: &Provider,
        validation: Option<&Corpus>,
    ) -> Result<TrainOutcome, TrainError> {
        let cfg = &self.config;
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(TrainError::InvalidConfig("empty training corpus".into()));
        }
        if params.has_semantic_head() && provider.dim() != params.config.embed_dim {
            return Err(TrainError::InvalidConfig(format!(
                "provider dimension {} differs from model embed_dim {}",
                provider.dim(),
                params.config.embed_dim
            )));
        }
        if vocab.len() != params.config.vocab_size {
            return Err(TrainError::InvalidConfig(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                params.config.vocab_size
            )));
        }
        let second = self.second.as_deref();
        if cfg.weights.alpha() < 1.0 && second.is_none() {
            return Err(LossError::MissingSecondLoss.into());
        }
        let examples = prepare_examples(corpus.utterances(), vocab, provider)?;
        let valid_examples = validation
            .map(|c| prepare_examples(c.utterances(), vocab, provider))
            .transpose()?;
        let blank = vocab.blank_index();
        let d_model = cfg.d_model.unwrap_or(params.config.encoder_hidden);
        let mut trainable = vec![Component::Encoder, Component::CtcHead];
        if cfg.weights.lambda() > 0.0 {
            trainable.push(Component::SemanticHead);
        }

        let mut params = params;
        let mut optimizer = AdamW::new(&params, trainable);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lengths: Vec<usize> = corpus
            .utterances()
            .iter()
            .map(Utterance::num_frames)
            .collect();
        let mut queue: Vec<Vec<usize>> = Vec::new();
        let mut log = TrainingLog::default();
        let mut snapshots = vec![EncoderSnapshot::capture(&params, 0)];
        let mut infeasible_total = 0u64;

        let evaluate =
            |params: &ModelParams, step: u64, log: &mut TrainingLog| -> Result<(), TrainError> {
                if let Some(v) = &valid_examples {
                    let (b, _) = evaluate_losses(
                        params,
                        v,
                        blank,
                        &cfg.weights,
                        cfg.semantic_kind,
                        second,
                        cfg.batch_size,
                    )?;
                    log.evals.push(EvalRecord {
                        step,
                        seq_loss: b.seq_loss,
                        semantic_loss: b.semantic_loss,
                        total: b.total,
                    });
                }
                Ok(())
            };

        for step in 1..=cfg.steps {
            if queue.is_empty() {
                queue = epoch_batches(&lengths, cfg.batch_size, &mut rng);
                queue.reverse();
            }
            let batch_idx = queue.pop().expect("non-empty epoch");
            let batch: Vec<&Example<'_>> = batch_idx.iter().map(|&i| &examples[i]).collect();
            let lr = noam_lr(step, d_model, cfg.warmup_steps, cfg.lr_scale)?;
            let obj = batch_objective(
                &params,
                &batch,
                blank,
                &cfg.weights,
                cfg.semantic_kind,
                second,
                GradMode::Weighted,
            )?;
            infeasible_total += obj.infeasible as u64;
            let b = obj.breakdown;
            log.steps.push(StepRecord {
                step,
                lr,
                seq_loss: b.seq_loss,
                semantic_loss: b.semantic_loss,
                total: b.total,
                infeasible_count: infeasible_total,
            });
            let grads = obj.total_grad().expect("gradients requested");
            if !b.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    breakdown: b,
                    log: Box::new(log),
                });
            }
            optimizer.step(&mut params, &grads, lr);

            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps {
                evaluate(&params, step, &mut log)?;
                if cfg.snapshot_at_eval {
                    snapshots.push(EncoderSnapshot::capture(&params, step));
                }
            }
        }
        evaluate(&params, cfg.steps, &mut log)?;
        snapshots.push(EncoderSnapshot::capture(&params, cfg.steps));
        Ok(TrainOutcome {
            params,
            log,
            snapshots,
            infeasible_total,
        })
    }
}

/// Trains with the CTC-only sequence loss.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    vocab: &Vocabulary,
    params: ModelParams,
    provider: &Provider,
    validation: Option<&Corpus>,
) -> Result<TrainOutcome, TrainError> {
    Trainer::new(config.clone()).run(corpus, vocab, params, provider, validation)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingReport {
    /// Max |d semantic / d theta| over ctc_head tensors.
    pub semantic_on_ctc_head: f64,
    /// Max |d sequence / d theta| over semantic_head tensors.
    pub sequence_on_semantic_head: f64,
    /// L2 norm of the semantic gradient over encoder tensors.
    pub semantic_on_encoder_norm: f64,
    /// L2 norm of the sequence gradient over encoder tensors.
    pub sequence_on_encoder_norm: f64,
    pub provider_unchanged: bool,
}

impl RoutingReport {
    pub fn is_clean(&self) -> bool {
        self.semantic_on_ctc_head == 0.0
            && self.sequence_on_semantic_head == 0.0
            && self.provider_unchanged
    }
}

/// Computes the two loss terms' gradients separately and reports where each one lands.
pub fn gradient_routing_check(
    params: &ModelParams,
    batch: &[&Utterance],
    vocab: &Vocabulary,
    weights: &LossWeights,
    kind: SemanticKind,
    provider: &Provider,
) -> Result<RoutingReport, TrainError> {
    let before = provider.state_digest();
    let examples = batch
        .iter()
        .map(|u| Example::new(u, vocab, provider))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Example<'_>> = examples.iter().collect();
    let obj = batch_objective(
        params,
        &refs,
        vocab.blank_index(),
        weights,
        kind,
        None,
        GradMode::Both,
    )?;
    let seq = obj.seq_grad.expect("sequence gradient");
    let (semantic_on_ctc_head, semantic_on_encoder_norm) = match &obj.semantic_grad {
        Some(g) => (g.max_abs(Component::CtcHead), g.norm(Component::Encoder)),
        None => (0.0, 0.0),
    };
    Ok(RoutingReport {
        semantic_on_ctc_head,
        sequence_on_semantic_head: seq.max_abs(Component::SemanticHead),
        semantic_on_encoder_norm,
        sequence_on_encoder_norm: seq.norm(Component::Encoder),
        provider_unchanged: provider.state_digest() == before,
    })
}
