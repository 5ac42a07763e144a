//! Batch objective with separately routed gradients.
//!
//! The sequence term backpropagates through the CTC head into the encoder.
//! The semantic term backpropagates through the semantic head into the
//! encoder. Reference embeddings are plain constants.

use ndarray::{Array2, ArrayView2};

use crate::corpus::{Utterance, Vocabulary};
use crate::embedder::Provider;
use crate::losses::{
    ctc_loss_and_grad, lau_loss, LossBreakdown, LossError, LossWeights, SemanticKind, SequenceTerms,
};
use crate::model::{self, Gradients, ModelParams, PaddedBatch};

use super::TrainError;

/// A second sequence loss mixed in with weight `1 - alpha`.
pub trait SequenceLossTerm: Send + Sync {
    fn name(&self) -> &str;

    /// Loss and its gradient with respect to the `T x V` log-probabilities.
    fn loss_and_grad(
        &self,
        log_probs: ArrayView2<f64>,
        target: &[usize],
        blank: usize,
    ) -> Result<(f64, Array2<f64>), LossError>;
}

/// A training utterance with its encoded target and frozen reference.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub utterance: &'a Utterance,
    pub target: Vec<usize>,
    pub reference: Vec<f64>,
}

impl<'a> Example<'a> {
    pub fn new(
        utterance: &'a Utterance,
        vocab: &Vocabulary,
        provider: &Provider,
    ) -> Result<Self, TrainError> {
        Ok(Self {
            utterance,
            target: vocab.encode(&utterance.translation)?,
            reference: provider.embed(&utterance.translation)?.vector,
        })
    }
}

pub fn prepare_examples<'a>(
    utterances: &'a [Utterance],
    vocab: &Vocabulary,
    provider: &Provider,
) -> Result<Vec<Example<'a>>, TrainError> {
    utterances
        .iter()
        .map(|u| Example::new(u, vocab, provider))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    None,
    /// Sequence gradient always; semantic gradient only when `lambda > 0`.
    Weighted,
    /// Both gradients regardless of `lambda`.
    Both,
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub breakdown: LossBreakdown,
    pub seq_grad: Option<Gradients>,
    pub semantic_grad: Option<Gradients>,
    /// Utterances whose CTC target had no valid alignment.
    pub infeasible: usize,
    pub batch_size: usize,
}

impl Objective {
    /// Gradient of `seq + lambda * semantic`.
    pub fn total_grad(&self) -> Option<Gradients> {
        let mut g = self.seq_grad.clone()?;
        if self.breakdown.lambda > 0.0 {
            if let Some(s) = &self.semantic_grad {
                g.add_scaled(s, self.breakdown.lambda);
            }
        }
        Some(g)
    }
}

/// Loss terms for one batch and, depending on `mode`, their gradients.
///
/// Sequence loss is the mean over feasible utterances; the semantic loss
/// is the mean over all utterances. Without a semantic head the semantic
/// term is 0 and no semantic gradient exists.
pub fn batch_objective(
    params: &ModelParams,
    examples: &[&Example<'_>],
    blank: usize,
    weights: &LossWeights,
    kind: SemanticKind,
    second: Option<&dyn SequenceLossTerm>,
    mode: GradMode,
) -> Result<Objective, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    if weights.alpha() < 1.0 && second.is_none() {
        return Err(LossError::MissingSecondLoss.into());
    }
    let utts: Vec<&Utterance> = examples.iter().map(|e| e.utterance).collect();
    let batch = PaddedBatch::from_utterances(&utts)?;
    let traces = model::encode_traced(params, &batch)?;
    let has_head = params.has_semantic_head();
    let want_seq_grad = mode != GradMode::None;
    let want_sem_grad = has_head
        && match mode {
            GradMode::None => false,
            GradMode::Weighted => weights.lambda() > 0.0,
            GradMode::Both => true,
        };

    let mut seq_grad = want_seq_grad.then(|| params.zeros_like());
    let mut sem_grad = want_sem_grad.then(|| params.zeros_like());
    let mut seq_sum = 0.0;
    let mut sem_sum = 0.0;
    let mut infeasible = 0;
    let alpha = weights.alpha();

    // First pass: per-utterance terms and their local gradients.
    let mut seq_parts = Vec::with_capacity(examples.len());
    for (ex, trace) in examples.iter().zip(&traces) {
        let log_probs = model::ctc_log_probs_one(params, trace.states());
        let (ctc, ctc_grad) = ctc_loss_and_grad(log_probs.view(), &ex.target, blank)?;
        if ctc.infeasible {
            infeasible += 1;
            seq_parts.push(None);
            continue;
        }
        let (value, grad) = match second {
            Some(term) if alpha < 1.0 => {
                let (other, other_grad) =
                    term.loss_and_grad(log_probs.view(), &ex.target, blank)?;
                (
                    alpha * ctc.value + (1.0 - alpha) * other,
                    ctc_grad * alpha + other_grad * (1.0 - alpha),
                )
            }
            _ => (ctc.value, ctc_grad),
        };
        seq_sum += value;
        seq_parts.push(Some((log_probs, grad)));
    }
    let feasible = examples.len() - infeasible;
    let seq_loss = if feasible > 0 {
        seq_sum / feasible as f64
    } else {
        0.0
    };

    let n = examples.len() as f64;
    for ((ex, trace), part) in examples.iter().zip(&traces).zip(&seq_parts) {
        if let (Some(g), Some((lp, d_lp))) = (seq_grad.as_mut(), part) {
            let scaled = d_lp / feasible as f64;
            model::backward_one(params, trace, Some(lp), Some(&scaled), None, None, g);
        }
        if has_head {
            let sem = model::semantic_one(params, trace.states())?;
            if sem.output.iter().any(|v| !v.is_finite()) {
                // Surfaces as a non-finite breakdown rather than a loss error.
                sem_sum = f64::NAN;
                continue;
            }
            let (value, d_pred) =
                kind.loss_and_grad(sem.output.as_slice().unwrap(), &ex.reference)?;
            sem_sum += value;
            if let Some(g) = sem_grad.as_mut() {
                let scaled: Vec<f64> = d_pred.iter().map(|v| v / n).collect();
                model::backward_one(params, trace, None, None, Some(&sem), Some(&scaled), g);
            }
        }
    }
    let semantic_loss = if has_head { sem_sum / n } else { 0.0 };

    let breakdown = if seq_loss.is_finite() && semantic_loss.is_finite() {
        let mut b = lau_loss(seq_loss, semantic_loss, weights)?;
        b.semantic_kind = has_head.then_some(kind);
        b
    } else {
        LossBreakdown {
            seq_loss,
            semantic_loss,
            total: seq_loss + weights.lambda() * semantic_loss,
            lambda: weights.lambda(),
            semantic_kind: has_head.then_some(kind),
            sequence_terms: if alpha < 1.0 {
                SequenceTerms::CtcAndSecond
            } else {
                SequenceTerms::CtcOnly
            },
        }
    };
    Ok(Objective {
        breakdown,
        seq_grad,
        semantic_grad: sem_grad,
        infeasible,
        batch_size: examples.len(),
    })
}

/// Corpus-level losses: sequence mean over all feasible utterances, semantic mean over all.
pub fn evaluate_losses(
    params: &ModelParams,
    examples: &[Example<'_>],
    blank: usize,
    weights: &LossWeights,
    kind: SemanticKind,
    second: Option<&dyn SequenceLossTerm>,
    chunk: usize,
) -> Result<(LossBreakdown, usize), TrainError> {
    let mut seq_sum = 0.0;
    let mut feasible = 0usize;
    let mut sem_sum = 0.0;
    let mut infeasible = 0;
    let refs: Vec<&Example<'_>> = examples.iter().collect();
    let mut last = None;
    for part in refs.chunks(chunk.max(1)) {
        let obj = batch_objective(params, part, blank, weights, kind, second, GradMode::None)?;
        let f = obj.batch_size - obj.infeasible;
        seq_sum += obj.breakdown.seq_loss * f as f64;
        feasible += f;
        sem_sum += obj.breakdown.semantic_loss * obj.batch_size as f64;
        infeasible += obj.infeasible;
        last = Some(obj.breakdown);
    }
    let last = last.ok_or_else(|| TrainError::InvalidConfig("empty evaluation set".into()))?;
    let seq = if feasible > 0 {
        seq_sum / feasible as f64
    } else {
        0.0
    };
    let sem = sem_sum / examples.len() as f64;
    let mut b = lau_loss(seq, sem, weights)?;
    b.semantic_kind = last.semantic_kind;
    Ok((b, infeasible))
}
