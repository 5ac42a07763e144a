//! Sequence and semantic loss terms and their weighted combination.

mod ctc;

pub use ctc::{
    collapse, ctc_loss, ctc_loss_and_grad, ctc_loss_bruteforce, min_frames, CtcLoss,
    BRUTEFORCE_MAX_PATHS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Predictions with an L2 norm below this are rejected by the cosine loss.
pub const MIN_PREDICTION_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("brute-force enumeration refused: {paths} paths exceeds the guard")]
    TooLarge { paths: u128 },
    #[error("second sequence loss required when alpha < 1")]
    MissingSecondLoss,
    #[error("degenerate prediction norm {0:e}")]
    DegeneratePrediction(f64),
    #[error("dimension mismatch: prediction has {pred}, reference has {reference}")]
    DimensionMismatch { pred: usize, reference: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

/// λ scales the semantic term; α is the CTC share of the sequence loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct LossWeights {
    lambda: f64,
    alpha: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    lambda: f64,
    #[serde(default = "one")]
    alpha: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = LossError;
    fn try_from(raw: RawWeights) -> Result<Self, Self::Error> {
        LossWeights::new(raw.lambda, raw.alpha)
    }
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self, LossError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(LossError::InvalidWeights(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(LossError::InvalidWeights(format!(
                "alpha must be in [0,1], got {alpha}"
            )));
        }
        Ok(Self { lambda, alpha })
    }

    /// CTC-only weighting with the given λ.
    pub fn ctc_only(lambda: f64) -> Result<Self, LossError> {
        Self::new(lambda, 1.0)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticKind {
    Cosine,
    Mse,
}

impl SemanticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SemanticKind::Cosine => "cosine",
            SemanticKind::Mse => "mse",
        }
    }

    pub fn loss(&self, pred: &[f64], reference: &[f64]) -> Result<f64, LossError> {
        match self {
            SemanticKind::Cosine => cosine_loss(pred, reference),
            SemanticKind::Mse => mse_loss(pred, reference),
        }
    }

    /// Loss and gradient with respect to `pred`. `reference` is a constant.
    pub fn loss_and_grad(
        &self,
        pred: &[f64],
        reference: &[f64],
    ) -> Result<(f64, Vec<f64>), LossError> {
        match self {
            SemanticKind::Cosine => cosine_loss_and_grad(pred, reference),
            SemanticKind::Mse => mse_loss_and_grad(pred, reference),
        }
    }

    /// Mean over a batch of prediction/reference pairs.
    pub fn batch_loss<P, R>(&self, preds: &[P], refs: &[R]) -> Result<f64, LossError>
    where
        P: AsRef<[f64]>,
        R: AsRef<[f64]>,
    {
        if preds.len() != refs.len() || preds.is_empty() {
            return Err(LossError::InvalidInput(format!(
                "batch of {} predictions and {} references",
                preds.len(),
                refs.len()
            )));
        }
        let mut sum = 0.0;
        for (p, r) in preds.iter().zip(refs) {
            sum += self.loss(p.as_ref(), r.as_ref())?;
        }
        Ok(sum / preds.len() as f64)
    }
}

impl std::fmt::Display for SemanticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SemanticKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(SemanticKind::Cosine),
            "mse" => Ok(SemanticKind::Mse),
            _ => Err(format!(
                "unknown semantic loss kind '{s}' (expected cosine or mse)"
            )),
        }
    }
}

fn check_dims(pred: &[f64], reference: &[f64]) -> Result<(), LossError> {
    if pred.len() != reference.len() {
        return Err(LossError::DimensionMismatch {
            pred: pred.len(),
            reference: reference.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - cos(pred, reference)`, in `[0, 2]`.
pub fn cosine_loss(pred: &[f64], reference: &[f64]) -> Result<f64, LossError> {
    cosine_loss_and_grad(pred, reference).map(|(l, _)| l)
}

pub fn cosine_loss_and_grad(pred: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_dims(pred, reference)?;
    let pn = norm(pred);
    if pn.is_nan() || pn < MIN_PREDICTION_NORM {
        return Err(LossError::DegeneratePrediction(pn));
    }
    let rn = norm(reference);
    if rn == 0.0 || !rn.is_finite() {
        return Err(LossError::InvalidInput(
            "reference embedding has zero norm".into(),
        ));
    }
    let cos = (dot(pred, reference) / (pn * rn)).clamp(-1.0, 1.0);
    // d/dp [-(r.p)/(|r||p|)] = -r/(|r||p|) + (r.p) p/(|r||p|^3)
    let grad = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| -r / (rn * pn) + cos * p / (pn * pn))
        .collect();
    Ok((1.0 - cos, grad))
}

/// Mean of squared coordinate differences.
pub fn mse_loss(pred: &[f64], reference: &[f64]) -> Result<f64, LossError> {
    check_dims(pred, reference)?;
    if pred.is_empty() {
        return Err(LossError::InvalidInput("empty vectors".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r) * (p - r))
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_loss_and_grad(pred: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    let loss = mse_loss(pred, reference)?;
    let n = pred.len() as f64;
    let grad = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| 2.0 * (p - r) / n)
        .collect();
    Ok((loss, grad))
}

/// `(1 - α)·other + α·ctc`. With α = 1 the second slot is ignored.
pub fn sequence_loss(
    weights: &LossWeights,
    ctc: f64,
    other: Option<f64>,
) -> Result<f64, LossError> {
    if weights.alpha >= 1.0 {
        return Ok(ctc);
    }
    let other = other.ok_or(LossError::MissingSecondLoss)?;
    Ok((1.0 - weights.alpha) * other + weights.alpha * ctc)
}

/// Which sequence terms fed the sequence loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceTerms {
    CtcOnly,
    CtcAndSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seq_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
    pub lambda: f64,
    pub semantic_kind: Option<SemanticKind>,
    pub sequence_terms: SequenceTerms,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.seq_loss.is_finite() && self.semantic_loss.is_finite() && self.total.is_finite()
    }
}

/// `total = seq + λ·semantic`.
pub fn lau_loss(
    seq: f64,
    semantic: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    if !seq.is_finite() || !semantic.is_finite() {
        return Err(LossError::InvalidInput(format!(
            "non-finite loss terms (seq={seq}, semantic={semantic})"
        )));
    }
    Ok(LossBreakdown {
        seq_loss: seq,
        semantic_loss: semantic,
        total: seq + weights.lambda * semantic,
        lambda: weights.lambda,
        semantic_kind: None,
        sequence_terms: if weights.alpha >= 1.0 {
            SequenceTerms::CtcOnly
        } else {
            SequenceTerms::CtcAndSecond
        },
    })
}
