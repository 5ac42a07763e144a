//! Translation metrics, topic clustering metrics and the evaluation driver.

mod cluster;
mod judge;
mod text;

pub use cluster::{
    cosine_objective, kmeans_cluster, nmi, purity, spherical_kmeans, ClusterReport, Contingency,
    KMeansResult, DEFAULT_RESTARTS, MAX_ITERATIONS,
};
pub use judge::{
    load_questions, qa_accuracy, qa_judge, JudgeClient, MockJudge, Question, TransportError,
    Verdict, CONTENT_WORD_MIN_CHARS,
};
pub use text::{bleu4, cer, edit_distance, wer, BleuStats, ErrorCounts, BLEU_MAX_ORDER};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Vocabulary};
use crate::embedder::{EmbedError, Provider};
use crate::model::{strip_semantic_head, transcribe, ModelError, ModelParams, PaddedBatch};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty reference")]
    EmptyReference,
    #[error("at least one reference is required")]
    NoReferences,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("cannot form {k} clusters from {n} points")]
    BadClusterCount { k: usize, n: usize },
    #[error("zero or non-finite vector cannot be clustered")]
    ZeroVector,
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
    pub cer: f64,
    pub cluster: Option<usize>,
    pub topic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub wer: f64,
    pub cer: f64,
    pub bleu4: f64,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
    pub qa_accuracy: Option<f64>,
    /// Set when the test set lacks topic labels.
    pub clustering_omitted: bool,
    pub n_clusters: Option<usize>,
    pub contingency: Option<Contingency>,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub kmeans_seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            kmeans_seed: 0,
            batch_size: 16,
        }
    }
}

/// Embedding used for empty hypotheses, which have no text to embed.
fn empty_hypothesis_embedding(dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v
}

/// Scores `(reference, hypothesis)` pairs and clusters hypothesis embeddings by topic.
pub fn score_hypotheses(
    testset: &Corpus,
    hypotheses: Vec<String>,
    provider: &Provider,
    options: &EvalOptions,
) -> Result<EvalReport, MetricError> {
    if hypotheses.len() != testset.len() {
        return Err(MetricError::LengthMismatch {
            left: testset.len(),
            right: hypotheses.len(),
        });
    }
    let mut word_counts = ErrorCounts::default();
    let mut char_counts = ErrorCounts::default();
    let mut bleu = BleuStats::default();
    let mut rows = Vec::with_capacity(testset.len());
    for (utt, hyp) in testset.utterances().iter().zip(hypotheses) {
        let reference = utt.translation.clone();
        let w = ErrorCounts::words(&reference, &hyp);
        let c = ErrorCounts::chars(&reference, &hyp);
        word_counts.add(w);
        char_counts.add(c);
        bleu.add(&BleuStats::sentence(&[reference.as_str()], &hyp)?);
        rows.push(EvalRow {
            id: utt.id.clone(),
            wer: w.rate()?,
            cer: c.rate()?,
            reference,
            hypothesis: hyp,
            cluster: None,
            topic: utt.topic.clone(),
        });
    }

    let mut report = EvalReport {
        wer: word_counts.rate()?,
        cer: char_counts.rate()?,
        bleu4: bleu.score(),
        purity: None,
        nmi: None,
        qa_accuracy: None,
        clustering_omitted: true,
        n_clusters: None,
        contingency: None,
        rows,
    };

    if let Some(topics) = testset.topics() {
        let embeddings: Vec<Vec<f64>> = report
            .rows
            .iter()
            .map(|r| {
                if r.hypothesis.trim().is_empty() {
                    Ok(empty_hypothesis_embedding(provider.dim()))
                } else {
                    provider.embed(&r.hypothesis).map(|e| e.vector)
                }
            })
            .collect::<Result<_, EmbedError>>()?;
        let k = topics.len();
        let assignments = kmeans_cluster(&embeddings, k, options.kmeans_seed)?;
        let labels: Vec<String> = report
            .rows
            .iter()
            .map(|r| r.topic.clone().unwrap())
            .collect();
        let cluster = ClusterReport::new(assignments, labels, k)?;
        for (row, &a) in report.rows.iter_mut().zip(&cluster.assignments) {
            row.cluster = Some(a);
        }
        report.purity = Some(cluster.purity);
        report.nmi = Some(cluster.nmi);
        report.n_clusters = Some(k);
        report.contingency = Some(cluster.contingency);
        report.clustering_omitted = false;
    }
    Ok(report)
}

/// Greedy-decodes the test set with the inference graph and scores it.
pub fn evaluate_run(
    params: &ModelParams,
    vocab: &Vocabulary,
    testset: &Corpus,
    provider: &Provider,
    options: &EvalOptions,
) -> Result<EvalReport, MetricError> {
    if vocab.len() != params.config.vocab_size {
        return Err(MetricError::VocabularyMismatch(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    let (inference, _) = strip_semantic_head(params);
    let mut hypotheses = Vec::with_capacity(testset.len());
    for chunk in testset.utterances().chunks(options.batch_size.max(1)) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = PaddedBatch::from_utterances(&refs)?;
        hypotheses.extend(transcribe(&inference, &batch, vocab)?);
    }
    score_hypotheses(testset, hypotheses, provider, options)
}

/// Adds LLM-QA style accuracy to a report, judging each question against its utterance's hypothesis.
pub fn attach_qa(report: &mut EvalReport, client: &dyn JudgeClient, questions: &[Question]) {
    let contexts: BTreeMap<String, String> = report
        .rows
        .iter()
        .map(|r| (r.id.clone(), r.hypothesis.clone()))
        .collect();
    report.qa_accuracy = qa_accuracy(client, questions, &contexts);
}

/// One row of the combined translation/semantic table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub wer: Option<f64>,
    pub cer: Option<f64>,
    pub bleu: Option<f64>,
    pub acc: Option<f64>,
    pub purity: Option<f64>,
    pub nmi: Option<f64>,
}

impl TableRow {
    pub fn from_report(model: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            model: model.into(),
            wer: Some(r.wer),
            cer: Some(r.cer),
            bleu: Some(r.bleu4),
            acc: r.qa_accuracy,
            purity: r.purity,
            nmi: r.nmi,
        }
    }
}

pub const TABLE_COLUMNS: [&str; 7] = [
    "Model (Decoding)",
    "WER",
    "CER",
    "BLEU",
    "Acc",
    "Pur",
    "NMI",
];

/// Plain-text table with four-decimal metrics and `-` for missing values.
pub fn format_table(rows: &[TableRow]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let width = rows
        .iter()
        .map(|r| r.model.chars().count())
        .chain(std::iter::once(TABLE_COLUMNS[0].len()))
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", TABLE_COLUMNS[0]);
    for c in &TABLE_COLUMNS[1..] {
        let _ = write!(out, " | {c:>6}");
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + 9 * (TABLE_COLUMNS.len() - 1)));
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<width$}", r.model);
        for v in [r.wer, r.cer, r.bleu, r.acc, r.purity, r.nmi] {
            let _ = write!(out, " | {:>6}", cell(v));
        }
        out.push('\n');
    }
    out
}
