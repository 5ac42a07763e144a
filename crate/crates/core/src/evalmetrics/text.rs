//! WER, CER and BLEU-4.

use std::collections::HashMap;

use super::MetricError;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Word edits divided by the number of reference words. Can exceed 1.
pub fn wer(reference: &str, hypothesis: &str) -> Result<f64, MetricError> {
    let r = words(reference);
    if r.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(edit_distance(&r, &words(hypothesis)) as f64 / r.len() as f64)
}

/// Character edits (spaces included) divided by the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64, MetricError> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Sufficient statistics for corpus-level error rates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorCounts {
    pub edits: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn words(reference: &str, hypothesis: &str) -> Self {
        let r = words(reference);
        Self {
            edits: edit_distance(&r, &words(hypothesis)),
            reference_len: r.len(),
        }
    }

    pub fn chars(reference: &str, hypothesis: &str) -> Self {
        let r: Vec<char> = reference.chars().collect();
        let h: Vec<char> = hypothesis.chars().collect();
        Self {
            edits: edit_distance(&r, &h),
            reference_len: r.len(),
        }
    }

    pub fn add(&mut self, other: ErrorCounts) {
        self.edits += other.edits;
        self.reference_len += other.reference_len;
    }

    pub fn rate(&self) -> Result<f64, MetricError> {
        if self.reference_len == 0 {
            return Err(MetricError::EmptyReference);
        }
        Ok(self.edits as f64 / self.reference_len as f64)
    }
}

pub const BLEU_MAX_ORDER: usize = 4;

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and lengths accumulated over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Statistics for one hypothesis. The effective reference length is the
    /// closest reference length (shorter wins ties).
    pub fn sentence(references: &[&str], hypothesis: &str) -> Result<Self, MetricError> {
        if references.is_empty() {
            return Err(MetricError::NoReferences);
        }
        let hyp = words(hypothesis);
        let refs: Vec<Vec<&str>> = references.iter().map(|r| words(r)).collect();
        let mut stats = BleuStats {
            hyp_len: hyp.len(),
            ref_len: refs
                .iter()
                .map(Vec::len)
                .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
                .unwrap(),
            ..Default::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let hyp_counts = ngram_counts(&hyp, n);
            let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
            for r in &refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            stats.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            stats.matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
        }
        Ok(stats)
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..BLEU_MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU-4 with add-one smoothing of zero precisions for orders 2..4.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..BLEU_MAX_ORDER {
            let (m, t) = if n > 0 && self.matches[n] == 0 {
                (1.0, self.totals[n] as f64 + 1.0)
            } else {
                (self.matches[n] as f64, self.totals[n] as f64)
            };
            log_sum += (m / t).ln();
        }
        let geo = (log_sum / BLEU_MAX_ORDER as f64).exp();
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        (bp * geo).clamp(0.0, 1.0)
    }
}

/// Single-hypothesis BLEU-4 in [0, 1]. An empty hypothesis scores 0.
pub fn bleu4(references: &[&str], hypothesis: &str) -> Result<f64, MetricError> {
    Ok(BleuStats::sentence(references, hypothesis)?.score())
}
