//! Question-answering judge interface and an offline lexical mock.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    Abstain,
}

#[derive(Debug, Error)]
#[error("judge transport failure: {0}")]
pub struct TransportError(pub String);

/// Something that can decide whether `context` answers `question` with `expected`.
pub trait JudgeClient {
    fn judge(
        &self,
        context: &str,
        question: &str,
        expected: &str,
    ) -> Result<Verdict, TransportError>;
}

/// Words of at least this many characters count as content words.
pub const CONTENT_WORD_MIN_CHARS: usize = 4;

/// Correct iff every content word of `expected` occurs in `context`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

fn tokens(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl JudgeClient for MockJudge {
    fn judge(
        &self,
        context: &str,
        _question: &str,
        expected: &str,
    ) -> Result<Verdict, TransportError> {
        let ctx: HashSet<String> = tokens(context).collect();
        let all_present = tokens(expected)
            .filter(|w| w.chars().count() >= CONTENT_WORD_MIN_CHARS)
            .all(|w| ctx.contains(&w));
        Ok(if all_present {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        })
    }
}

/// Transport errors become an abstention, logged with their cause.
pub fn qa_judge(
    client: &dyn JudgeClient,
    context: &str,
    question: &str,
    expected: &str,
) -> Verdict {
    match client.judge(context, question, expected) {
        Ok(v) => v,
        Err(e) => {
            log::warn!("qa judge abstained: {e}");
            Verdict::Abstain
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    pub expected: String,
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>, MetricError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| MetricError::MalformedLine {
                line: i + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

/// Fraction of questions judged correct, using each utterance's hypothesis as context.
///
/// Questions whose id has no hypothesis are judged against an empty context.
pub fn qa_accuracy(
    client: &dyn JudgeClient,
    questions: &[Question],
    contexts: &BTreeMap<String, String>,
) -> Option<f64> {
    if questions.is_empty() {
        return None;
    }
    let correct = questions
        .iter()
        .filter(|q| {
            let ctx = contexts.get(&q.id).map_or("", String::as_str);
            qa_judge(client, ctx, &q.question, &q.expected) == Verdict::Correct
        })
        .count();
    Some(correct as f64 / questions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Broken;

    impl JudgeClient for Broken {
        fn judge(&self, _: &str, _: &str, _: &str) -> Result<Verdict, TransportError> {
            Err(TransportError("connection refused".into()))
        }
    }

    #[test]
    fn mock_rule() {
        let ctx = "the griot tells the story of the founding family";
        assert_eq!(
            qa_judge(&MockJudge, ctx, "who?", "the founding family"),
            Verdict::Correct
        );
        assert_eq!(
            qa_judge(&MockJudge, "rain fell", "who?", "founding family"),
            Verdict::Incorrect
        );
        // short words are ignored
        assert_eq!(
            qa_judge(&MockJudge, ctx, "?", "a of in story"),
            Verdict::Correct
        );
    }

    #[test]
    fn transport_failure_abstains() {
        assert_eq!(qa_judge(&Broken, "x", "y", "z"), Verdict::Abstain);
    }

    #[test]
    fn accuracy_over_question_set() {
        let qs = vec![
            Question {
                id: "u1".into(),
                question: "q".into(),
                expected: "river".into(),
            },
            Question {
                id: "u2".into(),
                question: "q".into(),
                expected: "mountain".into(),
            },
        ];
        let mut ctx = BTreeMap::new();
        ctx.insert("u1".to_string(), "by the river".to_string());
        ctx.insert("u2".to_string(), "by the sea".to_string());
        assert_eq!(qa_accuracy(&MockJudge, &qs, &ctx), Some(0.5));
        assert_eq!(qa_accuracy(&Broken, &qs, &ctx), Some(0.0));
        assert_eq!(qa_accuracy(&MockJudge, &[], &ctx), None);
    }
}
