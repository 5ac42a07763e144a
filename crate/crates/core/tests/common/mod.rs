#![allow(dead_code)]

use lau::corpus::Utterance;
use lau::losses::{LossWeights, SemanticKind};
use lau::model::{init_model, ModelConfig, ModelParams};
use lau::trainer::{batch_objective, Example, GradMode};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

/// A small model with non-zero biases so every parameter path is exercised.
pub fn tiny_model(rng: &mut ChaCha8Rng, vocab: usize, embed: usize) -> ModelParams {
    let cfg = ModelConfig {
        feature_dim: rng.gen_range(2..=4),
        encoder_layers: rng.gen_range(1..=3),
        encoder_hidden: rng.gen_range(3..=8),
        subsample: rng.gen_range(1..=2),
        vocab_size: vocab,
        embed_dim: embed,
        seed: rng.gen(),
    };
    let mut p = init_model(&cfg).unwrap();
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    p
}

pub struct Draw {
    pub utterances: Vec<Utterance>,
    pub targets: Vec<Vec<usize>>,
    pub references: Vec<Vec<f64>>,
}

impl Draw {
    pub fn examples(&self) -> Vec<Example<'_>> {
        self.utterances
            .iter()
            .zip(&self.targets)
            .zip(&self.references)
            .map(|((u, t), r)| Example {
                utterance: u,
                target: t.clone(),
                reference: r.clone(),
            })
            .collect()
    }
}

/// Random batch with frames <= 6 and feasible CTC targets.
pub fn random_draw(rng: &mut ChaCha8Rng, params: &ModelParams, batch: usize) -> Draw {
    let cfg = &params.config;
    let mut utterances = Vec::new();
    let mut targets = Vec::new();
    let mut references = Vec::new();
    for i in 0..batch {
        let frames = rng.gen_range(2..=6);
        let feats =
            Array2::from_shape_fn((frames, cfg.feature_dim), |_| rng.gen_range(-1.0f32..1.0));
        utterances.push(Utterance::new(format!("u{i}"), feats, None, "x", None).unwrap());
        let out_frames = frames.div_ceil(cfg.subsample);
        let mut target: Vec<usize> = Vec::new();
        let max_len = rng.gen_range(0..=out_frames.min(3));
        for _ in 0..max_len {
            let k = rng.gen_range(1..cfg.vocab_size);
            target.push(k);
            if lau::losses::min_frames(&target) > out_frames {
                target.pop();
                break;
            }
        }
        targets.push(target);
        let r: Vec<f64> = (0..cfg.embed_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        references.push(r.into_iter().map(|x| x / n).collect());
    }
    Draw {
        utterances,
        targets,
        references,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Sequence,
    Semantic,
    Total,
}

fn term_value(
    params: &ModelParams,
    draw: &Draw,
    weights: &LossWeights,
    kind: SemanticKind,
    term: Term,
) -> f64 {
    let ex = draw.examples();
    let refs: Vec<&Example<'_>> = ex.iter().collect();
    let b = batch_objective(params, &refs, 0, weights, kind, None, GradMode::None)
        .unwrap()
        .breakdown;
    match term {
        Term::Sequence => b.seq_loss,
        Term::Semantic => b.semantic_loss,
        Term::Total => b.total,
    }
}

/// Central finite differences of one loss term, tensor by tensor.
pub fn numeric_gradient(
    params: &ModelParams,
    draw: &Draw,
    weights: &LossWeights,
    kind: SemanticKind,
    term: Term,
) -> Vec<Vec<f64>> {
    let mut p = params.clone();
    let mut out = Vec::new();
    for ti in 0..p.tensors().len() {
        let mut g = vec![0.0; p.tensors()[ti].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = p.tensors()[ti].data[j];
            p.tensors_mut()[ti].data[j] = orig + FD_STEP;
            let up = term_value(&p, draw, weights, kind, term);
            p.tensors_mut()[ti].data[j] = orig - FD_STEP;
            let down = term_value(&p, draw, weights, kind, term);
            p.tensors_mut()[ti].data[j] = orig;
            *gj = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

pub fn analytic_gradient(
    params: &ModelParams,
    draw: &Draw,
    weights: &LossWeights,
    kind: SemanticKind,
    term: Term,
) -> Vec<Vec<f64>> {
    let ex = draw.examples();
    let refs: Vec<&Example<'_>> = ex.iter().collect();
    let obj = batch_objective(params, &refs, 0, weights, kind, None, GradMode::Both).unwrap();
    let g = match term {
        Term::Sequence => obj.seq_grad.clone().unwrap(),
        Term::Semantic => obj.semantic_grad.clone().unwrap(),
        Term::Total => obj.total_grad().unwrap(),
    };
    g.tensors.into_iter().map(|t| t.data).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst per-tensor relative error `|a - n| / max(|a|, |n|)`; tensors whose
/// gradients are both below `1e-9` in norm count as agreeing when their
/// difference is below `1e-8`.
pub fn worst_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        let err = if scale < 1e-9 {
            if norm(&diff) < 1e-8 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            norm(&diff) / scale
        };
        worst = worst.max(err);
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error of one term over `draws` random tiny models and batches.
pub fn worst_over_draws(
    term: Term,
    kind: SemanticKind,
    lambda: f64,
    seed: u64,
    draws: usize,
) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let vocab = r.gen_range(2..=4);
        let embed = r.gen_range(2..=8);
        let params = tiny_model(&mut r, vocab, embed);
        let batch = r.gen_range(1..=3);
        let draw = random_draw(&mut r, &params, batch);
        let w = LossWeights::ctc_only(lambda).unwrap();
        let a = analytic_gradient(&params, &draw, &w, kind, term);
        let n = numeric_gradient(&params, &draw, &w, kind, term);
        worst = worst.max(worst_relative_error(&a, &n));
    }
    worst
}

/// The reference toy experiment shipped in `configs/toy.toml`.
pub fn toy_config() -> lau::experiment::ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    lau::experiment::ExperimentConfig::load(&path).unwrap()
}
