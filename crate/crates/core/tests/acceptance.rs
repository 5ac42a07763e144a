//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use lau::corpus::generate_toy_corpus;
use lau::embedder::{hash_embed, EmbeddingCache, Fallback, Provider};
use lau::evalmetrics::{bleu4, cer, nmi, purity, score_hypotheses, wer, EvalOptions};
use lau::experiment::{
    load_data, run_drift, run_sweep, train_into, Data, TrainSummary, SWEEP_COLUMNS,
};
use lau::losses::{ctc_loss, LossWeights, SemanticKind};
use lau::model::{
    ctc_logits, encode, init_model, save_checkpoint, strip_semantic_head, transcribe, Checkpoint,
    ModelConfig, PaddedBatch,
};
use lau::trainer::{gradient_routing_check, TrainConfig};
use ndarray::Array2;
use rand::Rng;

const CTC_TOL: f64 = 1e-6;
const CTC_INSTANCES: usize = 200;
const CTC_TIME_LIMIT: Duration = Duration::from_secs(30);
const GRAD_DRAWS: usize = 20;
const RUN_TIME_LIMIT: Duration = Duration::from_secs(300);
const ENTROPIC_TOL: f64 = 1e-9;
const PURITY_FLOOR: f64 = 0.9;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Sum over every frame path of its probability, keeping paths that collapse to `target`.
fn enumerate_ctc(probs: &Array2<f64>, target: &[usize]) -> f64 {
    let (t, v) = probs.dim();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path
                .iter()
                .enumerate()
                .map(|(i, &s)| probs[[i, s]])
                .product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut infeasible_agree = true;
    for _ in 0..CTC_INSTANCES {
        let t = r.gen_range(1..=6);
        let v = r.gen_range(2..=4);
        let len = r.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| r.gen_range(1..v)).collect();
        let probs = Array2::from_shape_fn((t, v), |_| r.gen_range(0.05..1.0));
        let probs = &probs
            / &probs
                .sum_axis(ndarray::Axis(1))
                .insert_axis(ndarray::Axis(1));
        let dp = ctc_loss(probs.mapv(f64::ln).view(), &target, 0).unwrap();
        let oracle = enumerate_ctc(&probs, &target);
        if oracle.is_infinite() {
            infeasible_agree &= dp.infeasible && dp.value.is_infinite();
        } else {
            worst = worst.max((dp.value - oracle).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= CTC_TOL && infeasible_agree && elapsed < CTC_TIME_LIMIT,
        format!(
            "{CTC_INSTANCES} instances, max |dp - enum| = {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let checks = [
        ("ctc", Term::Sequence, SemanticKind::Cosine, 1.0),
        ("cosine", Term::Semantic, SemanticKind::Cosine, 1.0),
        ("mse", Term::Semantic, SemanticKind::Mse, 1.0),
        ("lau", Term::Total, SemanticKind::Cosine, 0.7),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, term, kind, lambda)) in checks.into_iter().enumerate() {
        let err = worst_over_draws(term, kind, lambda, 200 + i as u64, GRAD_DRAWS);
        pass &= err <= FD_REL_TOL;
        parts.push(format!("{name} {err:.1e}"));
    }
    verdict(
        pass,
        format!(
            "worst relative error over {GRAD_DRAWS} draws: {}",
            parts.join(", ")
        ),
    )
}

fn toy_train_config(lambda: f64, kind: SemanticKind) -> (TrainConfig, Provider) {
    let cfg = toy_config();
    let base = cfg.train.clone().unwrap();
    let provider = cfg.provider.clone().unwrap().build().unwrap();
    (
        TrainConfig {
            weights: LossWeights::ctc_only(lambda).unwrap(),
            semantic_kind: kind,
            ..base
        },
        provider,
    )
}

fn toy_run(data: &Data, dir: &Path, lambda: f64) -> (TrainSummary, Duration) {
    let cfg = toy_config();
    let (tcfg, provider) = toy_train_config(lambda, SemanticKind::Cosine);
    let start = Instant::now();
    let summary = train_into(dir, data, cfg.model.as_ref().unwrap(), &tcfg, &provider).unwrap();
    (summary, start.elapsed())
}

fn criterion_3(data: &Data, lambda_one: &TrainSummary) -> Verdict {
    let batch: Vec<_> = data.train.utterances().iter().take(8).collect();
    let weights = LossWeights::ctc_only(1.0).unwrap();
    let hash = Provider::hash(64, 0).unwrap();
    let mut report_ok = true;
    let mut worst = (0.0f64, 0.0f64);
    for kind in [SemanticKind::Cosine, SemanticKind::Mse] {
        for params in [
            init_model(&lau::experiment::model_config(
                toy_config().model.as_ref().unwrap(),
                data,
                64,
            ))
            .unwrap(),
            lambda_one.outcome.params.clone(),
        ] {
            let r = gradient_routing_check(&params, &batch, &data.vocab, &weights, kind, &hash)
                .unwrap();
            report_ok &= r.is_clean()
                && r.semantic_on_encoder_norm > 0.0
                && r.sequence_on_encoder_norm > 0.0;
            worst.0 = worst.0.max(r.semantic_on_ctc_head);
            worst.1 = worst.1.max(r.sequence_on_semantic_head);
        }
    }

    // provider state across a full training run, for both provider kinds
    let mut cache = EmbeddingCache::default();
    for u in data.full.utterances().iter().step_by(2) {
        cache
            .insert(
                &u.translation,
                hash_embed(&u.translation, 64, 9).unwrap().vector,
            )
            .unwrap();
    }
    let cached = Provider::cache(cache, Fallback::Hash, Some(64), 0).unwrap();
    let cfg = toy_config();
    let mut digests_ok = true;
    for provider in [hash, cached] {
        let before = provider.state_digest();
        let (tcfg, _) = toy_train_config(1.0, SemanticKind::Cosine);
        lau::trainer::train(
            &tcfg,
            &data.train,
            &data.vocab,
            init_model(&lau::experiment::model_config(
                cfg.model.as_ref().unwrap(),
                data,
                64,
            ))
            .unwrap(),
            &provider,
            data.validation.as_ref(),
        )
        .unwrap();
        digests_ok &= provider.state_digest() == before;
    }
    verdict(
        report_ok && digests_ok,
        format!(
            "semantic->ctc_head max {:e}, sequence->semantic_head max {:e}, provider digests unchanged: {digests_ok}",
            worst.0, worst.1
        ),
    )
}

fn criterion_4(data: &Data, lambda_one: &TrainSummary) -> Verdict {
    let params = &lambda_one.outcome.params;
    let (stripped, _) = strip_semantic_head(params);
    let utts: Vec<_> = data.full.utterances().iter().take(50).collect();
    let batch = PaddedBatch::from_utterances(&utts).unwrap();
    let full_decode = transcribe(params, &batch, &data.vocab).unwrap();
    let stripped_decode = transcribe(&stripped, &batch, &data.vocab).unwrap();
    let bits = |p| -> Vec<u64> {
        ctc_logits(p, &encode(p, &batch).unwrap())
            .iter()
            .flat_map(|a| a.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let logits_equal = bits(params) == bits(&stripped);
    let nonempty = full_decode.iter().filter(|s| !s.is_empty()).count();
    verdict(
        full_decode == stripped_decode && logits_equal && !stripped.has_semantic_head(),
        format!(
            "{} utterances, {nonempty} non-empty decodes, logits bit-identical: {logits_equal}",
            utts.len()
        ),
    )
}

fn criterion_5(dir: &Path) -> Verdict {
    let cfg = ModelConfig {
        feature_dim: 3,
        encoder_layers: 2,
        encoder_hidden: 4,
        subsample: 1,
        vocab_size: 3,
        embed_dim: 4,
        seed: 5,
    };
    let mut base = init_model(&cfg).unwrap();
    base.get_mut("encoder.input.weight").unwrap().data[0] = 0.0;
    base.get_mut("encoder.layer1.bias").unwrap().data[1] = 0.0;
    let save = |name: &str, p: &lau::model::ModelParams| {
        let path = dir.join(name);
        save_checkpoint(
            &path,
            &Checkpoint {
                params: p.clone(),
                vocab: None,
                step: None,
            },
        )
        .unwrap();
        path
    };
    let a = save("a", &base);
    let mut three = base.clone();
    three.get_mut("encoder.input.weight").unwrap().data[0] = 3.0;
    let mut five = base.clone();
    five.get_mut("encoder.input.weight").unwrap().data[0] = 3.0;
    five.get_mut("encoder.layer1.bias").unwrap().data[1] = 4.0;
    let mut heads = five.clone();
    for name in ["ctc_head.weight", "ctc_head.bias"] {
        for v in &mut heads.get_mut(name).unwrap().data {
            *v += 0.5;
        }
    }
    heads.round_to_f32();
    let b3 = save("b3", &three);
    let b5 = save("b5", &five);
    let bh = save("bh", &heads);
    let d0 = run_drift(&a, &a).unwrap().drift;
    let d3 = run_drift(&a, &b3).unwrap().drift;
    let d5 = run_drift(&a, &b5).unwrap().drift;
    let dh = run_drift(&a, &bh).unwrap().drift;
    verdict(
        d0 == 0.0 && d3 == 3.0 && d5 == 5.0 && dh == 5.0,
        format!("drifts {d0}, {d3}, {d5}; with ctc_head perturbed {dh}"),
    )
}

fn criterion_6(base: &TrainSummary, t0: Duration, reg: &TrainSummary, t1: Duration) -> Verdict {
    let s0 = base.outcome.log.last_eval().unwrap().semantic_loss;
    let s1 = reg.outcome.log.last_eval().unwrap().semantic_loss;
    verdict(
        s1 < s0 && t0 < RUN_TIME_LIMIT && t1 < RUN_TIME_LIMIT,
        format!(
            "validation semantic loss lambda=1 {s1:.6} vs lambda=0 {s0:.6}; runtimes {:.1}s / {:.1}s",
            t1.as_secs_f64(),
            t0.as_secs_f64()
        ),
    )
}

fn criterion_7(dir: &Path) -> Verdict {
    let mut cfg = toy_config();
    cfg.output_dir = dir.to_path_buf();
    let rows = run_sweep(
        &cfg,
        &[0.2, 1.0, 5.0],
        &[SemanticKind::Cosine, SemanticKind::Mse],
    )
    .unwrap();
    let mut reader = csv::Reader::from_path(dir.join("sweep.csv")).unwrap();
    let header: Vec<String> = reader
        .headers()
        .unwrap()
        .iter()
        .map(str::to_string)
        .collect();
    let drifts: Vec<f64> = reader
        .records()
        .map(|r| r.unwrap()[2].parse::<f64>().unwrap_or(f64::NAN))
        .collect();
    let shape_ok = header == SWEEP_COLUMNS && drifts.len() == 6 && rows.len() == 6;
    let values_ok = drifts.iter().all(|d| d.is_finite() && *d > 0.0);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{}/{}={:.4}", r.kind, r.lambda, r.drift.unwrap_or(f64::NAN)))
        .collect();
    verdict(
        shape_ok && values_ok && dir.join("drift_bars.svg").exists(),
        format!("{} rows: {}", drifts.len(), table.join(" ")),
    )
}

fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    let mut exact = |name: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    exact("wer a b c/a x c", wer("a b c", "a x c").unwrap(), 1.0 / 3.0);
    exact("wer a/a b c", wer("a", "a b c").unwrap(), 2.0);
    exact("cer abc/adc", cer("abc", "adc").unwrap(), 1.0 / 3.0);
    exact("cer ab/''", cer("ab", "").unwrap(), 1.0);
    exact(
        "bleu perfect",
        bleu4(&["the cat sat on the mat"], "the cat sat on the mat").unwrap(),
        1.0,
    );
    exact(
        "bleu disjoint",
        bleu4(&["the cat sat"], "dog runs fast").unwrap(),
        0.0,
    );
    exact(
        "purity (2,1;0,2)",
        purity(&[0, 0, 0, 1, 1], &["A", "A", "B", "B", "B"]).unwrap(),
        0.8,
    );
    exact(
        "purity single cluster",
        purity(&[0, 0, 0, 0], &["A", "A", "B", "B"]).unwrap(),
        0.5,
    );
    exact(
        "purity self",
        purity(&[0, 1, 2, 1], &["x", "y", "z", "y"]).unwrap(),
        1.0,
    );
    exact(
        "nmi single cluster",
        nmi(&[0, 0, 0, 0], &["A", "A", "B", "B"]).unwrap(),
        0.0,
    );

    let mut close = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > ENTROPIC_TOL {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    // unigrams 5/5, bigrams 3/4, trigrams 1/3, 4-grams 0/2 -> 1/3, c=5, r=6
    let anchor = (-0.2f64).exp() * (1.0f64 * 0.75 * (1.0 / 3.0) * (1.0 / 3.0)).powf(0.25);
    close(
        "bleu anchor",
        bleu4(&["the cat sat on the mat"], "the cat on the mat").unwrap(),
        anchor,
    );
    // joint (2,1;0,2) over N=5; both marginals are (3/5, 2/5)
    let mi = 0.4 * (0.4f64 / (0.6 * 0.4)).ln()
        + 0.2 * (0.2f64 / (0.6 * 0.6)).ln()
        + 0.4 * (0.4f64 / (0.4 * 0.6)).ln();
    let h = -(0.6f64 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
    close(
        "nmi (2,1;0,2)",
        nmi(&[0, 0, 0, 1, 1], &["A", "A", "B", "B", "B"]).unwrap(),
        2.0 * mi / (h + h),
    );
    close(
        "nmi self",
        nmi(&[2, 0, 1, 0], &["x", "y", "z", "y"]).unwrap(),
        1.0,
    );
    let pass = failures.is_empty();
    verdict(
        pass,
        if pass {
            format!("14 hand-computed values, bleu anchor {anchor:.9}")
        } else {
            failures.join("; ")
        },
    )
}

fn criterion_9(data: &Data) -> Verdict {
    let provider = toy_config().provider.unwrap().build().unwrap();
    let references: Vec<String> = data
        .full
        .utterances()
        .iter()
        .map(|u| u.translation.clone())
        .collect();
    let report =
        score_hypotheses(&data.full, references, &provider, &EvalOptions::default()).unwrap();
    let p = report.purity.unwrap();
    verdict(
        p >= PURITY_FLOOR && report.wer == 0.0 && report.bleu4 == 1.0,
        format!(
            "oracle model on {} utterances: purity {p:.4}, nmi {:.4}",
            data.full.len(),
            report.nmi.unwrap()
        ),
    )
}

fn criterion_10(data: &Data, first: &Path, second: &Path) -> Verdict {
    toy_run(data, second, 1.0);
    let files = [
        "ckpt_step0",
        "ckpt_step500",
        "train_log.csv",
        "valid_log.csv",
        "drift.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(first.join(f)).unwrap() != fs::read(second.join(f)).unwrap())
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical", files.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = toy_config();
    let data = load_data(&cfg.corpus).unwrap();
    assert_eq!(
        data.full,
        generate_toy_corpus(cfg.corpus.toy.as_ref().unwrap()).unwrap()
    );

    let (base, t0) = toy_run(&data, &root.join("lambda0"), 0.0);
    let (reg, t1) = toy_run(&data, &root.join("lambda1"), 1.0);
    fs::create_dir_all(root.join("drift")).unwrap();

    let results = [
        ("CTC oracle equivalence", criterion_1()),
        ("gradient checks", criterion_2()),
        ("gradient routing", criterion_3(&data, &reg)),
        ("inference-graph equivalence", criterion_4(&data, &reg)),
        ("drift correctness", criterion_5(&root.join("drift"))),
        ("regularization activity", criterion_6(&base, t0, &reg, t1)),
        ("sweep report shape", criterion_7(&root.join("sweep"))),
        ("metric oracles", criterion_8()),
        ("clustering sanity", criterion_9(&data)),
        (
            "determinism",
            criterion_10(&data, &root.join("lambda1"), &root.join("lambda1_repeat")),
        ),
    ];
    let mut failed = Vec::new();
    for (i, (name, v)) in results.iter().enumerate() {
        println!(
            "criterion {:>2} {:<28} {}  {}",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
