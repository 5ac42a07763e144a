mod common;

use common::rng;
use lau::corpus::{Corpus, Utterance};
use lau::embedder::Provider;
use lau::evalmetrics::{
    cosine_objective, kmeans_cluster, nmi, purity, score_hypotheses, spherical_kmeans, EvalOptions,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_points(r: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

#[test]
fn kmeans_beats_random_partitions() {
    let mut r = rng(13);
    for trial in 0..5 {
        let points = random_points(&mut r, 30, 5);
        let k = 3;
        let result = spherical_kmeans(&points, k, trial, 10).unwrap();
        for _ in 0..50 {
            let mut labels: Vec<usize> = (0..points.len()).map(|i| i % k).collect();
            labels.shuffle(&mut r);
            let random = cosine_objective(&points, &labels, k).unwrap();
            assert!(
                result.objective <= random + 1e-12,
                "{} > {random}",
                result.objective
            );
        }
    }
}

#[test]
fn antipodal_bundles_split_exactly() {
    let mut r = rng(21);
    let axis: Vec<f64> = vec![1.0, 0.5, -0.25, 2.0];
    let mut points = Vec::new();
    let mut side = Vec::new();
    for i in 0..10 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        points.push(
            axis.iter()
                .map(|a| sign * a + r.gen_range(-0.02..0.02))
                .collect::<Vec<f64>>(),
        );
        side.push(usize::from(sign < 0.0));
    }
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
            * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for i in 0..points.len() {
        for j in 0..points.len() {
            let c = cos(&points[i], &points[j]);
            if side[i] == side[j] {
                assert!(c > 0.99);
            } else {
                assert!(c < -0.9);
            }
        }
    }
    // the optimal 2-partition by brute force over all labelings
    let n = points.len();
    let best = (0..(1u32 << n))
        .map(|mask| {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            (cosine_objective(&points, &labels, 2).unwrap(), labels)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap()
        .1;
    let found = kmeans_cluster(&points, 2, 0).unwrap();
    let same_partition =
        |a: &[usize], b: &[usize]| (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
    assert!(same_partition(&found, &best));
    assert!(same_partition(&found, &side));
    assert_eq!(kmeans_cluster(&points, 2, 0).unwrap(), found);
}

fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<String>, Vec<usize>)> {
    (2usize..20).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..4, n),
            proptest::collection::vec(
                prop_oneof![Just("x"), Just("y"), Just("z")].prop_map(String::from),
                n,
            ),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #[test]
    fn cluster_metrics_ignore_point_order_and_cluster_names((a, l, perm) in labels_strategy()) {
        let p = purity(&a, &l).unwrap();
        let m = nmi(&a, &l).unwrap();
        let a2: Vec<usize> = perm.iter().map(|&i| a[i]).collect();
        let l2: Vec<String> = perm.iter().map(|&i| l[i].clone()).collect();
        prop_assert!((purity(&a2, &l2).unwrap() - p).abs() < 1e-12);
        prop_assert!((nmi(&a2, &l2).unwrap() - m).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|x| 7 - x).collect();
        prop_assert!((nmi(&renamed, &l).unwrap() - m).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}

fn labeled_corpus() -> Corpus {
    let texts = [
        ("river boat fish", "water"),
        ("boat river net", "water"),
        ("fish net river", "water"),
        ("millet harvest field", "farm"),
        ("field harvest hoe", "farm"),
        ("hoe millet field", "farm"),
    ];
    let utts = texts
        .iter()
        .enumerate()
        .map(|(i, (t, topic))| {
            Utterance::new(
                format!("u{i}"),
                Array2::zeros((2, 2)),
                None,
                *t,
                Some(topic.to_string()),
            )
            .unwrap()
        })
        .collect();
    Corpus::new(utts).unwrap()
}

#[test]
fn oracle_and_empty_outputs() {
    let corpus = labeled_corpus();
    let provider = Provider::hash(64, 0).unwrap();
    let refs: Vec<String> = corpus
        .utterances()
        .iter()
        .map(|u| u.translation.clone())
        .collect();
    let oracle = score_hypotheses(&corpus, refs, &provider, &EvalOptions::default()).unwrap();
    assert_eq!((oracle.wer, oracle.cer, oracle.bleu4), (0.0, 0.0, 1.0));
    assert_eq!(oracle.n_clusters, Some(2));
    assert!(!oracle.clustering_omitted);

    let empty = score_hypotheses(
        &corpus,
        vec![String::new(); 6],
        &provider,
        &EvalOptions::default(),
    )
    .unwrap();
    assert_eq!(empty.cer, 1.0);
    assert_eq!(empty.bleu4, 0.0);
}

#[test]
fn unlabeled_test_sets_skip_clustering() {
    let mut utts = labeled_corpus().utterances().to_vec();
    for u in &mut utts {
        u.topic = None;
    }
    let corpus = Corpus::new(utts).unwrap();
    let provider = Provider::hash(16, 0).unwrap();
    let report = score_hypotheses(
        &corpus,
        vec!["river".into(); 6],
        &provider,
        &EvalOptions::default(),
    )
    .unwrap();
    assert!(report.clustering_omitted);
    assert_eq!(report.purity, None);
    assert_eq!(report.nmi, None);
    assert!(report.wer > 0.0);
}
