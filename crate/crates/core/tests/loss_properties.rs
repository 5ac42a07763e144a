use lau::losses::{
    collapse, cosine_loss, ctc_loss, ctc_loss_and_grad, ctc_loss_bruteforce, lau_loss, mse_loss,
    LossWeights,
};
use ndarray::Array2;
use proptest::prelude::*;

fn normalized(rows: usize, cols: usize, raw: &[f64]) -> Array2<f64> {
    let mut p = Array2::from_shape_fn((rows, cols), |(t, v)| raw[(t * cols + v) % raw.len()]);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    p
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..=6, 2usize..=4)
        .prop_flat_map(|(t, v)| {
            (
                Just(t),
                Just(v),
                proptest::collection::vec(0.01f64..1.0, t * v),
                proptest::collection::vec(1..v, 0..=3),
            )
        })
        .prop_map(|(t, v, raw, target)| (normalized(t, v, &raw), target))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dp_matches_enumeration((probs, target) in instance()) {
        let dp = ctc_loss(probs.mapv(f64::ln).view(), &target, 0).unwrap();
        let brute = ctc_loss_bruteforce(probs.view(), &target, 0).unwrap();
        if brute.is_infinite() {
            prop_assert!(dp.infeasible);
        } else {
            prop_assert!((dp.value - brute).abs() <= 1e-6, "dp {} brute {}", dp.value, brute);
        }
    }

    #[test]
    fn occupancies_are_posteriors((probs, target) in instance()) {
        let (loss, grad) = ctc_loss_and_grad(probs.mapv(f64::ln).view(), &target, 0).unwrap();
        if !loss.infeasible {
            for row in grad.rows() {
                prop_assert!((row.sum() + 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&g| (-1.0 - 1e-12..=1e-12).contains(&g)));
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        pred in proptest::collection::vec(-5.0f64..5.0, 4),
        reference in proptest::collection::vec(-5.0f64..5.0, 4),
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(pred.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(reference.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let a = cosine_loss(&pred, &reference).unwrap();
        let scaled: Vec<f64> = pred.iter().map(|x| x * scale).collect();
        let b = cosine_loss(&scaled, &reference).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&a));
    }

    #[test]
    fn mse_is_non_negative_and_symmetric(
        a in proptest::collection::vec(-5.0f64..5.0, 1..8),
    ) {
        let b: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
        let ab = mse_loss(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mse_loss(&b, &a).unwrap());
    }

    #[test]
    fn total_is_monotone_in_lambda(
        seq in 0.0f64..10.0,
        sem in 0.0f64..2.0,
        l1 in 0.0f64..10.0,
        l2 in 0.0f64..10.0,
    ) {
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        let a = lau_loss(seq, sem, &LossWeights::ctc_only(lo).unwrap()).unwrap();
        let b = lau_loss(seq, sem, &LossWeights::ctc_only(hi).unwrap()).unwrap();
        prop_assert!(a.total <= b.total);
    }

    #[test]
    fn collapse_drops_blanks_and_never_grows(path in proptest::collection::vec(0usize..4, 0..10)) {
        let out = collapse(&path, 0);
        prop_assert!(out.iter().all(|&s| s != 0));
        prop_assert!(out.len() <= path.len());
        let mut doubled: Vec<usize> = path.iter().flat_map(|&s| [s, s]).collect();
        doubled.push(0);
        prop_assert_eq!(collapse(&doubled, 0), out);
    }
}

#[test]
fn sweep_weights_match_hand_arithmetic() {
    let b = lau_loss(1.0, 0.2, &LossWeights::ctc_only(5.0).unwrap()).unwrap();
    assert_eq!(b.total, 2.0);
    let b = lau_loss(2.0, 0.5, &LossWeights::ctc_only(1.0).unwrap()).unwrap();
    assert_eq!(b.total, 2.5);
    assert_eq!(
        lau_loss(3.0, 0.9, &LossWeights::ctc_only(0.0).unwrap())
            .unwrap()
            .total,
        3.0
    );
}

#[test]
fn mse_three_dimensional_example() {
    assert_eq!(
        mse_loss(&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(),
        2.0 / 3.0
    );
}
