use menet::metrics::{
    adaptive_threshold, evaluate_map, f_beta, f_measure, mae, mean_curve, pr_curve, quantize_8bit,
    BETA2,
};
use menet::Rng;
use proptest::prelude::*;

/// Precision and recall by counting, with the crate's empty-set conventions.
fn brute_pr(s: &[f64], g: &[u8], t: f64) -> (f64, f64) {
    let pred: Vec<bool> = s.iter().map(|&v| v > t).collect();
    let tp = (0..s.len()).filter(|&i| pred[i] && g[i] == 1).count() as f64;
    let np = pred.iter().filter(|&&p| p).count() as f64;
    let ng = g.iter().filter(|&&v| v == 1).count() as f64;
    let p = if np == 0.0 { 1.0 } else { tp / np };
    let r = if ng == 0.0 { 1.0 } else { tp / ng };
    (p, r)
}

fn brute_f(p: f64, r: f64) -> f64 {
    if p == 0.0 && r == 0.0 {
        0.0
    } else {
        1.3 * p * r / (0.3 * p + r)
    }
}

fn random_pair(rng: &mut Rng) -> (Vec<f64>, Vec<u8>) {
    // mix of continuous values and exact grid values to hit threshold ties
    let s = (0..64)
        .map(|_| {
            if rng.bernoulli(0.3) {
                rng.below(5) as f64 / 4.0
            } else {
                rng.uniform()
            }
        })
        .collect();
    let density = rng.uniform();
    let g = (0..64).map(|_| rng.bernoulli(density) as u8).collect();
    (s, g)
}

#[test]
fn thousand_random_maps_match_brute_force() {
    assert_eq!(BETA2, 0.3);
    let mut rng = Rng::new(21, 0);
    for _ in 0..1000 {
        let (s, g) = random_pair(&mut rng);
        let t = 2.0 * s.iter().sum::<f64>() / 64.0;
        assert!((adaptive_threshold(&s) - t).abs() <= 1e-9);

        let (p, r) = brute_pr(&s, &g, t);
        let lib = evaluate_map(&s, &g).unwrap();
        assert!((lib.precision - p).abs() <= 1e-9);
        assert!((lib.recall - r).abs() <= 1e-9);
        assert!((lib.f_beta - brute_f(p, r)).abs() <= 1e-9);

        let m: f64 = s
            .iter()
            .zip(&g)
            .map(|(&v, &gt)| (v - gt as f64).abs())
            .sum::<f64>()
            / 64.0;
        assert!((mae(&s, &g).unwrap() - m).abs() <= 1e-9);

        let q = quantize_8bit(&s);
        let curve = pr_curve(&q, &g).unwrap();
        let qf: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        for th in 0..256 {
            let (bp, br) = brute_pr(&qf, &g, th as f64);
            let (tt, cp, cr) = curve.points[th];
            assert_eq!(tt as usize, th);
            assert!(
                (cp - bp).abs() <= 1e-9 && (cr - br).abs() <= 1e-9,
                "threshold {th}"
            );
        }
    }
}

#[test]
fn f_equals_precision_when_recall_does() {
    for k in 0..=100 {
        let p = k as f64 / 100.0;
        assert_eq!(f_beta(p, p), p);
    }
}

#[test]
fn perfect_and_inverted_maps() {
    let g: Vec<u8> = (0..64).map(|i| (i % 5 == 0) as u8).collect();
    let s: Vec<f64> = g.iter().map(|&v| v as f64).collect();
    let r = evaluate_map(&s, &g).unwrap();
    assert_eq!((r.f_beta, r.mae), (1.0, 0.0));
    let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
    let r = evaluate_map(&inv, &g).unwrap();
    assert_eq!(r.f_beta, 0.0);
    assert_eq!(r.mae, 1.0);
}

#[test]
fn empty_prediction_and_empty_truth_conventions() {
    let g = vec![0u8; 16];
    let r = f_measure(&[0.2; 16], &g, 0.5).unwrap();
    assert_eq!((r.precision, r.recall), (1.0, 1.0));
    let g = vec![1u8; 16];
    let r = f_measure(&[0.2; 16], &g, 0.5).unwrap();
    assert_eq!((r.precision, r.recall), (1.0, 0.0));
    assert!(f_measure(&[0.2; 3], &g, 0.5).is_err());
    assert!(mae(&[0.2; 3], &g).is_err());
}

#[test]
fn mean_curve_averages_pointwise() {
    let mut rng = Rng::new(22, 0);
    let curves: Vec<_> = (0..3)
        .map(|_| {
            let (s, g) = random_pair(&mut rng);
            pr_curve(&quantize_8bit(&s), &g).unwrap()
        })
        .collect();
    let m = mean_curve(&curves).unwrap();
    for t in [0, 64, 200, 255] {
        let p = curves.iter().map(|c| c.points[t].1).sum::<f64>() / 3.0;
        assert!((m.points[t].1 - p).abs() < 1e-15);
    }
    assert!(mean_curve(&[]).is_err());
}

proptest! {
    #[test]
    fn scores_stay_in_unit_range(
        s in proptest::collection::vec(0.0f64..=1.0, 64),
        g in proptest::collection::vec(0u8..2, 64),
    ) {
        let r = evaluate_map(&s, &g).unwrap();
        for v in [r.precision, r.recall, r.f_beta, r.mae] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.f_beta <= r.precision.max(r.recall) + 1e-12);
        prop_assert!(r.f_beta >= r.precision.min(r.recall) - 1e-12 || r.f_beta == 0.0);
    }

    #[test]
    fn recall_falls_as_threshold_rises(
        s in proptest::collection::vec(0.0f64..=1.0, 64),
        g in proptest::collection::vec(0u8..2, 64),
    ) {
        let c = pr_curve(&quantize_8bit(&s), &g).unwrap();
        prop_assert!(c.points.windows(2).all(|w| w[1].2 <= w[0].2));
    }
}
