use nbharness::metrics::{correlation_report, spearman};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

/// Textbook formula for data without ties.
fn spearman_no_ties(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = (pos + 1) as f64;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn spearman_matches_rank_difference_formula() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(20);
    for _ in 0..50 {
        // distinct values so the no-ties formula applies
        let mut x: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        let mut y: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 + rng.gen::<f64>() * 0.01).collect();
        x.shuffle(&mut rng);
        y.shuffle(&mut rng);
        let got = spearman(&x, &y).unwrap().unwrap();
        let want = spearman_no_ties(&x, &y);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn spearman_with_ties_uses_average_ranks() {
    // ranks x: 1.5 1.5 3 4; y: 1 2 3.5 3.5
    let x = [1.0, 1.0, 2.0, 3.0];
    let y = [0.1, 0.2, 0.5, 0.5];
    let rx = [1.5, 1.5, 3.0, 4.0];
    let ry = [1.0, 2.0, 3.5, 3.5];
    let mean = 2.5;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    let want = cov / (vx * vy).sqrt();
    let got = spearman(&x, &y).unwrap().unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn undefined_correlation() {
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
    assert_eq!(spearman::<f64>(&[1.0], &[2.0]).unwrap(), None);
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn report_curve_orders_by_pass_rate() {
    let rates = [0.5f32, 0.1, 0.9];
    let bleu = [0.2f32, 0.3, 0.4];
    let r = correlation_report(&rates, &bleu).unwrap();
    let order: Vec<usize> = r.curve.iter().map(|p| p.index).collect();
    assert_eq!(order, vec![1, 0, 2]);
    assert!((r.spearman.unwrap() - 0.5).abs() < 1e-6);
}
