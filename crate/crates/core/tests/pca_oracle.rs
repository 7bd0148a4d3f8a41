mod common;

use fcluster_core::pca::{fit_pca, fit_pca_completed};
use fcluster_core::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect()
}

/// `‖X_c − X_c CᵀC‖²` computed directly.
fn residual(rows: &[Vec<f64>], components: &Matrix) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut total = 0.0;
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let mut proj = vec![0.0; d];
        for comp in components.iter_rows() {
            let s: f64 = c.iter().zip(comp).map(|(a, b)| a * b).sum();
            proj.iter_mut().zip(comp).for_each(|(p, b)| *p += s * b);
        }
        total += c.iter().zip(&proj).map(|(a, p)| (a - p).powi(2)).sum::<f64>();
    }
    total
}

fn assert_orthonormal(c: &Matrix, tol: f64) {
    for a in 0..c.rows() {
        for b in 0..c.rows() {
            let g: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| x * y).sum();
            let e = if a == b { 1.0 } else { 0.0 };
            assert!((g - e).abs() < tol, "gram[{a}][{b}] = {g}");
        }
    }
}

#[test]
fn residual_matches_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(3..=20);
        let d = rng.random_range(1..=5);
        let rows = random_rows(&mut rng, n, d);
        let x = Matrix::from_rows(&rows).unwrap();
        let k = rng.random_range(1..=(n - 1).min(d));
        let model = fit_pca(&x, k).unwrap();
        assert_orthonormal(&model.components, 1e-8);
        let got = residual(&rows, &model.components);
        let best = common::optimal_projection_residual(&rows, k);
        assert!((got - best).abs() < 1e-8 * best.max(1.0), "trial {trial}: {got} vs {best}");

        // Explained variances are the top scatter eigenvalues / (N-1).
        let (mut eig, _) = common::jacobi_eigen(&common::centered_scatter(&rows));
        eig.sort_by(|a, b| b.total_cmp(a));
        for (v, e) in model.explained_variance.iter().zip(&eig) {
            assert!((v - e / (n - 1) as f64).abs() < 1e-8 * e.max(1.0));
        }
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn wide_input_reduces_to_requested_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::from_rows(&random_rows(&mut rng, 100, 2048)).unwrap();
    let model = fit_pca_completed(&x, 256).unwrap();
    let z = model.transform(&x).unwrap();
    assert_eq!(z.shape(), (100, 256));
    assert_orthonormal(&model.components, 1e-8);
    assert!(model.explained_variance[99..].iter().all(|v| v.abs() < 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn row_order_does_not_change_the_model(seed in any::<u64>(), n in 4usize..15, d in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, n, d);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.rotate_left(n / 3);
        let k = (n - 1).min(d);
        let a = fit_pca(&Matrix::from_rows(&rows).unwrap(), k).unwrap();
        let b = fit_pca(&Matrix::from_rows(&shuffled).unwrap(), k).unwrap();
        for (x, y) in a.mean.iter().zip(&b.mean) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.explained_variance.iter().zip(&b.explained_variance) {
            prop_assert!((x - y).abs() < 1e-9 * x.max(1.0));
        }
        // Compare directions with well-separated variances only; degenerate
        // eigenvalues leave the basis free.
        let ev = &a.explained_variance;
        for c in 0..k {
            let gap_prev = if c == 0 { f64::INFINITY } else { ev[c - 1] - ev[c] };
            let gap_next = if c + 1 == k { f64::INFINITY } else { ev[c] - ev[c + 1] };
            if gap_prev.min(gap_next) < 1e-3 * ev[0].max(1.0) {
                continue;
            }
            for (x, y) in a.components.row(c).iter().zip(b.components.row(c)) {
                prop_assert!((x - y).abs() < 1e-8, "component {c}: {x} vs {y}");
            }
        }
    }
}
