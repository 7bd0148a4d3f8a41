//! Singular values and right singular vectors of a dense matrix.
//!
//! The input (or its transpose, when wide) is first reduced to a square
//! triangular factor with Householder reflections. The triangle is then
//! diagonalized with one-sided Jacobi rotations in a fixed round-robin order, so the result does not
//! depend on whether the rotations of a round run in parallel.

use crate::matrix::{dot, Matrix};
use crate::par;

const MAX_SWEEPS: usize = 60;

/// Singular values below this fraction of the largest have no reliable
/// direction on the wide path.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Default)]
struct Column {
    a: Vec<f64>,
    /// Accumulated rotations.
    v: Vec<f64>,
}

/// Returns `(σ, v)` pairs sorted by descending `σ` (index order on ties).
/// `v` is `None` when the direction for a (numerically) zero singular value
/// could not be recovered.
pub(crate) fn right_singular(a: &Matrix) -> Vec<(f64, Option<Vec<f64>>)> {
    let (n, d) = a.shape();
    // Reduce to a square triangle: of `a` when tall, of `aᵀ` when wide.
    let source: Vec<Vec<f64>> = if n >= d {
        (0..d).map(|j| a.column(j)).collect()
    } else {
        a.iter_rows().map(<[f64]>::to_vec).collect()
    };
    let m = source.len();
    let mut cols: Vec<Column> = householder_r(source)
        .into_iter()
        .enumerate()
        .map(|(j, a)| {
            let mut v = vec![0.0; m];
            v[j] = 1.0;
            Column { a, v }
        })
        .collect();
    jacobi(&mut cols);
    let sigma: Vec<f64> = cols.iter().map(|c| dot(&c.a, &c.a).sqrt()).collect();

    let mut out: Vec<(f64, Option<Vec<f64>>)> = if n >= d {
        cols.into_iter().zip(sigma).map(|(c, s)| (s, Some(c.v))).collect()
    } else {
        // aᵀ = QR and RW = UΣ give a = W Σ (QU)ᵀ, so the right vectors
        // of `a` are aᵀ w_j / σ_j.
        let top = sigma.iter().copied().fold(0.0, f64::max);
        let vectors = par::map_range(m, |j| {
            let s = sigma[j];
            (s > 0.0 && s > top * RANK_TOLERANCE).then(|| {
                let mut v = vec![0.0; d];
                for (row, w) in a.iter_rows().zip(&cols[j].v) {
                    v.iter_mut().zip(row).for_each(|(x, r)| *x += w * r);
                }
                v.iter_mut().for_each(|x| *x /= s);
                v
            })
        });
        sigma.into_iter().zip(vectors).collect()
    };

    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&i, &j| out[j].0.total_cmp(&out[i].0).then(i.cmp(&j)));
    let mut sorted: Vec<(f64, Option<Vec<f64>>)> =
        order.iter().map(|&i| std::mem::take(&mut out[i])).collect();

    // Directions recovered through aᵀ lose orthogonality in
    // proportion to σ_max/σ; two Gram-Schmidt passes restore it.
    if n < d {
        let mut kept: Vec<Vec<f64>> = Vec::new();
        for (_, slot) in sorted.iter_mut() {
            let Some(v) = slot.as_mut() else { continue };
            for _ in 0..2 {
                for k in &kept {
                    let p = dot(v, k);
                    v.iter_mut().zip(k).for_each(|(x, y)| *x -= p * y);
                }
            }
            let norm = dot(v, v).sqrt();
            if norm < 0.5 {
                *slot = None;
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            kept.push(v.clone());
        }
    }
    sorted
}

/// Columns of the square triangular factor of the matrix whose columns are
/// `cols` (requires at least as many rows as columns).
fn householder_r(mut cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d = cols.len();
    for j in 0..d {
        let (head, tail) = cols.split_at_mut(j + 1);
        let x = &mut head[j][j..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        x[0] = alpha;
        x[1..].fill(0.0);
        if vv == 0.0 {
            continue;
        }
        par::for_each_mut(tail, |_, col| {
            let s = 2.0 * dot(&v, &col[j..]) / vv;
            col[j..].iter_mut().zip(&v).for_each(|(c, w)| *c -= s * w);
        });
    }
    for c in &mut cols {
        c.truncate(d);
    }
    cols
}

/// Orthogonalizes the `a` columns in place, applying each rotation to `v`.
fn jacobi(cols: &mut [Column]) {
    let m = cols.len();
    if m < 2 {
        return;
    }
    let len = cols[0].a.len();
    let tol = f64::EPSILON * (len.max(1) as f64).sqrt();
    let slots = m + m % 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        let mut ring: Vec<usize> = (0..slots).collect();
        for _ in 0..slots - 1 {
            let pairs: Vec<(usize, usize)> = (0..slots / 2)
                .map(|i| (ring[i], ring[slots - 1 - i]))
                .filter(|&(p, q)| p < m && q < m)
                .map(|(p, q)| (p.min(q), p.max(q)))
                .collect();
            let mut work: Vec<(Column, Column, bool)> = pairs
                .iter()
                .map(|&(p, q)| (std::mem::take(&mut cols[p]), std::mem::take(&mut cols[q]), false))
                .collect();
            par::for_each_mut(&mut work, |_, (p, q, hit)| *hit = rotate(p, q, tol));
            for ((p, q), (cp, cq, hit)) in pairs.into_iter().zip(work) {
                cols[p] = cp;
                cols[q] = cq;
                rotated |= hit;
            }
            ring[1..].rotate_right(1);
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(p: &mut Column, q: &mut Column, tol: f64) -> bool {
    let alpha = dot(&p.a, &p.a);
    let beta = dot(&q.a, &q.a);
    let gamma = dot(&p.a, &q.a);
    if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
        return false;
    }
    let zeta = (beta - alpha) / (2.0 * gamma);
    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    for (x, y) in p.a.iter_mut().zip(q.a.iter_mut()).chain(p.v.iter_mut().zip(q.v.iter_mut())) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(a: &Matrix) {
        let (n, d) = a.shape();
        let pairs = right_singular(a);
        assert_eq!(pairs.len(), n.min(d));
        // ‖A v‖ = σ for every recovered direction.
        for (s, v) in &pairs {
            let Some(v) = v else { continue };
            let av: f64 = a.iter_rows().map(|r| dot(r, v).powi(2)).sum::<f64>().sqrt();
            assert!((av - s).abs() < 1e-10 * s.max(1.0), "{av} vs {s}");
        }
        // Σσ² equals the Frobenius norm.
        let fro: f64 = a.as_slice().iter().map(|x| x * x).sum();
        let ss: f64 = pairs.iter().map(|(s, _)| s * s).sum();
        assert!((fro - ss).abs() < 1e-10 * fro.max(1.0));
        assert!(pairs.windows(2).all(|w| w[0].0 >= w[1].0));
    }

    #[test]
    fn tall_wide_and_square() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for (n, d) in [(9, 4), (4, 9), (6, 6), (1, 3), (3, 1), (30, 2)] {
            let a = Matrix::from_vec(n, d, (0..n * d).map(|_| next()).collect()).unwrap();
            check(&a);
        }
    }

    #[test]
    fn diagonal_values() {
        let a = Matrix::from_rows(&[[0.0, 3.0], [-5.0, 0.0], [0.0, 0.0]]).unwrap();
        let p = right_singular(&a);
        assert!((p[0].0 - 5.0).abs() < 1e-15 && (p[1].0 - 3.0).abs() < 1e-15);
        let v0 = p[0].1.as_ref().unwrap();
        assert!((v0[0].abs() - 1.0).abs() < 1e-15 && v0[1] == 0.0);
    }

    #[test]
    fn rank_deficient_wide_input() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0]]).unwrap();
        let p = right_singular(&a);
        assert!((p[0].0 - 150f64.sqrt()).abs() < 1e-12);
        assert!(p[1].0 < 1e-12 && p[1].1.is_none());
    }
}
