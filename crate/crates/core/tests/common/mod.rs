//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code paths it checks.

#![allow(dead_code)]

use chrono::{DateTime, Duration, FixedOffset, NaiveDate};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues (unsorted) and eigenvectors as columns of `vecs`.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Scatter matrix `X_cᵀ X_c` of the row-centered data.
pub fn centered_scatter(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut s = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                s[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]);
            }
        }
    }
    s
}

/// Smallest achievable `‖X_c − X_c PᵀP‖²` over rank-`k` orthogonal
/// projections: the sum of the `d − k` smallest scatter eigenvalues.
pub fn optimal_projection_residual(rows: &[Vec<f64>], k: usize) -> f64 {
    let (mut values, _) = jacobi_eigen(&centered_scatter(rows));
    values.sort_by(f64::total_cmp);
    values[..values.len() - k].iter().map(|v| v.max(0.0)).sum()
}

/// Minimum k-means objective over every assignment of points to `k`
/// non-empty clusters.
pub fn exhaustive_kmeans(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; d]; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += p[j];
            }
        }
        if counts.iter().all(|&c| c > 0) {
            let cost: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    (0..d)
                        .map(|j| {
                            let c = sums[l][j] / counts[l] as f64;
                            (p[j] - c) * (p[j] - c)
                        })
                        .sum::<f64>()
                })
                .sum();
            best = best.min(cost);
        }
        // Next label vector in base-k counting.
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Weather sample used by the ADD oracle.
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub at: DateTime<FixedOffset>,
    pub values: [f64; 3],
}

/// Two-level ADD: for every day in `[start, photo]` average the samples whose
/// instant lies in `[local midnight, next local midnight)` of `offset`, then
/// average those daily means. Returns `None` if a day has no samples.
pub fn add_oracle(
    samples: &[Sample],
    offset: FixedOffset,
    start: NaiveDate,
    photo: NaiveDate,
) -> Option<([f64; 3], usize)> {
    let mut daily = Vec::new();
    let mut day = start;
    while day <= photo {
        let lo = day
            .and_hms_opt(0, 0, 0)?
            .and_local_timezone(offset)
            .single()?;
        let hi = lo + Duration::days(1);
        let inside: Vec<&Sample> = samples.iter().filter(|s| s.at >= lo && s.at < hi).collect();
        if inside.is_empty() {
            return None;
        }
        let mut mean = [0.0; 3];
        for f in 0..3 {
            mean[f] = inside.iter().map(|s| s.values[f]).sum::<f64>() / inside.len() as f64;
        }
        daily.push(mean);
        day += Duration::days(1);
    }
    let n = daily.len();
    let mut out = [0.0; 3];
    for f in 0..3 {
        out[f] = daily.iter().map(|m| m[f]).sum::<f64>() / n as f64;
    }
    Some((out, n))
}

/// Fraction of points whose cluster's majority planted label matches their
/// own planted label.
pub fn purity(assignments: &[u32], planted: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<u32, HashMap<usize, usize>> = HashMap::new();
    for (&a, &p) in assignments.iter().zip(planted) {
        *counts.entry(a).or_default().entry(p).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / assignments.len() as f64
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Shannon entropy of a distribution, in bits.
pub fn entropy_bits(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}
