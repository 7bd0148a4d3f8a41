//! k-means++ seeded Lloyd iterations with restarts. A converged Lloyd run
//! is polished with Hartigan single-point transfers and Lloyd resumes if
//! any point moved.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{parse_matrix_bytes, write_matrix_file};
use crate::matrix::{squared_distance, Matrix};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 50,
            seed: 0,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `k × d`.
    pub centroids: Matrix,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    pub restarts: usize,
    /// Inertia after every assignment step of the winning run.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// Index of the nearest centroid, lowest index on ties.
#[inline]
fn nearest(point: &[f64], centroids: &Matrix) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

/// Assigns every row of `x` to its nearest centroid and returns the
/// per-point squared distances alongside.
fn assign(x: &Matrix, centroids: &Matrix) -> (Vec<u32>, Vec<f64>) {
    par::map_range(x.rows(), |i| nearest(x.row(i), centroids))
        .into_iter()
        .unzip()
}

pub fn kmeans_assign(model: &ClusterModel, x: &Matrix) -> Result<Vec<u32>> {
    assign_to(&model.centroids, x)
}

pub fn assign_to(centroids: &Matrix, x: &Matrix) -> Result<Vec<u32>> {
    if x.cols() != centroids.cols() && x.rows() > 0 {
        return Err(Error::Dimension(format!(
            "query has {} columns, centroids have {}",
            x.cols(),
            centroids.cols()
        )));
    }
    Ok(assign(x, centroids).0)
}

/// `Σᵢ ‖xᵢ − c_{aᵢ}‖²`, summed in row order.
pub fn inertia(x: &Matrix, centroids: &Matrix, assignments: &[u32]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(x.row(i), centroids.row(a as usize)))
        .sum()
}

fn kmeans_plus_plus(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = par::map_range(n, |i| squared_distance(x.row(i), x.row(chosen[0])));
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`.
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            // Every remaining point coincides with a chosen centre.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = x.row(next);
        let fresh = par::map_range(n, |i| squared_distance(x.row(i), c));
        dist.iter_mut().zip(fresh).for_each(|(d, f)| *d = d.min(f));
    }
    let rows: Vec<&[f64]> = chosen.iter().map(|&i| x.row(i)).collect();
    Matrix::from_rows(&rows).expect("uniform width")
}

/// New centroids as cluster means. An empty cluster is reseeded to the
/// point farthest from its own assigned centroid (lowest index on ties),
/// skipping points already used for reseeding.
fn update_centroids(
    x: &Matrix,
    centroids: &Matrix,
    assignments: &[u32],
    distances: &[f64],
) -> Matrix {
    let k = centroids.rows();
    let d = x.cols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a as usize].push(i);
    }
    let means = par::map_range(k, |c| {
        let idx = &members[c];
        if idx.is_empty() {
            return None;
        }
        let mut sum = vec![0.0; d];
        for &i in idx {
            sum.iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
        }
        let n = idx.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        Some(sum)
    });

    let mut out = Matrix::zeros(k, d);
    let mut used = Vec::new();
    for (c, mean) in means.into_iter().enumerate() {
        match mean {
            Some(m) => out.row_mut(c).copy_from_slice(&m),
            None => {
                let mut far = None::<(usize, f64)>;
                for (i, &dist) in distances.iter().enumerate() {
                    if used.contains(&i) {
                        continue;
                    }
                    if far.is_none_or(|(_, best)| dist > best) {
                        far = Some((i, dist));
                    }
                }
                let i = far.map_or(0, |(i, _)| i);
                used.push(i);
                out.row_mut(c).copy_from_slice(x.row(i));
            }
        }
    }
    out
}

fn checked_step(current: f64, updated: f64, iteration: usize) -> f64 {
    debug_assert!(
        updated <= current * (1.0 + 1e-12) + f64::MIN_POSITIVE,
        "inertia rose from {current} to {updated} at iteration {iteration}"
    );
    updated
}

/// Hartigan single-point transfers on a converged partition: moves a point
/// whenever the transfer lowers the partition's inertia, re-running passes
/// until none moves. Returns whether anything moved.
fn hartigan_moves(x: &Matrix, k: usize, assignments: &mut [u32], max_passes: usize) -> bool {
    let d = x.cols();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k * d];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a as usize] += 1;
        sums[a as usize * d..][..d].iter_mut().zip(x.row(i)).for_each(|(s, v)| *s += v);
    }
    let cost = |sums: &[f64], counts: &[usize], c: usize, p: &[f64]| -> f64 {
        let n = counts[c] as f64;
        sums[c * d..][..d].iter().zip(p).map(|(s, v)| (s / n - v).powi(2)).sum()
    };

    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..x.rows() {
            let a = assignments[i] as usize;
            if counts[a] < 2 {
                continue;
            }
            let p = x.row(i);
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * cost(&sums, &counts, a, p);
            let mut best = None::<(usize, f64)>;
            for c in (0..k).filter(|&c| c != a) {
                let add = if counts[c] == 0 {
                    0.0
                } else {
                    let nc = counts[c] as f64;
                    nc / (nc + 1.0) * cost(&sums, &counts, c, p)
                };
                if add < remove * (1.0 - 1e-12) && best.is_none_or(|(_, b)| add < b) {
                    best = Some((c, add));
                }
            }
            if let Some((c, _)) = best {
                counts[a] -= 1;
                counts[c] += 1;
                for (j, v) in p.iter().enumerate() {
                    sums[a * d + j] -= v;
                    sums[c * d + j] += v;
                }
                assignments[i] = c as u32;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    moved_any
}

struct LloydRun {
    centroids: Matrix,
    assignments: Vec<u32>,
    inertia: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn lloyd(x: &Matrix, config: &KMeansConfig, seed: u64) -> LloydRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(x, config.k, &mut rng);
    let (mut assignments, mut distances) = assign(x, &centroids);
    let mut current: f64 = distances.iter().sum();
    let mut trace = vec![current];
    let mut iterations = 0;

    loop {
        let mut converged = false;
        while iterations < config.max_iter {
            let next = update_centroids(x, &centroids, &assignments, &distances);
            let shift = centroids
                .iter_rows()
                .zip(next.iter_rows())
                .map(|(a, b)| squared_distance(a, b).sqrt())
                .fold(0.0, f64::max);
            centroids = next;
            (assignments, distances) = assign(x, &centroids);
            current = checked_step(current, distances.iter().sum(), iterations);
            trace.push(current);
            iterations += 1;
            if shift < config.tol {
                converged = true;
                break;
            }
        }
        if !converged || !hartigan_moves(x, config.k, &mut assignments, config.max_iter) {
            break;
        }
        centroids = update_centroids(x, &centroids, &assignments, &distances);
        (assignments, distances) = assign(x, &centroids);
        current = checked_step(current, distances.iter().sum(), iterations);
        trace.push(current);
    }
    LloydRun {
        centroids,
        assignments,
        inertia: current,
        iterations,
        trace,
    }
}

/// Best-inertia model over `config.restarts` runs; run `r` is seeded with
/// `config.seed + r`. Ties go to the earliest run.
pub fn kmeans_fit(x: &Matrix, config: &KMeansConfig) -> Result<ClusterModel> {
    let n = x.rows();
    if config.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if config.k > n {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds the number of points ({n})",
            config.k
        )));
    }
    if config.restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be at least 1".into()));
    }
    if config.tol.is_nan() || config.tol < 0.0 {
        return Err(Error::InvalidConfig(format!("tol must be >= 0, got {}", config.tol)));
    }
    if let Some((row, col)) = x.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }

    let runs = par::map_range(config.restarts, |r| {
        lloyd(x, config, config.seed.wrapping_add(r as u64))
    });
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("restarts >= 1");
    Ok(ClusterModel {
        k: config.k,
        centroids: best.centroids,
        assignments: best.assignments,
        inertia: best.inertia,
        iterations_run: best.iterations,
        seed: config.seed,
        restarts: config.restarts,
        inertia_trace: best.trace,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    k: usize,
    d: usize,
    inertia: f64,
    seed: u64,
    restarts: usize,
    iterations_run: usize,
    n: usize,
    dim: usize,
    dtype: String,
    order: String,
}

/// Writes the centroids in the binary matrix format with the model fields
/// in the header line.
pub fn save_model(path: impl AsRef<Path>, model: &ClusterModel) -> Result<()> {
    let header = ModelHeader {
        k: model.k,
        d: model.dim(),
        inertia: model.inertia,
        seed: model.seed,
        restarts: model.restarts,
        iterations_run: model.iterations_run,
        n: model.k,
        dim: model.dim(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    write_matrix_file(path.as_ref(), &header, &model.centroids)
}

/// Reads a model file. Assignments are not stored there; the result carries
/// an empty assignment list and trace.
pub fn load_model(path: impl AsRef<Path>) -> Result<ClusterModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (raw, centroids) = parse_matrix_bytes(path, &bytes)?;
    let h: ModelHeader = serde_json::from_value(raw)
        .map_err(|e| Error::format(path, format!("bad model header: {e}")))?;
    Ok(ClusterModel {
        k: h.k,
        centroids,
        assignments: Vec::new(),
        inertia: h.inertia,
        iterations_run: h.iterations_run,
        seed: h.seed,
        restarts: h.restarts,
        inertia_trace: Vec::new(),
    })
}
