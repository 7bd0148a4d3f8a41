//! Exact (O(N²)) t-SNE to two dimensions.
//!
//! Row reductions are computed per point and combined sequentially in row
//! order, so results are identical with and without the `parallel` feature
//! and for any thread count.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::par;

/// Lower bound for joint affinities, keeping `ln p` finite.
pub const AFFINITY_FLOOR: f64 = 1e-12;
const MAX_BISECTION_STEPS: usize = 200;
const ENTROPY_TOLERANCE: f64 = 1e-10;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if n < 4 {
            return bad(format!("t-SNE needs at least 4 points, got {n}"));
        }
        check_perplexity(self.perplexity, n)?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if self.early_exaggeration_factor.is_nan() || self.early_exaggeration_factor < 1.0 {
            return bad(format!(
                "early exaggeration factor must be >= 1, got {}",
                self.early_exaggeration_factor
            ));
        }
        if self.iterations < self.early_exaggeration_iters {
            return bad(format!(
                "iterations ({}) must be >= early exaggeration iterations ({})",
                self.iterations, self.early_exaggeration_iters
            ));
        }
        for (name, m) in [
            ("momentum_initial", self.momentum_initial),
            ("momentum_final", self.momentum_final),
        ] {
            if !(0.0..1.0).contains(&m) {
                return bad(format!("{name} must be in [0, 1), got {m}"));
            }
        }
        Ok(())
    }
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    let limit = (n as f64 - 1.0) / 3.0;
    if !(perplexity > 0.0 && perplexity < limit) {
        return Err(Error::InvalidConfig(format!(
            "perplexity must be in (0, {limit}) for {n} points, got {perplexity}"
        )));
    }
    Ok(())
}

/// Symmetric joint affinities `p_ij`, zero diagonal, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    /// `N × 2`.
    pub y: Matrix,
    /// KL(P‖Q) for every iteration after early exaggeration ends.
    pub kl_trace: Vec<f64>,
}

/// Row `i` is the Gaussian conditional distribution `p(j|i)` whose
/// perplexity matches `perplexity`, with `p(i|i) = 0`.
///
/// Each row's precision is found by bisection on the entropy. A row whose
/// neighbours are all equidistant has the same (uniform) distribution for
/// every bandwidth and is returned as such.
pub fn conditional_affinities(x: &Matrix, perplexity: f64) -> Result<Matrix> {
    let n = x.rows();
    if n < 4 {
        return Err(Error::InvalidConfig(format!(
            "t-SNE needs at least 4 points, got {n}"
        )));
    }
    check_perplexity(perplexity, n)?;
    let target = perplexity.ln();

    let rows = par::map_range(n, |i| {
        let xi = x.row(i);
        let dist: Vec<f64> = (0..n).map(|j| squared_distance(xi, x.row(j))).collect();
        calibrate_row(i, &dist, target)
    });

    let mut out = Matrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&row?);
    }
    Ok(out)
}

/// Returns `(entropy in nats, row)` for precision `beta`. Distances are
/// shifted by the row minimum so the largest kernel value is exactly 1.
fn gaussian_row(i: usize, dist: &[f64], d_min: f64, beta: f64, row: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (j, (p, &d)) in row.iter_mut().zip(dist).enumerate() {
        *p = if j == i { 0.0 } else { (-beta * (d - d_min)).exp() };
        sum += *p;
    }
    let mut weighted = 0.0;
    for (j, p) in row.iter_mut().enumerate() {
        if j != i {
            weighted += (dist[j] - d_min) * *p;
            *p /= sum;
        }
    }
    sum.ln() + beta * weighted / sum
}

fn calibrate_row(i: usize, dist: &[f64], target: f64) -> Result<Vec<f64>> {
    let n = dist.len();
    let (mut d_min, mut d_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (j, &d) in dist.iter().enumerate() {
        if j != i {
            d_min = d_min.min(d);
            d_max = d_max.max(d);
        }
    }
    let mut row = vec![0.0; n];
    if d_max - d_min <= f64::EPSILON * d_max.abs() {
        let u = 1.0 / (n - 1) as f64;
        row.iter_mut().enumerate().for_each(|(j, p)| {
            if j != i {
                *p = u
            }
        });
        return Ok(row);
    }

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let mut beta = 1.0 / (d_max - d_min).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_BISECTION_STEPS {
        let h = gaussian_row(i, dist, d_min, beta, &mut row);
        let diff = h - target;
        if diff.abs() < ENTROPY_TOLERANCE {
            return Ok(row);
        }
        if diff > 0.0 {
            // Too flat: sharpen.
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        if !beta.is_finite() || beta <= 0.0 {
            break;
        }
    }
    Err(Error::Bisection { row: i })
}

/// `p_ij = (p(j|i) + p(i|j)) / 2N`, floored at [`AFFINITY_FLOOR`] off the
/// diagonal. If any entry was floored the matrix is renormalized to sum to
/// one.
pub fn symmetrize_affinities(conditional: &Matrix) -> AffinityMatrix {
    let n = conditional.rows();
    let denom = 2.0 * n as f64;
    let rows = par::map_range(n, |i| {
        let mut floored = false;
        let row: Vec<f64> = (0..n)
            .map(|j| {
                if i == j {
                    return 0.0;
                }
                let v = (conditional.get(i, j) + conditional.get(j, i)) / denom;
                if v < AFFINITY_FLOOR {
                    floored = true;
                    AFFINITY_FLOOR
                } else {
                    v
                }
            })
            .collect();
        (row, floored)
    });
    let any_floored = rows.iter().any(|(_, f)| *f);
    let mut p: Vec<f64> = rows.into_iter().flat_map(|(r, _)| r).collect();
    if any_floored {
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
    }
    AffinityMatrix { n, p }
}

/// Computes the joint affinity matrix for `x`.
pub fn joint_affinities(x: &Matrix, perplexity: f64) -> Result<AffinityMatrix> {
    Ok(symmetrize_affinities(&conditional_affinities(x, perplexity)?))
}

#[inline]
fn kernel(y: &Matrix, i: usize, j: usize) -> f64 {
    1.0 / (1.0 + squared_distance(y.row(i), y.row(j)))
}

/// Sum of the Student-t kernel over all ordered pairs `i != j`.
fn normalizer(y: &Matrix) -> f64 {
    let n = y.rows();
    par::map_range(n, |i| {
        (0..n).filter(|&j| j != i).map(|j| kernel(y, i, j)).sum::<f64>()
    })
    .into_iter()
    .sum()
}

/// KL(P‖Q) where `Q` is the Student-t affinity of the embedding `y`.
pub fn kl_divergence(p: &AffinityMatrix, y: &Matrix) -> f64 {
    kl_gradient(p, y, 1.0).1
}

/// Gradient of KL(P‖Q) with respect to `y` with P scaled by `exaggeration`,
/// together with the unscaled KL(P‖Q).
pub fn kl_gradient(p: &AffinityMatrix, y: &Matrix, exaggeration: f64) -> (Matrix, f64) {
    let n = y.rows();
    let dims = y.cols();
    let z = normalizer(y);
    let ln_z = z.ln();

    let rows = par::map_range(n, |i| {
        let mut g = vec![0.0; dims];
        let mut kl = 0.0;
        let yi = y.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let num = kernel(y, i, j);
            let pij = p.get(i, j);
            let coeff = (exaggeration * pij - num / z) * num;
            for (gd, (a, b)) in g.iter_mut().zip(yi.iter().zip(y.row(j))) {
                *gd += coeff * (a - b);
            }
            if pij > 0.0 {
                kl += pij * (pij.ln() - (num.ln() - ln_z));
            }
        }
        g.iter_mut().for_each(|v| *v *= 4.0);
        (g, kl)
    });

    let mut grad = Matrix::zeros(n, dims);
    let mut kl = 0.0;
    for (i, (g, k)) in rows.into_iter().enumerate() {
        grad.row_mut(i).copy_from_slice(&g);
        kl += k;
    }
    (grad, kl)
}

/// Initial embedding: i.i.d. N(0, 1e-4²) from the seeded generator, row by
/// row.
pub fn initial_embedding(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid std-dev");
    Matrix::from_vec(n, 2, (0..2 * n).map(|_| normal.sample(&mut rng)).collect())
        .expect("2 columns")
}

pub fn run_tsne(x: &Matrix, config: &TsneConfig) -> Result<Embedding2D> {
    config.validate(x.rows())?;
    let p = joint_affinities(x, config.perplexity)?;
    optimize(&p, config)
}

/// Gradient descent on KL(P‖Q) from the seeded initial embedding, with
/// momentum and per-coordinate adaptive gains.
pub fn optimize(p: &AffinityMatrix, config: &TsneConfig) -> Result<Embedding2D> {
    let n = p.n();
    let mut y = initial_embedding(n, config.seed);
    let mut velocity = Matrix::zeros(n, 2);
    let mut gains = Matrix::from_vec(n, 2, vec![1.0; 2 * n]).expect("2 columns");
    let mut kl_trace = Vec::with_capacity(config.iterations - config.early_exaggeration_iters);

    for iter in 0..config.iterations {
        let exaggerating = iter < config.early_exaggeration_iters;
        let exaggeration = if exaggerating {
            config.early_exaggeration_factor
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            config.momentum_initial
        } else {
            config.momentum_final
        };

        let (grad, kl) = kl_gradient(p, &y, exaggeration);
        if grad.find_non_finite().is_some() {
            return Err(Error::NonFiniteGradient { iteration: iter });
        }
        if !exaggerating {
            kl_trace.push(kl);
        }

        let g = grad.as_slice();
        let gains = gains.as_mut_slice();
        let vel = velocity.as_mut_slice();
        let ys = y.as_mut_slice();
        for idx in 0..ys.len() {
            gains[idx] = if (g[idx] > 0.0) != (vel[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                (gains[idx] * 0.8).max(MIN_GAIN)
            };
            vel[idx] = momentum * vel[idx] - config.learning_rate * gains[idx] * g[idx];
            ys[idx] += vel[idx];
        }
        let means = y.column_means();
        for row in y.as_mut_slice().chunks_mut(2) {
            row[0] -= means[0];
            row[1] -= means[1];
        }
        if y.find_non_finite().is_some() {
            return Err(Error::NonFiniteGradient { iteration: iter });
        }
    }
    Ok(Embedding2D { y, kl_trace })
}

/// Writes `image_id,x,y[,cluster]` rows.
pub fn write_scatter<W: Write>(
    out: W,
    embedding: &Embedding2D,
    image_ids: &[String],
    assignments: Option<&[u32]>,
) -> Result<()> {
    let n = embedding.y.rows();
    if image_ids.len() != n {
        return Err(Error::RowCountMismatch {
            expected: n,
            found: image_ids.len(),
        });
    }
    if let Some(a) = assignments {
        if a.len() != n {
            return Err(Error::RowCountMismatch {
                expected: n,
                found: a.len(),
            });
        }
    }
    let path = Path::new("<scatter>");
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e| Error::csv(path, e);
    match assignments {
        Some(_) => w.write_record(["image_id", "x", "y", "cluster"]),
        None => w.write_record(["image_id", "x", "y"]),
    }
    .map_err(csv_err)?;
    for (i, id) in image_ids.iter().enumerate() {
        let x = embedding.y.get(i, 0).to_string();
        let y = embedding.y.get(i, 1).to_string();
        match assignments {
            Some(a) => w.write_record([id.as_str(), &x, &y, &a[i].to_string()]),
            None => w.write_record([id.as_str(), &x, &y]),
        }
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_scatter(
    path: impl AsRef<Path>,
    embedding: &Embedding2D,
    image_ids: &[String],
    assignments: Option<&[u32]>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_scatter(std::io::BufWriter::new(file), embedding, image_ids, assignments)
}

/// Writes `iter,kl`, numbering iterations from the first one after early
/// exaggeration.
pub fn export_kl_trace(path: impl AsRef<Path>, embedding: &Embedding2D, first_iter: usize) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["iter", "kl"]).map_err(|e| Error::csv(path, e))?;
    for (i, kl) in embedding.kl_trace.iter().enumerate() {
        w.write_record([(first_iter + i).to_string(), kl.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
