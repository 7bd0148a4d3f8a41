//! Principal component analysis via SVD of the centered data.
//!
//! Components are the top right-singular vectors of the row-centered input,
//! ordered by explained variance `σ²/(N-1)`. Each component's sign is fixed
//! so that its largest-magnitude entry is positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::par;
use crate::svd;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k × d`, orthonormal rows.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn fitted_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.components.rows()
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        pca_transform(self, x)
    }
}

/// Fits `target_dim` components. Requires `target_dim <= min(N-1, d)`.
pub fn fit_pca(x: &Matrix, target_dim: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Dimension(format!("PCA needs at least 2 rows, got {n}")));
    }
    let bound = (n - 1).min(d);
    if target_dim == 0 || target_dim > bound {
        return Err(Error::Dimension(format!(
            "target dimension {target_dim} must be in 1..={bound} (min(N-1, d) for N={n}, d={d})"
        )));
    }
    fit(x, target_dim)
}

/// Like [`fit_pca`], but allows `target_dim` up to `d`. When the data has
/// fewer than `target_dim` informative directions (`N-1 < target_dim`), the
/// fitted components are extended with a deterministic orthonormal
/// completion that carries zero variance.
pub fn fit_pca_completed(x: &Matrix, target_dim: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Dimension(format!("PCA needs at least 2 rows, got {n}")));
    }
    if target_dim == 0 || target_dim > d {
        return Err(Error::Dimension(format!(
            "target dimension {target_dim} must be in 1..={d}"
        )));
    }
    let fitted = target_dim.min(n - 1);
    let mut model = fit(x, fitted)?;
    if fitted < target_dim {
        complete_basis(&mut model, target_dim);
    }
    Ok(model)
}

fn fit(x: &Matrix, k: usize) -> Result<PcaModel> {
    let (n, d) = x.shape();
    if let Some((row, col)) = x.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    let mean = x.column_means();
    let mut centered = x.clone();
    par::for_each_row_mut(centered.as_mut_slice(), d, |_, row| {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    });

    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for (sigma, v) in svd::right_singular(&centered) {
        if components.len() == k {
            break;
        }
        let Some(mut v) = v else { break };
        fix_sign(&mut v);
        components.push(v);
        explained_variance.push(sigma * sigma / (n - 1) as f64);
    }
    let mut model = PcaModel {
        mean,
        components: if components.is_empty() {
            Matrix::zeros(0, d)
        } else {
            Matrix::from_rows(&components)?
        },
        explained_variance,
    };
    // Rank-deficient data: the remaining directions carry no variance.
    if model.target_dim() < k {
        complete_basis(&mut model, k);
    }
    Ok(model)
}
/// Flips `v` so its largest-magnitude entry (first one on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Extends the component rows to `k` with Gram-Schmidt over the standard
/// basis vectors, in index order.
fn complete_basis(model: &mut PcaModel, k: usize) {
    let d = model.fitted_dim();
    let mut rows: Vec<Vec<f64>> = model.components.iter_rows().map(<[f64]>::to_vec).collect();
    let mut axis = 0;
    while rows.len() < k && axis < d {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        axis += 1;
        // Two passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        fix_sign(&mut v);
        rows.push(v);
        model.explained_variance.push(0.0);
    }
    model.components = Matrix::from_rows(&rows).expect("uniform width");
}

/// `(X - mean) · componentsᵀ`.
pub fn pca_transform(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    let d = model.fitted_dim();
    if x.cols() != d {
        return Err(Error::Dimension(format!(
            "input has {} columns but the model was fitted on {d}",
            x.cols()
        )));
    }
    let k = model.target_dim();
    let mut out = Matrix::zeros(x.rows(), k);
    par::for_each_row_mut(out.as_mut_slice(), k, |i, out_row| {
        let centered: Vec<f64> = x.row(i).iter().zip(&model.mean).map(|(a, m)| a - m).collect();
        for (c, o) in out_row.iter_mut().enumerate() {
            *o = dot(&centered, model.components.row(c));
        }
    });
    Ok(out)
}
