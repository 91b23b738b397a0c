//! Generalization motifs: the direction in flattened dependency-matrix space
//! whose projection is maximally correlated with a performance vector.
//!
//! With a single target the canonical direction reduces to the ridge
//! least-squares solution `(Σ_XX + λI)⁻¹ Σ_Xp`, solved here through an SVD.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::depth::{layer_labels, matrix_csv, DependencyMatrix};
use crate::error::{Error, Result};
use crate::stats::{mean, pearson};

/// Relative ridge strength used when none is given.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ZooFeatures {
    pub task_id: String,
    /// One flattened dependency matrix per model.
    pub rows: Vec<Vec<f64>>,
    pub perf: Vec<f64>,
}

impl ZooFeatures {
    pub fn new(task_id: impl Into<String>, rows: Vec<Vec<f64>>, perf: Vec<f64>) -> Result<Self> {
        if rows.len() != perf.len() {
            return Err(Error::arg(format!("{} feature rows but {} performance values", rows.len(), perf.len())));
        }
        if rows.len() < 3 {
            return Err(Error::arg("a motif needs at least three models"));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::arg("feature rows must share a non-zero length"));
        }
        if rows.iter().flatten().chain(&perf).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite zoo feature or performance".into()));
        }
        Ok(Self {
            task_id: task_id.into(),
            rows,
            perf,
        })
    }

    pub fn from_matrices(task_id: impl Into<String>, idms: &[DependencyMatrix], perf: Vec<f64>) -> Result<Self> {
        Self::new(task_id, idms.iter().map(|m| m.entries.clone()).collect(), perf)
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifVector {
    pub direction: Vec<f64>,
    pub achieved_corr: f64,
    pub ridge_lambda: f64,
}

/// Ridge-CCA direction. `ridge_lambda = None` selects
/// `1e-6 · trace(Σ_XX) / dim`.
///
/// Constant columns get exactly zero weight. Identical columns are merged
/// into the first of them, so ties resolve toward the lower index.
pub fn cca_direction(z: &ZooFeatures, ridge_lambda: Option<f64>) -> Result<MotifVector> {
    let n = z.rows.len();
    let dim = z.dim();
    let pm = mean(&z.perf);
    let p: Vec<f64> = z.perf.iter().map(|v| v - pm).collect();
    if p.iter().all(|&v| v == 0.0) {
        return Err(Error::degenerate("performance vector is constant"));
    }
    let cols: Vec<Vec<f64>> = (0..dim).map(|j| z.rows.iter().map(|r| r[j]).collect()).collect();
    let mut active = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        let constant = col.iter().all(|&v| v == col[0]);
        let duplicate = active.iter().any(|&a: &usize| cols[a] == *col);
        if !constant && !duplicate {
            active.push(j);
        }
    }
    if active.is_empty() {
        return Err(Error::degenerate("every feature column is constant"));
    }
    let k = active.len();
    let x = DMatrix::from_fn(n, k, |i, j| {
        let c = &cols[active[j]];
        c[i] - mean(c)
    });
    let pv = DVector::from_vec(p);
    let scale = 1.0 / (n as f64 - 1.0);
    let sxx = x.transpose() * &x * scale;
    let sxp = x.transpose() * &pv * scale;
    let lambda = match ridge_lambda {
        Some(l) if l < 0.0 || !l.is_finite() => return Err(Error::arg("ridge lambda must be finite and non-negative")),
        Some(l) => l,
        None => DEFAULT_RIDGE_SCALE * sxx.trace() / k as f64,
    };
    let a = &sxx + DMatrix::identity(k, k) * lambda;
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * k as f64 * f64::EPSILON;
    if lambda == 0.0 && svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::degenerate(
            "feature covariance is rank deficient; a positive ridge lambda is required",
        ));
    }
    let sol = svd
        .solve(&sxp, if lambda == 0.0 { tol } else { 0.0 })
        .map_err(|e| Error::Numeric(format!("SVD solve failed: {e}")))?;
    let norm = sol.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::degenerate("features are uncorrelated with performance"));
    }
    let mut direction = vec![0.0; dim];
    for (j, &c) in active.iter().enumerate() {
        direction[c] = sol[j] / norm;
    }
    let mut corr = projected_corr(z, &direction)?;
    if corr < 0.0 {
        direction.iter_mut().for_each(|v| *v = -*v);
        corr = -corr;
    }
    Ok(MotifVector {
        direction,
        achieved_corr: corr,
        ridge_lambda: lambda,
    })
}

/// `corr(Xv, p)`.
pub fn projected_corr(z: &ZooFeatures, v: &[f64]) -> Result<f64> {
    if v.len() != z.dim() {
        return Err(Error::arg("direction length does not match the features"));
    }
    let proj: Vec<f64> = z.rows.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
    pearson(&proj, &z.perf)
}

/// Mean of ℓ2-normalised directions, renormalised. `achieved_corr` is the
/// mean of the inputs' values.
pub fn universal_motif(motifs: &[MotifVector]) -> Result<MotifVector> {
    let first = motifs.first().ok_or_else(|| Error::arg("no motifs to average"))?;
    let dim = first.direction.len();
    if motifs.iter().any(|m| m.direction.len() != dim) {
        return Err(Error::arg("motifs differ in dimension"));
    }
    let mut acc = vec![0.0; dim];
    for m in motifs {
        let n = m.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::degenerate("zero motif direction"));
        }
        for (a, v) in acc.iter_mut().zip(&m.direction) {
            *a += v / n;
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        return Err(Error::degenerate("motif directions cancel out"));
    }
    let k = motifs.len() as f64;
    Ok(MotifVector {
        direction: acc.into_iter().map(|v| v / n).collect(),
        achieved_corr: motifs.iter().map(|m| m.achieved_corr).sum::<f64>() / k,
        ridge_lambda: motifs.iter().map(|m| m.ridge_lambda).sum::<f64>() / k,
    })
}

/// A motif reshaped to `(L+2)×(L+2)` with layer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifMatrix {
    pub labels: Vec<String>,
    pub entries: Vec<Vec<f64>>,
}

pub fn motif_entry_report(m: &MotifVector, n_layers: usize) -> Result<MotifMatrix> {
    let n = n_layers + 2;
    if m.direction.len() != n * n {
        return Err(Error::arg(format!(
            "motif has {} entries, expected {} for {n_layers} blocks",
            m.direction.len(),
            n * n
        )));
    }
    Ok(MotifMatrix {
        labels: layer_labels(n_layers),
        entries: m.direction.chunks(n).map(<[f64]>::to_vec).collect(),
    })
}

impl MotifMatrix {
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.concat()
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(&self.flatten(), self.labels.len() - 2)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MotifSidecar {
    pub task_id: String,
    pub achieved_corr: f64,
    pub ridge_lambda: f64,
    pub normalization: String,
    pub n_models: usize,
}

impl MotifSidecar {
    pub fn new(task_id: &str, m: &MotifVector, n_models: usize) -> Self {
        Self {
            task_id: task_id.to_string(),
            achieved_corr: m.achieved_corr,
            ridge_lambda: m.ridge_lambda,
            normalization: "l2".into(),
            n_models,
        }
    }
}
