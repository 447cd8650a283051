use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{KernelSmoother, SigmaEstimate};
use crate::error::{Error, Result};

/// Singular-value summary of a linear system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: usize,
    pub cols: usize,
    /// Row-major matrix entries.
    pub matrix: Vec<f64>,
    /// Descending.
    pub singular_values: Vec<f64>,
    /// Largest over smallest singular value; infinite when the smallest is zero.
    pub condition_number: f64,
    /// Singular values above `largest / threshold`.
    pub rank: usize,
    pub threshold: f64,
    pub passes: bool,
}

impl RankReport {
    pub fn from_matrix(rows: usize, cols: usize, matrix: Vec<f64>, threshold: f64) -> RankReport {
        let m = DMatrix::from_row_slice(rows, cols, &matrix);
        let mut singular_values: Vec<f64> = if matrix.iter().all(|v| v.is_finite()) {
            m.singular_values().iter().copied().collect()
        } else {
            vec![f64::NAN; rows.min(cols)]
        };
        singular_values.sort_by(|a, b| b.total_cmp(a));
        let largest = singular_values.first().copied().unwrap_or(0.0);
        let smallest = singular_values.last().copied().unwrap_or(0.0);
        let condition_number = if smallest > 0.0 { largest / smallest } else { f64::INFINITY };
        let rank = singular_values
            .iter()
            .filter(|&&s| largest > 0.0 && s > largest / threshold)
            .count();
        RankReport {
            rows,
            cols,
            matrix,
            singular_values,
            condition_number,
            rank,
            threshold,
            passes: condition_number.is_finite() && condition_number < threshold && rows >= cols,
        }
    }

    pub fn entry(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols + c]
    }

    pub(crate) fn into_error(self, context: impl Into<String>) -> Error {
        Error::RankDeficiency {
            context: context.into(),
            report: Box::new(self),
        }
    }
}

/// Anything that yields match probabilities and their covariate gradient.
pub trait MatchProbabilityModel {
    fn n_colleges(&self) -> usize;

    /// Length of the covariate layout `(y, w, z)`.
    fn layout_dim(&self) -> usize;

    /// `σ_c(x)` for `c in 0..=C` and the row-major `(C + 1) × layout_dim`
    /// gradient.
    fn sigma_gradient(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

impl MatchProbabilityModel for KernelSmoother {
    fn n_colleges(&self) -> usize {
        KernelSmoother::n_colleges(self)
    }

    fn layout_dim(&self) -> usize {
        self.layout_dim
    }

    fn sigma_gradient(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let point = self.project(x)?;
        let SigmaEstimate { probs, gradient, .. } = self.estimate(&point, None);
        let k = self.columns.len();
        let dim = self.layout_dim;
        let mut full = vec![0.0; probs.len() * dim];
        for c in 0..probs.len() {
            for (m, &col) in self.columns.iter().enumerate() {
                full[c * dim + col] = gradient[c * k + m];
            }
        }
        Ok((probs, full))
    }
}

/// Builds the `2C × 2C` matrix of `∂σ/∂(y, w)` at `(y, w¹, z)` over
/// `(y, w², z)` and reports its rank.
pub fn rank_condition<M: MatchProbabilityModel + ?Sized>(
    model: &M,
    y: &[f64],
    z: &[f64],
    w1: &[f64],
    w2: &[f64],
    threshold: f64,
) -> Result<RankReport> {
    let n_c = model.n_colleges();
    if y.len() != n_c || w1.len() != n_c || w2.len() != n_c || 2 * n_c + z.len() != model.layout_dim() {
        return Err(Error::InvalidInput("rank condition point has wrong dimensions".into()));
    }
    let dim = model.layout_dim();
    let mut matrix = Vec::with_capacity(4 * n_c * n_c);
    for w in [w1, w2] {
        let x: Vec<f64> = y.iter().chain(w).chain(z).copied().collect();
        let (_, grad) = model.sigma_gradient(&x)?;
        for c in 1..=n_c {
            matrix.extend_from_slice(&grad[c * dim..c * dim + 2 * n_c]);
        }
    }
    Ok(RankReport::from_matrix(2 * n_c, 2 * n_c, matrix, threshold))
}
