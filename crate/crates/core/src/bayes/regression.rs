use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Sufficient statistics of a weighted linear regression.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalEquations {
    pub xtx: DMatrix<f64>,
    pub xty: DVector<f64>,
    pub n: usize,
}

impl NormalEquations {
    pub fn new(k: usize) -> Self {
        NormalEquations {
            xtx: DMatrix::zeros(k, k),
            xty: DVector::zeros(k),
            n: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    pub fn clear(&mut self) {
        self.xtx.fill(0.0);
        self.xty.fill(0.0);
        self.n = 0;
    }

    /// Adds a sparse row `(index, value)` with response `y` and weight `weight`.
    #[inline]
    pub fn add_sparse(&mut self, row: &[(u32, f64)], y: f64, weight: f64) {
        for &(a, xa) in row {
            let a = a as usize;
            self.xty[a] += weight * xa * y;
            for &(b, xb) in row {
                self.xtx[(a, b as usize)] += weight * xa * xb;
            }
        }
        self.n += 1;
    }

    pub fn add_dense(&mut self, row: &[f64], y: f64) {
        let k = self.dim();
        for a in 0..k {
            self.xty[a] += row[a] * y;
            for b in 0..k {
                self.xtx[(a, b)] += row[a] * row[b];
            }
        }
        self.n += 1;
    }
}

/// Draws `θ ~ N(P⁻¹ X'y, P⁻¹)` with `P = X'X + I / prior_var`, the posterior
/// under a `N(0, prior_var · I)` prior and unit error variance (weights carry
/// any other variance).
pub fn draw_coefficients<R: Rng + ?Sized>(
    eq: &NormalEquations,
    prior_var: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let k = eq.dim();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut precision = eq.xtx.clone();
    for a in 0..k {
        precision[(a, a)] += 1.0 / prior_var;
    }
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::StateCorruption("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&eq.xty);
    let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
    // P = L L', so L'⁻¹ z has covariance P⁻¹
    let noise = chol
        .l()
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| Error::StateCorruption("singular Cholesky factor".into()))?;
    Ok(mean + noise)
}

/// Scaled inverse chi-square prior `σ² ~ ν σ̄² / χ²_ν`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariancePrior {
    pub scale: f64,
    pub dof: f64,
}

impl Default for VariancePrior {
    fn default() -> Self {
        VariancePrior { scale: 1.0, dof: 2.0 }
    }
}

/// Draws `σ² ~ IG((ν + n)/2, (ν σ̄² + ssr)/2)`.
pub fn draw_variance<R: Rng + ?Sized>(ssr: f64, n: usize, prior: VariancePrior, rng: &mut R) -> Result<f64> {
    let shape = 0.5 * (prior.dof + n as f64);
    let rate = 0.5 * (prior.dof * prior.scale + ssr);
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::StateCorruption(format!("variance posterior ({shape}, {rate}): {e}")))?;
    Ok(1.0 / gamma.sample(rng))
}
