//! Semiparametric average-derivative estimation.
//!
//! Conditional match probabilities `σ_c(x) = P(μ(i) = c | x_i = x)` are
//! estimated by Nadaraya–Watson regression of match indicators on student
//! covariates. Averaged gradients with respect to the excluded shifters `y`
//! and `w` and the shared covariates `z` then enter linear systems whose
//! solutions are the preference coefficients.
//!
//! Covariate vectors always use the layout `(y_1..y_C, w_1..w_C, z_1..z_dz)`.

mod analytic;
mod kernel;
mod rank;
mod solve;

use serde::{Deserialize, Serialize};

pub use analytic::IndependentNormalModel;
pub use kernel::{
    average_derivatives, average_derivatives_on, estimate_sigma, DerivativeMatrices, KernelSmoother, SigmaEstimate,
};
pub use rank::{rank_condition, MatchProbabilityModel, RankReport};
pub use solve::{
    estimate_coefficients, solve_coefficients, solve_college_coefficient, solve_shared, solve_student_coefficient,
    Blocking, CoefficientEstimates, CoefficientRoles, SemiparamFit, SharedEstimate, SharedModel,
};

/// One column of the covariate layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Covariate {
    /// Demand shifter of college `c` (1-based).
    Y(usize),
    /// Supply shifter of college `c` (1-based).
    W(usize),
    /// Shared covariate by position in [`crate::Market::z_names`].
    Z(usize),
}

impl Covariate {
    pub fn column(self, n_colleges: usize) -> usize {
        match self {
            Covariate::Y(c) => c - 1,
            Covariate::W(c) => n_colleges + c - 1,
            Covariate::Z(k) => 2 * n_colleges + k,
        }
    }

    /// Every column of the layout, in order.
    pub fn all(n_colleges: usize, d_z: usize) -> Vec<Covariate> {
        (1..=n_colleges)
            .map(Covariate::Y)
            .chain((1..=n_colleges).map(Covariate::W))
            .chain((0..d_z).map(Covariate::Z))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    #[default]
    GaussianProduct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// `h_k = sd_k · (4 / (d + 2))^(1/(d+4)) · n^(-1/(d+4))`.
    Silverman,
    /// One bandwidth per regressor.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub kernel: KernelKind,
    pub bandwidth: Bandwidth,
    /// Fraction of lowest-density sample points left out of averages.
    pub trim_fraction: f64,
    /// Systems whose condition number exceeds this are reported rank deficient.
    pub condition_cutoff: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kernel: KernelKind::GaussianProduct,
            bandwidth: Bandwidth::Silverman,
            trim_fraction: 0.05,
            condition_cutoff: 1e8,
        }
    }
}

/// Minimum sample size accepted by the kernel estimators.
pub const MIN_OBSERVATIONS: usize = 50;
