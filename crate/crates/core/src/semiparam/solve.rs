use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{average_derivatives, average_derivatives_on, Covariate, DerivativeMatrices, KernelConfig, RankReport};
use crate::error::{Error, Result};
use crate::market::Market;

/// Which shared covariates enter which side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SharedModel {
    /// `z` enters every student and college utility with common coefficients
    /// `β^z` and `γ^z`.
    General,
    /// `z` enters only the student utility for `student_college` and only the
    /// valuation of `college_college`.
    Reduced {
        student_college: usize,
        college_college: usize,
    },
}

/// Positions of the covariates in the linear systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRoles {
    /// `z` index entering only student utilities (coefficients `β^s_c`).
    pub student_var: usize,
    /// `z` index entering only college valuations (coefficients `γ^m_c`).
    pub college_var: usize,
    /// `z` index entering both sides.
    pub shared_var: usize,
    /// Known coefficient on each `y_c`.
    pub y_coef: Vec<f64>,
    /// Known coefficient on each `w_c`.
    pub w_coef: Vec<f64>,
}

impl CoefficientRoles {
    /// `z = (s, z, m)` with `β^d = −1` and `γ^w = 1`, as produced by
    /// [`crate::dgp::simulate_market`].
    pub fn benchmark(n_colleges: usize) -> Self {
        CoefficientRoles {
            student_var: 0,
            college_var: 2,
            shared_var: 1,
            y_coef: vec![-1.0; n_colleges],
            w_coef: vec![1.0; n_colleges],
        }
    }
}

/// `(γ^z, β^z)` from one subset of the shared-covariate equations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEstimate {
    /// 1-based equation rows used; all rows is the identity-weighted GMM fit.
    pub rows: Vec<usize>,
    pub gamma_z: f64,
    pub beta_z: f64,
    pub rank: RankReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimates {
    pub beta_s: Vec<f64>,
    pub gamma_m: Vec<f64>,
    /// First entry uses every row; the rest are the row pairs in order.
    pub shared: Vec<SharedEstimate>,
}

impl CoefficientEstimates {
    pub fn gmm(&self) -> &SharedEstimate {
        &self.shared[0]
    }
}

fn square_system(a: Vec<f64>, rhs: Vec<f64>, cutoff: f64, context: &str) -> Result<Vec<f64>> {
    let n = rhs.len();
    let report = RankReport::from_matrix(n, n, a.clone(), cutoff);
    if !report.passes {
        return Err(report.into_error(context));
    }
    let m = DMatrix::from_row_slice(n, n, &a);
    m.lu()
        .solve(&DVector::from_vec(rhs))
        .map(|x| x.iter().copied().collect())
        .ok_or_else(|| Error::Estimation(format!("{context}: LU solve failed")))
}

/// Solves `A β^s = E[∂σ/∂s]` with `A_cd = E[∂σ_c/∂y_d] / y_coef_d`.
pub fn solve_student_coefficient(mats: &DerivativeMatrices, roles: &CoefficientRoles, cutoff: f64) -> Result<Vec<f64>> {
    let n_c = mats.n_colleges();
    let a: Vec<f64> = (0..n_c)
        .flat_map(|c| (0..n_c).map(move |d| (c, d)))
        .map(|(c, d)| mats.dsigma_dy[c][d] / roles.y_coef[d])
        .collect();
    let rhs = (0..n_c).map(|c| mats.dsigma_dz[c][roles.student_var]).collect();
    square_system(a, rhs, cutoff, "student-side coefficient system")
}

/// Solves `B γ^m = E[∂σ/∂m]` with `B_cd = E[∂σ_c/∂w_d] / w_coef_d`.
pub fn solve_college_coefficient(mats: &DerivativeMatrices, roles: &CoefficientRoles, cutoff: f64) -> Result<Vec<f64>> {
    let n_c = mats.n_colleges();
    let b: Vec<f64> = (0..n_c)
        .flat_map(|c| (0..n_c).map(move |d| (c, d)))
        .map(|(c, d)| mats.dsigma_dw[c][d] / roles.w_coef[d])
        .collect();
    let rhs = (0..n_c).map(|c| mats.dsigma_dz[c][roles.college_var]).collect();
    square_system(b, rhs, cutoff, "college-side coefficient system")
}

/// Solves the overdetermined `C × 2` system for `(γ^z, β^z)` with all rows
/// and with every pair of rows.
///
/// An ill-conditioned all-row system is an error; an ill-conditioned pair
/// yields `NaN` estimates with a failing rank report.
pub fn solve_shared(
    mats: &DerivativeMatrices,
    model: SharedModel,
    roles: &CoefficientRoles,
    cutoff: f64,
) -> Result<Vec<SharedEstimate>> {
    let n_c = mats.n_colleges();
    let a = |c: usize, d: usize| mats.dsigma_dy[c][d] / roles.y_coef[d];
    let b = |c: usize, d: usize| mats.dsigma_dw[c][d] / roles.w_coef[d];
    let design: Vec<[f64; 2]> = (0..n_c)
        .map(|c| match model {
            SharedModel::General => [(0..n_c).map(|d| b(c, d)).sum(), (0..n_c).map(|d| a(c, d)).sum()],
            SharedModel::Reduced {
                student_college,
                college_college,
            } => [b(c, college_college - 1), a(c, student_college - 1)],
        })
        .collect();
    let rhs: Vec<f64> = (0..n_c).map(|c| mats.dsigma_dz[c][roles.shared_var]).collect();

    let fit = |rows: &[usize]| -> (Option<[f64; 2]>, RankReport) {
        let flat: Vec<f64> = rows.iter().flat_map(|&r| design[r - 1]).collect();
        let report = RankReport::from_matrix(rows.len(), 2, flat.clone(), cutoff);
        if !report.passes {
            return (None, report);
        }
        let x = DMatrix::from_row_slice(rows.len(), 2, &flat);
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| rhs[r - 1]));
        let sol = x.svd(true, true).solve(&y, 0.0).ok().map(|s| [s[0], s[1]]);
        (sol, report)
    };

    let all: Vec<usize> = (1..=n_c).collect();
    let (sol, report) = fit(&all);
    let Some([gamma_z, beta_z]) = sol else {
        return Err(report.into_error("shared-covariate system"));
    };
    let mut out = vec![SharedEstimate {
        rows: all,
        gamma_z,
        beta_z,
        rank: report,
    }];
    if n_c > 2 {
        for r1 in 1..=n_c {
            for r2 in r1 + 1..=n_c {
                let rows = vec![r1, r2];
                let (sol, rank) = fit(&rows);
                let [gamma_z, beta_z] = sol.unwrap_or([f64::NAN; 2]);
                out.push(SharedEstimate {
                    rows,
                    gamma_z,
                    beta_z,
                    rank,
                });
            }
        }
    }
    Ok(out)
}

/// All three systems from a single set of derivative matrices.
pub fn solve_coefficients(
    mats: &DerivativeMatrices,
    model: SharedModel,
    roles: &CoefficientRoles,
    cutoff: f64,
) -> Result<CoefficientEstimates> {
    Ok(CoefficientEstimates {
        beta_s: solve_student_coefficient(mats, roles, cutoff)?,
        gamma_m: solve_college_coefficient(mats, roles, cutoff)?,
        shared: solve_shared(mats, model, roles, cutoff)?,
    })
}

/// How the kernel regressions are set up.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Blocking {
    /// One regression on every covariate.
    Full,
    /// One regression per system, on just the covariates it involves. Valid
    /// when covariates are mutually independent.
    #[default]
    PerSystem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiparamFit {
    pub estimates: CoefficientEstimates,
    /// Matrices behind the student, college and shared systems. With
    /// [`Blocking::Full`] all three are the same.
    pub student_mats: DerivativeMatrices,
    pub college_mats: DerivativeMatrices,
    pub shared_mats: DerivativeMatrices,
}

/// Kernel regressions followed by the three linear solves.
pub fn estimate_coefficients(
    market: &Market,
    assignment: &[usize],
    cfg: &KernelConfig,
    model: SharedModel,
    roles: &CoefficientRoles,
    blocking: Blocking,
) -> Result<SemiparamFit> {
    let n_c = market.n_colleges();
    if roles.y_coef.len() != n_c || roles.w_coef.len() != n_c {
        return Err(Error::InvalidInput("known shifter coefficients must have one entry per college".into()));
    }
    if [roles.student_var, roles.college_var, roles.shared_var]
        .iter()
        .any(|&k| k >= market.d_z())
    {
        return Err(Error::InvalidInput("coefficient role refers to a missing z column".into()));
    }
    let (student_mats, college_mats, shared_mats) = match blocking {
        Blocking::Full => {
            let m = average_derivatives(market, assignment, cfg)?;
            (m.clone(), m.clone(), m)
        }
        Blocking::PerSystem => {
            let ys = (1..=n_c).map(Covariate::Y);
            let ws = (1..=n_c).map(Covariate::W);
            let student: Vec<Covariate> = std::iter::once(Covariate::Z(roles.student_var)).chain(ys.clone()).collect();
            let college: Vec<Covariate> = std::iter::once(Covariate::Z(roles.college_var)).chain(ws.clone()).collect();
            let shared: Vec<Covariate> = match model {
                SharedModel::General => std::iter::once(Covariate::Z(roles.shared_var)).chain(ys).chain(ws).collect(),
                SharedModel::Reduced {
                    student_college,
                    college_college,
                } => vec![
                    Covariate::Z(roles.shared_var),
                    Covariate::Y(student_college),
                    Covariate::W(college_college),
                ],
            };
            (
                average_derivatives_on(market, assignment, cfg, &student)?,
                average_derivatives_on(market, assignment, cfg, &college)?,
                average_derivatives_on(market, assignment, cfg, &shared)?,
            )
        }
    };
    let cutoff = cfg.condition_cutoff;
    let estimates = CoefficientEstimates {
        beta_s: solve_student_coefficient(&student_mats, roles, cutoff)?,
        gamma_m: solve_college_coefficient(&college_mats, roles, cutoff)?,
        shared: solve_shared(&shared_mats, model, roles, cutoff)?,
    };
    Ok(SemiparamFit {
        estimates,
        student_mats,
        college_mats,
        shared_mats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Derivative matrices satisfying the average-derivative identities
    /// exactly for the given coefficients.
    fn synthetic(seed: u64, beta_s: &[f64], gamma_m: &[f64], beta_z: f64, gamma_z: f64) -> DerivativeMatrices {
        let n_c = beta_s.len();
        let roles = CoefficientRoles::benchmark(n_c);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = DerivativeMatrices::zeros(n_c, 3);
        for c in 0..n_c {
            for d in 0..n_c {
                let own = if c == d { 2.0 } else { 0.0 };
                m.dsigma_dy[c][d] = own + rng.random::<f64>() - 0.5;
                m.dsigma_dw[c][d] = own + rng.random::<f64>() - 0.5;
            }
        }
        for c in 0..n_c {
            let a = |d: usize| m.dsigma_dy[c][d] / roles.y_coef[d];
            let b = |d: usize| m.dsigma_dw[c][d] / roles.w_coef[d];
            m.dsigma_dz[c][0] = (0..n_c).map(|d| a(d) * beta_s[d]).sum();
            m.dsigma_dz[c][2] = (0..n_c).map(|d| b(d) * gamma_m[d]).sum();
            m.dsigma_dz[c][1] = (0..n_c).map(|d| a(d) * beta_z + b(d) * gamma_z).sum();
        }
        m
    }

    #[test]
    fn noiseless_system_is_recovered() {
        let mats = synthetic(1, &[1.0, 0.8, 1.2], &[0.9, 1.1, 1.0], 0.7, -0.4);
        let est = solve_coefficients(&mats, SharedModel::General, &CoefficientRoles::benchmark(3), 1e8).unwrap();
        for (got, want) in est.beta_s.iter().zip([1.0, 0.8, 1.2]) {
            assert!((got - want).abs() < 1e-10);
        }
        for (got, want) in est.gamma_m.iter().zip([0.9, 1.1, 1.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        assert_eq!(est.shared.len(), 4);
        for s in &est.shared {
            assert!((s.beta_z - 0.7).abs() < 1e-9 && (s.gamma_z + 0.4).abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn reduced_model_uses_single_columns() {
        let n_c = 3;
        let roles = CoefficientRoles::benchmark(n_c);
        let mut mats = synthetic(2, &[1.0; 3], &[1.0; 3], 0.0, 0.0);
        for c in 0..n_c {
            mats.dsigma_dz[c][1] = mats.dsigma_dy[c][0] / -1.0 * 0.97 + mats.dsigma_dw[c][2] * 1.03;
        }
        let model = SharedModel::Reduced {
            student_college: 1,
            college_college: 3,
        };
        let s = solve_shared(&mats, model, &roles, 1e8).unwrap();
        assert!((s[0].beta_z - 0.97).abs() < 1e-10 && (s[0].gamma_z - 1.03).abs() < 1e-10);
    }

    #[test]
    fn singular_system_reports_rank() {
        let mats = DerivativeMatrices::zeros(3, 3);
        match solve_student_coefficient(&mats, &CoefficientRoles::benchmark(3), 1e8) {
            Err(Error::RankDeficiency { report, .. }) => assert_eq!(report.rank, 0),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn solutions_are_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mats = synthetic(seed, &[1.0, 0.5, 2.0], &[0.3, 1.0, 1.5], 1.0, 1.0);
            let roles = CoefficientRoles::benchmark(3);
            let base = solve_coefficients(&mats, SharedModel::General, &roles, 1e8).unwrap();
            let scaled = solve_coefficients(&mats.scaled(scale), SharedModel::General, &roles, 1e8).unwrap();
            for (a, b) in base.beta_s.iter().zip(&scaled.beta_s) {
                prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0));
            }
            prop_assert!((base.gmm().beta_z - scaled.gmm().beta_z).abs() < 1e-8);
        }
    }
}
