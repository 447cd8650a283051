use serde::{Deserialize, Serialize};

use super::rank::MatchProbabilityModel;
use crate::error::{Error, Result};
use crate::market::Cutoff;
use crate::stats::{norm_cdf, norm_pdf};

/// Closed-form match probabilities for linear indices with independent
/// normal shocks.
///
/// Student `i` values college `c` at `a_c + ε_c` with `a_c = y_coef_c·y_c +
/// β_c·z` and `ε_c ~ N(0, s_c²)`, and the outside option at `ε_0 ~ N(0, 1)`.
/// College `c` values the student at `b_c + η_c` with `b_c = w_coef_c·w_c +
/// γ_c·z` and `η_c ~ N(0, 1)`, so it is feasible with probability
/// `Φ(b_c − δ_c)`. Then `σ_c = Σ_L λ_L g_{c,L}` over feasible sets `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentNormalModel {
    pub y_coef: Vec<f64>,
    pub w_coef: Vec<f64>,
    /// `beta[c - 1][k]`.
    pub beta: Vec<Vec<f64>>,
    /// `gamma[c - 1][k]`.
    pub gamma: Vec<Vec<f64>>,
    pub student_sd: Vec<f64>,
    pub cutoffs: Vec<Cutoff>,
}

/// Simpson intervals for the choice-probability integrals.
const QUAD_INTERVALS: usize = 4000;

impl IndependentNormalModel {
    fn d_z(&self) -> usize {
        self.beta.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        let c = self.y_coef.len();
        let dz = self.d_z();
        let ok = c > 0
            && c <= 16
            && self.w_coef.len() == c
            && self.beta.len() == c
            && self.gamma.len() == c
            && self.student_sd.len() == c
            && self.cutoffs.len() == c
            && self.beta.iter().chain(&self.gamma).all(|r| r.len() == dz)
            && self.student_sd.iter().all(|&s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("inconsistent analytic model dimensions".into()))
        }
    }

    /// Probabilities and their derivatives with respect to the indices `a`
    /// and `b`: returns `(σ, ∂σ/∂a, ∂σ/∂b)`, the last two row-major `C × C`
    /// for `c = 1..=C`.
    pub fn sigma_index_gradient(&self, a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n_c = a.len();
        let (p, dp): (Vec<f64>, Vec<f64>) = (0..n_c)
            .map(|c| match self.cutoffs[c] {
                Cutoff::NegInf => (1.0, 0.0),
                Cutoff::PosInf => (0.0, 0.0),
                Cutoff::Finite(d) => (norm_cdf(b[c] - d), norm_pdf(b[c] - d)),
            })
            .unzip();

        let mut sigma = vec![0.0; n_c];
        let mut da = vec![0.0; n_c * n_c];
        let mut db = vec![0.0; n_c * n_c];
        for mask in 1usize..(1 << n_c) {
            let members: Vec<usize> = (0..n_c).filter(|&c| mask & (1 << c) != 0).collect();
            let factor = |c: usize| if mask & (1 << c) != 0 { p[c] } else { 1.0 - p[c] };
            let lambda: f64 = (0..n_c).map(factor).product();
            let dlambda: Vec<f64> = (0..n_c)
                .map(|d| {
                    let others: f64 = (0..n_c).filter(|&e| e != d).map(factor).product();
                    let sign = if mask & (1 << d) != 0 { 1.0 } else { -1.0 };
                    sign * dp[d] * others
                })
                .collect();
            if lambda == 0.0 && dlambda.iter().all(|&v| v == 0.0) {
                continue;
            }
            // alternatives: outside option then the feasible colleges
            let means: Vec<f64> = std::iter::once(0.0).chain(members.iter().map(|&c| a[c])).collect();
            let sds: Vec<f64> = std::iter::once(1.0)
                .chain(members.iter().map(|&c| self.student_sd[c]))
                .collect();
            let (g, dg) = choice_probabilities(&means, &sds);
            let m = means.len();
            for (jc, &c) in members.iter().enumerate() {
                let gc = g[jc + 1];
                sigma[c] += lambda * gc;
                for d in 0..n_c {
                    db[c * n_c + d] += dlambda[d] * gc;
                }
                for (jd, &d) in members.iter().enumerate() {
                    da[c * n_c + d] += lambda * dg[(jc + 1) * m + jd + 1];
                }
            }
        }
        (sigma, da, db)
    }

    fn indices(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n_c = self.y_coef.len();
        let z = &x[2 * n_c..];
        let dot = |coef: &[f64]| coef.iter().zip(z).map(|(c, v)| c * v).sum::<f64>();
        let a = (0..n_c).map(|c| self.y_coef[c] * x[c] + dot(&self.beta[c])).collect();
        let b = (0..n_c)
            .map(|c| self.w_coef[c] * x[n_c + c] + dot(&self.gamma[c]))
            .collect();
        (a, b)
    }
}

impl MatchProbabilityModel for IndependentNormalModel {
    fn n_colleges(&self) -> usize {
        self.y_coef.len()
    }

    fn layout_dim(&self) -> usize {
        2 * self.y_coef.len() + self.d_z()
    }

    fn sigma_gradient(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let n_c = self.y_coef.len();
        let dim = self.layout_dim();
        if x.len() != dim {
            return Err(Error::InvalidInput(format!("point has {} entries, layout has {dim}", x.len())));
        }
        let (a, b) = self.indices(x);
        let (sigma, da, db) = self.sigma_index_gradient(&a, &b);
        let mut probs = vec![1.0 - sigma.iter().sum::<f64>()];
        probs.extend_from_slice(&sigma);
        let mut grad = vec![0.0; (n_c + 1) * dim];
        for c in 1..=n_c {
            let row = &mut grad[c * dim..(c + 1) * dim];
            for d in 0..n_c {
                row[d] = self.y_coef[d] * da[(c - 1) * n_c + d];
                row[n_c + d] = self.w_coef[d] * db[(c - 1) * n_c + d];
            }
            for k in 0..self.d_z() {
                row[2 * n_c + k] = (0..n_c)
                    .map(|d| self.beta[d][k] * da[(c - 1) * n_c + d] + self.gamma[d][k] * db[(c - 1) * n_c + d])
                    .sum();
            }
        }
        for k in 0..dim {
            grad[k] = -(1..=n_c).map(|c| grad[c * dim + k]).sum::<f64>();
        }
        Ok((probs, grad))
    }
}

/// Probability that each of several independent normals is the largest,
/// with the Jacobian with respect to the means (row-major, `[j][k] =
/// ∂P_j/∂μ_k`).
fn choice_probabilities(means: &[f64], sds: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = means.len();
    let mut probs = vec![0.0; m];
    let mut jac = vec![0.0; m * m];
    if m == 1 {
        probs[0] = 1.0;
        return (probs, jac);
    }
    if m == 2 {
        let s = (sds[0] * sds[0] + sds[1] * sds[1]).sqrt();
        let t = (means[1] - means[0]) / s;
        probs[1] = norm_cdf(t);
        probs[0] = norm_cdf(-t);
        let d = norm_pdf(t) / s;
        jac[3] = d;
        jac[2] = -d;
        jac[1] = -d;
        jac[0] = d;
        return (probs, jac);
    }

    let max_sd = sds.iter().cloned().fold(0.0, f64::max);
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 10.0 * max_sd;
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 10.0 * max_sd;
    let step = (hi - lo) / QUAD_INTERVALS as f64;
    let mut f = vec![0.0; m];
    let mut cdf = vec![0.0; m];
    for q in 0..=QUAD_INTERVALS {
        let t = lo + step * q as f64;
        let weight = step / 3.0
            * if q == 0 || q == QUAD_INTERVALS {
                1.0
            } else if q % 2 == 1 {
                4.0
            } else {
                2.0
            };
        for j in 0..m {
            let u = (t - means[j]) / sds[j];
            f[j] = norm_pdf(u) / sds[j];
            cdf[j] = norm_cdf(u);
        }
        for j in 0..m {
            let others: f64 = (0..m).filter(|&k| k != j).map(|k| cdf[k]).product();
            probs[j] += weight * f[j] * others;
            for k in 0..m {
                if k == j {
                    continue;
                }
                let rest: f64 = (0..m).filter(|&l| l != j && l != k).map(|l| cdf[l]).product();
                let v = weight * f[j] * f[k] * rest;
                jac[j * m + k] -= v;
                jac[j * m + j] += v;
            }
        }
    }
    (probs, jac)
}
