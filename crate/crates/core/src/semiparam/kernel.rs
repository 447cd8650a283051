use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Bandwidth, Covariate, KernelConfig, MIN_OBSERVATIONS};
use crate::error::{Error, Result};
use crate::market::{check_assignment, Market};

/// Nadaraya–Watson smoother of match indicators with a Gaussian product kernel.
#[derive(Clone, Debug)]
pub struct KernelSmoother {
    n_colleges: usize,
    pub(super) layout_dim: usize,
    regressors: Vec<Covariate>,
    pub(super) columns: Vec<usize>,
    /// Row-major `n × k` regressor values.
    x: Vec<f64>,
    outcome: Vec<usize>,
    bandwidth: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Estimated match probabilities at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    /// `probs[c]` for `c in 0..=C`.
    pub probs: Vec<f64>,
    /// Row-major `(C + 1) × k` gradient with respect to the smoother's regressors.
    pub gradient: Vec<f64>,
    /// Log of the kernel density estimate at the point.
    pub log_density: f64,
    /// The point lies outside the bounding box of the data.
    pub low_density: bool,
}

impl SigmaEstimate {
    pub fn grad(&self, c: usize, k: usize) -> f64 {
        self.gradient[c * (self.gradient.len() / self.probs.len()) + k]
    }
}

impl KernelSmoother {
    /// Fits on the listed regressors. Match outcomes are `assignment`.
    pub fn fit(market: &Market, assignment: &[usize], regressors: &[Covariate], cfg: &KernelConfig) -> Result<Self> {
        check_assignment(market, assignment)?;
        let n = market.n_students();
        if n < MIN_OBSERVATIONS {
            return Err(Error::InvalidInput(format!(
                "kernel estimation needs at least {MIN_OBSERVATIONS} students, got {n}"
            )));
        }
        if regressors.is_empty() {
            return Err(Error::InvalidInput("no regressors".into()));
        }
        let n_c = market.n_colleges();
        let layout_dim = 2 * n_c + market.d_z();
        let columns: Vec<usize> = regressors.iter().map(|r| r.column(n_c)).collect();
        if let Some(bad) = columns.iter().find(|&&c| c >= layout_dim) {
            return Err(Error::InvalidInput(format!("regressor column {bad} outside covariate layout")));
        }
        let k = columns.len();
        let mut x = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = market.covariate_row(i);
            x.extend(columns.iter().map(|&col| row[col]));
        }
        let mut lower = vec![f64::INFINITY; k];
        let mut upper = vec![f64::NEG_INFINITY; k];
        let mut mean = vec![0.0; k];
        for row in x.chunks_exact(k) {
            for j in 0..k {
                lower[j] = lower[j].min(row[j]);
                upper[j] = upper[j].max(row[j]);
                mean[j] += row[j] / n as f64;
            }
        }
        let bandwidth = match &cfg.bandwidth {
            Bandwidth::Fixed(h) => {
                if h.len() != k || h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return Err(Error::InvalidInput(format!("need {k} positive bandwidths, got {h:?}")));
                }
                h.clone()
            }
            Bandwidth::Silverman => {
                let d = k as f64;
                let factor = (4.0 / (d + 2.0)).powf(1.0 / (d + 4.0)) * (n as f64).powf(-1.0 / (d + 4.0));
                (0..k)
                    .map(|j| {
                        let var = x.chunks_exact(k).map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1) as f64;
                        if var > 0.0 {
                            Ok(var.sqrt() * factor)
                        } else {
                            Err(Error::InvalidInput(format!("regressor {:?} is constant", regressors[j])))
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?
            }
        };
        Ok(KernelSmoother {
            n_colleges: n_c,
            layout_dim,
            regressors: regressors.to_vec(),
            columns,
            x,
            outcome: assignment.to_vec(),
            bandwidth,
            lower,
            upper,
        })
    }

    pub fn n_colleges(&self) -> usize {
        self.n_colleges
    }

    pub fn regressors(&self) -> &[Covariate] {
        &self.regressors
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn n_observations(&self) -> usize {
        self.outcome.len()
    }

    /// Regressor values of sample point `i`.
    pub fn sample_point(&self, i: usize) -> &[f64] {
        let k = self.columns.len();
        &self.x[i * k..(i + 1) * k]
    }

    /// Projects a full-layout covariate vector onto the regressors.
    pub fn project(&self, full: &[f64]) -> Result<Vec<f64>> {
        if full.len() != self.layout_dim {
            return Err(Error::InvalidInput(format!(
                "covariate point has {} entries, layout has {}",
                full.len(),
                self.layout_dim
            )));
        }
        Ok(self.columns.iter().map(|&c| full[c]).collect())
    }

    /// Probabilities and analytic gradient at `point` (regressor space).
    /// `exclude` drops one sample point, for leave-one-out evaluation.
    pub fn estimate(&self, point: &[f64], exclude: Option<usize>) -> SigmaEstimate {
        let k = self.columns.len();
        let n = self.outcome.len();
        let n_out = self.n_colleges + 1;
        let inv_h: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();

        let mut log_k = vec![f64::NEG_INFINITY; n];
        let mut max_log = f64::NEG_INFINITY;
        for (j, row) in self.x.chunks_exact(k).enumerate() {
            if Some(j) == exclude {
                continue;
            }
            let mut s = 0.0;
            for m in 0..k {
                let t = (point[m] - row[m]) * inv_h[m];
                s += t * t;
            }
            let l = -0.5 * s;
            log_k[j] = l;
            max_log = max_log.max(l);
        }

        let mut sum_w = 0.0;
        let mut sum_wc = vec![0.0; n_out];
        let mut sum_g = vec![0.0; k];
        let mut sum_gc = vec![0.0; n_out * k];
        for (j, row) in self.x.chunks_exact(k).enumerate() {
            if log_k[j] == f64::NEG_INFINITY {
                continue;
            }
            let w = (log_k[j] - max_log).exp();
            if w == 0.0 {
                continue;
            }
            let c = self.outcome[j];
            sum_w += w;
            sum_wc[c] += w;
            for m in 0..k {
                let g = -w * (point[m] - row[m]) * inv_h[m] * inv_h[m];
                sum_g[m] += g;
                sum_gc[c * k + m] += g;
            }
        }

        let count = n - usize::from(exclude.is_some());
        let log_norm: f64 = self.bandwidth.iter().map(|h| h.ln()).sum::<f64>()
            + 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln()
            + (count as f64).ln();
        let log_density = if sum_w > 0.0 {
            max_log + sum_w.ln() - log_norm
        } else {
            f64::NEG_INFINITY
        };

        let probs: Vec<f64> = sum_wc.iter().map(|s| s / sum_w).collect();
        let mut gradient = vec![0.0; n_out * k];
        for c in 0..n_out {
            for m in 0..k {
                gradient[c * k + m] = (sum_gc[c * k + m] - probs[c] * sum_g[m]) / sum_w;
            }
        }
        let low_density = point
            .iter()
            .enumerate()
            .any(|(m, &p)| p < self.lower[m] || p > self.upper[m]);
        SigmaEstimate {
            probs,
            gradient,
            log_density,
            low_density,
        }
    }
}

/// Estimated `σ(x)` and its gradient with respect to every covariate, using
/// all covariates as regressors. `at` uses the full covariate layout.
pub fn estimate_sigma(market: &Market, assignment: &[usize], at: &[f64], cfg: &KernelConfig) -> Result<SigmaEstimate> {
    let all = Covariate::all(market.n_colleges(), market.d_z());
    let smoother = KernelSmoother::fit(market, assignment, &all, cfg)?;
    let point = smoother.project(at)?;
    Ok(smoother.estimate(&point, None))
}

/// Trimmed sample averages of `∂σ_c/∂x` for colleges `c = 1..=C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeMatrices {
    /// `dsigma_dy[c - 1][d - 1] = E[∂σ_c/∂y_d]`.
    pub dsigma_dy: Vec<Vec<f64>>,
    /// `dsigma_dw[c - 1][d - 1] = E[∂σ_c/∂w_d]`.
    pub dsigma_dw: Vec<Vec<f64>>,
    /// `dsigma_dz[c - 1][k] = E[∂σ_c/∂z_k]`.
    pub dsigma_dz: Vec<Vec<f64>>,
    /// Covariates the averages were estimated for; other entries are zero.
    pub estimated: Vec<Covariate>,
    /// `trimmed[i]` marks sample points left out of the averages.
    pub trimmed: Vec<bool>,
}

impl DerivativeMatrices {
    pub fn zeros(n_colleges: usize, d_z: usize) -> Self {
        DerivativeMatrices {
            dsigma_dy: vec![vec![0.0; n_colleges]; n_colleges],
            dsigma_dw: vec![vec![0.0; n_colleges]; n_colleges],
            dsigma_dz: vec![vec![0.0; d_z]; n_colleges],
            estimated: Covariate::all(n_colleges, d_z),
            trimmed: vec![],
        }
    }

    pub fn n_colleges(&self) -> usize {
        self.dsigma_dy.len()
    }

    /// Mutable access to the `(c, covariate)` entry, `c` 1-based.
    pub fn entry_mut(&mut self, c: usize, covariate: Covariate) -> &mut f64 {
        match covariate {
            Covariate::Y(d) => &mut self.dsigma_dy[c - 1][d - 1],
            Covariate::W(d) => &mut self.dsigma_dw[c - 1][d - 1],
            Covariate::Z(k) => &mut self.dsigma_dz[c - 1][k],
        }
    }

    pub fn entry(&self, c: usize, covariate: Covariate) -> f64 {
        match covariate {
            Covariate::Y(d) => self.dsigma_dy[c - 1][d - 1],
            Covariate::W(d) => self.dsigma_dw[c - 1][d - 1],
            Covariate::Z(k) => self.dsigma_dz[c - 1][k],
        }
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect();
        DerivativeMatrices {
            dsigma_dy: scale(&self.dsigma_dy),
            dsigma_dw: scale(&self.dsigma_dw),
            dsigma_dz: scale(&self.dsigma_dz),
            estimated: self.estimated.clone(),
            trimmed: self.trimmed.clone(),
        }
    }
}

/// Average derivatives from a regression on every covariate.
pub fn average_derivatives(market: &Market, assignment: &[usize], cfg: &KernelConfig) -> Result<DerivativeMatrices> {
    let all = Covariate::all(market.n_colleges(), market.d_z());
    average_derivatives_on(market, assignment, cfg, &all)
}

/// Average derivatives from a regression on a subset of covariates.
///
/// When the omitted covariates are independent of the included ones, the
/// averaged gradient of the subset regression equals the average gradient of
/// the full one, at a much lower dimension.
pub fn average_derivatives_on(
    market: &Market,
    assignment: &[usize],
    cfg: &KernelConfig,
    regressors: &[Covariate],
) -> Result<DerivativeMatrices> {
    if !(0.0..0.5).contains(&cfg.trim_fraction) {
        return Err(Error::InvalidInput(format!(
            "trim fraction {} outside [0, 0.5)",
            cfg.trim_fraction
        )));
    }
    let smoother = KernelSmoother::fit(market, assignment, regressors, cfg)?;
    let n = smoother.n_observations();
    let k = regressors.len();
    let n_c = market.n_colleges();

    let estimates: Vec<SigmaEstimate> = (0..n)
        .into_par_iter()
        .map(|i| smoother.estimate(smoother.sample_point(i), Some(i)))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| estimates[a].log_density.total_cmp(&estimates[b].log_density));
    let n_trim = (cfg.trim_fraction * n as f64).floor() as usize;
    let mut trimmed = vec![false; n];
    for &i in &order[..n_trim] {
        trimmed[i] = true;
    }
    for (i, e) in estimates.iter().enumerate() {
        if !e.log_density.is_finite() || e.gradient.iter().any(|g| !g.is_finite()) {
            trimmed[i] = true;
        }
    }
    let used: Vec<usize> = (0..n).filter(|&i| !trimmed[i]).collect();
    if used.is_empty() {
        return Err(Error::Estimation("every sample point was trimmed".into()));
    }

    let mut mats = DerivativeMatrices::zeros(n_c, market.d_z());
    mats.estimated = regressors.to_vec();
    for c in 1..=n_c {
        for (m, &cov) in regressors.iter().enumerate() {
            let avg = used.iter().map(|&i| estimates[i].gradient[c * k + m]).sum::<f64>() / used.len() as f64;
            *mats.entry_mut(c, cov) = avg;
        }
    }
    mats.trimmed = trimmed;
    Ok(mats)
}
