//! Monte Carlo harness: repeated simulation and estimation with
//! Median / Mean / Std. Dev. summaries across samples.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{run_chains, GibbsConfig};
use crate::dgp::{simulate_market, DgpConfig, EmpiricalSpec};
use crate::error::{Error, Result};
use crate::rng::sample_seed;
use crate::semiparam::{estimate_coefficients, Blocking, CoefficientRoles, KernelConfig, SharedModel};
use crate::stats::Summary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    Bayes,
    /// Average derivatives with `z` shared by every utility.
    SemiGeneral,
    /// Average derivatives with `z` entering the first student utility and
    /// the last college valuation only.
    SemiReduced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub samples: usize,
    pub estimator: Estimator,
    /// Sample `k` uses seed `sample_seed(seed, k)` for both data and sampler.
    pub seed: u64,
    pub blocking: Blocking,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 10,
            estimator: Estimator::Bayes,
            seed: 1,
            blocking: Blocking::PerSystem,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    /// One row per successful sample.
    pub estimates: Vec<Vec<f64>>,
    pub sample_seeds: Vec<u64>,
    /// Samples whose estimation failed, with the error message.
    pub failures: Vec<(u64, String)>,
    /// Samples in which some capacity did not bind.
    pub non_binding_samples: usize,
}

impl McResult {
    pub fn summaries(&self) -> Vec<Summary> {
        (0..self.parameter_names.len())
            .map(|j| Summary::of(&self.estimates.iter().map(|e| e[j]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn summary_of(&self, name: &str) -> Option<Summary> {
        let j = self.parameter_names.iter().position(|n| n == name)?;
        Some(self.summaries()[j])
    }
}

type SampleOutcome = (u64, bool, Result<(Vec<String>, Vec<f64>, Vec<f64>)>);

fn collect(outcomes: Vec<SampleOutcome>) -> Result<McResult> {
    let mut out = McResult {
        parameter_names: vec![],
        truth: vec![],
        estimates: vec![],
        sample_seeds: vec![],
        failures: vec![],
        non_binding_samples: 0,
    };
    for (seed, binding, res) in outcomes {
        out.non_binding_samples += usize::from(!binding);
        match res {
            Ok((names, truth, est)) => {
                if out.parameter_names.is_empty() {
                    out.parameter_names = names;
                    out.truth = truth;
                }
                out.estimates.push(est);
                out.sample_seeds.push(seed);
            }
            Err(e) => out.failures.push((seed, e.to_string())),
        }
    }
    if out.estimates.is_empty() {
        let reason = out.failures.first().map_or("no samples requested".to_string(), |f| f.1.clone());
        return Err(Error::Estimation(format!("every Monte Carlo sample failed: {reason}")));
    }
    Ok(out)
}

/// Posterior means, averaged over chains, for each sample.
pub fn run_bayes_mc(dgp: &DgpConfig, gibbs: &GibbsConfig, mc: &McConfig) -> Result<McResult> {
    dgp.validate()?;
    gibbs.validate()?;
    let spec = EmpiricalSpec::benchmark(dgp.n_colleges());
    let outcomes = (0..mc.samples as u64)
        .into_par_iter()
        .map(|k| {
            let seed = sample_seed(mc.seed, k);
            let sim = match simulate_market(&dgp.clone().with_seed(seed)) {
                Ok(s) => s,
                Err(e) => return (seed, true, Err(e)),
            };
            let cfg = GibbsConfig { seed, ..gibbs.clone() };
            let res = run_chains(&sim.market, &sim.matching.assignment, &spec, &cfg).map(|chains| {
                let p = sim.parameter_names.len();
                let mut means = vec![0.0; p];
                for ch in &chains {
                    for (m, x) in means.iter_mut().zip(ch.posterior_means()) {
                        *m += x / chains.len() as f64;
                    }
                }
                (sim.parameter_names.clone(), sim.truth.clone(), means)
            });
            (seed, sim.all_binding(), res)
        })
        .collect();
    collect(outcomes)
}

/// Semiparametric coefficient estimates for each sample. Shared-covariate
/// estimates are reported for all rows and for every pair of rows.
pub fn run_semi_mc(dgp: &DgpConfig, kernel: &KernelConfig, mc: &McConfig) -> Result<McResult> {
    dgp.validate()?;
    let n_c = dgp.n_colleges();
    let model = match mc.estimator {
        Estimator::SemiGeneral => SharedModel::General,
        Estimator::SemiReduced => SharedModel::Reduced {
            student_college: 1,
            college_college: n_c,
        },
        Estimator::Bayes => return Err(Error::InvalidInput("run_semi_mc needs a semiparametric estimator".into())),
    };
    let (beta_z, gamma_z) = match model {
        SharedModel::General => (dgp.beta_z[0], dgp.gamma_z[0]),
        SharedModel::Reduced { .. } => (dgp.beta_z[0], dgp.gamma_z[n_c - 1]),
    };
    let roles = CoefficientRoles {
        y_coef: dgp.beta_d.clone(),
        w_coef: dgp.gamma_w.clone(),
        ..CoefficientRoles::benchmark(n_c)
    };
    let outcomes = (0..mc.samples as u64)
        .into_par_iter()
        .map(|k| {
            let seed = sample_seed(mc.seed, k);
            let sim = match simulate_market(&dgp.clone().with_seed(seed)) {
                Ok(s) => s,
                Err(e) => return (seed, true, Err(e)),
            };
            let res = estimate_coefficients(&sim.market, &sim.matching.assignment, kernel, model, &roles, mc.blocking)
                .map(|fit| {
                    let est = &fit.estimates;
                    let mut names = vec![];
                    let mut truth = vec![];
                    let mut values = vec![];
                    for c in 0..n_c {
                        names.push(format!("beta_s_{}", c + 1));
                        truth.push(dgp.beta_s[c]);
                        values.push(est.beta_s[c]);
                    }
                    for c in 0..n_c {
                        names.push(format!("gamma_m_{}", c + 1));
                        truth.push(dgp.gamma_m[c]);
                        values.push(est.gamma_m[c]);
                    }
                    for sh in &est.shared {
                        let suffix = if sh.rows.len() == n_c {
                            String::new()
                        } else {
                            format!("_rows_{}", sh.rows.iter().map(usize::to_string).collect::<Vec<_>>().join("_"))
                        };
                        names.push(format!("beta_z{suffix}"));
                        truth.push(beta_z);
                        values.push(sh.beta_z);
                        names.push(format!("gamma_z{suffix}"));
                        truth.push(gamma_z);
                        values.push(sh.gamma_z);
                    }
                    (names, truth, values)
                });
            (seed, sim.all_binding(), res)
        })
        .collect();
    collect(outcomes)
}

pub fn run_mc(dgp: &DgpConfig, gibbs: &GibbsConfig, kernel: &KernelConfig, mc: &McConfig) -> Result<McResult> {
    match mc.estimator {
        Estimator::Bayes => run_bayes_mc(dgp, gibbs, mc),
        _ => run_semi_mc(dgp, kernel, mc),
    }
}
