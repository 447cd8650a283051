//! Model-fit diagnostics: prediction rates and RMSEs of match-partner
//! characteristics, against a pure-noise benchmark.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorChain;
use crate::counterfactual::{select_draws, simulate_draw};
use crate::dgp::EmpiricalSpec;
use crate::error::{Error, Result};
use crate::market::{assignment_counts, check_assignment, deferred_acceptance, LatentUtilities, Market, Matching};
use crate::rng::{stream, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Posterior draws are taken in `blocks` evenly spaced runs of `block_size`.
    pub blocks: usize,
    pub block_size: usize,
    /// Simulations of the pure-noise benchmark.
    pub benchmark_simulations: usize,
    pub seed: u64,
    /// Student characteristics for panel A; empty means all.
    pub characteristics: Vec<String>,
    /// School attributes for panel B; empty means all.
    pub attributes: Vec<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            blocks: 10,
            block_size: 10,
            benchmark_simulations: 100,
            seed: 0,
            characteristics: vec![],
            attributes: vec![],
        }
    }
}

/// Percentages in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRates {
    pub students_correct_school: f64,
    /// The outside option counts as its own type.
    pub students_correct_type: f64,
    pub schools_correct_binding: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub n_simulations: usize,
    pub rates: PredictionRates,
    /// School-level means of student characteristics.
    pub panel_a: Vec<(String, f64)>,
    /// Attributes of the matched school, per student and simulation.
    pub panel_b: Vec<(String, f64)>,
    /// `(school, simulation)` terms dropped because the school was empty.
    pub skipped_terms: usize,
    /// Schools left out of panel A because they are empty in the data.
    pub excluded_schools: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitComparison {
    pub model: FitReport,
    pub benchmark: FitReport,
}

fn check_simulations(market: &Market, simulations: &[Vec<usize>], observed: &[usize]) -> Result<()> {
    if simulations.is_empty() {
        return Err(Error::InvalidInput("need at least one simulation".into()));
    }
    check_assignment(market, observed)?;
    simulations.iter().try_for_each(|s| check_assignment(market, s))
}

fn binding(market: &Market, assignment: &[usize]) -> Vec<bool> {
    let counts = assignment_counts(assignment, market.n_colleges());
    (1..=market.n_colleges()).map(|c| counts[c] == market.capacity(c)).collect()
}

/// Share of correctly predicted schools, school types and binding statuses,
/// averaged over simulations.
pub fn prediction_rates(market: &Market, simulations: &[Vec<usize>], observed: &[usize]) -> Result<PredictionRates> {
    check_simulations(market, simulations, observed)?;
    let n = market.n_students() as f64;
    let m = simulations.len() as f64;
    let type_of = |a: usize| (a != 0).then(|| market.college(a).school_type);
    let obs_binding = binding(market, observed);
    let mut school = 0usize;
    let mut kind = 0usize;
    let mut bind = 0usize;
    for sim in simulations {
        for (i, &a) in sim.iter().enumerate() {
            school += usize::from(a == observed[i]);
            kind += usize::from(type_of(a) == type_of(observed[i]));
        }
        bind += binding(market, sim).iter().zip(&obs_binding).filter(|(a, b)| a == b).count();
    }
    Ok(PredictionRates {
        students_correct_school: 100.0 * school as f64 / (n * m),
        students_correct_type: 100.0 * kind as f64 / (n * m),
        schools_correct_binding: 100.0 * bind as f64 / (market.n_colleges() as f64 * m),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchoolMeanRmse {
    pub rmse: Vec<(String, f64)>,
    /// `(school, simulation)` terms dropped because the simulated school was empty.
    pub skipped_terms: usize,
    /// Schools empty in the observed matching.
    pub excluded_schools: Vec<usize>,
}

/// Panel A: `sqrt(1/(M·C) Σ_m Σ_c (x̄_cm − x̄_c)²)` for every named student
/// characteristic.
pub fn rmse_school_means(
    market: &Market,
    simulations: &[Vec<usize>],
    observed: &[usize],
    characteristics: &[String],
) -> Result<SchoolMeanRmse> {
    check_simulations(market, simulations, observed)?;
    let cols = characteristics
        .iter()
        .map(|v| market.z_index(v).ok_or_else(|| Error::schema("fit", format!("unknown student variable `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    let n_c = market.n_colleges();
    let means = |assignment: &[usize], col: usize| -> Vec<Option<f64>> {
        let mut sum = vec![0.0; n_c + 1];
        let mut count = vec![0usize; n_c + 1];
        for (i, &a) in assignment.iter().enumerate() {
            sum[a] += market.students[i].z[col];
            count[a] += 1;
        }
        (0..=n_c).map(|c| (count[c] > 0).then(|| sum[c] / count[c] as f64)).collect()
    };
    let counts = assignment_counts(observed, n_c);
    let excluded: Vec<usize> = (1..=n_c).filter(|&c| counts[c] == 0).collect();
    let skipped = simulations
        .iter()
        .map(|sim| {
            let sim_counts = assignment_counts(sim, n_c);
            (1..=n_c).filter(|&c| sim_counts[c] == 0 && counts[c] > 0).count()
        })
        .sum();
    let mut out = Vec::with_capacity(cols.len());
    for (name, &col) in characteristics.iter().zip(&cols) {
        let obs = means(observed, col);
        let mut ss = 0.0;
        let mut terms = 0usize;
        for sim in simulations {
            let pred = means(sim, col);
            for c in 1..=n_c {
                if let (Some(p), Some(o)) = (pred[c], obs[c]) {
                    ss += (p - o).powi(2);
                    terms += 1;
                }
            }
        }
        out.push((name.clone(), if terms > 0 { (ss / terms as f64).sqrt() } else { f64::NAN }));
    }
    Ok(SchoolMeanRmse {
        rmse: out,
        skipped_terms: skipped,
        excluded_schools: excluded,
    })
}

/// Panel B: RMSE of matched-school attributes over every (student,
/// simulation) pair where the student is matched in both.
pub fn rmse_matched_attributes(
    market: &Market,
    simulations: &[Vec<usize>],
    observed: &[usize],
    attributes: &[String],
) -> Result<Vec<(String, f64)>> {
    check_simulations(market, simulations, observed)?;
    attributes
        .iter()
        .map(|name| {
            let a = market
                .attribute_index(name)
                .ok_or_else(|| Error::schema("fit", format!("unknown school attribute `{name}`")))?;
            let mut ss = 0.0;
            let mut terms = 0usize;
            for sim in simulations {
                for (i, &s) in sim.iter().enumerate() {
                    let o = observed[i];
                    if s != 0 && o != 0 {
                        ss += (market.college(s).attributes[a] - market.college(o).attributes[a]).powi(2);
                        terms += 1;
                    }
                }
            }
            Ok((name.clone(), if terms > 0 { (ss / terms as f64).sqrt() } else { f64::NAN }))
        })
        .collect()
}

/// Both panels and the prediction rates. Empty name lists mean every student
/// characteristic and every school attribute.
pub fn fit_report(
    market: &Market,
    simulations: &[Vec<usize>],
    observed: &[usize],
    characteristics: &[String],
    attributes: &[String],
) -> Result<FitReport> {
    let characteristics = if characteristics.is_empty() { &market.z_names[..] } else { characteristics };
    let attributes = if attributes.is_empty() { &market.attribute_names[..] } else { attributes };
    let rates = prediction_rates(market, simulations, observed)?;
    let SchoolMeanRmse {
        rmse: panel_a,
        skipped_terms,
        excluded_schools,
    } = rmse_school_means(market, simulations, observed, characteristics)?;
    let panel_b = rmse_matched_attributes(market, simulations, observed, attributes)?;
    Ok(FitReport {
        n_simulations: simulations.len(),
        rates,
        panel_a,
        panel_b,
        skipped_terms,
        excluded_schools,
    })
}

/// DA on utilities that are pure standard normal noise on both sides, with
/// a fresh lottery. Capacities and gender restrictions are kept.
pub fn random_benchmark(market: &Market, n_sims: usize, seed: u64) -> Result<Vec<Matching>> {
    (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(seed, streams::SIMULATION_BASE + s as u64);
            let n = market.n_students();
            let n_c = market.n_colleges();
            let u = (0..n * (n_c + 1)).map(|_| rng.sample(StandardNormal)).collect();
            let v = (0..n * n_c).map(|_| rng.sample(StandardNormal)).collect();
            let utilities = LatentUtilities::from_parts(n, n_c, u, v)?;
            let mut drawn = market.clone();
            for x in &mut drawn.lottery {
                *x = rng.random();
            }
            deferred_acceptance(&drawn, &utilities)
        })
        .collect()
}

/// Matchings simulated from equally spaced posterior draws with fresh shocks.
pub fn model_simulations(
    market: &Market,
    spec: &EmpiricalSpec,
    posterior: &PosteriorChain,
    blocks: usize,
    block_size: usize,
    seed: u64,
) -> Result<Vec<Matching>> {
    let draws = select_draws(posterior.n_draws(), blocks, block_size)?;
    draws
        .par_iter()
        .enumerate()
        .map(|(k, &d)| {
            let (drawn, utilities) = simulate_draw(market, spec, posterior.draw(d), seed, k as u64)?;
            deferred_acceptance(&drawn, &utilities)
        })
        .collect()
}

/// Model and benchmark fit from posterior draws of one chain.
pub fn compare_fit(
    market: &Market,
    observed: &[usize],
    spec: &EmpiricalSpec,
    posterior: &PosteriorChain,
    cfg: &FitConfig,
) -> Result<FitComparison> {
    let assignments = |ms: Vec<Matching>| ms.into_iter().map(|m| m.assignment).collect::<Vec<_>>();
    let model = assignments(model_simulations(market, spec, posterior, cfg.blocks, cfg.block_size, cfg.seed)?);
    let bench = assignments(random_benchmark(market, cfg.benchmark_simulations, cfg.seed)?);
    Ok(FitComparison {
        model: fit_report(market, &model, observed, &cfg.characteristics, &cfg.attributes)?,
        benchmark: fit_report(market, &bench, observed, &cfg.characteristics, &cfg.attributes)?,
    })
}
