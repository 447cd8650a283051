//! Admission-priority counterfactuals simulated from posterior draws.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorChain;
use crate::dgp::{build_utilities, EmpiricalSpec};
use crate::error::{Error, Result};
use crate::market::{
    deferred_acceptance_with_order, CollegeOrder, LatentUtilities, Market, Matching, SchoolType,
};
use crate::rng::{stream, streams};
use crate::stats::{mean, sample_sd};

/// Students carrying tag `flag` are ranked ahead of everyone else by
/// colleges whose type is in `scope`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorityPolicy {
    pub flag: String,
    pub scope: BTreeSet<SchoolType>,
}

impl PriorityPolicy {
    pub fn new(flag: &str, scope: impl IntoIterator<Item = SchoolType>) -> Self {
        PriorityPolicy {
            flag: flag.to_string(),
            scope: scope.into_iter().collect(),
        }
    }

    /// Whether college `c` must put student `i` in the priority tier.
    pub fn prioritizes(&self, market: &Market, c: usize, i: usize) -> bool {
        self.scope.contains(&market.college(c).school_type) && market.students[i].has_tag(&self.flag)
    }
}

/// College rankings under `policy`: the priority tier first, each tier in
/// the original order. Utilities are left untouched.
pub fn apply_policy(market: &Market, utilities: &LatentUtilities, policy: &PriorityPolicy) -> CollegeOrder {
    CollegeOrder::with_priority(market, utilities, |c, i| policy.prioritizes(market, c, i))
}

/// Share of the variance of `values` explained by school membership, the
/// outside option counting as one school. NaN when `values` is constant.
pub fn sorting_index(values: &[f64], assignment: &[usize]) -> Result<f64> {
    if values.len() != assignment.len() {
        return Err(Error::InvalidInput("values and assignment differ in length".into()));
    }
    let groups = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for (&x, &a) in values.iter().zip(assignment) {
        sum[a] += x;
        count[a] += 1;
    }
    if count.iter().filter(|&&k| k > 0).count() < 2 {
        return Err(Error::InvalidInput("sorting index needs at least two occupied schools".into()));
    }
    let grand = mean(values);
    let total: f64 = values.iter().map(|x| (x - grand).powi(2)).sum();
    if total == 0.0 {
        return Ok(f64::NAN);
    }
    let within: f64 = values
        .iter()
        .zip(assignment)
        .map(|(x, &a)| (x - sum[a] / count[a] as f64).powi(2))
        .sum();
    Ok(1.0 - within / total)
}

/// Per-student utility change from `baseline` to `counterfactual`, in units
/// of the (negative) `coefficient`, e.g. kilometres of travel.
pub fn welfare_change(
    utilities: &LatentUtilities,
    counterfactual: &[usize],
    baseline: &[usize],
    coefficient: f64,
) -> Result<Vec<f64>> {
    if coefficient.is_nan() || coefficient >= 0.0 {
        return Err(Error::InvalidInput(format!(
            "welfare needs a negative numeraire coefficient, got {coefficient}"
        )));
    }
    if counterfactual.len() != baseline.len() || baseline.len() != utilities.n_students() {
        return Err(Error::InvalidInput("assignments and utilities differ in size".into()));
    }
    Ok(baseline
        .iter()
        .zip(counterfactual)
        .enumerate()
        .map(|(i, (&b, &c))| (utilities.u(i, c) - utilities.u(i, b)) / coefficient.abs())
        .collect())
}

/// Indices of `blocks` equally spaced runs of `block_size` consecutive draws.
pub fn select_draws(available: usize, blocks: usize, block_size: usize) -> Result<Vec<usize>> {
    if blocks == 0 || block_size == 0 || blocks * block_size > available {
        return Err(Error::InvalidInput(format!(
            "{blocks} blocks of {block_size} draws need more than the {available} available"
        )));
    }
    Ok((0..blocks)
        .flat_map(|k| {
            let start = k * available / blocks;
            start..start + block_size
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterfactualConfig {
    pub blocks: usize,
    pub block_size: usize,
    pub seed: u64,
    /// Student characteristics (names in `z`) whose sorting is reported.
    pub sorting_variables: Vec<String>,
    /// Parameter used as the welfare numeraire.
    pub welfare_coefficient: String,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            blocks: 15,
            block_size: 100,
            seed: 0,
            sorting_variables: vec![],
            welfare_coefficient: String::new(),
        }
    }
}

/// Across-draw mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub mean: f64,
    pub sd: f64,
}

impl Statistic {
    pub fn of(values: &[f64]) -> Self {
        Statistic {
            mean: mean(values),
            sd: if values.len() > 1 { sample_sd(values) } else { 0.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeStats {
    /// One entry per sorting variable.
    pub sorting: Vec<Statistic>,
    /// `enrollment[g][k]`: share of group `g` at column `k` of
    /// [`CounterfactualReport::enrollment_columns`].
    pub enrollment: Vec<Vec<Statistic>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWelfare {
    pub mean_change: Statistic,
    pub winners: Statistic,
    pub losers: Statistic,
    pub indifferent: Statistic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub n_draws: usize,
    pub sorting_variables: Vec<String>,
    /// `all`, the flagged group and the rest.
    pub groups: Vec<String>,
    /// `outside` followed by each school type present in the market.
    pub enrollment_columns: Vec<String>,
    pub baseline: RegimeStats,
    pub policy: RegimeStats,
    pub welfare: Vec<GroupWelfare>,
    /// Draws whose DA run had to break an exact tie.
    pub non_generic_draws: usize,
}

struct DrawOutcome {
    baseline: Regime,
    policy: Regime,
    /// Per group: mean change, winner, loser and indifferent fractions.
    welfare: Vec<[f64; 4]>,
    non_generic: bool,
}

struct Regime {
    sorting: Vec<f64>,
    enrollment: Vec<Vec<f64>>,
}

/// Latent utilities for posterior draw `theta` with fresh shocks from stream
/// `SIMULATION_BASE + index`. The returned market carries a fresh lottery.
pub fn simulate_draw(
    market: &Market,
    spec: &EmpiricalSpec,
    theta: &[f64],
    seed: u64,
    index: u64,
) -> Result<(Market, LatentUtilities)> {
    if theta.len() != spec.n_parameters() {
        return Err(Error::InvalidInput(format!(
            "draw has {} values, spec needs {}",
            theta.len(),
            spec.n_parameters()
        )));
    }
    let compiled = spec.compile(market)?;
    let (coefs, scales) = theta.split_at(spec.n_coefficients());
    let n = market.n_students();
    let n_c = market.n_colleges();
    let mut rng = stream(seed, streams::SIMULATION_BASE + index);
    let mut shocks = LatentUtilities::zeros(n, n_c);
    for i in 0..n {
        shocks.set_u(i, 0, rng.sample(StandardNormal));
        for c in 1..=n_c {
            let sd = compiled.shock_sd(c, scales);
            shocks.set_u(i, c, sd * rng.sample::<f64, _>(StandardNormal));
        }
    }
    for c in 1..=n_c {
        for i in 0..n {
            shocks.set_v(c, i, rng.sample(StandardNormal));
        }
    }
    let mut drawn = market.clone();
    for x in &mut drawn.lottery {
        *x = rng.random();
    }
    let utilities = build_utilities(spec, &drawn, coefs, &shocks)?;
    Ok((drawn, utilities))
}

/// Baseline and policy matchings under the same draw.
pub fn run_policy(market: &Market, utilities: &LatentUtilities, policy: &PriorityPolicy) -> Result<(Matching, Matching)> {
    let base_order = CollegeOrder::from_scores(market, utilities);
    let baseline = deferred_acceptance_with_order(market, utilities, &base_order)?;
    let order = apply_policy(market, utilities, policy);
    let counterfactual = deferred_acceptance_with_order(market, utilities, &order)?;
    Ok((baseline, counterfactual))
}

/// Simulates the policy over equally spaced posterior draws.
pub fn simulate_counterfactual(
    market: &Market,
    spec: &EmpiricalSpec,
    posterior: &PosteriorChain,
    policy: &PriorityPolicy,
    cfg: &CounterfactualConfig,
) -> Result<CounterfactualReport> {
    if posterior.parameter_names != spec.parameter_names() {
        return Err(Error::InvalidInput("posterior parameters do not match the model specification".into()));
    }
    let welfare_idx = spec
        .parameter_names()
        .iter()
        .position(|p| *p == cfg.welfare_coefficient)
        .ok_or_else(|| Error::schema("welfare_coefficient", format!("unknown parameter `{}`", cfg.welfare_coefficient)))?;
    let sorting_cols = cfg
        .sorting_variables
        .iter()
        .map(|v| {
            market
                .z_index(v)
                .ok_or_else(|| Error::schema("sorting_variables", format!("unknown student variable `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let draws = select_draws(posterior.n_draws(), cfg.blocks, cfg.block_size)?;

    let types: Vec<SchoolType> = market
        .colleges
        .iter()
        .map(|c| c.school_type)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let column_of = |a: usize| -> usize {
        if a == 0 {
            0
        } else {
            1 + types.iter().position(|&t| t == market.college(a).school_type).unwrap()
        }
    };
    let flagged: Vec<bool> = market.students.iter().map(|s| s.has_tag(&policy.flag)).collect();
    let group_members: [Vec<usize>; 3] = [
        (0..market.n_students()).collect(),
        (0..market.n_students()).filter(|&i| flagged[i]).collect(),
        (0..market.n_students()).filter(|&i| !flagged[i]).collect(),
    ];

    let outcomes = draws
        .par_iter()
        .enumerate()
        .map(|(k, &d)| -> Result<DrawOutcome> {
            let theta = posterior.draw(d);
            let (drawn, utilities) = simulate_draw(market, spec, theta, cfg.seed, k as u64)?;
            let (base, cf) = run_policy(&drawn, &utilities, policy)?;
            let regime = |m: &Matching| -> Result<Regime> {
                let sorting = sorting_cols
                    .iter()
                    .map(|&col| {
                        let x: Vec<f64> = drawn.students.iter().map(|s| s.z[col]).collect();
                        sorting_index(&x, &m.assignment)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let enrollment = group_members
                    .iter()
                    .map(|members| {
                        let mut shares = vec![0.0; types.len() + 1];
                        for &i in members {
                            shares[column_of(m.assignment[i])] += 1.0;
                        }
                        let total = members.len().max(1) as f64;
                        shares.iter().map(|s| s / total).collect()
                    })
                    .collect();
                Ok(Regime { sorting, enrollment })
            };
            let change = welfare_change(&utilities, &cf.assignment, &base.assignment, theta[welfare_idx])?;
            let welfare = group_members
                .iter()
                .map(|members| {
                    let m = members.len().max(1) as f64;
                    let mut total = 0.0;
                    let mut classes = [0usize; 3];
                    for &i in members {
                        let x = change[i];
                        total += x;
                        classes[if x > 0.0 {
                            0
                        } else if x < 0.0 {
                            1
                        } else {
                            2
                        }] += 1;
                    }
                    [total / m, classes[0] as f64 / m, classes[1] as f64 / m, classes[2] as f64 / m]
                })
                .collect();
            Ok(DrawOutcome {
                baseline: regime(&base)?,
                policy: regime(&cf)?,
                welfare,
                non_generic: base.non_generic || cf.non_generic,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summarize_regime = |pick: &dyn Fn(&DrawOutcome) -> &Regime| RegimeStats {
        sorting: (0..sorting_cols.len())
            .map(|v| Statistic::of(&outcomes.iter().map(|o| pick(o).sorting[v]).collect::<Vec<_>>()))
            .collect(),
        enrollment: (0..3)
            .map(|g| {
                (0..=types.len())
                    .map(|k| Statistic::of(&outcomes.iter().map(|o| pick(o).enrollment[g][k]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect(),
    };
    let welfare = (0..3)
        .map(|g| {
            let stat = |j: usize| Statistic::of(&outcomes.iter().map(|o| o.welfare[g][j]).collect::<Vec<_>>());
            GroupWelfare {
                mean_change: stat(0),
                winners: stat(1),
                losers: stat(2),
                indifferent: stat(3),
            }
        })
        .collect();
    Ok(CounterfactualReport {
        n_draws: outcomes.len(),
        sorting_variables: cfg.sorting_variables.clone(),
        groups: vec!["all".into(), policy.flag.clone(), format!("not {}", policy.flag)],
        enrollment_columns: std::iter::once("outside".to_string())
            .chain(types.iter().map(|t| t.as_str().to_string()))
            .collect(),
        baseline: summarize_regime(&|o| &o.baseline),
        policy: summarize_regime(&|o| &o.policy),
        welfare,
        non_generic_draws: outcomes.iter().filter(|o| o.non_generic).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_market, DgpConfig};
    use crate::market::{audit_with_order, deferred_acceptance, test_support::plain_market};
    use proptest::prelude::*;

    fn all_types() -> Vec<SchoolType> {
        vec![SchoolType::NonSelecting, SchoolType::SelectingA, SchoolType::SelectingB]
    }

    #[test]
    fn two_school_anova_value() {
        let r = sorting_index(&[1.0, 1.0, 3.0, 3.0, 4.0], &[1, 1, 2, 2, 2]).unwrap();
        assert!((r - 49.0 / 54.0).abs() < 1e-12);
    }

    #[test]
    fn sorting_index_edges() {
        assert_eq!(sorting_index(&[1.0, 2.0, 1.0, 2.0], &[1, 1, 2, 2]).unwrap(), 0.0);
        assert_eq!(sorting_index(&[1.0, 1.0, 5.0, 5.0], &[0, 0, 2, 2]).unwrap(), 1.0);
        assert!(sorting_index(&[3.0, 3.0, 3.0], &[0, 1, 1]).unwrap().is_nan());
        assert!(sorting_index(&[1.0, 2.0], &[1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn sorting_index_is_affine_invariant(
            values in prop::collection::vec(-10.0f64..10.0, 6..40),
            scale in 0.1f64..5.0,
            shift in -5.0f64..5.0,
        ) {
            let assignment: Vec<usize> = (0..values.len()).map(|i| i % 3).collect();
            let a = sorting_index(&values, &assignment).unwrap();
            let moved: Vec<f64> = values.iter().map(|x| scale * x + shift).collect();
            let b = sorting_index(&moved, &assignment).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn welfare_in_coefficient_units() {
        let mut u = LatentUtilities::zeros(2, 2);
        u.set_u(0, 1, 0.0);
        u.set_u(0, 2, 0.173);
        let w = welfare_change(&u, &[2, 1], &[1, 1], -0.173).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        assert!(welfare_change(&u, &[2, 1], &[1, 1], 0.0).is_err());
    }

    #[test]
    fn draw_blocks_are_equally_spaced() {
        assert_eq!(select_draws(10, 2, 3).unwrap(), vec![0, 1, 2, 5, 6, 7]);
        assert_eq!(select_draws(1500, 15, 100).unwrap().len(), 1500);
        assert!(select_draws(10, 4, 3).is_err());
    }

    #[test]
    fn flagged_lower_student_moves_first() {
        let mut market = plain_market(2, &[1]);
        market.students[1].tags.insert("low_income".into());
        let mut u = LatentUtilities::zeros(2, 1);
        u.set_v(1, 0, 1.0);
        u.set_v(1, 1, 0.0);
        let order = apply_policy(&market, &u, &PriorityPolicy::new("low_income", all_types()));
        assert!(order.prefers(1, 1, 0));
    }

    #[test]
    fn neutral_policies_reproduce_baseline() {
        let mut sim = simulate_market(&DgpConfig::benchmark().with_seed(4)).unwrap();
        for (i, s) in sim.market.students.iter_mut().enumerate() {
            if i % 3 == 0 {
                s.tags.insert("low_income".into());
            }
        }
        let base = deferred_acceptance(&sim.market, &sim.utilities).unwrap();
        let empty = PriorityPolicy::new("low_income", []);
        let (_, cf) = run_policy(&sim.market, &sim.utilities, &empty).unwrap();
        assert_eq!(cf.assignment, base.assignment);
        for s in &mut sim.market.students {
            s.tags.insert("everyone".into());
        }
        let universal = PriorityPolicy::new("everyone", all_types());
        let (_, cf) = run_policy(&sim.market, &sim.utilities, &universal).unwrap();
        assert_eq!(cf.assignment, base.assignment);
        // a real policy changes something and stays stable under its order
        let real = PriorityPolicy::new("low_income", all_types());
        let (_, cf) = run_policy(&sim.market, &sim.utilities, &real).unwrap();
        assert_ne!(cf.assignment, base.assignment);
        let order = apply_policy(&sim.market, &sim.utilities, &real);
        assert!(audit_with_order(&sim.market, &sim.utilities, &order, &cf.assignment).unwrap().is_stable());
    }

    fn fake_posterior(truth: &[f64], names: Vec<String>, n: usize) -> PosteriorChain {
        PosteriorChain {
            parameter_names: names,
            draws: (0..n).flat_map(|_| truth.iter().copied()).collect(),
            chain: 0,
            seed: 0,
            iterations: n as u64,
            burn_in: 0,
            thin: 1,
            audited_sweeps: 0,
            unstable_sweeps: 0,
        }
    }

    #[test]
    fn report_shares_and_fractions_sum_to_one() {
        let cfg_dgp = DgpConfig {
            n_students: 400,
            capacities: vec![100, 80, 100],
            ..DgpConfig::benchmark()
        }
        .with_seed(8);
        let mut sim = simulate_market(&cfg_dgp).unwrap();
        sim.market.colleges[1].school_type = SchoolType::SelectingB;
        for (i, s) in sim.market.students.iter_mut().enumerate() {
            if s.z[0] < 3.0 || i % 7 == 0 {
                s.tags.insert("low_income".into());
            }
        }
        let spec = EmpiricalSpec::benchmark(3);
        let post = fake_posterior(&sim.truth, sim.parameter_names.clone(), 40);
        let cfg = CounterfactualConfig {
            blocks: 4,
            block_size: 5,
            seed: 1,
            sorting_variables: vec!["s".into(), "m".into()],
            welfare_coefficient: "beta_d_1".into(),
        };
        let policy = PriorityPolicy::new("low_income", [SchoolType::SelectingA]);
        let rep = simulate_counterfactual(&sim.market, &spec, &post, &policy, &cfg).unwrap();
        assert_eq!(rep.n_draws, 20);
        assert_eq!(rep.enrollment_columns, vec!["outside", "selecting-a", "selecting-b"]);
        for regime in [&rep.baseline, &rep.policy] {
            for g in &regime.enrollment {
                let total: f64 = g.iter().map(|s| s.mean).sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
            assert!(regime.sorting.iter().all(|s| (0.0..=1.0).contains(&s.mean)));
        }
        for w in &rep.welfare {
            let total = w.winners.mean + w.losers.mean + w.indifferent.mean;
            assert!((total - 1.0).abs() < 1e-9);
        }
        // same seed, same report
        let again = simulate_counterfactual(&sim.market, &spec, &post, &policy, &cfg).unwrap();
        assert_eq!(rep, again);
        // an empty scope leaves everyone indifferent
        let none = PriorityPolicy::new("low_income", []);
        let rep = simulate_counterfactual(&sim.market, &spec, &post, &none, &cfg).unwrap();
        assert_eq!(rep.welfare[0].indifferent.mean, 1.0);
        assert_eq!(rep.baseline, rep.policy);
    }

    #[test]
    fn unknown_names_are_schema_errors() {
        let sim = simulate_market(&DgpConfig {
            n_students: 100,
            capacities: vec![20, 20, 20],
            ..DgpConfig::benchmark()
        })
        .unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let post = fake_posterior(&sim.truth, sim.parameter_names.clone(), 10);
        let cfg = CounterfactualConfig {
            blocks: 1,
            block_size: 2,
            welfare_coefficient: "nope".into(),
            ..Default::default()
        };
        let r = simulate_counterfactual(&sim.market, &spec, &post, &PriorityPolicy::default(), &cfg);
        assert!(matches!(r, Err(Error::Schema { .. })));
    }
}
