//! Acceptance suite. Prints one PASS/FAIL line per criterion with indented
//! details. Exits 0 regardless unless `ACCEPTANCE_STRICT=1` is set.
//!
//! Select criteria with `cargo test --test acceptance -- AC1 AC8`.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use matchest_core::bayes::{psrf, run_chains, sample_truncated_normal, GibbsConfig, PosteriorChain, Sampler};
use matchest_core::counterfactual::{run_policy, sorting_index, PriorityPolicy};
use matchest_core::dgp::{simulate_market, DgpConfig, EmpiricalSpec};
use matchest_core::market::{assignment_counts, Cutoff};
use matchest_core::montecarlo::{run_semi_mc, Estimator, McConfig};
use matchest_core::rng::stream;
use matchest_core::semiparam::{rank_condition, IndependentNormalModel, KernelConfig, MatchProbabilityModel};
use matchest_core::stats::{norm_cdf, norm_pdf};
use matchest_core::{
    audit_stability, compute_cutoffs, deferred_acceptance, stable_from_cutoffs, CollegeRecord, Gender,
    LatentUtilities, Market, Matching, SchoolType, StudentRecord,
};

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Outcome {
            pass,
            summary: summary.into(),
            details: vec![],
        }
    }

    fn detail(mut self, lines: Vec<String>) -> Self {
        self.details = lines;
        self
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- markets

struct RandomMarket {
    market: Market,
    utilities: LatentUtilities,
}

/// Markets with mixed school types, gender restrictions and capacities
/// drawn so that some colleges bind and others do not.
fn random_markets(count: usize) -> Vec<RandomMarket> {
    let mut rng = stream(2024, 0);
    (0..count)
        .map(|_| {
            let n = rng.random_range(10..=200);
            let n_c = rng.random_range(1..=5);
            let students: Vec<StudentRecord> = (0..n)
                .map(|i| StudentRecord {
                    id: i as u64 + 1,
                    y: vec![0.0; n_c],
                    w: vec![0.0; n_c],
                    z: vec![],
                    gender: Some(if rng.random_bool(0.5) { Gender::Female } else { Gender::Male }),
                    tags: BTreeSet::new(),
                })
                .collect();
            let colleges: Vec<CollegeRecord> = (0..n_c)
                .map(|c| CollegeRecord {
                    id: c as u64 + 1,
                    capacity: rng.random_range(1..=(2 * n / n_c).max(1)),
                    school_type: *SchoolType::ALL.choose(&mut rng).unwrap(),
                    attributes: vec![],
                    gender_restriction: match rng.random_range(0..6) {
                        0 => Some(Gender::Female),
                        1 => Some(Gender::Male),
                        _ => None,
                    },
                })
                .collect();
            let lottery = (0..n).map(|_| rng.random()).collect();
            let market = Market::new(students, colleges, vec![], vec![], Some(lottery)).unwrap();
            let u = (0..n * (n_c + 1)).map(|_| rng.sample(StandardNormal)).collect();
            let v = (0..n * n_c).map(|_| rng.sample(StandardNormal)).collect();
            let utilities = LatentUtilities::from_parts(n, n_c, u, v).unwrap();
            RandomMarket { market, utilities }
        })
        .collect()
}

/// Exhaustive scan for blocking pairs and individual rationality failures.
fn brute_force_violations(market: &Market, u: &LatentUtilities, assignment: &[usize]) -> (usize, usize) {
    let n = market.n_students();
    let n_c = market.n_colleges();
    let counts = assignment_counts(assignment, n_c);
    let mut blocking = 0;
    let mut ir = 0;
    for i in 0..n {
        let own = assignment[i];
        if own != 0 && u.u(i, own) < u.u(i, 0) {
            ir += 1;
        }
        for c in 1..=n_c {
            if c == own || !market.admissible(i, c) || u.u(i, c) <= u.u(i, own) {
                continue;
            }
            let slack = counts[c] < market.capacity(c);
            let displaces = (0..n)
                .filter(|&j| assignment[j] == c)
                .any(|j| u.priority_score(market, c, i) > u.priority_score(market, c, j));
            if slack || displaces {
                blocking += 1;
            }
        }
    }
    (blocking, ir)
}

fn ac1(markets: &[RandomMarket]) -> Outcome {
    let start = Instant::now();
    let mut bad = 0;
    let mut binding_patterns = BTreeSet::new();
    for m in markets {
        let matching = deferred_acceptance(&m.market, &m.utilities).unwrap();
        let report = audit_stability(&m.market, &m.utilities, &matching).unwrap();
        let (bf_blocking, bf_ir) = brute_force_violations(&m.market, &m.utilities, &matching.assignment);
        if !report.blocking_pairs.is_empty() || !report.ir_violations.is_empty() || bf_blocking + bf_ir > 0 {
            bad += 1;
        }
        binding_patterns.insert(matching.binding(&m.market).iter().filter(|&&b| b).count());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        bad == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{} markets, {bad} with blocking pairs or IR violations, {}",
            markets.len(),
            secs(elapsed)
        ),
    )
    .detail(vec![format!("binding-college counts seen: {binding_patterns:?}")])
}

fn ac2(markets: &[RandomMarket]) -> Outcome {
    let mut mismatches = 0;
    let mut not_clearing = 0;
    for m in markets {
        let da = deferred_acceptance(&m.market, &m.utilities).unwrap();
        let cutoffs = compute_cutoffs(&m.market, &m.utilities, &da.assignment).unwrap();
        let rebuilt = stable_from_cutoffs(&m.market, &m.utilities, &cutoffs).unwrap();
        mismatches += usize::from(rebuilt.matching.assignment != da.assignment);
        not_clearing += usize::from(!rebuilt.clears);
        let (b, ir) = brute_force_violations(&m.market, &m.utilities, &rebuilt.matching.assignment);
        mismatches += usize::from(b + ir > 0 && rebuilt.matching.assignment == da.assignment);
    }
    Outcome::new(
        mismatches == 0 && not_clearing == 0,
        format!(
            "{} markets, {mismatches} mismatches with DA, {not_clearing} cutoff vectors failing to clear",
            markets.len()
        ),
    )
}

// ---------------------------------------------------------------- gibbs

fn ac3_ac4() -> (Outcome, Outcome) {
    let start = Instant::now();
    let sim = simulate_market(&DgpConfig::benchmark().with_seed(1)).unwrap();
    let spec = EmpiricalSpec::benchmark(3);
    let cfg = GibbsConfig {
        iterations: 50_000,
        burn_in: 20_000,
        chains: 1,
        seed: 1,
        audit: false,
        ..GibbsConfig::default()
    };
    let observed = Matching {
        assignment: sim.matching.assignment.clone(),
        cutoffs: vec![],
        non_generic: false,
    };
    let mut sampler = Sampler::new(&sim.market, &observed.assignment, &spec, &cfg, 0).unwrap();
    let mut audits = 0;
    let mut violations = 0;
    while !sampler.is_done() {
        sampler.run_for(1000).unwrap();
        let report = audit_stability(&sim.market, &sampler.state().latent, &observed).unwrap();
        audits += 1;
        violations += report.blocking_pairs.len() + report.ir_violations.len() + report.infeasible.len();
    }
    let chain = sampler.finish();
    let elapsed = start.elapsed();
    let means = chain.posterior_means();
    let mut details = vec![format!("{:<10} {:>7} {:>8} {:>7}", "parameter", "truth", "mean", "error")];
    let mut within = 0;
    for ((name, t), m) in chain.parameter_names.iter().zip(&sim.truth).zip(&means) {
        let ok = (m - t).abs() <= 0.25;
        within += usize::from(ok);
        details.push(format!(
            "{name:<10} {t:>7.2} {m:>8.3} {:>7.3}{}",
            m - t,
            if ok { "" } else { "  outside" }
        ));
    }
    let p = means.len();
    let ac3 = Outcome::new(
        within == p && elapsed < Duration::from_secs(20 * 60),
        format!("{within}/{p} posterior means within 0.25 of truth, {}", secs(elapsed)),
    )
    .detail(details);
    let ac4 = Outcome::new(
        audits > 0 && violations == 0,
        format!("{audits} audits of the latent state, {violations} stability violations"),
    );
    (ac3, ac4)
}

fn ac5() -> Outcome {
    let start = Instant::now();
    let sim = simulate_market(&DgpConfig::benchmark().with_seed(1)).unwrap();
    let cfg = GibbsConfig {
        iterations: 30_000,
        burn_in: 10_000,
        chains: 3,
        seed: 1,
        audit: false,
        ..GibbsConfig::default()
    };
    let chains: Vec<PosteriorChain> =
        run_chains(&sim.market, &sim.matching.assignment, &EmpiricalSpec::benchmark(3), &cfg).unwrap();
    let report = psrf(&chains).unwrap();
    let share = report.share_below(1.15);
    let details = report
        .parameter_names
        .iter()
        .zip(&report.values)
        .map(|(n, r)| format!("{n:<10} {r:.3}"))
        .collect();
    Outcome::new(
        share >= 0.9,
        format!(
            "{:.1}% of PSRFs below 1.15 ({:.1}% below 1.1), {}",
            100.0 * share,
            100.0 * report.share_below(1.1),
            secs(start.elapsed())
        ),
    )
    .detail(details)
}

// ---------------------------------------------------------------- semiparametric

fn semi(estimator: Estimator, dgp: DgpConfig) -> (f64, f64, usize, usize, Duration) {
    let start = Instant::now();
    let mc = McConfig {
        samples: 20,
        estimator,
        seed: 1,
        ..McConfig::default()
    };
    let r = run_semi_mc(&dgp, &KernelConfig::default(), &mc).unwrap();
    let b = r.summary_of("beta_z").unwrap();
    let g = r.summary_of("gamma_z").unwrap();
    (b.median, g.median, r.estimates.len(), r.failures.len(), start.elapsed())
}

fn ac6() -> Outcome {
    let (b, g, ok, failed, elapsed) = semi(Estimator::SemiReduced, DgpConfig::benchmark_reduced());
    let inside = |x: f64| (0.7..=1.3).contains(&x);
    Outcome::new(
        inside(b) && inside(g) && elapsed < Duration::from_secs(15 * 60),
        format!(
            "median beta_z_1 {b:.3}, gamma_z_3 {g:.3} over {ok} samples ({failed} failed), {}",
            secs(elapsed)
        ),
    )
}

fn ac7() -> Outcome {
    let (b, g, ok, failed, elapsed) = semi(Estimator::SemiGeneral, DgpConfig::benchmark());
    Outcome::new(
        (b - 1.0).abs() > 0.3 && (g - 1.0).abs() > 0.3,
        format!(
            "general model median beta_z {b:.3}, gamma_z {g:.3} over {ok} samples ({failed} failed), {}",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- truncated normal

fn truncated_cdf(x: f64, lo: f64, hi: f64) -> f64 {
    // tail-stable for the far right region
    if lo > 0.0 {
        let s = |t: f64| norm_cdf(-t);
        (s(lo) - s(x)) / (s(lo) - s(hi))
    } else {
        (norm_cdf(x) - norm_cdf(lo)) / (norm_cdf(hi) - norm_cdf(lo))
    }
}

fn ac8() -> Outcome {
    let n = 100_000;
    let mut rng = stream(8, 0);
    let mut worst: f64 = 0.0;
    let mut details = vec![];
    let mut tail_mean = 0.0;
    for (lo, hi) in [(f64::NEG_INFINITY, f64::INFINITY), (5.0, f64::INFINITY), (-1.0, 1.0)] {
        let mut x: Vec<f64> = (0..n)
            .map(|_| sample_truncated_normal(0.0, 1.0, lo, hi, &mut rng).unwrap())
            .collect();
        x.sort_by(f64::total_cmp);
        let ks = x
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let f = truncated_cdf(v, lo, hi);
                (f - k as f64 / n as f64).abs().max(((k + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        worst = worst.max(ks);
        if lo == 5.0 {
            tail_mean = x.iter().sum::<f64>() / n as f64;
        }
        details.push(format!("({lo}, {hi}): KS {ks:.5}"));
    }
    let mills = norm_pdf(5.0) / norm_cdf(-5.0);
    let rel = (tail_mean - mills).abs() / mills;
    details.push(format!("tail mean {tail_mean:.5} vs inverse Mills {mills:.5}"));
    Outcome::new(
        worst <= 0.01 && rel <= 0.01,
        format!("max KS {worst:.5}, tail-mean relative error {rel:.2e}"),
    )
    .detail(details)
}

// ---------------------------------------------------------------- identification

fn ac9() -> Outcome {
    let (beta_y, beta_z, gamma_w, gamma_z, delta) = (-1.0, 0.8, 1.0, 0.6, 0.3);
    // closed form for one college with unit shocks on both sides
    let sigma = |y: f64, w: f64, z: f64| {
        let a = beta_y * y + beta_z * z;
        let b = gamma_w * w + gamma_z * z;
        norm_cdf(a / 2f64.sqrt()) * norm_cdf(b - delta)
    };
    let model = IndependentNormalModel {
        y_coef: vec![beta_y],
        w_coef: vec![gamma_w],
        beta: vec![vec![beta_z]],
        gamma: vec![vec![gamma_z]],
        student_sd: vec![1.0],
        cutoffs: vec![Cutoff::Finite(delta)],
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut details = vec![];
    for &(y, w, z) in &[(0.2, -0.1, 0.4), (-0.5, 0.7, 0.1), (1.0, 0.3, -0.6)] {
        let dy = (sigma(y + h, w, z) - sigma(y - h, w, z)) / (2.0 * h);
        let dw = (sigma(y, w + h, z) - sigma(y, w - h, z)) / (2.0 * h);
        let dz = (sigma(y, w, z + h) - sigma(y, w, z - h)) / (2.0 * h);
        let implied = beta_z * dy / beta_y + gamma_z * dw / gamma_w;
        let (_, grad) = model.sigma_gradient(&[y, w, z]).unwrap();
        let analytic = grad[3 + 2];
        let rel = ((dz - implied).abs() / dz.abs()).max((analytic - dz).abs() / dz.abs());
        worst = worst.max(rel);
        details.push(format!("x=({y}, {w}, {z}): dsigma/dz {dz:.10}, implied {implied:.10}"));
    }
    Outcome::new(worst <= 1e-6, format!("max relative error {worst:.2e}")).detail(details)
}

fn ac10() -> Outcome {
    let model = |third: Cutoff| IndependentNormalModel {
        y_coef: vec![-1.0; 3],
        w_coef: vec![1.0; 3],
        beta: vec![vec![1.0]; 3],
        gamma: vec![vec![1.0]; 3],
        student_sd: vec![1.0; 3],
        cutoffs: vec![Cutoff::Finite(0.4), Cutoff::Finite(-0.3), third],
    };
    let y = [0.1, -0.2, 0.3];
    let z = [0.2];
    let w1 = [0.0, 0.1, -0.1];
    let w2 = [0.8, -0.6, 0.5];
    let never = rank_condition(&model(Cutoff::NegInf), &y, &z, &w1, &w2, 1e8).unwrap();
    let interior = rank_condition(&model(Cutoff::Finite(0.2)), &y, &z, &w1, &w2, 1e8).unwrap();
    Outcome::new(
        !never.passes && interior.passes,
        format!(
            "never-binding college: rank {}/6 ({}); interior point: rank {}/6 ({})",
            never.rank,
            if never.passes { "full" } else { "deficient" },
            interior.rank,
            if interior.passes { "full" } else { "deficient" }
        ),
    )
    .detail(vec![format!(
        "condition numbers {:.3e} and {:.3e}",
        never.condition_number, interior.condition_number
    )])
}

// ---------------------------------------------------------------- counterfactual

/// `1 − SSR/SST` from least squares on an intercept and group dummies.
fn regression_r2(values: &[f64], assignment: &[usize]) -> f64 {
    let groups: Vec<usize> = assignment.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = values.len();
    let x = DMatrix::from_fn(n, groups.len(), |i, k| {
        if k == 0 {
            1.0
        } else {
            f64::from(assignment[i] == groups[k])
        }
    });
    let y = DVector::from_column_slice(values);
    let beta = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    let resid = &y - &x * beta;
    let mean = y.mean();
    1.0 - resid.norm_squared() / y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
}

fn ac11() -> Outcome {
    let cfg = DgpConfig {
        n_students: 600,
        capacities: vec![150, 140, 150],
        ..DgpConfig::benchmark()
    };
    let mut policy_mismatches = 0;
    for seed in 0..5 {
        let mut sim = simulate_market(&cfg.clone().with_seed(seed)).unwrap();
        sim.market.colleges[1].school_type = SchoolType::NonSelecting;
        for (i, s) in sim.market.students.iter_mut().enumerate() {
            if i % 3 == 0 {
                s.tags.insert("flag".into());
            }
        }
        let empty = PriorityPolicy::new("flag", []);
        let (base, cf) = run_policy(&sim.market, &sim.utilities, &empty).unwrap();
        policy_mismatches += usize::from(base.assignment != cf.assignment);
        for s in &mut sim.market.students {
            s.tags.insert("all".into());
        }
        let universal = PriorityPolicy::new("all", SchoolType::ALL);
        let (base, cf) = run_policy(&sim.market, &sim.utilities, &universal).unwrap();
        policy_mismatches += usize::from(base.assignment != cf.assignment);
    }

    let mut rng = stream(11, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(20..300);
        let groups = rng.random_range(2..=6);
        let mut assignment: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
        assignment[0] = 0;
        assignment[1] = 1;
        let values: Vec<f64> = assignment
            .iter()
            .map(|&g| g as f64 * rng.random_range(-1.0..1.0) + rng.sample::<f64, _>(StandardNormal) * 3.0 + 10.0)
            .collect();
        let ours = sorting_index(&values, &assignment).unwrap();
        worst = worst.max((ours - regression_r2(&values, &assignment)).abs());
    }
    Outcome::new(
        policy_mismatches == 0 && worst <= 1e-10,
        format!("{policy_mismatches} neutral-policy mismatches in 10 runs, max sorting-index gap {worst:.2e} over 50 datasets"),
    )
}

fn main() {
    let selected: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC"))
        .collect();
    let wanted = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let mut results: Vec<(&str, Outcome)> = vec![];
    let mut report = |id: &'static str, o: Outcome| {
        println!("{} {id:<5} {}", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        for d in &o.details {
            println!("           {d}");
        }
        results.push((id, o));
    };

    if wanted("AC1") || wanted("AC2") {
        let markets = random_markets(500);
        if wanted("AC1") {
            report("AC1", ac1(&markets));
        }
        if wanted("AC2") {
            report("AC2", ac2(&markets));
        }
    }
    if wanted("AC8") {
        report("AC8", ac8());
    }
    if wanted("AC9") {
        report("AC9", ac9());
    }
    if wanted("AC10") {
        report("AC10", ac10());
    }
    if wanted("AC11") {
        report("AC11", ac11());
    }
    if wanted("AC6") {
        report("AC6", ac6());
    }
    if wanted("AC7") {
        report("AC7", ac7());
    }
    if wanted("AC3") || wanted("AC4") {
        let (a3, a4) = ac3_ac4();
        if wanted("AC3") {
            report("AC3", a3);
        }
        if wanted("AC4") {
            report("AC4", a4);
        }
    }
    if wanted("AC5") {
        report("AC5", ac5());
    }

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({})", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
