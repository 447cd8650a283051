use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use matchest_core::bayes::{psrf, run_chain_checkpointed, summarize, PosteriorChain};
use matchest_core::counterfactual::simulate_counterfactual;
use matchest_core::dgp::simulate_market;
use matchest_core::io::{
    fmt_real, load_market_dir, read_chain, read_utilities, save_market_dir, write_chain, write_cutoffs,
    write_parameters, write_table, write_utilities, RunConfig, THREADS_ENV,
};
use matchest_core::modelfit::compare_fit;
use matchest_core::montecarlo::{run_mc, Estimator};
use matchest_core::semiparam::{
    estimate_coefficients, rank_condition, CoefficientRoles, Covariate, KernelSmoother, SharedModel,
};
use matchest_core::{audit_stability, compute_cutoffs, Matching};

#[derive(Parser)]
#[command(name = "matchest", version, about = "Simulate and estimate many-to-one matching markets")]
struct Cli {
    /// Worker threads; overrides MATCHEST_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        let cfg = cfg.resolved();
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        cfg.write_snapshot(&out)?;
        Ok((cfg, out))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SemiModel {
    General,
    Reduced,
}

#[derive(Clone, Copy, ValueEnum)]
enum McEstimator {
    Bayes,
    SemiGeneral,
    SemiReduced,
}

#[derive(Subcommand)]
enum Command {
    /// Draws a market from the configured design and writes its tables.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Runs the Gibbs sampler on a market directory.
    EstimateBayes {
        #[command(flatten)]
        common: Common,
        /// Directory holding students.csv, schools.csv and schema.toml.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        chains: Option<usize>,
        /// Sweeps between checkpoints.
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: u64,
        /// Continue from existing checkpoints in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Kernel average-derivative estimates on a market directory.
    EstimateSemi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "general")]
        model: SemiModel,
    },
    /// Stability of the observed matching and the local rank condition.
    Audit {
        #[arg(long)]
        data: PathBuf,
        /// Latent utilities; defaults to utilities.csv in the data directory.
        #[arg(long)]
        utilities: Option<PathBuf>,
        /// Condition-number limit for the rank report.
        #[arg(long, default_value_t = 1e8)]
        threshold: f64,
    },
    /// Simulates a priority policy over posterior draws.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Chain files written by estimate-bayes; draws are concatenated.
        #[arg(long, required = true, num_args = 1..)]
        chain: Vec<PathBuf>,
    },
    /// Model fit against the pure-noise benchmark.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        chain: Vec<PathBuf>,
    },
    /// Monte Carlo study over repeated simulated samples.
    Mc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        burn_in: Option<u64>,
        #[arg(long, value_enum)]
        estimator: Option<McEstimator>,
    },
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_chains(paths: &[PathBuf]) -> Result<PosteriorChain> {
    let mut names: Option<Vec<String>> = None;
    let mut draws = vec![];
    for p in paths {
        let (n, d) = read_chain(p)?;
        match &names {
            Some(prev) if *prev != n => bail!("{} has different parameters from the other chains", p.display()),
            Some(_) => {}
            None => names = Some(n),
        }
        draws.extend(d);
    }
    let parameter_names = names.unwrap_or_default();
    let p = parameter_names.len().max(1);
    Ok(PosteriorChain {
        parameter_names,
        iterations: (draws.len() / p) as u64,
        draws,
        chain: 0,
        seed: 0,
        burn_in: 0,
        thin: 1,
        audited_sweeps: 0,
        unstable_sweeps: 0,
    })
}

fn simulate(common: &Common) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let sim = simulate_market(&cfg.dgp)?;
    save_market_dir(&out, &sim.market, &sim.matching.assignment)?;
    write_parameters(&out.join("truth.csv"), &sim.parameter_names, &sim.truth)?;
    write_utilities(&out.join("utilities.csv"), &sim.market, &sim.utilities)?;
    write_cutoffs(&out.join("cutoffs.csv"), &sim.market, &sim.matching.assignment, &sim.matching.cutoffs)?;
    println!(
        "simulated {} students, {} schools into {}",
        sim.market.n_students(),
        sim.market.n_colleges(),
        out.display()
    );
    if !sim.all_binding() {
        eprintln!("warning: schools {:?} have unfilled seats", sim.non_binding);
    }
    Ok(())
}

fn estimate_bayes(
    common: &Common,
    data: &Path,
    iterations: Option<u64>,
    chains: Option<usize>,
    every: u64,
    resume: bool,
) -> Result<()> {
    let (mut cfg, out) = common.resolve()?;
    if let Some(n) = iterations {
        cfg.gibbs.iterations = n;
    }
    if let Some(n) = chains {
        cfg.gibbs.chains = n;
    }
    if iterations.is_some() || chains.is_some() {
        cfg.write_snapshot(&out)?;
    }
    let loaded = load_market_dir(data)?;
    let spec = cfg.spec();
    let results: Vec<PosteriorChain> = {
        use rayon::prelude::*;
        (0..cfg.gibbs.chains)
            .into_par_iter()
            .map(|k| {
                let cp = out.join(format!("checkpoint_{k}.json"));
                run_chain_checkpointed(&loaded.market, &loaded.observed, &spec, &cfg.gibbs, k, &cp, every, resume)
            })
            .collect::<matchest_core::Result<_>>()?
    };
    for ch in &results {
        write_chain(&out.join(format!("chain_{}.csv", ch.chain)), ch)?;
    }
    let summary = summarize(&results)?;
    let header = ["parameter", "mean", "median", "sd", "psrf"].map(String::from);
    let rows: Vec<Vec<String>> = (0..summary.parameter_names.len())
        .map(|j| {
            vec![
                summary.parameter_names[j].clone(),
                fmt_real(summary.mean[j]),
                fmt_real(summary.median[j]),
                fmt_real(summary.sd[j]),
                summary.psrf.as_ref().map_or("nan".into(), |p| fmt_real(p.values[j])),
            ]
        })
        .collect();
    write_table(&out.join("estimates.csv"), &header, &rows)?;
    println!("{:<12} {:>10} {:>10} {:>10} {:>8}", "parameter", "mean", "median", "sd", "psrf");
    for r in &rows {
        let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<12} {:>10.4} {:>10.4} {:>10.4} {:>8.4}", r[0], f(&r[1]), f(&r[2]), f(&r[3]), f(&r[4]));
    }
    let unstable: u64 = results.iter().map(|c| c.unstable_sweeps).sum();
    let audited: u64 = results.iter().map(|c| c.audited_sweeps).sum();
    if audited > 0 {
        println!("{unstable} unstable sweeps out of {audited} audited");
    }
    if results.len() > 1 {
        let report = psrf(&results)?;
        println!("{:.1}% of PSRFs below 1.1", 100.0 * report.share_below(1.1));
    }
    Ok(())
}

fn estimate_semi(common: &Common, data: &Path, model: SemiModel) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let loaded = load_market_dir(data)?;
    let n_c = loaded.market.n_colleges();
    let roles = CoefficientRoles {
        y_coef: cfg.dgp.beta_d.clone(),
        w_coef: cfg.dgp.gamma_w.clone(),
        ..CoefficientRoles::benchmark(n_c)
    };
    let shared = match model {
        SemiModel::General => SharedModel::General,
        SemiModel::Reduced => SharedModel::Reduced {
            student_college: 1,
            college_college: n_c,
        },
    };
    let fit = estimate_coefficients(
        &loaded.market,
        &loaded.observed,
        &cfg.kernel,
        shared,
        &roles,
        cfg.mc.blocking,
    )?;
    let est = &fit.estimates;
    let mut names = vec![];
    let mut values = vec![];
    for (c, b) in est.beta_s.iter().enumerate() {
        names.push(format!("beta_s_{}", c + 1));
        values.push(*b);
    }
    for (c, g) in est.gamma_m.iter().enumerate() {
        names.push(format!("gamma_m_{}", c + 1));
        values.push(*g);
    }
    for sh in &est.shared {
        let rows = sh.rows.iter().map(usize::to_string).collect::<Vec<_>>().join("_");
        names.push(format!("beta_z_rows_{rows}"));
        values.push(sh.beta_z);
        names.push(format!("gamma_z_rows_{rows}"));
        values.push(sh.gamma_z);
    }
    write_parameters(&out.join("semi_estimates.csv"), &names, &values)?;
    for (n, v) in names.iter().zip(&values) {
        println!("{n:<18} {v:>10.4}");
    }
    Ok(())
}

fn audit(data: &Path, utilities: Option<&Path>, threshold: f64) -> Result<()> {
    let loaded = load_market_dir(data)?;
    let market = &loaded.market;
    let path = utilities.map_or_else(|| data.join("utilities.csv"), Path::to_path_buf);
    let u = read_utilities(&path, market)?;
    let matching = Matching {
        cutoffs: compute_cutoffs(market, &u, &loaded.observed)?,
        assignment: loaded.observed.clone(),
        non_generic: false,
    };
    let report = audit_stability(market, &u, &matching)?;
    println!("{} blocking pairs", report.blocking_pairs.len());
    println!("{} individual rationality violations", report.ir_violations.len());
    println!("{} capacity or eligibility violations", report.infeasible.len());
    for (c, b) in loaded.binding.iter().enumerate() {
        println!("school {} binding {b}", market.college(c + 1).id);
    }

    let n_c = market.n_colleges();
    let smoother = KernelSmoother::fit(
        market,
        &loaded.observed,
        &Covariate::all(n_c, market.d_z()),
        &Default::default(),
    )?;
    let col_mean = |f: &dyn Fn(usize) -> f64| (0..market.n_students()).map(f).sum::<f64>() / market.n_students() as f64;
    let y: Vec<f64> = (0..n_c).map(|c| col_mean(&|i| market.students[i].y[c])).collect();
    let w1: Vec<f64> = (0..n_c).map(|c| col_mean(&|i| market.students[i].w[c])).collect();
    let w2: Vec<f64> = (0..n_c)
        .map(|c| {
            let sd = col_mean(&|i| (market.students[i].w[c] - w1[c]).powi(2)).sqrt();
            w1[c] + sd
        })
        .collect();
    let z: Vec<f64> = (0..market.d_z()).map(|k| col_mean(&|i| market.students[i].z[k])).collect();
    let rank = rank_condition(&smoother, &y, &z, &w1, &w2, threshold)?;
    println!(
        "rank condition: rank {} of {}, condition number {:.3e}, {}",
        rank.rank,
        rank.cols,
        rank.condition_number,
        if rank.passes { "full rank" } else { "rank deficient" }
    );
    Ok(())
}

fn counterfactual(common: &Common, data: &Path, chains: &[PathBuf]) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let loaded = load_market_dir(data)?;
    let posterior = load_chains(chains)?;
    let mut cf = cfg.counterfactual.clone();
    if cf.sorting_variables.is_empty() {
        cf.sorting_variables = loaded.market.z_names.clone();
    }
    if cf.welfare_coefficient.is_empty() {
        cf.welfare_coefficient = posterior
            .parameter_names
            .iter()
            .find(|n| n.starts_with("beta_d"))
            .cloned()
            .context("no welfare coefficient configured and no beta_d parameter found")?;
    }
    let report = simulate_counterfactual(&loaded.market, &cfg.spec(), &posterior, &cfg.policy.policy(), &cf)?;
    fs::write(out.join("counterfactual.json"), serde_json::to_string_pretty(&report)?)?;

    let mut header = vec!["regime".to_string(), "group".to_string()];
    header.extend(report.enrollment_columns.iter().cloned());
    let mut rows = vec![];
    for (regime, stats) in [("baseline", &report.baseline), ("policy", &report.policy)] {
        for (g, group) in report.groups.iter().enumerate() {
            let mut row = vec![regime.to_string(), group.clone()];
            row.extend(stats.enrollment[g].iter().map(|s| fmt_real(s.mean)));
            rows.push(row);
        }
    }
    write_table(&out.join("enrollment.csv"), &header, &rows)?;

    println!("{} posterior draws", report.n_draws);
    println!("{:<10} {:>10} {:>10}", "sorting", "baseline", "policy");
    for (k, v) in report.sorting_variables.iter().enumerate() {
        println!("{v:<10} {:>10.4} {:>10.4}", report.baseline.sorting[k].mean, report.policy.sorting[k].mean);
    }
    println!("{:<12} {:>10} {:>8} {:>8} {:>8}", "welfare", "mean", "winners", "losers", "same");
    for (g, w) in report.groups.iter().zip(&report.welfare) {
        println!(
            "{g:<12} {:>10.4} {:>8.3} {:>8.3} {:>8.3}",
            w.mean_change.mean, w.winners.mean, w.losers.mean, w.indifferent.mean
        );
    }
    Ok(())
}

fn fit(common: &Common, data: &Path, chains: &[PathBuf]) -> Result<()> {
    let (cfg, out) = common.resolve()?;
    let loaded = load_market_dir(data)?;
    let posterior = load_chains(chains)?;
    let cmp = compare_fit(&loaded.market, &loaded.observed, &cfg.spec(), &posterior, &cfg.fit)?;
    fs::write(out.join("fit.json"), serde_json::to_string_pretty(&cmp)?)?;
    let mut rows = vec![];
    let rate = |label: &str, m: f64, b: f64| vec![label.to_string(), fmt_real(m), fmt_real(b)];
    rows.push(rate(
        "pct_students_correct_school",
        cmp.model.rates.students_correct_school,
        cmp.benchmark.rates.students_correct_school,
    ));
    rows.push(rate(
        "pct_students_correct_type",
        cmp.model.rates.students_correct_type,
        cmp.benchmark.rates.students_correct_type,
    ));
    rows.push(rate(
        "pct_schools_correct_binding",
        cmp.model.rates.schools_correct_binding,
        cmp.benchmark.rates.schools_correct_binding,
    ));
    for ((n, m), (_, b)) in cmp.model.panel_a.iter().zip(&cmp.benchmark.panel_a) {
        rows.push(rate(&format!("rmse_school_mean_{n}"), *m, *b));
    }
    for ((n, m), (_, b)) in cmp.model.panel_b.iter().zip(&cmp.benchmark.panel_b) {
        rows.push(rate(&format!("rmse_matched_{n}"), *m, *b));
    }
    write_table(&out.join("fit.csv"), &["measure".into(), "model".into(), "benchmark".into()], &rows)?;
    println!("{:<32} {:>12} {:>12}", "", "model", "benchmark");
    for r in &rows {
        let f = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        println!("{:<32} {:>12.4} {:>12.4}", r[0], f(&r[1]), f(&r[2]));
    }
    if cmp.model.skipped_terms > 0 {
        eprintln!("note: {} empty school-simulation terms skipped", cmp.model.skipped_terms);
    }
    Ok(())
}

fn mc(
    common: &Common,
    samples: Option<usize>,
    iterations: Option<u64>,
    burn_in: Option<u64>,
    estimator: Option<McEstimator>,
) -> Result<()> {
    let (mut cfg, out) = common.resolve()?;
    if let Some(n) = samples {
        cfg.mc.samples = n;
    }
    if let Some(n) = iterations {
        cfg.gibbs.iterations = n;
    }
    if let Some(n) = burn_in {
        cfg.gibbs.burn_in = n;
    } else if iterations.is_some() && cfg.gibbs.burn_in >= cfg.gibbs.iterations {
        cfg.gibbs.burn_in = cfg.gibbs.iterations * 2 / 5;
    }
    if let Some(e) = estimator {
        cfg.mc.estimator = match e {
            McEstimator::Bayes => Estimator::Bayes,
            McEstimator::SemiGeneral => Estimator::SemiGeneral,
            McEstimator::SemiReduced => Estimator::SemiReduced,
        };
    }
    cfg.write_snapshot(&out)?;
    let result = run_mc(&cfg.dgp, &cfg.gibbs, &cfg.kernel, &cfg.mc)?;
    let summaries = result.summaries();
    let header = ["parameter", "truth", "median", "mean", "sd"].map(String::from);
    let rows: Vec<Vec<String>> = result
        .parameter_names
        .iter()
        .zip(&result.truth)
        .zip(&summaries)
        .map(|((n, t), s)| vec![n.clone(), fmt_real(*t), fmt_real(s.median), fmt_real(s.mean), fmt_real(s.sd)])
        .collect();
    write_table(&out.join("mc_summary.csv"), &header, &rows)?;
    let mut est_header = vec!["sample_seed".to_string()];
    est_header.extend(result.parameter_names.iter().cloned());
    let est_rows: Vec<Vec<String>> = result
        .sample_seeds
        .iter()
        .zip(&result.estimates)
        .map(|(s, e)| std::iter::once(s.to_string()).chain(e.iter().map(|&x| fmt_real(x))).collect())
        .collect();
    write_table(&out.join("mc_estimates.csv"), &est_header, &est_rows)?;

    println!("{:<18} {:>7} | {:>8} | {:>8} | {:>9}", "", "Truth", "Median", "Mean", "Std. Dev.");
    for ((n, t), s) in result.parameter_names.iter().zip(&result.truth).zip(&summaries) {
        println!("{n:<18} {t:>7.2} | {:>8.2} | {:>8.2} | {:>9.2}", s.median, s.mean, s.sd);
    }
    println!("{} samples, {} failed", result.estimates.len(), result.failures.len());
    for (seed, msg) in &result.failures {
        eprintln!("sample {seed}: {msg}");
    }
    if result.non_binding_samples > 0 {
        eprintln!("warning: {} samples had unfilled seats", result.non_binding_samples);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate { common } => simulate(common),
        Command::EstimateBayes {
            common,
            data,
            iterations,
            chains,
            checkpoint_every,
            resume,
        } => estimate_bayes(common, data, *iterations, *chains, *checkpoint_every, *resume),
        Command::EstimateSemi { common, data, model } => estimate_semi(common, data, *model),
        Command::Audit {
            data,
            utilities,
            threshold,
        } => audit(data, utilities.as_deref(), *threshold),
        Command::Counterfactual { common, data, chain } => counterfactual(common, data, chain),
        Command::Fit { common, data, chain } => fit(common, data, chain),
        Command::Mc {
            common,
            samples,
            iterations,
            burn_in,
            estimator,
        } => mc(common, *samples, *iterations, *burn_in, *estimator),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
