//! Gibbs sampling with data augmentation of the latent utilities.

mod psrf;
mod regression;
mod sampler;
mod truncnorm;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use psrf::{gelman_rubin, psrf, PsrfFlag, PsrfReport};
pub use regression::{draw_coefficients, draw_variance, NormalEquations, VariancePrior};
pub use sampler::{Checkpoint, GibbsState, Sampler};
pub use truncnorm::sample_truncated_normal;

use crate::dgp::EmpiricalSpec;
use crate::error::{Error, Result};
use crate::market::Market;
use crate::stats::{median, Summary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GibbsConfig {
    pub iterations: u64,
    pub burn_in: u64,
    pub chains: usize,
    /// Keep every `thin`-th draw after burn-in.
    pub thin: u64,
    /// Coefficient prior is `N(0, prior_var_scale · I)`.
    pub prior_var_scale: f64,
    pub sigma_prior: VariancePrior,
    pub seed: u64,
    /// Run a stability audit after every sweep.
    pub audit: bool,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            iterations: 50_000,
            burn_in: 10_000,
            chains: 2,
            thin: 1,
            prior_var_scale: 100.0,
            sigma_prior: VariancePrior::default(),
            seed: 0,
            audit: cfg!(debug_assertions),
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.chains == 0 || self.thin == 0 {
            return Err(Error::Config("iterations, chains and thin must be positive".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if !(self.prior_var_scale > 0.0 && self.prior_var_scale.is_finite()) {
            return Err(Error::Config("prior_var_scale must be positive".into()));
        }
        if !(self.sigma_prior.scale > 0.0 && self.sigma_prior.dof > 0.0) {
            return Err(Error::Config("sigma prior needs positive scale and dof".into()));
        }
        Ok(())
    }

    pub fn kept_draws(&self) -> u64 {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Kept draws of one chain: coefficients then shock standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub parameter_names: Vec<String>,
    /// Row-major, one row per kept sweep.
    pub draws: Vec<f64>,
    pub chain: usize,
    pub seed: u64,
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub audited_sweeps: u64,
    /// Sweeps after which the observed matching failed the stability audit.
    pub unstable_sweeps: u64,
}

impl PosteriorChain {
    pub fn n_parameters(&self) -> usize {
        self.parameter_names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len().checked_div(self.n_parameters()).unwrap_or(0)
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        let p = self.n_parameters();
        &self.draws[k * p..(k + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().skip(j).step_by(self.n_parameters()).copied().collect()
    }

    pub fn summaries(&self) -> Vec<Summary> {
        (0..self.n_parameters()).map(|j| Summary::of(&self.column(j))).collect()
    }

    pub fn posterior_means(&self) -> Vec<f64> {
        self.summaries().iter().map(|s| s.mean).collect()
    }
}

/// Posterior summary pooled over chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub parameter_names: Vec<String>,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
    pub sd: Vec<f64>,
    pub psrf: Option<PsrfReport>,
}

pub fn summarize(chains: &[PosteriorChain]) -> Result<PosteriorSummary> {
    let first = chains
        .first()
        .ok_or_else(|| Error::InvalidInput("no chains to summarize".into()))?;
    let p = first.n_parameters();
    let pooled: Vec<Summary> = (0..p)
        .map(|j| {
            let all: Vec<f64> = chains.iter().flat_map(|c| c.column(j)).collect();
            Summary::of(&all)
        })
        .collect();
    Ok(PosteriorSummary {
        parameter_names: first.parameter_names.clone(),
        mean: pooled.iter().map(|s| s.mean).collect(),
        median: pooled.iter().map(|s| s.median).collect(),
        sd: pooled.iter().map(|s| s.sd).collect(),
        psrf: psrf(chains).ok(),
    })
}

/// Runs chain `chain` to completion.
pub fn run_chain(
    market: &Market,
    assignment: &[usize],
    spec: &EmpiricalSpec,
    cfg: &GibbsConfig,
    chain: usize,
) -> Result<PosteriorChain> {
    let mut s = Sampler::new(market, assignment, spec, cfg, chain)?;
    s.run_for(cfg.iterations)?;
    Ok(s.finish())
}

/// Runs `cfg.chains` chains in parallel.
pub fn run_chains(
    market: &Market,
    assignment: &[usize],
    spec: &EmpiricalSpec,
    cfg: &GibbsConfig,
) -> Result<Vec<PosteriorChain>> {
    cfg.validate()?;
    (0..cfg.chains)
        .into_par_iter()
        .map(|k| run_chain(market, assignment, spec, cfg, k))
        .collect()
}

/// Runs a chain, writing a checkpoint to `path` every `every` sweeps. An
/// existing checkpoint at `path` is resumed when `resume` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_chain_checkpointed(
    market: &Market,
    assignment: &[usize],
    spec: &EmpiricalSpec,
    cfg: &GibbsConfig,
    chain: usize,
    path: &Path,
    every: u64,
    resume: bool,
) -> Result<PosteriorChain> {
    let mut s = if resume && path.exists() {
        let cp = read_checkpoint(path)?;
        if cp.config != *cfg || cp.chain != chain {
            return Err(Error::Config(format!(
                "checkpoint {} was written with a different configuration",
                path.display()
            )));
        }
        Sampler::resume(market, assignment, spec, cp)?
    } else {
        Sampler::new(market, assignment, spec, cfg, chain)?
    };
    let every = every.max(1);
    while !s.is_done() {
        s.run_for(every)?;
        write_checkpoint(path, &s.checkpoint())?;
    }
    Ok(s.finish())
}

pub fn write_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    serde_json::to_writer(file, cp).map_err(|e| Error::Io(e.into()))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(file).map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))
}

/// Median across Monte Carlo samples of each parameter's posterior mean.
pub fn median_of_means(means: &[Vec<f64>]) -> Vec<f64> {
    let p = means.first().map_or(0, Vec::len);
    (0..p)
        .map(|j| median(&means.iter().map(|m| m[j]).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_market, DgpConfig, Scope, Term};
    use crate::market::{
        audit_stability, test_support::plain_market, Gender, Matching, SchoolType, OUT_OF_MARKET_TAG,
    };

    fn small_dgp(n: usize, seed: u64) -> DgpConfig {
        DgpConfig {
            n_students: n,
            capacities: vec![n / 5, n / 5, n / 5],
            ..DgpConfig::benchmark()
        }
        .with_seed(seed)
    }

    fn short(iterations: u64, seed: u64) -> GibbsConfig {
        GibbsConfig {
            iterations,
            burn_in: iterations / 2,
            chains: 2,
            seed,
            audit: true,
            ..GibbsConfig::default()
        }
    }

    #[test]
    fn every_sweep_keeps_matching_stable() {
        let sim = simulate_market(&small_dgp(50, 1)).unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let chain = run_chain(&sim.market, &sim.matching.assignment, &spec, &short(100, 2), 0).unwrap();
        assert_eq!(chain.audited_sweeps, 100);
        assert_eq!(chain.unstable_sweeps, 0);
    }

    #[test]
    fn student_argmax_is_the_match_after_each_sweep() {
        let sim = simulate_market(&small_dgp(60, 3)).unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let a = &sim.matching.assignment;
        let mut s = Sampler::new(&sim.market, a, &spec, &short(100, 4), 1).unwrap();
        for _ in 0..100 {
            s.sweep().unwrap();
            let st = s.state();
            for i in 0..60 {
                let feas = crate::market::feasible_set(&sim.market, i, &st.cutoffs, &st.latent);
                let best = *feas.iter().max_by(|&&x, &&y| st.latent.u(i, x).total_cmp(&st.latent.u(i, y))).unwrap();
                assert_eq!(best, a[i]);
            }
            for c in 1..=3 {
                let delta = st.cutoffs[c - 1].value();
                let min = (0..60).filter(|&i| a[i] == c).map(|i| st.latent.v(c, i)).fold(f64::INFINITY, f64::min);
                assert_eq!(delta, min);
            }
        }
    }

    #[test]
    fn one_college_cutoff_separates_rejected_student() {
        // two seats, three students, student 2 wants the college but is out
        let market = plain_market(3, &[2]);
        let assignment = vec![1, 1, 0];
        let spec = EmpiricalSpec {
            student: vec![Term::new("one", "alpha", Scope::All)],
            college: vec![],
            scales: vec![],
        };
        let cfg = GibbsConfig {
            iterations: 50,
            burn_in: 0,
            ..short(50, 5)
        };
        let mut s = Sampler::new(&market, &assignment, &spec, &cfg, 0).unwrap();
        for _ in 0..50 {
            s.sweep().unwrap();
            let st = s.state();
            if st.latent.u(2, 1) > st.latent.u(2, 0) {
                assert!(st.latent.v(1, 0).min(st.latent.v(1, 1)) > st.latent.v(1, 2));
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_chains() {
        let sim = simulate_market(&small_dgp(80, 6)).unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let cfg = short(40, 7);
        let a = run_chains(&sim.market, &sim.matching.assignment, &spec, &cfg).unwrap();
        let b = run_chains(&sim.market, &sim.matching.assignment, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].draws, a[1].draws);
        assert_eq!(a[0].n_draws() as u64, cfg.kept_draws());
        assert_eq!(a[0].n_parameters(), 19);
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let sim = simulate_market(&small_dgp(80, 8)).unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let cfg = short(30, 9);
        let a = &sim.matching.assignment;
        let straight = run_chain(&sim.market, a, &spec, &cfg, 1).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        let mut s = Sampler::new(&sim.market, a, &spec, &cfg, 1).unwrap();
        s.run_for(13).unwrap();
        write_checkpoint(&path, &s.checkpoint()).unwrap();
        drop(s);
        let resumed = run_chain_checkpointed(&sim.market, a, &spec, &cfg, 1, &path, 7, true).unwrap();
        assert_eq!(straight, resumed);
    }

    #[test]
    fn scaled_college_uses_its_own_variance() {
        let sim = simulate_market(&small_dgp(100, 10)).unwrap();
        let spec = EmpiricalSpec::benchmark(3);
        let mut s = Sampler::new(&sim.market, &sim.matching.assignment, &spec, &short(10, 11), 0).unwrap();
        s.sweep().unwrap();
        let st = s.state().clone();
        assert_eq!(st.scale_variances.len(), 1);
        assert!(st.scale_variances[0] > 0.0);
        // infeasible draws at college 3 spread with the scale, college 1 with unit variance
        let mut big = s.checkpoint();
        big.state.scale_variances = vec![1e6];
        let mut s2 = Sampler::resume(&sim.market, &sim.matching.assignment, &spec, big).unwrap();
        s2.update_college_side().unwrap();
        s2.update_student_side().unwrap();
        let st = s2.state();
        let infeasible_sd = |c: usize| {
            let x: Vec<f64> = (0..100)
                .filter(|&i| !crate::market::feasible_set(&sim.market, i, &st.cutoffs, &st.latent).contains(&c))
                .map(|i| st.latent.u(i, c))
                .collect();
            crate::stats::sample_sd(&x)
        };
        assert!(infeasible_sd(3) > 300.0);
        assert!(infeasible_sd(1) < 50.0);
    }

    #[test]
    fn empirical_extensions_stay_stable() {
        // gender-restricted and non-selecting colleges plus out-of-market students
        let mut sim = simulate_market(&small_dgp(90, 12)).unwrap();
        let m = &mut sim.market;
        m.colleges[1].school_type = SchoolType::NonSelecting;
        m.colleges[0].gender_restriction = Some(Gender::Female);
        for (i, s) in m.students.iter_mut().enumerate() {
            s.gender = Some(if i % 2 == 0 { Gender::Female } else { Gender::Male });
        }
        let u = sim.utilities.clone();
        let matching: Matching = crate::market::deferred_acceptance(m, &u).unwrap();
        let mut market = m.clone();
        let out: Vec<usize> = (0..90).filter(|&i| matching.assignment[i] == 3).take(3).collect();
        for &i in &out {
            market.students[i].tags.insert(OUT_OF_MARKET_TAG.into());
        }
        let mut spec = EmpiricalSpec::benchmark(3);
        // valuations are only identified at full selecting colleges
        let binding = matching.binding(&market);
        spec.college
            .retain(|t| matches!(t.scope, Scope::College(c) if c != 2 && binding[c - 1]));
        assert!(!spec.college.is_empty());
        let mut s = Sampler::new(&market, &matching.assignment, &spec, &short(60, 13), 0).unwrap();
        let lottery_cutoff = s.state().cutoffs[1];
        for _ in 0..60 {
            s.sweep().unwrap();
            let st = s.state();
            let report = audit_stability(&market, &st.latent, &matching).unwrap();
            assert!(report.is_stable(), "{report:?}");
            // the non-selecting college keeps its lottery cutoff
            assert_eq!(st.cutoffs[1], lottery_cutoff);
            for &i in &out {
                assert_eq!(st.latent.u(i, 3), 1.0);
                assert_eq!(st.latent.u(i, 0), 0.0);
            }
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let sim = simulate_market(&small_dgp(50, 14)).unwrap();
        let mut spec = EmpiricalSpec::benchmark(3);
        spec.student.push(Term::new("one", "dup_a", Scope::All));
        spec.student.push(Term::new("one", "dup_b", Scope::All));
        let r = Sampler::new(&sim.market, &sim.matching.assignment, &spec, &short(10, 0), 0);
        assert!(matches!(r, Err(Error::RankDeficiency { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(GibbsConfig { burn_in: 10, iterations: 10, ..Default::default() }.validate().is_err());
        assert!(GibbsConfig { prior_var_scale: 0.0, ..Default::default() }.validate().is_err());
        assert!(GibbsConfig::default().validate().is_ok());
    }
}
