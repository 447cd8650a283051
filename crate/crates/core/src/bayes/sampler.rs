use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::regression::{draw_coefficients, draw_variance, NormalEquations};
use super::truncnorm::sample_truncated_normal;
use super::{GibbsConfig, PosteriorChain};
use crate::dgp::{CompiledSpec, Design, EmpiricalSpec};
use crate::error::{Error, Result};
use crate::market::{
    assignment_counts, audit_with_order, check_assignment, CollegeOrder, Cutoff, LatentUtilities, Market,
    OUT_OF_MARKET_TAG,
};
use crate::rng::{stream, streams, StreamRng};
use crate::semiparam::RankReport;

/// Condition-number limit for `X'X` of either regression.
const DESIGN_CONDITION_LIMIT: f64 = 1e12;

/// Current values of every sampled quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsState {
    pub latent: LatentUtilities,
    /// Student coefficients then college coefficients.
    pub coefficients: Vec<f64>,
    /// Shock variance per scale group.
    pub scale_variances: Vec<f64>,
    /// Cutoffs on each college's priority score.
    pub cutoffs: Vec<Cutoff>,
}

/// Everything needed to continue a chain bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: GibbsConfig,
    pub chain: usize,
    pub parameter_names: Vec<String>,
    pub sweeps_done: u64,
    /// ChaCha word position, as a decimal string.
    pub word_pos: String,
    pub state: GibbsState,
    pub draws: Vec<f64>,
    pub audited_sweeps: u64,
    pub unstable_sweeps: u64,
}

/// One Gibbs chain over an observed matching.
///
/// Students tagged [`OUT_OF_MARKET_TAG`] are taken to accept only their own
/// match: their student utilities are fixed and only their valuation by the
/// college they attend is sampled.
pub struct Sampler<'a> {
    market: &'a Market,
    assignment: &'a [usize],
    compiled: CompiledSpec,
    student_design: Design,
    college_design: Design,
    n_student_coefs: usize,
    in_market: Vec<bool>,
    /// Selecting colleges at capacity; only these get sampled cutoffs.
    sampled_cutoff: Vec<bool>,
    /// Fixed lottery cutoffs of non-selecting colleges.
    fixed_cutoffs: Vec<Cutoff>,
    members: Vec<Vec<usize>>,
    /// Unweighted `X'X` of the student rows per scale group, then of the
    /// unscaled colleges.
    student_gram: Vec<DMatrix<f64>>,
    student_pairs: Vec<(u32, u32)>,
    college_pairs: Vec<(u32, u32)>,
    college_gram: DMatrix<f64>,
    parameter_names: Vec<String>,
    cfg: GibbsConfig,
    chain: usize,
    rng: StreamRng,
    state: GibbsState,
    sweeps_done: u64,
    draws: Vec<f64>,
    audited_sweeps: u64,
    unstable_sweeps: u64,
    preferred: Vec<bool>,
}

impl<'a> Sampler<'a> {
    /// Validates the data, checks both designs for rank and draws the
    /// starting state. Chain 0 starts at zero coefficients and unit scales;
    /// other chains start from dispersed values.
    pub fn new(
        market: &'a Market,
        assignment: &'a [usize],
        spec: &EmpiricalSpec,
        cfg: &GibbsConfig,
        chain: usize,
    ) -> Result<Sampler<'a>> {
        cfg.validate()?;
        let mut sampler = Sampler::prepare(market, assignment, spec, cfg, chain)?;
        sampler.check_designs()?;
        sampler.initialize();
        Ok(sampler)
    }

    pub fn resume(
        market: &'a Market,
        assignment: &'a [usize],
        spec: &EmpiricalSpec,
        checkpoint: Checkpoint,
    ) -> Result<Sampler<'a>> {
        let cfg = checkpoint.config.clone();
        cfg.validate()?;
        let mut sampler = Sampler::prepare(market, assignment, spec, &cfg, checkpoint.chain)?;
        if checkpoint.parameter_names != sampler.parameter_names {
            return Err(Error::InvalidInput("checkpoint parameters do not match the model specification".into()));
        }
        let st = &checkpoint.state;
        if st.latent.n_students() != market.n_students()
            || st.latent.n_colleges() != market.n_colleges()
            || st.coefficients.len() != spec.n_coefficients()
            || st.scale_variances.len() != spec.scales.len()
            || st.cutoffs.len() != market.n_colleges()
        {
            return Err(Error::InvalidInput("checkpoint state does not match the data".into()));
        }
        let pos: u128 = checkpoint
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad word position `{}`", checkpoint.word_pos)))?;
        sampler.rng.set_word_pos(pos);
        sampler.state = checkpoint.state;
        sampler.sweeps_done = checkpoint.sweeps_done;
        sampler.draws = checkpoint.draws;
        sampler.audited_sweeps = checkpoint.audited_sweeps;
        sampler.unstable_sweeps = checkpoint.unstable_sweeps;
        Ok(sampler)
    }

    fn prepare(
        market: &'a Market,
        assignment: &'a [usize],
        spec: &EmpiricalSpec,
        cfg: &GibbsConfig,
        chain: usize,
    ) -> Result<Sampler<'a>> {
        market.validate()?;
        check_assignment(market, assignment)?;
        let n_c = market.n_colleges();
        let counts = assignment_counts(assignment, n_c);
        for c in 1..=n_c {
            if counts[c] > market.capacity(c) {
                return Err(Error::Data(format!("college {c} is over capacity")));
            }
        }
        if let Some(i) = (0..market.n_students()).find(|&i| assignment[i] != 0 && !market.admissible(i, assignment[i])) {
            return Err(Error::Data(format!("student {i} is matched to an inadmissible college")));
        }
        let compiled = spec.compile(market)?;
        let members: Vec<Vec<usize>> = (1..=n_c)
            .map(|c| (0..market.n_students()).filter(|&i| assignment[i] == c).collect())
            .collect();
        let sampled_cutoff = (1..=n_c)
            .map(|c| market.college(c).school_type.is_selecting() && counts[c] == market.capacity(c))
            .collect();
        let fixed_cutoffs = (1..=n_c)
            .map(|c| {
                if !market.college(c).school_type.is_selecting() && counts[c] == market.capacity(c) {
                    let min = members[c - 1].iter().map(|&i| market.lottery[i]).fold(f64::INFINITY, f64::min);
                    Cutoff::Finite(min)
                } else {
                    Cutoff::NegInf
                }
            })
            .collect();
        let mut sampler = Sampler {
            market,
            assignment,
            student_design: compiled.student_design(market),
            college_design: compiled.college_design(market),
            n_student_coefs: compiled.n_student_coefficients(),
            compiled,
            in_market: market.students.iter().map(|s| !s.has_tag(OUT_OF_MARKET_TAG)).collect(),
            sampled_cutoff,
            fixed_cutoffs,
            members,
            parameter_names: spec.parameter_names(),
            cfg: cfg.clone(),
            chain,
            rng: stream(cfg.seed, streams::GIBBS_BASE + chain as u64),
            state: GibbsState {
                latent: LatentUtilities::zeros(market.n_students(), n_c),
                coefficients: vec![0.0; spec.n_coefficients()],
                scale_variances: vec![1.0; spec.scales.len()],
                cutoffs: vec![Cutoff::NegInf; n_c],
            },
            sweeps_done: 0,
            draws: Vec::new(),
            audited_sweeps: 0,
            unstable_sweeps: 0,
            preferred: vec![false; market.n_students()],
            student_gram: Vec::new(),
            college_gram: DMatrix::zeros(0, 0),
            student_pairs: Vec::new(),
            college_pairs: Vec::new(),
        };
        let in_market = &sampler.in_market;
        sampler.student_pairs = (0..market.n_students())
            .filter(|&i| in_market[i])
            .flat_map(|i| (1..=n_c).map(move |c| (i, c)))
            .filter(|&(i, c)| market.admissible(i, c))
            .map(|(i, c)| (i as u32, c as u32))
            .collect();
        sampler.college_pairs = sampler
            .student_pairs
            .iter()
            .copied()
            .filter(|&(_, c)| sampler.sampled_cutoff[c as usize - 1])
            .collect();
        let ks = sampler.student_design.n_coefficients;
        let mut student_gram = vec![NormalEquations::new(ks); spec.scales.len() + 1];
        for (i, c) in sampler.student_rows() {
            let g = sampler.compiled.scale_of(c).unwrap_or(spec.scales.len());
            student_gram[g].add_sparse(sampler.student_design.row(i, c), 0.0, 1.0);
        }
        let mut college_gram = NormalEquations::new(sampler.college_design.n_coefficients);
        for (i, c) in sampler.college_rows() {
            college_gram.add_sparse(sampler.college_design.row(i, c), 0.0, 1.0);
        }
        sampler.student_gram = student_gram.into_iter().map(|e| e.xtx).collect();
        sampler.college_gram = college_gram.xtx;
        Ok(sampler)
    }

    /// Rows entering the student regression: in-market students at admissible colleges.
    fn student_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.student_pairs.iter().map(|&(i, c)| (i as usize, c as usize))
    }

    /// Rows entering the college regression: the same pairs restricted to
    /// colleges with sampled cutoffs.
    fn college_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.college_pairs.iter().map(|&(i, c)| (i as usize, c as usize))
    }

    fn check_designs(&self) -> Result<()> {
        let check = |gram: DMatrix<f64>, side: &str| -> Result<()> {
            let k = gram.nrows();
            if k == 0 {
                return Ok(());
            }
            let report = RankReport::from_matrix(k, k, gram.as_slice().to_vec(), DESIGN_CONDITION_LIMIT);
            if report.passes {
                Ok(())
            } else {
                Err(report.into_error(format!("{side} design")))
            }
        };
        let ks = self.student_design.n_coefficients;
        let total = self.student_gram.iter().fold(DMatrix::zeros(ks, ks), |acc, g| acc + g);
        check(total, "student")?;
        check(self.college_gram.clone(), "college")
    }

    fn initialize(&mut self) {
        let n_c = self.market.n_colleges();
        let rng = &mut self.rng;
        let abs_normal = |rng: &mut StreamRng| rng.sample::<f64, _>(StandardNormal).abs();
        if self.chain > 0 {
            for b in &mut self.state.coefficients {
                *b = rng.sample(StandardNormal);
            }
            for s in &mut self.state.scale_variances {
                *s = (0.5 + abs_normal(rng)).powi(2);
            }
        }
        let latent = &mut self.state.latent;
        for c in 1..=n_c {
            for i in 0..self.market.n_students() {
                let v = if self.assignment[i] == c {
                    0.5 + abs_normal(rng)
                } else {
                    -0.5 - abs_normal(rng)
                };
                latent.set_v(c, i, v);
            }
        }
        for c in 1..=n_c {
            self.state.cutoffs[c - 1] = if self.sampled_cutoff[c - 1] {
                let min = self.members[c - 1]
                    .iter()
                    .map(|&i| latent.v(c, i))
                    .fold(f64::INFINITY, f64::min);
                Cutoff::Finite(min)
            } else {
                self.fixed_cutoffs[c - 1]
            };
        }
        for i in 0..self.market.n_students() {
            let mu = self.assignment[i];
            if !self.in_market[i] {
                for c in 0..=n_c {
                    let u = if c == mu {
                        1.0
                    } else if c == 0 {
                        0.0
                    } else {
                        -1.0
                    };
                    latent.set_u(i, c, u);
                }
                continue;
            }
            for c in 0..=n_c {
                let u = if c == mu {
                    0.5 + abs_normal(rng)
                } else if c == 0 || is_feasible(self.market, &self.state.cutoffs, latent, i, c) {
                    -0.5 - abs_normal(rng)
                } else {
                    rng.sample(StandardNormal)
                };
                latent.set_u(i, c, u);
            }
        }
    }

    pub fn state(&self) -> &GibbsState {
        &self.state
    }

    pub fn sweeps_done(&self) -> u64 {
        self.sweeps_done
    }

    pub fn is_done(&self) -> bool {
        self.sweeps_done >= self.cfg.iterations
    }

    /// Runs up to `n` sweeps without passing the configured iteration count.
    pub fn run_for(&mut self, n: u64) -> Result<()> {
        let target = (self.sweeps_done + n).min(self.cfg.iterations);
        while self.sweeps_done < target {
            self.sweep()?;
        }
        Ok(())
    }

    /// One full pass of college update, student update and parameter draw.
    pub fn sweep(&mut self) -> Result<()> {
        self.update_college_side()?;
        self.update_student_side()?;
        self.update_parameters()?;
        self.sweeps_done += 1;
        if self.cfg.audit {
            let order = CollegeOrder::from_scores(self.market, &self.state.latent);
            let report = audit_with_order(self.market, &self.state.latent, &order, self.assignment)?;
            self.audited_sweeps += 1;
            if !report.is_stable() {
                self.unstable_sweeps += 1;
            }
        }
        if self.sweeps_done > self.cfg.burn_in && (self.sweeps_done - self.cfg.burn_in).is_multiple_of(self.cfg.thin) {
            self.draws.extend_from_slice(&self.state.coefficients);
            self.draws.extend(self.state.scale_variances.iter().map(|s| s.sqrt()));
        }
        Ok(())
    }

    /// Step 1: valuations and cutoffs of every selecting college at capacity.
    pub fn update_college_side(&mut self) -> Result<()> {
        let market = self.market;
        let n = market.n_students();
        let gamma = &self.state.coefficients[self.n_student_coefs..];
        let latent = &mut self.state.latent;
        for c in 1..=market.n_colleges() {
            if !self.sampled_cutoff[c - 1] {
                self.state.cutoffs[c - 1] = self.fixed_cutoffs[c - 1];
                continue;
            }
            // students who would rather be at c, from the incoming utilities
            let mut v_floor = f64::NEG_INFINITY;
            for i in 0..n {
                let mu = self.assignment[i];
                let wants = self.in_market[i] && mu != c && market.admissible(i, c) && latent.u(i, c) > latent.u(i, mu);
                self.preferred[i] = wants;
                if wants {
                    v_floor = v_floor.max(latent.v(c, i));
                }
            }
            let members = &self.members[c - 1];
            if members.is_empty() {
                return Err(Error::StateCorruption(format!("binding college {c} has no members")));
            }
            let mut delta = f64::INFINITY;
            for &i in members {
                let mean = self.college_design.index(i, c, gamma);
                let v = sample_truncated_normal(mean, 1.0, v_floor, f64::INFINITY, &mut self.rng)?;
                latent.set_v(c, i, v);
                delta = delta.min(v);
            }
            for i in 0..n {
                if self.assignment[i] == c || !self.in_market[i] || !market.admissible(i, c) {
                    continue;
                }
                let mean = self.college_design.index(i, c, gamma);
                let v = if self.preferred[i] {
                    sample_truncated_normal(mean, 1.0, f64::NEG_INFINITY, delta, &mut self.rng)?
                } else {
                    mean + self.rng.sample::<f64, _>(StandardNormal)
                };
                latent.set_v(c, i, v);
            }
            self.state.cutoffs[c - 1] = Cutoff::Finite(delta);
        }
        Ok(())
    }

    /// Step 2: student utilities given the cutoffs.
    pub fn update_student_side(&mut self) -> Result<()> {
        let market = self.market;
        let n_c = market.n_colleges();
        let beta = &self.state.coefficients[..self.n_student_coefs];
        let latent = &mut self.state.latent;
        let mut feasible = vec![false; n_c + 1];
        let mut means = vec![0.0; n_c + 1];
        let mut sds = vec![1.0; n_c + 1];
        for c in 1..=n_c {
            sds[c] = self
                .compiled
                .scale_of(c)
                .map_or(1.0, |g| self.state.scale_variances[g].sqrt());
        }
        for i in 0..market.n_students() {
            if !self.in_market[i] {
                continue;
            }
            let mu = self.assignment[i];
            feasible[0] = true;
            for c in 1..=n_c {
                feasible[c] = is_feasible(market, &self.state.cutoffs, latent, i, c);
                means[c] = self.student_design.index(i, c, beta);
            }
            if !feasible[mu] {
                return Err(Error::StateCorruption(format!(
                    "student {i} cannot clear the cutoff of its own college {mu}"
                )));
            }
            let mut floor = f64::NEG_INFINITY;
            for c in 0..=n_c {
                if c == mu {
                    continue;
                }
                if feasible[c] {
                    floor = floor.max(latent.u(i, c));
                } else {
                    latent.set_u(i, c, means[c] + sds[c] * self.rng.sample::<f64, _>(StandardNormal));
                }
            }
            let u_mu = sample_truncated_normal(means[mu], sds[mu], floor, f64::INFINITY, &mut self.rng)?;
            latent.set_u(i, mu, u_mu);
            for c in 0..=n_c {
                if c != mu && feasible[c] {
                    let u = sample_truncated_normal(means[c], sds[c], f64::NEG_INFINITY, u_mu, &mut self.rng)?;
                    latent.set_u(i, c, u);
                }
            }
        }
        Ok(())
    }

    /// Step 3: conjugate draws of coefficients, then of the shock scales.
    pub fn update_parameters(&mut self) -> Result<()> {
        let ks = self.n_student_coefs;
        let n_groups = self.state.scale_variances.len();
        let prior_var = self.cfg.prior_var_scale;

        let weight = |g: Option<usize>| g.map_or(1.0, |g| 1.0 / self.state.scale_variances[g]);
        let mut eq = NormalEquations::new(ks);
        for (g, gram) in self.student_gram.iter().enumerate() {
            eq.xtx += gram * weight((g < n_groups).then_some(g));
        }
        for (i, c) in self.student_rows() {
            let w = weight(self.compiled.scale_of(c)) * self.state.latent.u(i, c);
            for &(k, x) in self.student_design.row(i, c) {
                eq.xty[k as usize] += w * x;
            }
        }
        let beta = draw_coefficients(&eq, prior_var, &mut self.rng)?;
        self.state.coefficients[..ks].copy_from_slice(beta.as_slice());

        if n_groups > 0 {
            let mut ssr = vec![0.0; n_groups];
            let mut count = vec![0usize; n_groups];
            let beta = &self.state.coefficients[..ks];
            for (i, c) in self.student_rows() {
                if let Some(g) = self.compiled.scale_of(c) {
                    let r = self.state.latent.u(i, c) - self.student_design.index(i, c, beta);
                    ssr[g] += r * r;
                    count[g] += 1;
                }
            }
            for g in 0..n_groups {
                self.state.scale_variances[g] = draw_variance(ssr[g], count[g], self.cfg.sigma_prior, &mut self.rng)?;
            }
        }

        let kc = self.college_design.n_coefficients;
        let mut eq = NormalEquations::new(kc);
        eq.xtx.copy_from(&self.college_gram);
        for (i, c) in self.college_rows() {
            let v = self.state.latent.v(c, i);
            for &(k, x) in self.college_design.row(i, c) {
                eq.xty[k as usize] += v * x;
            }
        }
        let gamma = draw_coefficients(&eq, prior_var, &mut self.rng)?;
        self.state.coefficients[ks..].copy_from_slice(gamma.as_slice());
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            chain: self.chain,
            parameter_names: self.parameter_names.clone(),
            sweeps_done: self.sweeps_done,
            word_pos: self.rng.get_word_pos().to_string(),
            state: self.state.clone(),
            draws: self.draws.clone(),
            audited_sweeps: self.audited_sweeps,
            unstable_sweeps: self.unstable_sweeps,
        }
    }

    pub fn finish(self) -> PosteriorChain {
        PosteriorChain {
            parameter_names: self.parameter_names,
            draws: self.draws,
            chain: self.chain,
            seed: self.cfg.seed,
            iterations: self.sweeps_done,
            burn_in: self.cfg.burn_in,
            thin: self.cfg.thin,
            audited_sweeps: self.audited_sweeps,
            unstable_sweeps: self.unstable_sweeps,
        }
    }
}

#[inline]
fn is_feasible(market: &Market, cutoffs: &[Cutoff], latent: &LatentUtilities, i: usize, c: usize) -> bool {
    market.admissible(i, c) && cutoffs[c - 1].admits(latent.priority_score(market, c, i))
}
