//! Synthetic markets with known preference parameters.

mod spec;

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use spec::{build_utilities, CompiledSpec, Design, EmpiricalSpec, ScaleTerm, Scope, Term};

use crate::error::{Error, Result};
use crate::market::{
    deferred_acceptance, CollegeRecord, LatentUtilities, Market, Matching, SchoolType, StudentRecord,
};
use crate::rng::{stream, streams, StreamRng};

/// Names of the student characteristics in simulated markets.
pub const Z_NAMES: [&str; 3] = ["s", "z", "m"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateDist {
    pub mean: f64,
    /// Variance, not standard deviation.
    pub variance: f64,
}

impl CovariateDist {
    pub const fn new(mean: f64, variance: f64) -> Self {
        CovariateDist { mean, variance }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Simulation design. Coefficient vectors are indexed by college.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub n_students: usize,
    pub capacities: Vec<usize>,
    pub beta_d: Vec<f64>,
    pub beta_s: Vec<f64>,
    pub beta_z: Vec<f64>,
    pub gamma_w: Vec<f64>,
    pub gamma_m: Vec<f64>,
    pub gamma_z: Vec<f64>,
    pub d: CovariateDist,
    pub s: CovariateDist,
    pub z: CovariateDist,
    pub m: CovariateDist,
    pub w: CovariateDist,
    /// Standard deviation of student shocks per college.
    pub sigma_eps: Vec<f64>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig::benchmark()
    }
}

impl DgpConfig {
    /// 3000 students, three colleges with 750, 700 and 750 seats,
    /// `β^d = −1` and every other coefficient one. Covariates have variance
    /// 36 and `s` has mean 5.
    pub fn benchmark() -> DgpConfig {
        let c = 3;
        DgpConfig {
            n_students: 3000,
            capacities: vec![750, 700, 750],
            beta_d: vec![-1.0; c],
            beta_s: vec![1.0; c],
            beta_z: vec![1.0; c],
            gamma_w: vec![1.0; c],
            gamma_m: vec![1.0; c],
            gamma_z: vec![1.0; c],
            d: CovariateDist::new(0.0, 36.0),
            s: CovariateDist::new(5.0, 36.0),
            z: CovariateDist::new(0.0, 36.0),
            m: CovariateDist::new(0.0, 36.0),
            w: CovariateDist::new(0.0, 36.0),
            sigma_eps: vec![1.0; c],
            seed: 0,
        }
    }

    /// Benchmark with `z` entering only the first student utility and the
    /// last college valuation.
    pub fn benchmark_reduced() -> DgpConfig {
        DgpConfig {
            beta_z: vec![1.0, 0.0, 0.0],
            gamma_z: vec![0.0, 0.0, 1.0],
            ..DgpConfig::benchmark()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> DgpConfig {
        self.seed = seed;
        self
    }

    pub fn n_colleges(&self) -> usize {
        self.capacities.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_c = self.n_colleges();
        if n_c == 0 {
            return Err(Error::InvalidInput("no colleges configured".into()));
        }
        let vectors = [
            ("beta_d", &self.beta_d),
            ("beta_s", &self.beta_s),
            ("beta_z", &self.beta_z),
            ("gamma_w", &self.gamma_w),
            ("gamma_m", &self.gamma_m),
            ("gamma_z", &self.gamma_z),
            ("sigma_eps", &self.sigma_eps),
        ];
        for (name, v) in vectors {
            if v.len() != n_c {
                return Err(Error::InvalidInput(format!("{name} has {} entries for {n_c} colleges", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} is not finite")));
            }
        }
        if self.sigma_eps.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidInput("sigma_eps must be positive".into()));
        }
        for (name, d) in [("d", self.d), ("s", self.s), ("z", self.z), ("m", self.m), ("w", self.w)] {
            if !(d.variance > 0.0 && d.variance.is_finite() && d.mean.is_finite()) {
                return Err(Error::InvalidInput(format!("covariate {name} needs finite mean and positive variance")));
            }
        }
        if self.capacities.contains(&0) {
            return Err(Error::InvalidInput("capacities must be positive".into()));
        }
        let seats: usize = self.capacities.iter().sum();
        if seats >= self.n_students {
            return Err(Error::InvalidInput(format!(
                "no excess demand: {seats} seats for {} students",
                self.n_students
            )));
        }
        Ok(())
    }

    /// Coefficients in [`EmpiricalSpec::benchmark`] order.
    pub fn coefficients(&self) -> Vec<f64> {
        [&self.beta_d, &self.beta_s, &self.beta_z, &self.gamma_w, &self.gamma_m, &self.gamma_z]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }

    /// True parameter vector: coefficients then the last college's shock sd.
    pub fn truth(&self) -> Vec<f64> {
        let mut t = self.coefficients();
        t.push(*self.sigma_eps.last().unwrap_or(&1.0));
        t
    }
}

/// Integer seat counts from capacity shares, rounded to the nearest seat.
pub fn capacities_from_shares(n_students: usize, shares: &[f64]) -> Vec<usize> {
    shares.iter().map(|q| (q * n_students as f64).round() as usize).collect()
}

/// A simulated market with the latent utilities that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub market: Market,
    pub utilities: LatentUtilities,
    pub matching: Matching,
    pub parameter_names: Vec<String>,
    pub truth: Vec<f64>,
    /// Colleges (1-based) with unfilled seats. Identification needs every
    /// capacity to bind, so a non-empty list should be treated as a warning.
    pub non_binding: Vec<usize>,
}

impl Simulation {
    pub fn all_binding(&self) -> bool {
        self.non_binding.is_empty()
    }
}

/// Draws covariates, shocks and a lottery from independent streams of
/// `config.seed`, builds utilities and runs student-proposing DA.
pub fn simulate_market(config: &DgpConfig) -> Result<Simulation> {
    config.validate()?;
    let n = config.n_students;
    let n_c = config.n_colleges();

    let mut rng = stream(config.seed, streams::COVARIATES);
    let draw = |d: CovariateDist, rng: &mut StreamRng| d.mean + d.sd() * rng.sample::<f64, _>(StandardNormal);
    let students = (0..n)
        .map(|i| {
            let y = (0..n_c).map(|_| draw(config.d, &mut rng)).collect();
            let w = (0..n_c).map(|_| draw(config.w, &mut rng)).collect();
            let z = vec![draw(config.s, &mut rng), draw(config.z, &mut rng), draw(config.m, &mut rng)];
            StudentRecord {
                id: i as u64 + 1,
                y,
                w,
                z,
                gender: None,
                tags: BTreeSet::new(),
            }
        })
        .collect();
    let colleges = config
        .capacities
        .iter()
        .enumerate()
        .map(|(k, &q)| CollegeRecord {
            id: k as u64 + 1,
            capacity: q,
            school_type: SchoolType::SelectingA,
            attributes: vec![],
            gender_restriction: None,
        })
        .collect();
    let mut lottery_rng = stream(config.seed, streams::LOTTERY);
    let lottery = (0..n).map(|_| lottery_rng.random::<f64>()).collect();
    let market = Market::new(
        students,
        colleges,
        Z_NAMES.iter().map(|s| s.to_string()).collect(),
        vec![],
        Some(lottery),
    )?;

    let shocks = draw_shocks(n, n_c, &config.sigma_eps, config.seed);
    let spec = EmpiricalSpec::benchmark(n_c);
    let utilities = build_utilities(&spec, &market, &config.coefficients(), &shocks)?;
    let matching = deferred_acceptance(&market, &utilities)?;
    let non_binding = matching
        .binding(&market)
        .iter()
        .enumerate()
        .filter(|(_, &b)| !b)
        .map(|(k, _)| k + 1)
        .collect();
    Ok(Simulation {
        market,
        utilities,
        matching,
        parameter_names: spec.parameter_names(),
        truth: config.truth(),
        non_binding,
    })
}

/// Standard normal shocks, student ones scaled by `sigma_eps[c - 1]`; the
/// outside option keeps unit variance.
fn draw_shocks(n: usize, n_c: usize, sigma_eps: &[f64], seed: u64) -> LatentUtilities {
    let mut shocks = LatentUtilities::zeros(n, n_c);
    let mut rng = stream(seed, streams::STUDENT_SHOCKS);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for i in 0..n {
        shocks.set_u(i, 0, unit.sample(&mut rng));
        for c in 1..=n_c {
            shocks.set_u(i, c, sigma_eps[c - 1] * unit.sample(&mut rng));
        }
    }
    let mut rng = stream(seed, streams::COLLEGE_SHOCKS);
    for c in 1..=n_c {
        for i in 0..n {
            shocks.set_v(c, i, unit.sample(&mut rng));
        }
    }
    shocks
}
