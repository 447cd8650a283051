//! Small numeric helpers shared across modules.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor; `NaN` below two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Median ignoring `NaN` entries; `NaN` when nothing is left.
pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Median, mean and standard deviation of a set of estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    /// Finite values that entered the statistics.
    pub count: usize,
}

impl Summary {
    /// Non-finite values are dropped before summarizing.
    pub fn of(xs: &[f64]) -> Summary {
        let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
        Summary {
            median: median(&v),
            mean: if v.is_empty() { f64::NAN } else { mean(&v) },
            sd: sample_sd(&v),
            count: v.len(),
        }
    }
}
