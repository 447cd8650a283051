use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Standardized bound beyond which exponential rejection replaces the
/// inverse CDF.
const TAIL: f64 = 5.0;

/// Draws from `N(mean, sd²)` truncated to `(lower, upper)`; either bound may
/// be infinite.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64> {
    if lower.is_nan() || upper.is_nan() || lower >= upper {
        return Err(Error::InvalidBounds { lower, upper });
    }
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
        return Err(Error::InvalidInput(format!("truncated normal needs finite mean and positive sd, got ({mean}, {sd})")));
    }
    let a = (lower - mean) / sd;
    let b = (upper - mean) / sd;
    for _ in 0..64 {
        let x = mean + sd * standard(a, b, rng);
        // rounding in the affine map can land on a bound
        if x > lower && x < upper {
            return Ok(x);
        }
    }
    let fallback = if lower.is_finite() && upper.is_finite() {
        lower + 0.5 * (upper - lower)
    } else if lower.is_finite() {
        lower.next_up()
    } else {
        upper.next_down()
    };
    if fallback > lower && fallback < upper {
        Ok(fallback)
    } else {
        Err(Error::InvalidBounds { lower, upper })
    }
}

/// Standard normal truncated to `(a, b)`.
fn standard<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return rng.sample(StandardNormal);
    }
    if a >= TAIL {
        return upper_tail(a, b, rng);
    }
    if b <= -TAIL {
        return -upper_tail(-b, -a, rng);
    }
    let x = inverse_cdf(a, b, rng);
    if x > a && x < b {
        x
    } else {
        uniform_rejection(a, b, rng)
    }
}

fn inverse_cdf<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let unit = Normal::standard();
    let u: f64 = rng.random();
    if a > 0.0 {
        // upper-tail probabilities keep precision on the right
        let pa = unit.sf(a);
        let pb = unit.sf(b);
        -unit.inverse_cdf(pb + u * (pa - pb))
    } else {
        let pa = unit.cdf(a);
        let pb = unit.cdf(b);
        unit.inverse_cdf(pa + u * (pb - pa))
    }
}

/// `(a, b)` with `a > 0`: exponential rejection, or uniform rejection when the
/// interval is short enough for it to accept often.
fn upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b.is_finite() && (b * b - a * a) / 2.0 < 2.0 {
        return uniform_rejection(a, b, rng);
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = rng.sample(Exp1);
        let x = a + e / rate;
        if x >= b {
            continue;
        }
        let log_accept = -0.5 * (x - rate) * (x - rate);
        let e2: f64 = rng.sample(Exp1);
        if -e2 <= log_accept {
            return x;
        }
    }
}

/// Uniform proposal on a finite interval, accepted in proportion to the
/// density relative to its maximum on the interval.
fn uniform_rejection<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let peak = if a > 0.0 {
        a
    } else if b < 0.0 {
        b
    } else {
        0.0
    };
    let (lo, hi) = (a.max(-1e300), b.min(1e300));
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if x <= a || x >= b {
            continue;
        }
        let log_accept = 0.5 * (peak * peak - x * x);
        if rng.random::<f64>().ln() <= log_accept {
            return x;
        }
    }
}
