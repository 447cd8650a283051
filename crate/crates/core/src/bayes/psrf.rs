use serde::{Deserialize, Serialize};

use super::PosteriorChain;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PsrfFlag {
    Ok,
    /// Every chain is constant at the same value.
    Degenerate,
    /// Chains are constant at different values.
    ZeroWithinVariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsrfReport {
    pub parameter_names: Vec<String>,
    pub values: Vec<f64>,
    pub flags: Vec<PsrfFlag>,
    /// Set when a single chain was split into halves.
    pub split: bool,
}

impl PsrfReport {
    /// Share of finite values below `limit`.
    pub fn share_below(&self, limit: f64) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().filter(|&&r| r < limit).count() as f64 / self.values.len() as f64
    }
}

/// Gelman–Rubin potential scale reduction per parameter. A single chain is
/// split into two halves.
pub fn psrf(chains: &[PosteriorChain]) -> Result<PsrfReport> {
    let first = chains
        .first()
        .ok_or_else(|| Error::InvalidInput("psrf needs at least one chain".into()))?;
    let p = first.n_parameters();
    let (columns, split): (Vec<Vec<Vec<f64>>>, bool) = if chains.len() == 1 {
        let n = first.n_draws() / 2;
        if n < 2 {
            return Err(Error::InvalidInput("split-chain psrf needs at least 4 draws".into()));
        }
        let cols = (0..p)
            .map(|k| {
                let x = first.column(k);
                vec![x[..n].to_vec(), x[x.len() - n..].to_vec()]
            })
            .collect();
        (cols, true)
    } else {
        let n = first.n_draws();
        if chains.iter().any(|c| c.n_draws() != n || c.n_parameters() != p) {
            return Err(Error::InvalidInput("psrf chains must have equal shapes".into()));
        }
        if n < 2 {
            return Err(Error::InvalidInput("psrf needs at least 2 draws per chain".into()));
        }
        ((0..p).map(|k| chains.iter().map(|c| c.column(k)).collect()).collect(), false)
    };
    let (values, flags) = columns.iter().map(|c| gelman_rubin(c)).unzip();
    Ok(PsrfReport {
        parameter_names: first.parameter_names.clone(),
        values,
        flags,
        split,
    })
}

/// Potential scale reduction of equal-length sequences.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> (f64, PsrfFlag) {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 {
            (1.0, PsrfFlag::Degenerate)
        } else {
            (f64::INFINITY, PsrfFlag::ZeroWithinVariance)
        };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    ((var_plus / w).sqrt(), PsrfFlag::Ok)
}
