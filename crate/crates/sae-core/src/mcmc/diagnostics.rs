//! Per-parameter effective sample size and split R-hat.
//!
//! Each chain is split in half; R-hat compares between- and within-half
//! variances, and the ESS uses combined-chain autocorrelations truncated by
//! Geyer's initial-positive-sequence rule. Degenerate cases follow fixed
//! conventions: a constant parameter has ESS 1, and chains stuck at
//! different constants give an infinite R-hat.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    pub ess: f64,
    /// Absent when the fit used a single chain.
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostics>,
    pub max_rhat: Option<f64>,
    /// False when any R-hat exceeds 1.05.
    pub healthy: bool,
}

pub const RHAT_HEALTHY_LIMIT: f64 = 1.05;

impl Diagnostics {
    pub fn for_param(&self, name: &str) -> Option<&ParamDiagnostics> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn all_equal(chains: &[Vec<f64>]) -> bool {
    let first = chains.first().and_then(|c| c.first()).copied();
    match first {
        Some(v) => chains.iter().all(|c| c.iter().all(|&x| x == v)),
        None => true,
    }
}

/// `chains[j]` holds chain j's draws for one parameter.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if all_equal(chains) {
        return 1.0;
    }
    let halves = split_halves(chains);
    let m = halves.len();
    if m < 2 {
        return f64::NAN;
    }
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = halves.iter().map(|h| mean(&h[..n])).collect();
    let grand = mean(&means);
    let b = n as f64 / (m as f64 - 1.0)
        * means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = halves
        .iter()
        .map(|h| sample_var(&h[..n]))
        .sum::<f64>()
        / m as f64;
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    if w <= 0.0 {
        return if b > 0.0 { f64::INFINITY } else { 1.0 };
    }
    (var_plus / w).sqrt()
}

/// Effective sample size over all chains combined.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    if all_equal(chains) {
        // Constant draws carry a single piece of information.
        return 1.0;
    }
    let halves = split_halves(chains);
    let m = halves.len();
    let n = halves.iter().map(|h| h.len()).min().unwrap_or(0);
    if n < 4 {
        return (m * n) as f64;
    }
    let total = (m * n) as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(&h[..n])).collect();
    let vars: Vec<f64> = halves.iter().map(|h| sample_var(&h[..n])).collect();
    let w = mean(&vars);
    let grand = mean(&means);
    let b_over_n = means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>()
        / (m as f64 - 1.0).max(1.0);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        // Constant draws carry a single piece of information.
        return 1.0;
    }
    // Combined autocorrelation via within-chain autocovariances.
    let mut rho_sum = 0.0;
    let mut t = 1usize;
    let mut prev_pair = f64::INFINITY;
    while t + 1 < n {
        let rho_t = combined_rho(&halves, &means, n, w, var_plus, t);
        let rho_t1 = combined_rho(&halves, &means, n, w, var_plus, t + 1);
        let pair = rho_t + rho_t1;
        if pair <= 0.0 {
            break;
        }
        // Enforce monotone decrease of the pair sums.
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        rho_sum += pair;
        t += 2;
    }
    (total / (1.0 + 2.0 * rho_sum)).clamp(1.0, total)
}

fn combined_rho(
    halves: &[Vec<f64>],
    means: &[f64],
    n: usize,
    w: f64,
    var_plus: f64,
    t: usize,
) -> f64 {
    let m = halves.len();
    let mut acov = 0.0;
    for (j, h) in halves.iter().enumerate() {
        let mu = means[j];
        let mut s = 0.0;
        for i in 0..(n - t) {
            s += (h[i] - mu) * (h[i + t] - mu);
        }
        acov += s / n as f64;
    }
    acov /= m as f64;
    1.0 - (w - acov) / var_plus
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        if half == 0 {
            out.push(c.clone());
            continue;
        }
        out.push(c[..half].to_vec());
        out.push(c[half..].to_vec());
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Build the diagnostics table for a sample matrix laid out chain by chain.
pub fn compute(
    names: &[String],
    samples: &nalgebra::DMatrix<f64>,
    n_chains: usize,
    draws_per_chain: usize,
) -> Diagnostics {
    let mut params = Vec::with_capacity(names.len());
    let mut max_rhat: Option<f64> = None;
    for (j, name) in names.iter().enumerate() {
        let chains: Vec<Vec<f64>> = (0..n_chains)
            .map(|ch| {
                (0..draws_per_chain)
                    .map(|i| samples[(ch * draws_per_chain + i, j)])
                    .collect()
            })
            .collect();
        let e = ess(&chains);
        let r = if n_chains >= 2 {
            let r = split_rhat(&chains);
            if r.is_nan() {
                None
            } else {
                Some(r)
            }
        } else {
            None
        };
        if let Some(r) = r {
            max_rhat = Some(max_rhat.map_or(r, |m: f64| m.max(r)));
        }
        params.push(ParamDiagnostics { name: name.clone(), ess: e, rhat: r });
    }
    let healthy = max_rhat.is_none_or(|m| m <= RHAT_HEALTHY_LIMIT);
    Diagnostics { params, max_rhat, healthy }
}
