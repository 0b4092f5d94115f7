//! Model scoring: leave-one-out LogScore and simulation-study metrics.
//!
//! The LogScore is exact refit-based cross validation. For each region the
//! model is refit with that region's data held out, S posterior draws of
//! the region mean are taken, and the held-out Stage-1 estimate is scored
//! under its own sampling covariance:
//!
//! ```text
//! lhat_r = (1/S) sum_s N2(yhat_r; mu_r^(s), Vhat_r)
//! LogScore = -sum_r log lhat_r      (also reported per region / as a mean)
//! ```
//!
//! Lower is better. Unit-level fits hold out all of a region's clusters and
//! score the aggregated posterior means against the same Stage-1 target.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::direct::DirectEstimateSet;
use crate::error::{Result, SaeError};
use crate::mcmc::{fit, FitConfig, FitData, ModelFit};
use crate::model::{AreaFamily, AreaModelSpec, ModelSpec, UnitModelSpec};
use crate::rng::{derive_seed, stream};
use crate::survey::{AdjacencyGraph, RuralFractions, SurveyDataset};

/// Monte Carlo sample count for the predictive density average.
pub const DEFAULT_LOO_DRAWS: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct RegionScore {
    pub region: String,
    /// log lhat_r; -inf indicates full density underflow (flagged).
    pub log_lhat: f64,
    pub underflow: bool,
}

/// Leave-one-out report for a single model.
#[derive(Debug, Clone, Serialize)]
pub struct LogScoreReport {
    pub model_id: String,
    pub per_region: Vec<RegionScore>,
    /// -sum of per-region log predictive densities.
    pub logscore_sum: f64,
    pub logscore_mean: f64,
    pub scored_regions: usize,
    /// Regions skipped (no target or failed refit), with reasons.
    pub skipped: Vec<String>,
}

impl LogScoreReport {
    fn assemble(model_id: String, scores: Vec<RegionScore>, skipped: Vec<String>) -> Self {
        let sum: f64 = -scores.iter().map(|s| s.log_lhat).sum::<f64>();
        let n = scores.len();
        LogScoreReport {
            model_id,
            logscore_sum: sum,
            logscore_mean: if n > 0 { sum / n as f64 } else { f64::NAN },
            scored_regions: n,
            per_region: scores,
            skipped,
        }
    }
}

/// Log density of the bivariate normal restricted to available outcomes.
pub fn log_density_available(
    y: [f64; 2],
    mu: [f64; 2],
    v: &DMatrix<f64>,
    avail: [bool; 2],
) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    match avail {
        [true, true] => {
            let det = v[(0, 0)] * v[(1, 1)] - v[(0, 1)] * v[(0, 1)];
            let e0 = y[0] - mu[0];
            let e1 = y[1] - mu[1];
            let quad = (v[(1, 1)] * e0 * e0 - 2.0 * v[(0, 1)] * e0 * e1 + v[(0, 0)] * e1 * e1) / det;
            -LN_2PI - 0.5 * det.ln() - 0.5 * quad
        }
        [true, false] => {
            let e = y[0] - mu[0];
            -0.5 * LN_2PI - 0.5 * v[(0, 0)].ln() - e * e / (2.0 * v[(0, 0)])
        }
        [false, true] => {
            let e = y[1] - mu[1];
            -0.5 * LN_2PI - 0.5 * v[(1, 1)].ln() - e * e / (2.0 * v[(1, 1)])
        }
        [false, false] => f64::NAN,
    }
}

/// log(mean(exp(x))) with log-sum-exp accumulation.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (sum / xs.len() as f64).ln()
}

/// Score the held-out target against thinned posterior draws of mu_r.
fn score_region(
    fit: &ModelFit,
    region: usize,
    target: &DirectEstimateSet,
    s_draws: usize,
) -> Result<RegionScore> {
    let avail = [
        target.availability[region][0],
        target.availability[region][1],
    ];
    let y = [
        if avail[0] { target.y_hat[(region, 0)] } else { 0.0 },
        if avail[1] { target.y_hat[(region, 1)] } else { 0.0 },
    ];
    let v = &target.v_hat[region];
    let mu1 = fit
        .column(&format!("mu.1.{}", region + 1))
        .ok_or_else(|| SaeError::numerical("fit lacks mu draws for the held-out region"))?;
    let mu2 = fit
        .column(&format!("mu.2.{}", region + 1))
        .ok_or_else(|| SaeError::numerical("fit lacks mu draws for the held-out region"))?;
    let rows = fit.thinned_rows(s_draws);
    let logs: Vec<f64> = rows
        .iter()
        .map(|&i| log_density_available(y, [mu1[i], mu2[i]], v, avail))
        .collect();
    if logs.iter().any(|l| l.is_nan()) {
        return Err(SaeError::numerical("NaN predictive density"));
    }
    let log_lhat = log_mean_exp(&logs);
    Ok(RegionScore {
        region: target.region_labels[region].clone(),
        log_lhat,
        underflow: log_lhat == f64::NEG_INFINITY,
    })
}

/// Area-level leave-one-out LogScore. The direct family has no predictive
/// distribution for a held-out region and is rejected.
pub fn loo_logscore_area(
    spec: &AreaModelSpec,
    estimates: &DirectEstimateSet,
    graph: &AdjacencyGraph,
    config: &FitConfig,
    s_draws: usize,
) -> Result<LogScoreReport> {
    if spec.family == AreaFamily::Direct {
        return Err(SaeError::usage(
            "the direct family has no held-out predictive distribution",
        ));
    }
    let model = ModelSpec::Area(spec.clone());
    let r_all: Vec<usize> = (0..estimates.n_regions())
        .filter(|&r| estimates.region_available(r))
        .collect();
    let results: Vec<(usize, Result<RegionScore>)> = r_all
        .par_iter()
        .map(|&r| {
            let held_out = estimates.without_region(r);
            let seed = derive_seed(config.seed, &[stream::HELD_OUT, r as u64]);
            let cfg = FitConfig { seed, ..config.clone() };
            let score = fit(&model, FitData::Area(&held_out), graph, &cfg)
                .and_then(|f| score_region(&f, r, estimates, s_draws));
            (r, score)
        })
        .collect();
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in results {
        match res {
            Ok(s) => scores.push(s),
            Err(e) => skipped.push(format!("region {}: {e}", estimates.region_labels[r])),
        }
    }
    for r in 0..estimates.n_regions() {
        if !estimates.region_available(r) {
            skipped.push(format!(
                "region {}: no Stage-1 estimate to score against",
                estimates.region_labels[r]
            ));
        }
    }
    Ok(LogScoreReport::assemble(spec.model_id(), scores, skipped))
}

/// Unit-level leave-one-out LogScore: hold out all clusters of a region,
/// refit, aggregate posterior draws to region means, and score the
/// region's full-data Stage-1 estimate.
pub fn loo_logscore_unit(
    spec: &UnitModelSpec,
    data: &SurveyDataset,
    graph: &AdjacencyGraph,
    q: &RuralFractions,
    targets: &DirectEstimateSet,
    config: &FitConfig,
    s_draws: usize,
) -> Result<LogScoreReport> {
    let model = ModelSpec::Unit(spec.clone());
    let r_all: Vec<usize> = (0..graph.n_nodes())
        .filter(|&r| targets.region_available(r))
        .collect();
    let results: Vec<(usize, Result<RegionScore>)> = r_all
        .par_iter()
        .map(|&r| {
            let seed = derive_seed(config.seed, &[stream::HELD_OUT, r as u64]);
            let cfg = FitConfig { seed, ..config.clone() };
            let score = data
                .without_region(r)
                .and_then(|held_out| fit(&model, FitData::Unit(&held_out, q), graph, &cfg))
                .and_then(|f| score_region(&f, r, targets, s_draws));
            (r, score)
        })
        .collect();
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (r, res) in results {
        match res {
            Ok(s) => scores.push(s),
            Err(e) => skipped.push(format!("region {}: {e}", targets.region_labels[r])),
        }
    }
    for r in 0..graph.n_nodes() {
        if !targets.region_available(r) {
            skipped.push(format!(
                "region {}: no Stage-1 estimate to score against",
                targets.region_labels[r]
            ));
        }
    }
    Ok(LogScoreReport::assemble(spec.model_id(), scores, skipped))
}

/// Point estimate and central 95% interval per region and outcome, for one
/// simulation replicate.
#[derive(Debug, Clone)]
pub struct ReplicateSummary {
    /// R x 2 posterior medians.
    pub median: DMatrix<f64>,
    pub lo95: DMatrix<f64>,
    pub hi95: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub region: usize,
    pub outcome: usize,
    pub bias: f64,
    pub abs_bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub coverage: f64,
    pub width: f64,
}

/// Bias / variance / MSE / coverage / width per region and outcome, plus
/// region-averaged summaries.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub replicates: usize,
    pub per_region: Vec<MetricsRow>,
    /// One row per outcome, averaged over regions (region = 0 marker).
    pub summary: Vec<MetricsRow>,
}

/// Compute replicate metrics. `truths[k]` is the R x 2 matrix of true
/// region means for replicate k, matched with `summaries[k]`.
///
/// Errors (estimate minus truth) drive bias, variance, and MSE with
/// population denominators, so MSE = bias^2 + variance exactly. Intervals
/// are closed: a degenerate interval equal to the truth covers it.
pub fn simulation_metrics(
    truths: &[DMatrix<f64>],
    summaries: &[ReplicateSummary],
) -> Result<MetricsReport> {
    if truths.len() != summaries.len() {
        return Err(SaeError::validation(format!(
            "{} truth replicates vs {} fit replicates",
            truths.len(),
            summaries.len()
        )));
    }
    if truths.is_empty() {
        return Err(SaeError::validation("no replicates"));
    }
    let r = truths[0].nrows();
    let k_total = truths.len() as f64;
    let mut per_region = Vec::with_capacity(r * 2);
    for region in 0..r {
        for outcome in 0..2 {
            let mut sum_d = 0.0;
            let mut sum_d2 = 0.0;
            let mut covered = 0.0;
            let mut width_sum = 0.0;
            for (t, s) in truths.iter().zip(summaries) {
                let truth = t[(region, outcome)];
                let est = s.median[(region, outcome)];
                let d = est - truth;
                sum_d += d;
                sum_d2 += d * d;
                let (lo, hi) = (s.lo95[(region, outcome)], s.hi95[(region, outcome)]);
                if lo <= truth && truth <= hi {
                    covered += 1.0;
                }
                width_sum += hi - lo;
            }
            let bias = sum_d / k_total;
            let mse = sum_d2 / k_total;
            let variance = mse - bias * bias;
            per_region.push(MetricsRow {
                region: region + 1,
                outcome: outcome + 1,
                bias,
                abs_bias: bias.abs(),
                variance,
                mse,
                coverage: covered / k_total,
                width: width_sum / k_total,
            });
        }
    }
    let mut summary = Vec::new();
    for outcome in 0..2 {
        let rows: Vec<&MetricsRow> = per_region
            .iter()
            .filter(|m| m.outcome == outcome + 1)
            .collect();
        let n = rows.len() as f64;
        summary.push(MetricsRow {
            region: 0,
            outcome: outcome + 1,
            bias: rows.iter().map(|m| m.bias).sum::<f64>() / n,
            abs_bias: rows.iter().map(|m| m.abs_bias).sum::<f64>() / n,
            variance: rows.iter().map(|m| m.variance).sum::<f64>() / n,
            mse: rows.iter().map(|m| m.mse).sum::<f64>() / n,
            coverage: rows.iter().map(|m| m.coverage).sum::<f64>() / n,
            width: rows.iter().map(|m| m.width).sum::<f64>() / n,
        });
    }
    Ok(MetricsReport {
        replicates: truths.len(),
        per_region,
        summary,
    })
}

/// Summary of a fitted model in replicate form (medians and 95% bounds).
pub fn replicate_summary_from_fit(fit: &ModelFit, n_regions: usize) -> ReplicateSummary {
    let mut median = DMatrix::from_element(n_regions, 2, f64::NAN);
    let mut lo95 = DMatrix::from_element(n_regions, 2, f64::NAN);
    let mut hi95 = DMatrix::from_element(n_regions, 2, f64::NAN);
    for region in 0..n_regions {
        for c in 0..2 {
            if let Some(col) = fit.column(&format!("mu.{}.{}", c + 1, region + 1)) {
                let mut sorted = col;
                sorted.sort_by(|a, b| a.total_cmp(b));
                median[(region, c)] = crate::mcmc::quantile_sorted(&sorted, 0.5);
                lo95[(region, c)] = crate::mcmc::quantile_sorted(&sorted, 0.025);
                hi95[(region, c)] = crate::mcmc::quantile_sorted(&sorted, 0.975);
            }
        }
    }
    ReplicateSummary { median, lo95, hi95 }
}
