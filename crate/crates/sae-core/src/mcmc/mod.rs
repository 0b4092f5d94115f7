//! Model fitting by Markov chain Monte Carlo.
//!
//! Every candidate model here is conditionally Gaussian: given the variance
//! and mixing hyperparameters, the latent field has an exact multivariate
//! normal full conditional, and the shared coefficient has an exact Gaussian
//! Gibbs update. Hyperparameters move by adaptive random-walk Metropolis on
//! transformed coordinates. Chains are independent given sub-seeds derived
//! from the master seed, so results are identical regardless of how many
//! workers execute them.

mod chain;
mod design;
pub mod diagnostics;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use chain::{ChainState, Sampler};
pub use design::{FitData, Hypers};

use crate::direct::DirectEstimateSet;
use crate::error::{Result, SaeError};
use crate::model::{AreaFamily, ModelSpec};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::survey::AdjacencyGraph;
use design::{build_design, Design, Level};
use diagnostics::Diagnostics;

/// Chain/draw configuration for one fit.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub chains: usize,
    /// Warmup iterations per chain (discarded; adaptation happens here).
    pub warmup: usize,
    /// Kept draws per chain.
    pub draws: usize,
    pub seed: u64,
    /// Sample from the prior by dropping every likelihood term.
    pub prior_only: bool,
    /// Hyperparameters to hold fixed, by symbol name (e.g. "sigma.1").
    pub fixed: BTreeMap<String, f64>,
    /// Store per-cluster error draws in the sample table (unit level).
    pub keep_cluster_errors: bool,
    /// Initial random-walk proposal sd on the transformed scale.
    pub initial_step: f64,
    /// Adapt proposal steps during warmup.
    pub adapt: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 2000,
            draws: 2000,
            seed: 0,
            prior_only: false,
            fixed: BTreeMap::new(),
            keep_cluster_errors: false,
            initial_step: 0.5,
            adapt: true,
        }
    }
}

impl FitConfig {
    /// Shorter schedule for repeated fits inside simulations and
    /// cross-validation loops.
    pub fn short(seed: u64) -> Self {
        Self {
            chains: 2,
            warmup: 500,
            draws: 750,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 {
            return Err(SaeError::usage("need at least one chain and one draw"));
        }
        if !(self.initial_step >= 0.0) {
            return Err(SaeError::usage("initial_step must be nonnegative"));
        }
        Ok(())
    }
}

/// Posterior summary row for one region and outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub region: String,
    pub outcome: usize,
    pub median: f64,
    pub q025: f64,
    pub q10: f64,
    pub q90: f64,
    pub q975: f64,
}

/// Posterior samples of every latent symbol and hyperparameter, one column
/// per symbol, chains stacked row-wise.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub spec: ModelSpec,
    pub columns: Vec<String>,
    pub samples: DMatrix<f64>,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
    pub diagnostics: Diagnostics,
    pub notes: Vec<String>,
    pub region_labels: Vec<String>,
    column_index: BTreeMap<String, usize>,
}

impl ModelFit {
    pub fn n_draws(&self) -> usize {
        self.samples.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_index.get(name).copied()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name)
            .map(|j| self.samples.column(j).iter().copied().collect())
    }

    /// Row indices of `s` draws spread evenly over the kept draws.
    pub fn thinned_rows(&self, s: usize) -> Vec<usize> {
        let n = self.n_draws();
        if s == 0 || n == 0 {
            return Vec::new();
        }
        if s >= n {
            return (0..n).collect();
        }
        (0..s).map(|i| i * n / s).collect()
    }

    /// Medians and central interval endpoints of every region mean.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for (r, label) in self.region_labels.iter().enumerate() {
            for c in 0..2 {
                let name = format!("mu.{}.{}", c + 1, r + 1);
                if let Some(values) = self.column(&name) {
                    rows.push(summary_row(label, c, &values));
                }
            }
        }
        rows
    }
}

fn summary_row(label: &str, outcome: usize, values: &[f64]) -> SummaryRow {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    SummaryRow {
        region: label.to_string(),
        outcome: outcome + 1,
        median: quantile_sorted(&sorted, 0.5),
        q025: quantile_sorted(&sorted, 0.025),
        q10: quantile_sorted(&sorted, 0.10),
        q90: quantile_sorted(&sorted, 0.90),
        q975: quantile_sorted(&sorted, 0.975),
    }
}

/// Linear-interpolation quantile of pre-sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    let pos = p * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Build a sampler without running it, for driving individual update
/// operations directly.
pub fn sampler_for(
    spec: &ModelSpec,
    data: FitData<'_>,
    graph: &AdjacencyGraph,
    config: &FitConfig,
) -> Result<Sampler> {
    config.validate()?;
    let design = build_design(spec, data, graph)?;
    Sampler::new(
        design,
        config.fixed.clone(),
        config.prior_only,
        config.initial_step,
        config.adapt,
    )
}

/// Fit a model specification to data.
///
/// Deterministic given (spec, data, config, seed); chains run in parallel
/// with seeds derived from (seed, chain index).
pub fn fit(
    spec: &ModelSpec,
    data: FitData<'_>,
    graph: &AdjacencyGraph,
    config: &FitConfig,
) -> Result<ModelFit> {
    config.validate()?;
    if let (ModelSpec::Area(s), FitData::Area(est)) = (spec, data) {
        if s.family == AreaFamily::Direct {
            return fit_direct(spec.clone(), est, config);
        }
    }
    let design = build_design(spec, data, graph)?;
    let sampler = Sampler::new(
        design,
        config.fixed.clone(),
        config.prior_only,
        config.initial_step,
        config.adapt,
    )?;
    let columns = column_names(sampler.design(), config.keep_cluster_errors);
    let results: Result<Vec<DMatrix<f64>>> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&sampler, c, config, &columns))
        .collect();
    let per_chain = results?;
    let n_cols = columns.len();
    let mut samples = DMatrix::zeros(config.chains * config.draws, n_cols);
    for (c, block) in per_chain.iter().enumerate() {
        samples.rows_mut(c * config.draws, config.draws).copy_from(block);
    }
    let diag_names: Vec<String> = columns
        .iter()
        .filter(|n| !n.starts_with("eps."))
        .cloned()
        .collect();
    let diag_matrix = select_columns(&samples, &columns, &diag_names);
    let diagnostics = diagnostics::compute(&diag_names, &diag_matrix, config.chains, config.draws);
    let mut notes = Vec::new();
    if let Some(area) = &sampler.design().area {
        if !area.floored_regions.is_empty() {
            let labels: Vec<&str> = area
                .floored_regions
                .iter()
                .map(|&r| sampler.design().region_labels[r].as_str())
                .collect();
            notes.push(format!(
                "variance floor {} applied to regions {labels:?}",
                design::VARIANCE_FLOOR
            ));
        }
    }
    let column_index = columns
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok(ModelFit {
        spec: spec.clone(),
        columns,
        samples,
        n_chains: config.chains,
        draws_per_chain: config.draws,
        seed: config.seed,
        diagnostics,
        notes,
        region_labels: sampler.design().region_labels.clone(),
        column_index,
    })
}

fn select_columns(
    samples: &DMatrix<f64>,
    all: &[String],
    wanted: &[String],
) -> DMatrix<f64> {
    let index: BTreeMap<&str, usize> = all.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut out = DMatrix::zeros(samples.nrows(), wanted.len());
    for (j, name) in wanted.iter().enumerate() {
        out.set_column(j, &samples.column(index[name.as_str()]));
    }
    out
}

fn run_chain(
    sampler: &Sampler,
    chain_idx: usize,
    config: &FitConfig,
    columns: &[String],
) -> Result<DMatrix<f64>> {
    let seed = derive_seed(config.seed, &[stream::CHAIN, chain_idx as u64]);
    let mut rng = rng_from_seed(seed);
    let mut state = sampler.init_state(&mut rng)?;
    let mut out = DMatrix::zeros(config.draws, columns.len());
    for iter in 0..(config.warmup + config.draws) {
        let adapting = iter < config.warmup;
        sampler.update_hyperparameters(&mut state, &mut rng, adapting)?;
        sampler.update_lambda(&mut state, &mut rng)?;
        sampler.update_latent_field(&mut state, &mut rng)?;
        if iter >= config.warmup {
            record_row(sampler, &state, &mut out, iter - config.warmup, config.keep_cluster_errors);
        }
    }
    Ok(out)
}

fn column_names(design: &Design, keep_eps: bool) -> Vec<String> {
    let r = design.n_regions;
    let mut names = vec!["beta.1".to_string(), "beta.2".to_string()];
    if design.off_gamma.is_some() {
        names.push("gamma.1".to_string());
        names.push("gamma.2".to_string());
    }
    names.push("sigma.1".to_string());
    names.push("sigma.2".to_string());
    if design.spatial {
        names.push("rho.1".to_string());
        names.push("rho.2".to_string());
    }
    if design.shared.is_some() {
        names.push("lambda".to_string());
    }
    if design.level == Level::Unit {
        if design.per_region_omega {
            for c in 0..2 {
                for i in 0..r {
                    names.push(format!("omega.{}.{}", c + 1, i + 1));
                }
            }
        } else {
            names.push("omega.1".to_string());
            names.push("omega.2".to_string());
        }
        names.push("sigma_eps.1".to_string());
        names.push("sigma_eps.2".to_string());
    }
    for c in 0..2 {
        for i in 0..r {
            names.push(format!("v_star.{}.{}", c + 1, i + 1));
        }
    }
    if design.spatial {
        for c in 0..2 {
            for i in 0..r {
                names.push(format!("u_star.{}.{}", c + 1, i + 1));
            }
        }
    }
    for c in 0..2 {
        for i in 0..r {
            names.push(format!("s.{}.{}", c + 1, i + 1));
        }
    }
    for c in 0..2 {
        for i in 0..r {
            names.push(format!("mu.{}.{}", c + 1, i + 1));
        }
    }
    if keep_eps && design.level == Level::Unit {
        for c in 0..2 {
            for id in &design.cluster_ids {
                names.push(format!("eps.{}.{}", c + 1, id));
            }
        }
    }
    names
}

fn record_row(
    sampler: &Sampler,
    state: &ChainState,
    out: &mut DMatrix<f64>,
    row: usize,
    keep_eps: bool,
) {
    let design = sampler.design();
    let r = design.n_regions;
    let mut j = 0usize;
    let mut push = |out: &mut DMatrix<f64>, v: f64| {
        out[(row, j)] = v;
        j += 1;
    };
    push(out, state.x[design.off_beta]);
    push(out, state.x[design.off_beta + 1]);
    if let Some(g) = design.off_gamma {
        push(out, state.x[g]);
        push(out, state.x[g + 1]);
    }
    push(out, state.hypers.sigma[0]);
    push(out, state.hypers.sigma[1]);
    if design.spatial {
        push(out, state.hypers.rho[0]);
        push(out, state.hypers.rho[1]);
    }
    if design.shared.is_some() {
        push(out, state.hypers.lambda);
    }
    if design.level == Level::Unit {
        for v in &state.hypers.omega {
            push(out, *v);
        }
        push(out, state.hypers.sigma_eps[0]);
        push(out, state.hypers.sigma_eps[1]);
    }
    for c in 0..2 {
        for i in 0..r {
            push(out, state.x[design.off_v[c] + i]);
        }
    }
    if design.spatial {
        for c in 0..2 {
            for i in 0..r {
                push(out, state.spatial_proj[c][i]);
            }
        }
    }
    let own = [sampler.own_effect(state, 0), sampler.own_effect(state, 1)];
    for s in &own {
        for i in 0..r {
            push(out, s[i]);
        }
    }
    let mut mu = sampler.region_means(state);
    if design.level == Level::Unit {
        // Aggregate over urban/rural shares; cluster errors are excluded
        // from model-based predictions.
        let q = design.rural_q.as_ref().unwrap();
        let gamma_off = design.off_gamma.unwrap();
        for c in 0..2 {
            for i in 0..r {
                mu[c][i] += q[i] * state.x[gamma_off + c];
            }
        }
    }
    for c in 0..2 {
        for i in 0..r {
            push(out, mu[c][i]);
        }
    }
    if keep_eps && design.level == Level::Unit {
        for c in 0..2 {
            for e in &state.eps {
                push(out, e[c]);
            }
        }
    }
}

/// "Fit" the bivariate direct model: draws are exact samples from
/// N(yhat_r, Vhat_r) per region, with no smoothing.
fn fit_direct(spec: ModelSpec, est: &DirectEstimateSet, config: &FitConfig) -> Result<ModelFit> {
    let r = est.n_regions();
    let mut columns = Vec::new();
    let mut chol = Vec::with_capacity(r);
    for i in 0..r {
        let v = &est.v_hat[i];
        let a = [est.availability[i][0], est.availability[i][1]];
        let l = match (a[0], a[1]) {
            (true, true) => {
                let l11 = v[(0, 0)].max(0.0).sqrt();
                let l21 = if l11 > 0.0 { v[(0, 1)] / l11 } else { 0.0 };
                let l22 = (v[(1, 1)] - l21 * l21).max(0.0).sqrt();
                Some([l11, l21, l22])
            }
            (true, false) => Some([v[(0, 0)].max(0.0).sqrt(), 0.0, 0.0]),
            (false, true) => Some([0.0, 0.0, v[(1, 1)].max(0.0).sqrt()]),
            (false, false) => None,
        };
        chol.push(l);
    }
    for c in 0..2 {
        for i in 0..r {
            if est.availability[i][c] {
                columns.push(format!("mu.{}.{}", c + 1, i + 1));
            }
        }
    }
    let results: Vec<DMatrix<f64>> = (0..config.chains)
        .into_par_iter()
        .map(|chain_idx| {
            let seed = derive_seed(config.seed, &[stream::DIRECT_DRAWS, chain_idx as u64]);
            let mut rng = rng_from_seed(seed);
            let mut out = DMatrix::zeros(config.draws, columns.len());
            for row in 0..config.draws {
                // Draw the full bivariate vector per region, then scatter.
                let mut draws0 = vec![f64::NAN; r];
                let mut draws1 = vec![f64::NAN; r];
                for i in 0..r {
                    if let Some(l) = &chol[i] {
                        let z0: f64 = rng.sample(StandardNormal);
                        let z1: f64 = rng.sample(StandardNormal);
                        if est.availability[i][0] {
                            draws0[i] = est.y_hat[(i, 0)] + l[0] * z0;
                        }
                        if est.availability[i][1] {
                            draws1[i] = est.y_hat[(i, 1)] + l[1] * z0 + l[2] * z1;
                        }
                    }
                }
                let mut j = 0usize;
                for c in 0..2 {
                    for i in 0..r {
                        if est.availability[i][c] {
                            out[(row, j)] = if c == 0 { draws0[i] } else { draws1[i] };
                            j += 1;
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut samples = DMatrix::zeros(config.chains * config.draws, columns.len());
    for (c, block) in results.iter().enumerate() {
        samples.rows_mut(c * config.draws, config.draws).copy_from(block);
    }
    let diagnostics = diagnostics::compute(&columns, &samples, config.chains, config.draws);
    let column_index = columns
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    Ok(ModelFit {
        spec,
        columns,
        samples,
        n_chains: config.chains,
        draws_per_chain: config.draws,
        seed: config.seed,
        diagnostics,
        notes: Vec::new(),
        region_labels: est.region_labels.clone(),
        column_index,
    })
}

/// Write samples as CSV: `chain,draw` indices then one column per symbol.
pub fn write_samples_csv(fit: &ModelFit, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_samples(fit, file)
}

pub fn write_samples(fit: &ModelFit, writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(fit.columns.iter().cloned());
    wtr.write_record(&header)?;
    for row in 0..fit.n_draws() {
        let chain = row / fit.draws_per_chain + 1;
        let draw = row % fit.draws_per_chain + 1;
        let mut rec = vec![chain.to_string(), draw.to_string()];
        for j in 0..fit.columns.len() {
            rec.push(format!("{}", fit.samples[(row, j)]));
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Column-oriented view of a samples CSV.
#[derive(Debug, Clone)]
pub struct SampleTable {
    pub columns: Vec<String>,
    pub data: DMatrix<f64>,
}

impl SampleTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|j| self.data.column(j).iter().copied().collect())
    }
}

pub fn load_samples_csv(path: impl AsRef<Path>) -> Result<SampleTable> {
    let file = std::fs::File::open(path.as_ref())?;
    read_samples(file)
}

pub fn read_samples(reader: impl Read) -> Result<SampleTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    if header.len() < 2 || header[0] != "chain" || header[1] != "draw" {
        return Err(SaeError::parse(
            "header",
            "samples CSV must start with chain,draw columns",
        ));
    }
    let columns: Vec<String> = header[2..].to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| SaeError::parse(format!("line {line}"), e.to_string()))?;
        let mut vals = Vec::with_capacity(columns.len());
        for field in row.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|e| SaeError::parse(format!("line {line}"), format!("{e}")))?;
            vals.push(v);
        }
        if vals.len() != columns.len() {
            return Err(SaeError::parse(
                format!("line {line}"),
                format!("expected {} values, got {}", columns.len(), vals.len()),
            ));
        }
        rows.push(vals);
    }
    let n = rows.len();
    let mut data = DMatrix::zeros(n, columns.len());
    for (i, vals) in rows.iter().enumerate() {
        for (j, v) in vals.iter().enumerate() {
            data[(i, j)] = *v;
        }
    }
    Ok(SampleTable { columns, data })
}
