//! Scenario simulators and the replicate study runner.
//!
//! Area-level scenarios simulate Stage-1 direct estimates straight from
//! their sampling distributions; unit-level scenarios simulate individual
//! survey records under the stratified two-stage layout. Generating
//! parameter defaults come from fitted values on comparable survey data and
//! every knob is overridable. Replicates are seeded independently from
//! (master seed, replicate), so the study is reproducible under any degree
//! of parallelism.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direct::DirectEstimateSet;
use crate::error::{Result, SaeError};
use crate::evaluation::{
    replicate_summary_from_fit, simulation_metrics, MetricsReport, ReplicateSummary,
};
use crate::mcmc::{fit, FitConfig, FitData};
use crate::model::{
    aggregate_region_mean, area_linear_predictor, unit_linear_predictor, AreaFamily,
    AreaModelSpec, LatentState, ModelSpec, UnitFamily, UnitModelSpec,
};
use crate::rng::{derive_seed, rng_from_seed, stream};
use crate::spatial::{build_icar_precision, compute_scaling, sample_constrained_icar_with, IcarStructure};
use crate::survey::{AdjacencyGraph, IndividualRecord, RuralFractions, SurveyDataset};

const Z975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioLevel {
    Area,
    Unit,
}

/// One scenario request, as serialized in scenario config JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub level: ScenarioLevel,
    pub scenario_id: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Named parameter overrides, e.g. {"lambda": 0.5, "v_corr": 0.3}.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let max = match self.level {
            ScenarioLevel::Area => 9,
            ScenarioLevel::Unit => 7,
        };
        if self.scenario_id == 0 || self.scenario_id > max {
            return Err(SaeError::usage(format!(
                "scenario id {} out of range 1..={max} for {:?} level",
                self.scenario_id, self.level
            )));
        }
        if self.replicates == 0 {
            return Err(SaeError::usage("replicate count must be at least 1"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.level {
            ScenarioLevel::Area => format!("area:{}", self.scenario_id),
            ScenarioLevel::Unit => format!("unit:{}", self.scenario_id),
        }
    }
}

/// Generating parameters with scenario-specific regimes applied.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorParams {
    pub beta: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: [f64; 2],
    pub lambda: f64,
    pub gamma: [f64; 2],
    pub omega: [f64; 2],
    pub sigma_eps: [f64; 2],
    /// Stage-1 sd scale range (area level): per-region sds drawn uniformly.
    pub v_sd_lo: f64,
    pub v_sd_hi: f64,
    /// Stage-1 cross-outcome correlation (bivariate scenarios).
    pub v_corr: f64,
    /// Per-outcome multiplier on the Stage-1 covariance.
    pub v_scale: [f64; 2],
    pub clusters_per_stratum: usize,
    pub individuals_per_cluster: usize,
}

fn area_defaults() -> GeneratorParams {
    GeneratorParams {
        beta: [-0.98, -0.87],
        sigma: [0.19, 0.25],
        rho: [0.79, 0.92],
        lambda: 0.75,
        gamma: [0.0, 0.0],
        omega: [0.0, 0.0],
        sigma_eps: [0.0, 0.0],
        v_sd_lo: 0.05,
        v_sd_hi: 0.15,
        v_corr: 0.5,
        v_scale: [1.0, 1.0],
        clusters_per_stratum: 0,
        individuals_per_cluster: 0,
    }
}

fn unit_defaults() -> GeneratorParams {
    GeneratorParams {
        beta: [-0.77, -0.66],
        sigma: [0.13, 0.19],
        rho: [0.71, 0.67],
        lambda: 0.72,
        gamma: [-0.29, -0.29],
        omega: [1.31, 1.14],
        sigma_eps: [0.36, 0.33],
        v_sd_lo: 0.0,
        v_sd_hi: 0.0,
        v_corr: 0.0,
        v_scale: [1.0, 1.0],
        clusters_per_stratum: 4,
        individuals_per_cluster: 15,
    }
}

fn apply_override(params: &mut GeneratorParams, key: &str, value: f64) -> Result<()> {
    match key {
        "beta.1" => params.beta[0] = value,
        "beta.2" => params.beta[1] = value,
        "sigma.1" => params.sigma[0] = value,
        "sigma.2" => params.sigma[1] = value,
        "rho.1" => params.rho[0] = value,
        "rho.2" => params.rho[1] = value,
        "lambda" => params.lambda = value,
        "gamma.1" => params.gamma[0] = value,
        "gamma.2" => params.gamma[1] = value,
        "omega.1" => params.omega[0] = value,
        "omega.2" => params.omega[1] = value,
        "sigma_eps.1" => params.sigma_eps[0] = value,
        "sigma_eps.2" => params.sigma_eps[1] = value,
        "v_sd_lo" => params.v_sd_lo = value,
        "v_sd_hi" => params.v_sd_hi = value,
        "v_corr" => params.v_corr = value,
        "v_scale.1" => params.v_scale[0] = value,
        "v_scale.2" => params.v_scale[1] = value,
        "clusters_per_stratum" => params.clusters_per_stratum = value as usize,
        "individuals_per_cluster" => params.individuals_per_cluster = value as usize,
        other => {
            return Err(SaeError::usage(format!(
                "unknown generator parameter {other:?}"
            )))
        }
    }
    Ok(())
}

/// Generating structure of one scenario: which family drives the effects
/// and which Stage-1 variance regime applies.
#[derive(Debug, Clone, Copy)]
struct AreaScenario {
    spatial: bool,
    shared: bool,
    bivariate_stage1: bool,
}

fn area_scenario(id: usize) -> AreaScenario {
    match id {
        1 => AreaScenario { spatial: false, shared: false, bivariate_stage1: false },
        2 => AreaScenario { spatial: true, shared: false, bivariate_stage1: false },
        3 => AreaScenario { spatial: false, shared: false, bivariate_stage1: true },
        4 => AreaScenario { spatial: true, shared: false, bivariate_stage1: true },
        5 => AreaScenario { spatial: false, shared: true, bivariate_stage1: true },
        // 6 is the baseline shared BYM; 7-9 rescale the Stage-1 variances.
        _ => AreaScenario { spatial: true, shared: true, bivariate_stage1: true },
    }
}

/// Resolve the generating parameters for a scenario, with overrides applied
/// after the scenario's own regime.
pub fn scenario_params(config: &ScenarioConfig) -> Result<GeneratorParams> {
    config.validate()?;
    let mut params = match config.level {
        ScenarioLevel::Area => {
            let mut p = area_defaults();
            match config.scenario_id {
                7 => p.v_scale = [10.0, 10.0],
                8 => p.v_scale = [0.1, 0.1],
                9 => p.v_scale = [10.0, 0.1],
                _ => {}
            }
            p
        }
        ScenarioLevel::Unit => {
            let mut p = unit_defaults();
            match config.scenario_id {
                5 => {
                    p.omega = [p.omega[0] * 2.0, p.omega[1] * 2.0];
                    p.sigma_eps = [p.sigma_eps[0] * 2.0, p.sigma_eps[1] * 2.0];
                }
                6 => {
                    p.omega = [p.omega[0] * 0.5, p.omega[1] * 0.5];
                    p.sigma_eps = [p.sigma_eps[0] * 0.5, p.sigma_eps[1] * 0.5];
                }
                7 => {
                    p.omega = [p.omega[0] * 2.0, p.omega[1] * 0.5];
                    p.sigma_eps = [p.sigma_eps[0] * 2.0, p.sigma_eps[1] * 0.5];
                }
                _ => {}
            }
            p
        }
    };
    for (k, v) in &config.overrides {
        apply_override(&mut params, k, *v)?;
    }
    Ok(params)
}

/// Draw the two per-outcome region effects s_1, s_2 for a generating family.
fn draw_effects<R: Rng>(
    rng: &mut R,
    icar: Option<&IcarStructure>,
    params: &GeneratorParams,
    spatial: bool,
    n: usize,
) -> Result<[DVector<f64>; 2]> {
    let mut effects = [DVector::zeros(n), DVector::zeros(n)];
    for c in 0..2 {
        let v: DVector<f64> = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        if spatial {
            let icar = icar.expect("spatial scenario needs a scaled ICAR structure");
            let u = sample_constrained_icar_with(icar, rng)?;
            let effect = crate::spatial::Bym2Effect {
                sigma: params.sigma[c],
                rho: params.rho[c],
                v_star: v,
                u_star: u,
            };
            effects[c] = crate::spatial::realize_bym2(&effect, icar)?;
        } else {
            effects[c] = v * params.sigma[c];
        }
    }
    Ok(effects)
}

/// Latent state carrying the generated effects (for predictor assembly via
/// the model library).
fn generator_state(params: &GeneratorParams, effects: &[DVector<f64>; 2], shared: bool) -> LatentState {
    LatentState {
        beta: Some(params.beta),
        gamma: Some(params.gamma),
        lambda: Some(if shared { params.lambda } else { 0.0 }),
        effects: [Some(effects[0].clone()), Some(effects[1].clone())],
        cluster_errors: Some(BTreeMap::new()),
    }
}

/// One simulated area-level replicate: true region means and the simulated
/// Stage-1 estimate set.
pub fn generate_area_replicate(
    config: &ScenarioConfig,
    graph: &AdjacencyGraph,
    replicate: usize,
) -> Result<(DMatrix<f64>, DirectEstimateSet)> {
    if config.level != ScenarioLevel::Area {
        return Err(SaeError::usage("area generator called with a unit config"));
    }
    let params = scenario_params(config)?;
    let scen = area_scenario(config.scenario_id);
    let n = graph.n_nodes();
    let icar = if scen.spatial {
        Some(compute_scaling(&build_icar_precision(graph))?)
    } else {
        None
    };
    let seed = derive_seed(config.seed, &[stream::REPLICATE, replicate as u64]);
    let mut rng = rng_from_seed(seed);
    let effects = draw_effects(&mut rng, icar.as_ref(), &params, scen.spatial, n)?;
    let state = generator_state(&params, &effects, scen.shared);
    // Truths through the model library's predictor assembly.
    let family = if scen.shared {
        AreaFamily::BivSharedIid
    } else {
        AreaFamily::BivNonsharedIid
    };
    let spec = AreaModelSpec::new(family);
    let mut truth = DMatrix::zeros(n, 2);
    for r in 0..n {
        let mu = area_linear_predictor(&spec, &state, r)?;
        truth[(r, 0)] = mu[0];
        truth[(r, 1)] = mu[1];
    }
    // Stage-1 noise: V_r drawn per region, then yhat ~ N2(mu, V_r).
    let mut y_hat = DMatrix::zeros(n, 2);
    let mut v_hat = Vec::with_capacity(n);
    for r in 0..n {
        let sd0: f64 = rng.gen_range(params.v_sd_lo..params.v_sd_hi);
        let sd1: f64 = rng.gen_range(params.v_sd_lo..params.v_sd_hi);
        let v11 = sd0 * sd0 * params.v_scale[0];
        let v22 = sd1 * sd1 * params.v_scale[1];
        let v12 = if scen.bivariate_stage1 {
            params.v_corr * (v11 * v22).sqrt()
        } else {
            0.0
        };
        let v = DMatrix::from_row_slice(2, 2, &[v11, v12, v12, v22]);
        let l11 = v11.sqrt();
        let l21 = v12 / l11;
        let l22 = (v22 - l21 * l21).max(0.0).sqrt();
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        y_hat[(r, 0)] = truth[(r, 0)] + l11 * z0;
        y_hat[(r, 1)] = truth[(r, 1)] + l21 * z0 + l22 * z1;
        v_hat.push(v);
    }
    let estimates = DirectEstimateSet {
        region_labels: graph.labels().to_vec(),
        n_outcomes: 2,
        y_hat,
        v_hat,
        availability: vec![vec![true, true]; n],
        psd_projected: vec![false; n],
    };
    Ok((truth, estimates))
}

fn unit_scenario_family(id: usize) -> (bool, bool) {
    // (spatial, shared)
    match id {
        1 => (false, false),
        2 => (true, false),
        3 => (false, true),
        _ => (true, true),
    }
}

/// One simulated unit-level replicate: true region means and the survey
/// dataset, with design weights consistent with the stratified layout.
pub fn generate_unit_replicate(
    config: &ScenarioConfig,
    graph: &AdjacencyGraph,
    q: &RuralFractions,
    replicate: usize,
) -> Result<(DMatrix<f64>, SurveyDataset)> {
    if config.level != ScenarioLevel::Unit {
        return Err(SaeError::usage("unit generator called with an area config"));
    }
    let params = scenario_params(config)?;
    let (spatial, shared) = unit_scenario_family(config.scenario_id);
    let n = graph.n_nodes();
    if q.len() != n {
        return Err(SaeError::validation(format!(
            "rural fractions have length {}, graph has {n} nodes",
            q.len()
        )));
    }
    let icar = if spatial {
        Some(compute_scaling(&build_icar_precision(graph))?)
    } else {
        None
    };
    let seed = derive_seed(config.seed, &[stream::REPLICATE, replicate as u64]);
    let mut rng = rng_from_seed(seed);
    let effects = draw_effects(&mut rng, icar.as_ref(), &params, spatial, n)?;
    let mut state = generator_state(&params, &effects, shared);

    let spec = UnitModelSpec::new(if shared {
        UnitFamily::IidShared
    } else {
        UnitFamily::IidNonshared
    });
    let mut truth = DMatrix::zeros(n, 2);
    for r in 0..n {
        let mu = aggregate_region_mean(&spec, &state, q, r)?;
        truth[(r, 0)] = mu[0];
        truth[(r, 1)] = mu[1];
    }

    // Cluster errors, then individual records.
    let mut cluster_errors = BTreeMap::new();
    let m_ind = params.individuals_per_cluster;
    let k_per = params.clusters_per_stratum;
    let mut records = Vec::with_capacity(n * 2 * k_per * m_ind);
    // Population scale for design weights: share of stratum population per
    // sampled individual.
    let pop = 10_000.0;
    for r in 0..n {
        for (z, rural) in [(0usize, false), (1usize, true)] {
            let share = if rural { q.get(r)? } else { 1.0 - q.get(r)? };
            // Zero population share still gets sampled clusters only if the
            // share is positive.
            if share <= 0.0 {
                continue;
            }
            let weight = share * pop / (k_per * m_ind) as f64;
            for k in 0..k_per {
                let id = format!("r{}z{}k{}", r + 1, z, k);
                let eps = [
                    params.sigma_eps[0] * rng.sample::<f64, _>(StandardNormal),
                    params.sigma_eps[1] * rng.sample::<f64, _>(StandardNormal),
                ];
                cluster_errors.insert(id.clone(), eps);
                state.cluster_errors = Some(cluster_errors.clone());
                for _ in 0..m_ind {
                    let mu = unit_linear_predictor(&spec, &state, r, &id, rural)?;
                    let y1 = mu[0] + params.omega[0] * rng.sample::<f64, _>(StandardNormal);
                    let y2 = mu[1] + params.omega[1] * rng.sample::<f64, _>(StandardNormal);
                    records.push(IndividualRecord {
                        region: r,
                        stratum: format!("r{}z{}", r + 1, z),
                        cluster: id.clone(),
                        weight,
                        rural,
                        outcomes: vec![Some(y1), Some(y2)],
                    });
                }
            }
        }
    }
    let data = SurveyDataset::new(records, 2, n, graph.labels().to_vec())?;
    Ok((truth, data))
}

/// Study outcome for one model.
#[derive(Debug, Clone, Serialize)]
pub struct ModelStudyResult {
    pub model_id: String,
    pub metrics: MetricsReport,
    /// 1-based replicate indices whose fit failed and were excluded.
    pub failed_replicates: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyResult {
    pub scenario: String,
    pub replicates: usize,
    pub models: Vec<ModelStudyResult>,
}

/// Where to archive raw replicate data, when requested.
pub struct ArchiveSpec<'a> {
    pub dir: &'a Path,
}

/// Run the full generate / fit / summarize / score loop.
///
/// Replicates run in parallel; model fits within a replicate are seeded by
/// (seed, replicate, model index), so the result is independent of worker
/// count and execution order.
pub fn run_simulation_study(
    config: &ScenarioConfig,
    graph: &AdjacencyGraph,
    q: &RuralFractions,
    models: &[ModelSpec],
    fit_config: &FitConfig,
    archive: Option<&ArchiveSpec<'_>>,
) -> Result<StudyResult> {
    config.validate()?;
    for m in models {
        let level_ok = matches!(
            (config.level, m),
            (ScenarioLevel::Area, ModelSpec::Area(_)) | (ScenarioLevel::Unit, ModelSpec::Unit(_))
        );
        if !level_ok {
            return Err(SaeError::usage(format!(
                "model {} does not match the {:?} scenario level",
                m.model_id(),
                config.level
            )));
        }
    }
    if let Some(a) = archive {
        std::fs::create_dir_all(a.dir)?;
    }

    struct ReplicateOutcome {
        truth: DMatrix<f64>,
        summaries: Vec<Result<ReplicateSummary>>,
    }

    let outcomes: Result<Vec<ReplicateOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| {
            let (truth, area_data, unit_data) = match config.level {
                ScenarioLevel::Area => {
                    let (t, est) = generate_area_replicate(config, graph, k)?;
                    (t, Some(est), None)
                }
                ScenarioLevel::Unit => {
                    let (t, data) = generate_unit_replicate(config, graph, q, k)?;
                    (t, None, Some(data))
                }
            };
            if let Some(a) = archive {
                let dir = a.dir.join(format!("replicate_{}", k + 1));
                std::fs::create_dir_all(&dir)?;
                write_truth_csv(&truth, graph, &dir.join("truth.csv"))?;
                if let Some(est) = &area_data {
                    crate::direct::write_estimates_csv(est, dir.join("data.csv"))?;
                }
                if let Some(data) = &unit_data {
                    crate::survey::write_survey_csv(data, dir.join("data.csv"))?;
                }
            }
            let mut summaries = Vec::with_capacity(models.len());
            for (mi, model) in models.iter().enumerate() {
                let seed = derive_seed(
                    config.seed,
                    &[stream::REPLICATE, k as u64, stream::SCENARIO, mi as u64],
                );
                let summary = if matches!(
                    model,
                    ModelSpec::Area(AreaModelSpec { family: AreaFamily::Direct, .. })
                ) {
                    // Exact normal summaries; no Monte Carlo needed.
                    Ok(direct_summary(area_data.as_ref().unwrap()))
                } else {
                    let cfg = FitConfig { seed, ..fit_config.clone() };
                    let data = match config.level {
                        ScenarioLevel::Area => FitData::Area(area_data.as_ref().unwrap()),
                        ScenarioLevel::Unit => FitData::Unit(unit_data.as_ref().unwrap(), q),
                    };
                    fit(model, data, graph, &cfg)
                        .map(|f| replicate_summary_from_fit(&f, graph.n_nodes()))
                };
                if let (Some(a), Ok(s)) = (archive, &summary) {
                    let dir = a.dir.join(format!("replicate_{}", k + 1));
                    write_summary_csv(s, graph, &dir.join(format!("fit_{}.csv", model.model_id())))?;
                }
                summaries.push(summary);
            }
            Ok(ReplicateOutcome { truth, summaries })
        })
        .collect();
    let outcomes = outcomes?;

    let mut results = Vec::with_capacity(models.len());
    for (mi, model) in models.iter().enumerate() {
        let mut truths = Vec::new();
        let mut summaries = Vec::new();
        let mut failed = Vec::new();
        for (k, o) in outcomes.iter().enumerate() {
            match &o.summaries[mi] {
                Ok(s) => {
                    truths.push(o.truth.clone());
                    summaries.push(s.clone());
                }
                Err(_) => failed.push(k + 1),
            }
        }
        if truths.is_empty() {
            return Err(SaeError::numerical(format!(
                "model {} failed on every replicate",
                model.model_id()
            )));
        }
        results.push(ModelStudyResult {
            model_id: model.model_id(),
            metrics: simulation_metrics(&truths, &summaries)?,
            failed_replicates: failed,
        });
    }
    Ok(StudyResult {
        scenario: config.label(),
        replicates: config.replicates,
        models: results,
    })
}

/// Analytic replicate summary for the direct estimates: exact normal
/// medians and 95% bounds.
pub fn direct_summary(est: &DirectEstimateSet) -> ReplicateSummary {
    let r = est.n_regions();
    let mut median = DMatrix::from_element(r, 2, f64::NAN);
    let mut lo95 = DMatrix::from_element(r, 2, f64::NAN);
    let mut hi95 = DMatrix::from_element(r, 2, f64::NAN);
    for i in 0..r {
        for c in 0..2 {
            if est.availability[i][c] {
                let m = est.y_hat[(i, c)];
                let sd = est.v_hat[i][(c, c)].sqrt();
                median[(i, c)] = m;
                lo95[(i, c)] = m - Z975 * sd;
                hi95[(i, c)] = m + Z975 * sd;
            }
        }
    }
    ReplicateSummary { median, lo95, hi95 }
}

fn write_truth_csv(truth: &DMatrix<f64>, graph: &AdjacencyGraph, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["region", "mu.1", "mu.2"])?;
    for r in 0..truth.nrows() {
        wtr.write_record([
            graph.label_of(r).to_string(),
            format!("{}", truth[(r, 0)]),
            format!("{}", truth[(r, 1)]),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_summary_csv(s: &ReplicateSummary, graph: &AdjacencyGraph, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["region", "outcome", "median", "q2.5", "q97.5"])?;
    for r in 0..s.median.nrows() {
        for c in 0..2 {
            wtr.write_record([
                graph.label_of(r).to_string(),
                format!("{}", c + 1),
                format!("{}", s.median[(r, c)]),
                format!("{}", s.lo95[(r, c)]),
                format!("{}", s.hi95[(r, c)]),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area_config(id: usize, replicates: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            level: ScenarioLevel::Area,
            scenario_id: id,
            replicates,
            seed,
            overrides: BTreeMap::new(),
        }
    }

    #[test]
    fn scenario_bounds_are_enforced() {
        assert!(area_config(10, 1, 0).validate().is_err());
        assert!(area_config(0, 1, 0).validate().is_err());
        let unit_bad = ScenarioConfig {
            level: ScenarioLevel::Unit,
            scenario_id: 8,
            replicates: 1,
            seed: 0,
            overrides: BTreeMap::new(),
        };
        assert!(unit_bad.validate().is_err());
        assert!(area_config(9, 1, 0).validate().is_ok());
    }

    #[test]
    fn zero_random_effects_collapse_to_intercepts() {
        let graph = AdjacencyGraph::lattice(6).unwrap();
        let mut config = area_config(1, 1, 3);
        config.overrides.insert("sigma.1".into(), 0.0);
        config.overrides.insert("sigma.2".into(), 0.0);
        let (truth, est) = generate_area_replicate(&config, &graph, 0).unwrap();
        for r in 0..6 {
            assert_eq!(truth[(r, 0)], -0.98);
            assert_eq!(truth[(r, 1)], -0.87);
            // Univariate scenario: diagonal Stage-1 covariance.
            assert_eq!(est.v_hat[r][(0, 1)], 0.0);
        }
    }

    #[test]
    fn shared_scenario_induces_cross_outcome_correlation() {
        let graph = AdjacencyGraph::lattice(12).unwrap();
        let config = area_config(6, 400, 11);
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut cross = 0.0f64;
        let n = 400 * 12;
        for k in 0..400 {
            let (truth, _) = generate_area_replicate(&config, &graph, k).unwrap();
            for r in 0..12 {
                let a = truth[(r, 0)];
                let b = truth[(r, 1)];
                sum[0] += a;
                sum[1] += b;
                sum_sq[0] += a * a;
                sum_sq[1] += b * b;
                cross += a * b;
            }
        }
        let mean = [sum[0] / n as f64, sum[1] / n as f64];
        let var = [
            sum_sq[0] / n as f64 - mean[0] * mean[0],
            sum_sq[1] / n as f64 - mean[1] * mean[1],
        ];
        let cov = cross / n as f64 - mean[0] * mean[1];
        let corr = cov / (var[0] * var[1]).sqrt();
        assert!(corr > 0.3, "lambda > 0 should induce correlation, got {corr}");
    }

    #[test]
    fn scenario_nine_has_asymmetric_stage1_variances() {
        let graph = AdjacencyGraph::lattice(8).unwrap();
        let (_, est) = generate_area_replicate(&area_config(9, 1, 5), &graph, 0).unwrap();
        for r in 0..8 {
            let v = &est.v_hat[r];
            assert!(v[(0, 0)] > v[(1, 1)], "outcome 1 should be the noisy one");
            assert!(v[(0, 1)] > 0.0);
            let corr = v[(0, 1)] / (v[(0, 0)] * v[(1, 1)]).sqrt();
            assert!((corr - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn replicates_are_deterministic_and_order_free() {
        let graph = AdjacencyGraph::lattice(6).unwrap();
        let config = area_config(6, 3, 123);
        let (t2a, e2a) = generate_area_replicate(&config, &graph, 2).unwrap();
        // Generating replicate 2 again (without 0 and 1 first) matches.
        let (t2b, e2b) = generate_area_replicate(&config, &graph, 2).unwrap();
        assert_eq!(t2a, t2b);
        assert_eq!(e2a.y_hat, e2b.y_hat);
        let (t0, _) = generate_area_replicate(&config, &graph, 0).unwrap();
        assert_ne!(t2a, t0);
    }

    #[test]
    fn unit_scenario_layout_and_weights() {
        let graph = AdjacencyGraph::lattice(5).unwrap();
        let q = RuralFractions::constant(0.7, 5).unwrap();
        let config = ScenarioConfig {
            level: ScenarioLevel::Unit,
            scenario_id: 4,
            replicates: 1,
            seed: 9,
            overrides: BTreeMap::new(),
        };
        let (truth, data) = generate_unit_replicate(&config, &graph, &q, 0).unwrap();
        assert_eq!(truth.nrows(), 5);
        // 5 regions x 2 strata x 4 clusters x 15 individuals.
        assert_eq!(data.records().len(), 5 * 2 * 4 * 15);
        assert_eq!(data.clusters_per_region(), vec![8; 5]);
        // Rural weight exceeds urban weight when q > 0.5.
        let rural_w = data.records().iter().find(|r| r.rural).unwrap().weight;
        let urban_w = data.records().iter().find(|r| !r.rural).unwrap().weight;
        assert!(rural_w > urban_w);
        // Same seed, same data.
        let (_, data2) = generate_unit_replicate(&config, &graph, &q, 0).unwrap();
        assert_eq!(data.records(), data2.records());
    }

    #[test]
    fn unit_scenario_one_noise_only() {
        let graph = AdjacencyGraph::lattice(4).unwrap();
        let q = RuralFractions::constant(0.5, 4).unwrap();
        let mut config = ScenarioConfig {
            level: ScenarioLevel::Unit,
            scenario_id: 1,
            replicates: 1,
            seed: 31,
            overrides: BTreeMap::new(),
        };
        config.overrides.insert("sigma.1".into(), 0.0);
        config.overrides.insert("sigma.2".into(), 0.0);
        config.overrides.insert("sigma_eps.1".into(), 0.0);
        config.overrides.insert("sigma_eps.2".into(), 0.0);
        let (truth, data) = generate_unit_replicate(&config, &graph, &q, 0).unwrap();
        // Every individual is N(beta + z gamma, omega^2); check moments.
        let mut urban = Vec::new();
        let mut rural = Vec::new();
        for rec in data.records() {
            let y = rec.outcomes[0].unwrap();
            if rec.rural {
                rural.push(y);
            } else {
                urban.push(y);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let se = 1.31 / (urban.len() as f64).sqrt();
        assert!((mean(&urban) - (-0.77)).abs() < 4.0 * se);
        assert!((mean(&rural) - (-0.77 - 0.29)).abs() < 4.0 * se);
        assert!((sd(&urban) - 1.31).abs() < 0.1);
        // Truth equals the aggregation formula with g = 0.
        for r in 0..4 {
            assert!((truth[(r, 0)] - (-0.77 + 0.5 * -0.29)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_scenario_seven_has_one_noisy_one_precise_outcome() {
        let graph = AdjacencyGraph::lattice(4).unwrap();
        let q = RuralFractions::constant(0.5, 4).unwrap();
        let config = ScenarioConfig {
            level: ScenarioLevel::Unit,
            scenario_id: 7,
            replicates: 1,
            seed: 101,
            overrides: BTreeMap::new(),
        };
        // Empirical within-cluster standard deviations over many draws.
        let (_, data) = generate_unit_replicate(&config, &graph, &q, 0).unwrap();
        let mut dev = [Vec::new(), Vec::new()];
        for (_, idxs) in data.cluster_index() {
            for c in 0..2 {
                let ys: Vec<f64> = idxs
                    .iter()
                    .map(|&i| data.records()[i].outcomes[c].unwrap())
                    .collect();
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                for y in ys {
                    dev[c].push(y - m);
                }
            }
        }
        let sd = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let (s1, s2) = (sd(&dev[0]), sd(&dev[1]));
        assert!(
            (s1 / s2 - (2.0 * 1.31) / (0.5 * 1.14)).abs() < 0.6,
            "within-cluster sds {s1} vs {s2}"
        );
    }

    #[test]
    fn tiny_study_produces_metrics() {
        let graph = AdjacencyGraph::lattice(5).unwrap();
        let q = RuralFractions::constant(0.6, 5).unwrap();
        let config = area_config(1, 2, 77);
        let models = vec![
            ModelSpec::Area(AreaModelSpec::new(AreaFamily::Direct)),
            ModelSpec::Area(AreaModelSpec::new(AreaFamily::UniIid)),
        ];
        let fit_config = FitConfig {
            chains: 1,
            warmup: 100,
            draws: 200,
            ..FitConfig::default()
        };
        let study =
            run_simulation_study(&config, &graph, &q, &models, &fit_config, None).unwrap();
        assert_eq!(study.models.len(), 2);
        for m in &study.models {
            assert_eq!(m.metrics.replicates, 2);
            assert_eq!(m.metrics.per_region.len(), 10);
            assert_eq!(m.metrics.summary.len(), 2);
            assert!(m.failed_replicates.is_empty());
        }
    }
}
