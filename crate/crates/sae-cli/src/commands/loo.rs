use std::path::PathBuf;

use clap::Args;
use sae_core::direct::{direct_estimates, load_estimates_csv};
use sae_core::evaluation::{loo_logscore_area, loo_logscore_unit, LogScoreReport};
use sae_core::mcmc::FitConfig;
use sae_core::model::ModelSpec;
use sae_core::rng::{derive_seed, hash_bytes};
use sae_core::survey::{load_adjacency, load_rural_fractions, load_survey_csv};
use sae_core::{Result, SaeError};

use crate::manifest::RunManifest;
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct LooArgs {
    /// Comma-separated model list: family names and/or spec JSON paths.
    #[arg(long)]
    pub models: String,
    /// Level of every model in the list: area or unit.
    #[arg(long, default_value = "area")]
    pub level: String,
    /// Area level: direct_estimates.csv; unit level: survey CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Rural fractions JSON (unit level).
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Lonely-PSU policy for the unit-level Stage-1 targets.
    #[arg(long, default_value = "error")]
    pub lonely_psu: String,
    /// Posterior draws used in the predictive density average.
    #[arg(long, default_value_t = 1000)]
    pub score_draws: usize,
    #[arg(long, default_value_t = 1)]
    pub chains: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
}

pub fn run(global: &GlobalArgs, args: &LooArgs) -> Result<()> {
    let level = match args.level.as_str() {
        "area" => super::ModelLevel::Area,
        "unit" => super::ModelLevel::Unit,
        other => return Err(SaeError::usage(format!("unknown level {other:?}"))),
    };
    let models = super::resolve_models(&args.models, level)?;
    let graph = load_adjacency(&args.graph)?;
    let base_config = FitConfig {
        chains: args.chains,
        warmup: args.warmup,
        draws: args.draws,
        ..FitConfig::default()
    };

    let mut reports: Vec<LogScoreReport> = Vec::new();
    match level {
        super::ModelLevel::Area => {
            let estimates = load_estimates_csv(&args.data, 2)?;
            for (model, _) in models.iter() {
                let ModelSpec::Area(spec) = model else {
                    return Err(SaeError::usage(format!(
                        "{} is not an area-level model",
                        model.model_id()
                    )));
                };
                let content = model.to_json()?;
                let config = FitConfig {
                    seed: derive_seed(global.seed, &[0x10, hash_bytes(content.as_bytes())]),
                    ..base_config.clone()
                };
                reports.push(loo_logscore_area(
                    spec,
                    &estimates,
                    &graph,
                    &config,
                    args.score_draws,
                )?);
            }
        }
        super::ModelLevel::Unit => {
            let q_path = args
                .q
                .as_ref()
                .ok_or_else(|| SaeError::usage("unit-level LOO requires --q"))?;
            let q = load_rural_fractions(q_path)?;
            let data = load_survey_csv(&args.data, 2, &graph)?;
            let policy = super::direct::parse_policy(&args.lonely_psu)?;
            let targets = direct_estimates(&data, policy)?;
            for (model, _) in models.iter() {
                let ModelSpec::Unit(spec) = model else {
                    return Err(SaeError::usage(format!(
                        "{} is not a unit-level model",
                        model.model_id()
                    )));
                };
                let content = model.to_json()?;
                let config = FitConfig {
                    seed: derive_seed(global.seed, &[0x10, hash_bytes(content.as_bytes())]),
                    ..base_config.clone()
                };
                reports.push(loo_logscore_unit(
                    spec,
                    &data,
                    &graph,
                    &q,
                    &targets,
                    &config,
                    args.score_draws,
                )?);
            }
        }
    }

    // Per-region scores.
    let regions_path = global.out_dir.join("loo_regions.csv");
    let mut wtr = csv::Writer::from_path(&regions_path)?;
    wtr.write_record(["model", "region", "log_lhat"])?;
    for report in &reports {
        for s in &report.per_region {
            wtr.write_record([
                report.model_id.clone(),
                s.region.clone(),
                format!("{}", s.log_lhat),
            ])?;
        }
    }
    wtr.flush()?;

    // Summary ranked by mean LogScore (lower is better).
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| reports[a].logscore_mean.total_cmp(&reports[b].logscore_mean));
    let summary_path = global.out_dir.join("loo_summary.csv");
    let mut wtr = csv::Writer::from_path(&summary_path)?;
    wtr.write_record(["model", "logscore_sum", "logscore_mean"])?;
    for &i in &order {
        let r = &reports[i];
        wtr.write_record([
            r.model_id.clone(),
            format!("{}", r.logscore_sum),
            format!("{}", r.logscore_mean),
        ])?;
    }
    wtr.flush()?;

    let mut manifest = RunManifest::new("loo", global.seed);
    let mut inputs = vec![&args.data, &args.graph];
    if let Some(qp) = &args.q {
        inputs.push(qp);
    }
    manifest.add_inputs(&inputs)?;
    for (_, path) in &models {
        if let Some(p) = path {
            manifest.add_input(p)?;
        }
    }
    manifest.write(&global.out_dir)?;

    for report in &reports {
        for note in &report.skipped {
            eprintln!("note [{}]: {note}", report.model_id);
        }
    }
    println!("loo: {} models -> {}", reports.len(), summary_path.display());

    // Enough coverage per model, or flag a numerical failure.
    let scoreable = reports
        .iter()
        .map(|r| r.scored_regions + r.skipped.len())
        .max()
        .unwrap_or(0);
    for r in &reports {
        if (r.scored_regions as f64) < 0.9 * scoreable as f64 {
            return Err(SaeError::numerical(format!(
                "model {} scored only {}/{} regions",
                r.model_id, r.scored_regions, scoreable
            )));
        }
    }
    Ok(())
}
