use std::path::PathBuf;

use clap::Args;
use sae_core::direct::load_estimates_csv;
use sae_core::mcmc::{fit, write_samples_csv, FitConfig, FitData};
use sae_core::model::ModelSpec;
use sae_core::spatial::{build_icar_precision, compute_scaling};
use sae_core::survey::{load_adjacency, load_rural_fractions, load_survey_csv};
use sae_core::{Result, SaeError};

use crate::manifest::RunManifest;
use crate::output::{write_diagnostics_json, write_summary_csv};
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Model specification JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Area level: direct_estimates.csv; unit level: survey CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Neighborhood graph JSON.
    #[arg(long)]
    pub graph: PathBuf,
    /// Rural fractions JSON (required for unit-level models).
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    #[arg(long, default_value_t = 2000)]
    pub warmup: usize,
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    /// Sample from the prior (likelihood disabled).
    #[arg(long)]
    pub prior_only: bool,
    /// Keep per-cluster error draws in the samples file (unit level).
    #[arg(long)]
    pub keep_cluster_errors: bool,
    /// Output file prefix (default "fit").
    #[arg(long, default_value = "fit")]
    pub prefix: String,
    /// Optional JSON dump of ICAR scaling factors and marginal variances.
    #[arg(long)]
    pub spatial_diagnostics: Option<PathBuf>,
}

pub fn run(global: &GlobalArgs, args: &FitArgs) -> Result<()> {
    let spec = super::load_model_spec(&args.model)?;
    let graph = load_adjacency(&args.graph)?;
    let config = FitConfig {
        chains: args.chains,
        warmup: args.warmup,
        draws: args.draws,
        seed: global.seed,
        prior_only: args.prior_only,
        keep_cluster_errors: args.keep_cluster_errors,
        ..FitConfig::default()
    };

    let q = args.q.as_ref().map(load_rural_fractions).transpose()?;
    let model_fit = match &spec {
        ModelSpec::Area(_) => {
            let estimates = load_estimates_csv(&args.data, 2)?;
            fit(&spec, FitData::Area(&estimates), &graph, &config)?
        }
        ModelSpec::Unit(_) => {
            let q = q
                .as_ref()
                .ok_or_else(|| SaeError::usage("unit-level models require --q"))?;
            let data = load_survey_csv(&args.data, 2, &graph)?;
            fit(&spec, FitData::Unit(&data, q), &graph, &config)?
        }
    };

    if let Some(path) = &args.spatial_diagnostics {
        let icar = compute_scaling(&build_icar_precision(&graph))?;
        let mut text = serde_json::to_string_pretty(&icar.scaling_diagnostics()?)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }

    for note in &model_fit.notes {
        eprintln!("note: {note}");
    }
    let status = if model_fit.diagnostics.healthy { "ok" } else { "UNHEALTHY" };
    let samples_path = global.out_dir.join(format!("{}_samples.csv", args.prefix));
    let summary_path = global.out_dir.join(format!("{}_summary.csv", args.prefix));
    let diag_path = global.out_dir.join(format!("{}_diagnostics.json", args.prefix));
    write_samples_csv(&model_fit, &samples_path)?;
    write_summary_csv(&model_fit.summary(), status, &summary_path)?;
    write_diagnostics_json(&model_fit, &diag_path)?;

    let mut manifest = RunManifest::new("fit", global.seed);
    let mut inputs = vec![&args.model, &args.data, &args.graph];
    if let Some(qp) = &args.q {
        inputs.push(qp);
    }
    manifest.add_inputs(&inputs)?;
    manifest.write(&global.out_dir)?;

    println!(
        "fit {}: {} draws x {} symbols, status {status} -> {}",
        model_fit.spec.model_id(),
        model_fit.n_draws(),
        model_fit.columns.len(),
        summary_path.display()
    );
    Ok(())
}
