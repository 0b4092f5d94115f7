use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use sae_core::mcmc::FitConfig;
use sae_core::simulate::{run_simulation_study, ArchiveSpec, ScenarioConfig, ScenarioLevel, StudyResult};
use sae_core::survey::{load_adjacency, load_rural_fractions, AdjacencyGraph, RuralFractions};
use sae_core::{Result, SaeError};

use crate::manifest::RunManifest;
use crate::GlobalArgs;

/// Default rural share when no q file is supplied to a unit-level scenario.
const DEFAULT_RURAL_SHARE: f64 = 0.7;

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario as level:id, e.g. area:6 or unit:3.
    #[arg(long, conflicts_with = "config")]
    pub scenario: Option<String>,
    /// Scenario config JSON (alternative to --scenario/--replicates).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    /// Comma-separated models (family names or spec JSON paths).
    /// Default: every candidate family for the scenario level.
    #[arg(long)]
    pub models: Option<String>,
    /// Graph JSON (default: synthetic 47-node lattice).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Rural fractions JSON (default: constant 0.7 per region).
    #[arg(long)]
    pub q: Option<PathBuf>,
    /// Generator overrides, repeatable: --override lambda=0.5
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Write the raw per-replicate archive (data/truth/fit files).
    #[arg(long)]
    pub archive: bool,
    #[arg(long, default_value_t = 2)]
    pub chains: usize,
    #[arg(long, default_value_t = 500)]
    pub warmup: usize,
    #[arg(long, default_value_t = 750)]
    pub draws: usize,
}

fn parse_scenario(text: &str) -> Result<(ScenarioLevel, usize)> {
    let (level, id) = text
        .split_once(':')
        .ok_or_else(|| SaeError::usage(format!("scenario {text:?} is not level:id")))?;
    let level = match level {
        "area" => ScenarioLevel::Area,
        "unit" => ScenarioLevel::Unit,
        other => return Err(SaeError::usage(format!("unknown scenario level {other:?}"))),
    };
    let id: usize = id
        .parse()
        .map_err(|_| SaeError::usage(format!("scenario id {id:?} is not an integer")))?;
    Ok((level, id))
}

pub fn run(global: &GlobalArgs, args: &SimulateArgs) -> Result<()> {
    let mut config = match (&args.scenario, &args.config) {
        (Some(s), None) => {
            let (level, scenario_id) = parse_scenario(s)?;
            ScenarioConfig {
                level,
                scenario_id,
                replicates: args.replicates,
                seed: global.seed,
                overrides: BTreeMap::new(),
            }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        _ => {
            return Err(SaeError::usage(
                "provide exactly one of --scenario or --config",
            ))
        }
    };
    for entry in &args.overrides {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| SaeError::usage(format!("override {entry:?} is not key=value")))?;
        let value: f64 = v
            .parse()
            .map_err(|_| SaeError::usage(format!("override value {v:?} is not a number")))?;
        config.overrides.insert(k.to_string(), value);
    }
    config.validate()?;

    let graph: AdjacencyGraph = match &args.graph {
        Some(p) => load_adjacency(p)?,
        None => AdjacencyGraph::lattice(47)?,
    };
    let q: RuralFractions = match &args.q {
        Some(p) => load_rural_fractions(p)?,
        None => RuralFractions::constant(DEFAULT_RURAL_SHARE, graph.n_nodes())?,
    };
    let level_hint = match config.level {
        ScenarioLevel::Area => super::ModelLevel::Area,
        ScenarioLevel::Unit => super::ModelLevel::Unit,
    };
    let default_models = match config.level {
        ScenarioLevel::Area => "direct,uni_iid,uni_bym,biv_nonshared_iid,biv_nonshared_bym,biv_shared_iid,biv_shared_bym",
        ScenarioLevel::Unit => "iid_nonshared,bym_nonshared,iid_shared,bym_shared",
    };
    let models = super::resolve_models(
        args.models.as_deref().unwrap_or(default_models),
        level_hint,
    )?;
    let specs: Vec<_> = models.iter().map(|(m, _)| m.clone()).collect();

    let fit_config = FitConfig {
        chains: args.chains,
        warmup: args.warmup,
        draws: args.draws,
        ..FitConfig::default()
    };
    let scenario_dir = global
        .out_dir
        .join(format!("scenario_{}", config.label().replace(':', "_")));
    std::fs::create_dir_all(&scenario_dir)?;
    let archive_spec = ArchiveSpec { dir: &scenario_dir };
    let archive = args.archive.then_some(&archive_spec);

    let study = run_simulation_study(&config, &graph, &q, &specs, &fit_config, archive)?;

    // Resolved scenario config for reproducibility.
    let mut text = serde_json::to_string_pretty(&config)?;
    text.push('\n');
    std::fs::write(scenario_dir.join("scenario_config.json"), text)?;

    write_metrics(&study, &global.out_dir.join("metrics.csv"), false)?;
    write_metrics(&study, &global.out_dir.join("metrics_summary.csv"), true)?;

    let mut manifest = RunManifest::new("simulate", config.seed);
    let mut inputs: Vec<&PathBuf> = Vec::new();
    if let Some(p) = &args.graph {
        inputs.push(p);
    }
    if let Some(p) = &args.q {
        inputs.push(p);
    }
    if let Some(p) = &args.config {
        inputs.push(p);
    }
    manifest.add_inputs(&inputs)?;
    for (_, path) in &models {
        if let Some(p) = path {
            manifest.add_input(p)?;
        }
    }
    manifest.write(&global.out_dir)?;

    for m in &study.models {
        if !m.failed_replicates.is_empty() {
            eprintln!(
                "note [{}]: {} replicate(s) failed and were excluded: {:?}",
                m.model_id,
                m.failed_replicates.len(),
                m.failed_replicates
            );
        }
    }
    println!(
        "simulate {}: {} replicates x {} models -> metrics.csv, metrics_summary.csv",
        study.scenario,
        study.replicates,
        study.models.len()
    );
    Ok(())
}

fn write_metrics(study: &StudyResult, path: &std::path::Path, summary_only: bool) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec![
        "scenario", "model", "outcome", "region", "bias", "abs_bias", "variance", "mse",
        "coverage", "width",
    ];
    if summary_only {
        header.push("replicates");
        header.push("failed");
    }
    wtr.write_record(&header)?;
    for m in &study.models {
        let rows = if summary_only {
            &m.metrics.summary
        } else {
            &m.metrics.per_region
        };
        for row in rows {
            let mut rec = vec![
                study.scenario.clone(),
                m.model_id.clone(),
                row.outcome.to_string(),
                if summary_only {
                    "all".to_string()
                } else {
                    row.region.to_string()
                },
                format!("{}", row.bias),
                format!("{}", row.abs_bias),
                format!("{}", row.variance),
                format!("{}", row.mse),
                format!("{}", row.coverage),
                format!("{}", row.width),
            ];
            if summary_only {
                rec.push(m.metrics.replicates.to_string());
                rec.push(m.failed_replicates.len().to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}
