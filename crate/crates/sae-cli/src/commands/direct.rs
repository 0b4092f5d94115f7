use std::path::PathBuf;

use clap::Args;
use sae_core::direct::{direct_estimates, write_estimates_csv, LonelyPsuPolicy};
use sae_core::survey::{load_adjacency, load_survey_csv, validate_dataset};
use sae_core::{Result, SaeError};

use crate::manifest::RunManifest;
use crate::GlobalArgs;

#[derive(Debug, Args)]
pub struct DirectArgs {
    /// Survey CSV (region,stratum,cluster,weight,rural,y1..yC).
    #[arg(long)]
    pub data: PathBuf,
    /// Neighborhood graph JSON.
    #[arg(long)]
    pub graph: PathBuf,
    /// Number of outcome columns.
    #[arg(long, default_value_t = 2)]
    pub outcomes: usize,
    /// Lonely-PSU handling: error (default) or centered.
    #[arg(long, default_value = "error")]
    pub lonely_psu: String,
    /// Output CSV path (default: <out-dir>/direct_estimates.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_policy(name: &str) -> Result<LonelyPsuPolicy> {
    match name {
        "error" => Ok(LonelyPsuPolicy::Error),
        "centered" => Ok(LonelyPsuPolicy::Centered),
        other => Err(SaeError::usage(format!(
            "unknown lonely-PSU policy {other:?}; use error or centered"
        ))),
    }
}

pub fn run(global: &GlobalArgs, args: &DirectArgs) -> Result<()> {
    let policy = parse_policy(&args.lonely_psu)?;
    let graph = load_adjacency(&args.graph)?;
    let data = load_survey_csv(&args.data, args.outcomes, &graph)?;
    let report = validate_dataset(&data, &graph, None)?;
    if !report.is_empty() {
        eprint!("{report}");
    }
    let estimates = direct_estimates(&data, policy)?;
    let floored: Vec<&str> = estimates
        .psd_projected
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(r, _)| estimates.region_labels[r].as_str())
        .collect();
    if !floored.is_empty() {
        eprintln!("note: covariance PSD-projected for regions {floored:?}");
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| global.out_dir.join("direct_estimates.csv"));
    write_estimates_csv(&estimates, &out)?;
    let mut manifest = RunManifest::new("direct", global.seed);
    manifest.add_inputs(&[&args.data, &args.graph])?;
    manifest.write(&global.out_dir)?;
    println!(
        "direct: {} regions, {} with estimates -> {}",
        estimates.n_regions(),
        (0..estimates.n_regions())
            .filter(|&r| estimates.region_available(r))
            .count(),
        out.display()
    );
    Ok(())
}
