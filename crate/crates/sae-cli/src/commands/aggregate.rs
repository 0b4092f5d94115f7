use std::path::PathBuf;

use clap::Args;
use sae_core::mcmc::{load_samples_csv, quantile_sorted, SummaryRow};
use sae_core::model::ModelSpec;
use sae_core::survey::{load_adjacency, load_rural_fractions};
use sae_core::{Result, SaeError};

use crate::manifest::RunManifest;
use crate::GlobalArgs;

/// Recompute aggregated region means from a unit-level samples file using a
/// different rural-fraction file, without refitting.
#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Samples CSV written by `sae fit`.
    #[arg(long)]
    pub samples: PathBuf,
    /// The model specification the samples came from.
    #[arg(long)]
    pub model: PathBuf,
    /// Rural fractions JSON to aggregate with.
    #[arg(long)]
    pub q: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Output CSV (default: <out-dir>/aggregate_summary.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(global: &GlobalArgs, args: &AggregateArgs) -> Result<()> {
    let spec = super::load_model_spec(&args.model)?;
    let ModelSpec::Unit(unit_spec) = &spec else {
        return Err(SaeError::usage(
            "aggregate applies to unit-level samples; area-level mu needs no q",
        ));
    };
    let graph = load_adjacency(&args.graph)?;
    let q = load_rural_fractions(&args.q)?;
    if q.len() != graph.n_nodes() {
        return Err(SaeError::validation(format!(
            "rural fractions have length {}, graph has {} nodes",
            q.len(),
            graph.n_nodes()
        )));
    }
    let table = load_samples_csv(&args.samples)?;
    let n = table.data.nrows();
    if n == 0 {
        return Err(SaeError::validation("samples file has no draws"));
    }
    let col = |name: &str| -> Result<Vec<f64>> {
        table
            .column(name)
            .ok_or_else(|| SaeError::validation(format!("samples file lacks column {name}")))
    };
    let beta = [col("beta.1")?, col("beta.2")?];
    let gamma = [col("gamma.1")?, col("gamma.2")?];
    let lambda = if unit_spec.family.is_shared() {
        Some(col("lambda")?)
    } else {
        None
    };
    let shared_pair = unit_spec.shared_pair();

    let mut rows: Vec<SummaryRow> = Vec::new();
    for r in 0..graph.n_nodes() {
        let q_r = q.get(r)?;
        let own = [
            col(&format!("s.1.{}", r + 1))?,
            col(&format!("s.2.{}", r + 1))?,
        ];
        for c in 0..2 {
            let mut values: Vec<f64> = Vec::with_capacity(n);
            for i in 0..n {
                let mut g = own[c][i];
                if let (Some((recv, donor)), Some(l)) = (shared_pair, &lambda) {
                    if c == recv {
                        g += l[i] * own[donor][i];
                    }
                }
                values.push(beta[c][i] + q_r * gamma[c][i] + g);
            }
            values.sort_by(|a, b| a.total_cmp(b));
            rows.push(SummaryRow {
                region: graph.label_of(r).to_string(),
                outcome: c + 1,
                median: quantile_sorted(&values, 0.5),
                q025: quantile_sorted(&values, 0.025),
                q10: quantile_sorted(&values, 0.10),
                q90: quantile_sorted(&values, 0.90),
                q975: quantile_sorted(&values, 0.975),
            });
        }
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| global.out_dir.join("aggregate_summary.csv"));
    crate::output::write_summary_csv(&rows, "ok", &out)?;

    let mut manifest = RunManifest::new("aggregate", global.seed);
    manifest.add_inputs(&[&args.samples, &args.model, &args.q, &args.graph])?;
    manifest.write(&global.out_dir)?;
    println!("aggregate: {} regions -> {}", graph.n_nodes(), out.display());
    Ok(())
}
