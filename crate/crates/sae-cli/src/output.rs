//! Shared writers for CLI output files.

use std::path::Path;

use sae_core::mcmc::{ModelFit, SummaryRow};
use sae_core::Result;

/// Write the per-region posterior summary with a health stamp per row.
pub fn write_summary_csv(rows: &[SummaryRow], status: &str, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "region", "outcome", "median", "q2.5", "q10", "q90", "q97.5", "status",
    ])?;
    for row in rows {
        wtr.write_record([
            row.region.clone(),
            row.outcome.to_string(),
            format!("{}", row.median),
            format!("{}", row.q025),
            format!("{}", row.q10),
            format!("{}", row.q90),
            format!("{}", row.q975),
            status.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_diagnostics_json(fit: &ModelFit, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&fit.diagnostics)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
