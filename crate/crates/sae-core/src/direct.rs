//! Stage 1: survey-weighted direct estimates per region.
//!
//! Means are Hájek estimators (weights normalized by their sum). The
//! design-based covariance of the mean vector is the stratified,
//! with-replacement ultimate-cluster linearization estimator: per region,
//! per-cluster totals of linearized residuals
//!
//! ```text
//! e_ric = w*_ri (y_ric - yhat_rc) / sum_i w*_ri     (over records with y_c)
//! t_hkc = sum over cluster k of e_ric
//! Vhat_rcc' = sum_h n_h/(n_h - 1) sum_k (t_hkc - tbar_hc)(t_hkc' - tbar_hc')
//! ```
//!
//! with n_h the number of sampled clusters of stratum h inside the region.
//! Outcomes with item nonresponse use each outcome's own complete records
//! (pairwise-complete cells), and the matrix is projected to the nearest PSD
//! matrix by eigenvalue clipping when missingness breaks definiteness.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, SaeError};
use crate::survey::SurveyDataset;

/// Eigenvalues of V-hat may dip this far below zero before PSD projection.
const PSD_TOL: f64 = 1e-10;

/// How to handle strata containing a single sampled cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LonelyPsuPolicy {
    /// Surface the data problem as an error naming the strata.
    #[default]
    Error,
    /// Center the lonely cluster at the regional grand mean of cluster totals.
    Centered,
}

/// Stage-1 output: per-region Hájek means, design-based covariances, and the
/// availability mask. Unavailable cells carry no mean and a zeroed
/// covariance row/column.
#[derive(Debug, Clone)]
pub struct DirectEstimateSet {
    pub region_labels: Vec<String>,
    pub n_outcomes: usize,
    /// R x C matrix of Hájek means; unavailable cells are NaN.
    pub y_hat: DMatrix<f64>,
    /// Per-region C x C covariance matrices.
    pub v_hat: Vec<DMatrix<f64>>,
    /// R x C availability mask.
    pub availability: Vec<Vec<bool>>,
    /// Regions whose covariance needed PSD projection.
    pub psd_projected: Vec<bool>,
}

impl DirectEstimateSet {
    pub fn n_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn region_available(&self, region: usize) -> bool {
        self.availability[region].iter().any(|&a| a)
    }

    /// Indices of available outcomes for one region.
    pub fn available_outcomes(&self, region: usize) -> Vec<usize> {
        (0..self.n_outcomes)
            .filter(|&c| self.availability[region][c])
            .collect()
    }

    /// Drop one region's estimate (mask it unavailable), e.g. for held-out
    /// scoring.
    pub fn without_region(&self, region: usize) -> Self {
        let mut out = self.clone();
        for c in 0..out.n_outcomes {
            out.availability[region][c] = false;
            out.y_hat[(region, c)] = f64::NAN;
        }
        out.v_hat[region] = DMatrix::zeros(out.n_outcomes, out.n_outcomes);
        out
    }
}

/// Sort key making summation order a function of record content only, so
/// estimates are bit-identical under any permutation of the input rows.
fn content_key(rec: &crate::survey::IndividualRecord) -> (String, String, u64, bool, Vec<u64>) {
    (
        rec.stratum.clone(),
        rec.cluster.clone(),
        rec.weight.to_bits(),
        rec.rural,
        rec.outcomes
            .iter()
            .map(|y| y.map_or(u64::MAX, |v| v.to_bits()))
            .collect(),
    )
}

/// Hájek mean of one outcome in one region; `None` when no record
/// contributes.
pub fn hajek_mean(data: &SurveyDataset, region: usize, outcome: usize) -> Option<f64> {
    let mut contributions: Vec<(f64, f64)> = Vec::new();
    let mut keyed: Vec<&crate::survey::IndividualRecord> = data
        .records()
        .iter()
        .filter(|r| r.region == region)
        .collect();
    keyed.sort_by_key(|r| content_key(r));
    for rec in keyed {
        if let Some(y) = rec.outcomes[outcome] {
            contributions.push((rec.weight, y));
        }
    }
    let den: f64 = contributions.iter().map(|(w, _)| w).sum();
    let num: f64 = contributions.iter().map(|(w, y)| w * y).sum();
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

struct RegionLayout {
    /// Record indices in the region.
    records: Vec<usize>,
    /// stratum -> cluster -> record indices, insertion into BTreeMaps keeps
    /// the layout deterministic.
    strata: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    n_clusters: usize,
}

fn region_layout(data: &SurveyDataset, region: usize) -> RegionLayout {
    let mut strata: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    let mut records = Vec::new();
    for (i, rec) in data.records().iter().enumerate() {
        if rec.region != region {
            continue;
        }
        records.push(i);
        strata
            .entry(rec.stratum.clone())
            .or_default()
            .entry(rec.cluster.clone())
            .or_default()
            .push(i);
    }
    // Canonical within-cluster order keeps sums permutation-invariant.
    for clusters in strata.values_mut() {
        for idxs in clusters.values_mut() {
            idxs.sort_by(|&a, &b| {
                content_key(&data.records()[a]).cmp(&content_key(&data.records()[b]))
            });
        }
    }
    records.sort_by(|&a, &b| {
        content_key(&data.records()[a]).cmp(&content_key(&data.records()[b]))
    });
    let n_clusters = strata.values().map(|s| s.len()).sum();
    RegionLayout { records, strata, n_clusters }
}

/// Design-based covariance of the Hájek mean vector for one region.
///
/// Errors when the region has no records, fewer than two clusters, or —
/// under the default policy — any lonely stratum.
pub fn design_covariance(
    data: &SurveyDataset,
    region: usize,
    policy: LonelyPsuPolicy,
) -> Result<DMatrix<f64>> {
    let c_dim = data.n_outcomes();
    let layout = region_layout(data, region);
    if layout.records.is_empty() {
        return Err(SaeError::validation(format!(
            "region index {region}: no records"
        )));
    }
    if layout.n_clusters < 2 {
        return Err(SaeError::validation(format!(
            "region index {region}: {} cluster(s); variance estimation needs at least 2",
            layout.n_clusters
        )));
    }
    if policy == LonelyPsuPolicy::Error {
        let lonely: Vec<&str> = layout
            .strata
            .iter()
            .filter(|(_, clusters)| clusters.len() == 1)
            .map(|(s, _)| s.as_str())
            .collect();
        if !lonely.is_empty() {
            return Err(SaeError::validation(format!(
                "region index {region}: lonely PSU strata {lonely:?}; rerun with centered handling or fix the design"
            )));
        }
    }

    // Explicit within-region weight normalization.
    let total_weight: f64 = layout.records.iter().map(|&i| data.records()[i].weight).sum();
    let means: Vec<Option<f64>> = (0..c_dim).map(|c| hajek_mean(data, region, c)).collect();
    // Per-outcome sums of normalized weights over contributing records.
    let mut wsum = vec![0.0f64; c_dim];
    for &i in &layout.records {
        let rec = &data.records()[i];
        for c in 0..c_dim {
            if rec.outcomes[c].is_some() {
                wsum[c] += rec.weight / total_weight;
            }
        }
    }

    // Cluster totals of linearized residuals, in layout order.
    let mut totals: Vec<Vec<f64>> = Vec::with_capacity(layout.n_clusters);
    let mut strata_spans: Vec<usize> = Vec::new(); // clusters per stratum
    for clusters in layout.strata.values() {
        strata_spans.push(clusters.len());
        for rec_idxs in clusters.values() {
            let mut t = vec![0.0f64; c_dim];
            for &i in rec_idxs {
                let rec = &data.records()[i];
                let w_star = rec.weight / total_weight;
                for c in 0..c_dim {
                    if let (Some(y), Some(m)) = (rec.outcomes[c], means[c]) {
                        t[c] += w_star * (y - m) / wsum[c];
                    }
                }
            }
            totals.push(t);
        }
    }

    let grand_mean: Vec<f64> = (0..c_dim)
        .map(|c| totals.iter().map(|t| t[c]).sum::<f64>() / totals.len() as f64)
        .collect();

    let mut v = DMatrix::<f64>::zeros(c_dim, c_dim);
    let mut offset = 0usize;
    for &n_h in &strata_spans {
        let stratum_totals = &totals[offset..offset + n_h];
        offset += n_h;
        if n_h == 1 {
            // Reachable only under the centered policy.
            let t = &stratum_totals[0];
            for a in 0..c_dim {
                for b in 0..c_dim {
                    v[(a, b)] += (t[a] - grand_mean[a]) * (t[b] - grand_mean[b]);
                }
            }
            continue;
        }
        let mean_h: Vec<f64> = (0..c_dim)
            .map(|c| stratum_totals.iter().map(|t| t[c]).sum::<f64>() / n_h as f64)
            .collect();
        let factor = n_h as f64 / (n_h as f64 - 1.0);
        for t in stratum_totals {
            for a in 0..c_dim {
                for b in 0..c_dim {
                    v[(a, b)] += factor * (t[a] - mean_h[a]) * (t[b] - mean_h[b]);
                }
            }
        }
    }
    Ok(v)
}

fn project_psd(v: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = v.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= -PSD_TOL) {
        return (v.clone(), false);
    }
    let mut clipped = eig.eigenvalues.clone();
    for l in clipped.iter_mut() {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    // Symmetrize against rounding.
    let sym = (&rebuilt + rebuilt.transpose()) * 0.5;
    (sym, true)
}

/// Run Stage 1 for every region. Regions failing preconditions (no records,
/// fewer than two clusters) are masked unavailable; lonely-PSU errors under
/// the default policy propagate.
pub fn direct_estimates(data: &SurveyDataset, policy: LonelyPsuPolicy) -> Result<DirectEstimateSet> {
    let r_dim = data.region_count();
    let c_dim = data.n_outcomes();
    let mut y_hat = DMatrix::<f64>::from_element(r_dim, c_dim, f64::NAN);
    let mut v_hat = Vec::with_capacity(r_dim);
    let mut availability = vec![vec![false; c_dim]; r_dim];
    let mut psd_projected = vec![false; r_dim];

    for r in 0..r_dim {
        let layout = region_layout(data, r);
        if layout.records.is_empty() || layout.n_clusters < 2 {
            v_hat.push(DMatrix::zeros(c_dim, c_dim));
            continue;
        }
        let lonely_present = layout.strata.values().any(|c| c.len() == 1);
        if lonely_present && policy == LonelyPsuPolicy::Error {
            // Propagate with the full list of offending strata.
            return Err(design_covariance(data, r, policy).unwrap_err());
        }
        let mut v = design_covariance(data, r, policy)?;
        let mut any = false;
        for c in 0..c_dim {
            match hajek_mean(data, r, c) {
                Some(m) => {
                    y_hat[(r, c)] = m;
                    availability[r][c] = true;
                    any = true;
                }
                None => {
                    // Zero the covariance row/column of the unavailable cell.
                    for j in 0..c_dim {
                        v[(c, j)] = 0.0;
                        v[(j, c)] = 0.0;
                    }
                }
            }
        }
        if any {
            let (v_psd, flagged) = project_psd(&v);
            psd_projected[r] = flagged;
            v_hat.push(v_psd);
        } else {
            v_hat.push(DMatrix::zeros(c_dim, c_dim));
        }
    }
    Ok(DirectEstimateSet {
        region_labels: data.region_labels().to_vec(),
        n_outcomes: c_dim,
        y_hat,
        v_hat,
        availability,
        psd_projected,
    })
}

fn estimates_header(c_dim: usize) -> Vec<String> {
    let mut h = vec!["region".to_string()];
    for c in 1..=c_dim {
        h.push(format!("yhat.{c}"));
    }
    for a in 1..=c_dim {
        for b in a..=c_dim {
            h.push(format!("V.{a}.{b}"));
        }
    }
    for c in 1..=c_dim {
        h.push(format!("avail.{c}"));
    }
    h
}

/// Write `direct_estimates.csv`: one row per region with the mean vector,
/// the upper triangle of V-hat in row-major order, and availability flags.
pub fn write_estimates_csv(set: &DirectEstimateSet, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_estimates(set, file)
}

pub fn write_estimates(set: &DirectEstimateSet, writer: impl Write) -> Result<()> {
    let c_dim = set.n_outcomes;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(estimates_header(c_dim))?;
    for r in 0..set.n_regions() {
        let mut row = vec![set.region_labels[r].clone()];
        for c in 0..c_dim {
            row.push(if set.availability[r][c] {
                format!("{}", set.y_hat[(r, c)])
            } else {
                String::new()
            });
        }
        for a in 0..c_dim {
            for b in a..c_dim {
                row.push(if set.availability[r][a] && set.availability[r][b] {
                    format!("{}", set.v_hat[r][(a, b)])
                } else {
                    String::new()
                });
            }
        }
        for c in 0..c_dim {
            row.push(if set.availability[r][c] { "1" } else { "0" }.to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reload a `direct_estimates.csv` written by [`write_estimates_csv`].
pub fn load_estimates_csv(path: impl AsRef<Path>, n_outcomes: usize) -> Result<DirectEstimateSet> {
    let file = std::fs::File::open(path.as_ref())?;
    read_estimates(file, n_outcomes)
}

pub fn read_estimates(reader: impl Read, n_outcomes: usize) -> Result<DirectEstimateSet> {
    let c_dim = n_outcomes;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expected = estimates_header(c_dim);
        let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if got != expected {
            return Err(SaeError::parse(
                "header",
                format!("expected columns {expected:?}, got {got:?}"),
            ));
        }
    }
    let mut labels = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| SaeError::parse(format!("line {line}"), e.to_string()))?;
        let tri = c_dim * (c_dim + 1) / 2;
        if row.len() != 1 + c_dim + tri + c_dim {
            return Err(SaeError::parse(
                format!("line {line}"),
                format!("expected {} fields, got {}", 1 + c_dim + tri + c_dim, row.len()),
            ));
        }
        labels.push(row.get(0).unwrap().to_string());
        let parse = |field: &str, what: &str| -> Result<f64> {
            if field.is_empty() {
                Ok(f64::NAN)
            } else {
                field
                    .parse()
                    .map_err(|e| SaeError::parse(format!("line {line}"), format!("{what}: {e}")))
            }
        };
        let means: Result<Vec<f64>> = (0..c_dim)
            .map(|c| parse(row.get(1 + c).unwrap(), &format!("yhat.{}", c + 1)))
            .collect();
        let vs: Result<Vec<f64>> = (0..tri)
            .map(|k| parse(row.get(1 + c_dim + k).unwrap(), "V"))
            .collect();
        let avail: Vec<bool> = (0..c_dim)
            .map(|c| row.get(1 + c_dim + tri + c).unwrap() == "1")
            .collect();
        rows.push((means?, vs?, avail));
    }
    let r_dim = rows.len();
    let mut y_hat = DMatrix::<f64>::from_element(r_dim, c_dim, f64::NAN);
    let mut v_hat = Vec::with_capacity(r_dim);
    let mut availability = Vec::with_capacity(r_dim);
    for (r, (means, vs, avail)) in rows.into_iter().enumerate() {
        let mut v = DMatrix::<f64>::zeros(c_dim, c_dim);
        let mut k = 0;
        for a in 0..c_dim {
            for b in a..c_dim {
                let value = if vs[k].is_nan() { 0.0 } else { vs[k] };
                v[(a, b)] = value;
                v[(b, a)] = value;
                k += 1;
            }
        }
        for c in 0..c_dim {
            if avail[c] {
                y_hat[(r, c)] = means[c];
            }
        }
        v_hat.push(v);
        availability.push(avail);
    }
    Ok(DirectEstimateSet {
        region_labels: labels,
        n_outcomes: c_dim,
        y_hat,
        v_hat,
        availability,
        psd_projected: vec![false; r_dim],
    })
}
