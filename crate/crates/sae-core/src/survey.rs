//! Survey datasets, neighborhood graphs, and rural population fractions.
//!
//! Individual records follow the stratified two-stage cluster designs used by
//! DHS-style household surveys: strata are region crossed with urban/rural,
//! clusters are sampled within strata, individuals within clusters. Region
//! indexing is dense and fixed by the neighborhood graph, which is the single
//! authoritative geography source; survey files reference regions by the
//! graph's node labels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};

/// One sampled individual. `region` is a 0-based index into the graph's
/// nodes; design weight is the inverse inclusion probability.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub region: usize,
    pub stratum: String,
    pub cluster: String,
    pub weight: f64,
    pub rural: bool,
    /// Length-C outcome vector; `None` marks item nonresponse.
    pub outcomes: Vec<Option<f64>>,
}

/// A validated collection of individual records.
#[derive(Debug, Clone)]
pub struct SurveyDataset {
    records: Vec<IndividualRecord>,
    n_outcomes: usize,
    region_count: usize,
    /// Region labels (index -> label), used when writing back to CSV.
    region_labels: Vec<String>,
    cluster_index: BTreeMap<String, Vec<usize>>,
    stratum_index: BTreeMap<String, BTreeSet<String>>,
}

impl SurveyDataset {
    /// Build a dataset from records, enforcing record-level invariants.
    pub fn new(
        records: Vec<IndividualRecord>,
        n_outcomes: usize,
        region_count: usize,
        region_labels: Vec<String>,
    ) -> Result<Self> {
        if n_outcomes == 0 {
            return Err(SaeError::validation("n_outcomes must be at least 1"));
        }
        if region_labels.len() != region_count {
            return Err(SaeError::validation(format!(
                "expected {} region labels, got {}",
                region_count,
                region_labels.len()
            )));
        }
        let mut cluster_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut stratum_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            let row = i + 1;
            if !(rec.weight.is_finite() && rec.weight > 0.0) {
                return Err(SaeError::validation(format!(
                    "record {row}: weight {} is not positive and finite",
                    rec.weight
                )));
            }
            if rec.region >= region_count {
                return Err(SaeError::validation(format!(
                    "record {row}: region index {} outside 0..{region_count}",
                    rec.region
                )));
            }
            if rec.outcomes.len() != n_outcomes {
                return Err(SaeError::validation(format!(
                    "record {row}: expected {n_outcomes} outcomes, got {}",
                    rec.outcomes.len()
                )));
            }
            cluster_index.entry(rec.cluster.clone()).or_default().push(i);
            stratum_index
                .entry(rec.stratum.clone())
                .or_default()
                .insert(rec.cluster.clone());
        }
        // Records sharing a cluster must share stratum, region, and rural flag.
        for (cluster, idxs) in &cluster_index {
            let first = &records[idxs[0]];
            for &i in &idxs[1..] {
                let rec = &records[i];
                if rec.stratum != first.stratum {
                    return Err(SaeError::validation(format!(
                        "cluster {cluster:?} appears under strata {:?} and {:?}",
                        first.stratum, rec.stratum
                    )));
                }
                if rec.region != first.region {
                    return Err(SaeError::validation(format!(
                        "cluster {cluster:?} spans regions {} and {}",
                        first.region + 1,
                        rec.region + 1
                    )));
                }
                if rec.rural != first.rural {
                    return Err(SaeError::validation(format!(
                        "cluster {cluster:?} mixes urban and rural records"
                    )));
                }
            }
        }
        Ok(Self {
            records,
            n_outcomes,
            region_count,
            region_labels,
            cluster_index,
            stratum_index,
        })
    }

    pub fn records(&self) -> &[IndividualRecord] {
        &self.records
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    /// Map cluster id -> indices of its records.
    pub fn cluster_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.cluster_index
    }

    /// Map stratum id -> ids of its clusters.
    pub fn stratum_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.stratum_index
    }

    /// Record indices for one region.
    pub fn region_records(&self, region: usize) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].region == region)
            .collect()
    }

    /// Number of records per region (n_r).
    pub fn records_per_region(&self) -> Vec<usize> {
        let mut n = vec![0usize; self.region_count];
        for rec in &self.records {
            n[rec.region] += 1;
        }
        n
    }

    /// Number of distinct clusters per region (K_r).
    pub fn clusters_per_region(&self) -> Vec<usize> {
        let mut sets: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); self.region_count];
        for rec in &self.records {
            sets[rec.region].insert(rec.cluster.as_str());
        }
        sets.iter().map(|s| s.len()).collect()
    }

    /// Indices of records whose every outcome is missing, retained but flagged.
    pub fn all_missing_records(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].outcomes.iter().all(|y| y.is_none()))
            .collect()
    }

    /// Keep only records outside `region`; labels and region count unchanged.
    pub fn without_region(&self, region: usize) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter(|r| r.region != region)
            .cloned()
            .collect();
        Self::new(
            records,
            self.n_outcomes,
            self.region_count,
            self.region_labels.clone(),
        )
    }
}

/// Symmetric neighborhood structure over regions.
#[derive(Debug, Clone)]
pub struct AdjacencyGraph {
    n_nodes: usize,
    /// Normalized unordered pairs (i < j), 0-based.
    edges: BTreeSet<(usize, usize)>,
    labels: Vec<String>,
    components: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn new(n_nodes: usize, edge_list: &[(usize, usize)], labels: Option<Vec<String>>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(SaeError::validation("graph must have at least one node"));
        }
        let labels = match labels {
            Some(l) => {
                if l.len() != n_nodes {
                    return Err(SaeError::validation(format!(
                        "expected {n_nodes} labels, got {}",
                        l.len()
                    )));
                }
                l
            }
            None => (1..=n_nodes).map(|i| i.to_string()).collect(),
        };
        let mut edges = BTreeSet::new();
        for &(a, b) in edge_list {
            if a >= n_nodes || b >= n_nodes {
                return Err(SaeError::validation(format!(
                    "edge ({}, {}) references a node outside 1..={n_nodes}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(SaeError::validation(format!(
                    "self-loop on node {}",
                    a + 1
                )));
            }
            edges.insert((a.min(b), a.max(b)));
        }
        let components = connected_components(n_nodes, &edges);
        Ok(Self {
            n_nodes,
            edges,
            labels,
            components,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_of(&self, node: usize) -> &str {
        &self.labels[node]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Connected components, each sorted, in order of smallest member.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    /// Synthetic planar lattice with `n` nodes: 4-neighbor grid of side
    /// ceil(sqrt(n)) truncated to its first `n` cells in row-major order.
    /// Connected for every n >= 1; the 47-node instance stands in for a
    /// county geography of the same size.
    pub fn lattice(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SaeError::validation("lattice needs at least one node"));
        }
        let side = (n as f64).sqrt().ceil() as usize;
        let mut edges = Vec::new();
        for i in 0..n {
            let (row, col) = (i / side, i % side);
            if col + 1 < side && i + 1 < n {
                edges.push((i, i + 1));
            }
            if (row + 1) * side + col < n {
                edges.push((i, (row + 1) * side + col));
            }
        }
        Self::new(n, &edges, None)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == node {
                out.push(b);
            } else if b == node {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }
}

fn connected_components(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Per-region rural population shares q_r in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RuralFractions {
    q: Vec<f64>,
}

impl RuralFractions {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        for (i, &v) in q.iter().enumerate() {
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(SaeError::validation(format!(
                    "q[{}] = {v} outside [0, 1]",
                    i + 1
                )));
            }
        }
        Ok(Self { q })
    }

    pub fn constant(value: f64, n: usize) -> Result<Self> {
        Self::new(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn get(&self, region: usize) -> Result<f64> {
        self.q.get(region).copied().ok_or_else(|| {
            SaeError::validation(format!("q_r missing for region {}", region + 1))
        })
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct GraphFile {
    n: usize,
    #[serde(default)]
    labels: Option<Vec<String>>,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RuralFile {
    q: Vec<f64>,
}

/// Load a graph from JSON `{"n": R, "labels": [...], "edges": [[i,j],...]}`
/// with 1-based node ids. Duplicate edges are deduplicated silently.
pub fn load_adjacency(path: impl AsRef<Path>) -> Result<AdjacencyGraph> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_adjacency(&text)
}

pub fn parse_adjacency(text: &str) -> Result<AdjacencyGraph> {
    let file: GraphFile = serde_json::from_str(text)?;
    let edges: Result<Vec<(usize, usize)>> = file
        .edges
        .iter()
        .map(|&(a, b)| {
            if a == 0 || b == 0 {
                Err(SaeError::validation(format!(
                    "edge ({a}, {b}) uses 0; node ids are 1-based"
                )))
            } else {
                Ok((a - 1, b - 1))
            }
        })
        .collect();
    AdjacencyGraph::new(file.n, &edges?, file.labels)
}

pub fn write_adjacency(graph: &AdjacencyGraph, path: impl AsRef<Path>) -> Result<()> {
    let file = GraphFile {
        n: graph.n_nodes(),
        labels: Some(graph.labels().to_vec()),
        edges: graph.edges().iter().map(|&(a, b)| (a + 1, b + 1)).collect(),
    };
    let mut out = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Load rural fractions from JSON `{"q": [q_1, ..., q_R]}`.
pub fn load_rural_fractions(path: impl AsRef<Path>) -> Result<RuralFractions> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let file: RuralFile = serde_json::from_str(&text)?;
    RuralFractions::new(file.q)
}

pub fn write_rural_fractions(q: &RuralFractions, path: impl AsRef<Path>) -> Result<()> {
    let file = RuralFile { q: q.values().to_vec() };
    let mut out = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Load a survey CSV with header `region,stratum,cluster,weight,rural,y1,...,yC`.
///
/// The region column is matched against the graph's node labels; missing
/// outcomes are encoded as empty fields.
pub fn load_survey_csv(
    path: impl AsRef<Path>,
    n_outcomes: usize,
    graph: &AdjacencyGraph,
) -> Result<SurveyDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_survey_csv(file, n_outcomes, graph)
}

pub fn read_survey_csv(
    reader: impl Read,
    n_outcomes: usize,
    graph: &AdjacencyGraph,
) -> Result<SurveyDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers()?;
        let expected: Vec<String> = survey_header(n_outcomes);
        let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if got != expected {
            return Err(SaeError::parse(
                "header",
                format!("expected columns {expected:?}, got {got:?}"),
            ));
        }
    }
    let mut label_to_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, l) in graph.labels().iter().enumerate() {
        label_to_index.insert(l.as_str(), i);
    }
    let mut records = Vec::new();
    for (row_idx, row) in rdr.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let row = row.map_err(|e| SaeError::parse(format!("line {line}"), e.to_string()))?;
        if row.len() != 5 + n_outcomes {
            return Err(SaeError::parse(
                format!("line {line}"),
                format!("expected {} fields, got {}", 5 + n_outcomes, row.len()),
            ));
        }
        let region_label = row.get(0).unwrap();
        let region = *label_to_index.get(region_label).ok_or_else(|| {
            SaeError::validation(format!(
                "line {line}: region {region_label:?} is not a node of the graph"
            ))
        })?;
        let weight: f64 = row
            .get(3)
            .unwrap()
            .parse()
            .map_err(|e| SaeError::parse(format!("line {line}"), format!("weight: {e}")))?;
        if !(weight.is_finite() && weight > 0.0) {
            return Err(SaeError::validation(format!(
                "line {line}: weight {weight} is not positive and finite"
            )));
        }
        let rural = match row.get(4).unwrap() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(SaeError::parse(
                    format!("line {line}"),
                    format!("rural flag {other:?} (expected 0/1)"),
                ))
            }
        };
        let mut outcomes = Vec::with_capacity(n_outcomes);
        for c in 0..n_outcomes {
            let field = row.get(5 + c).unwrap();
            if field.is_empty() {
                outcomes.push(None);
            } else {
                let y: f64 = field.parse().map_err(|e| {
                    SaeError::parse(format!("line {line}"), format!("y{}: {e}", c + 1))
                })?;
                outcomes.push(Some(y));
            }
        }
        records.push(IndividualRecord {
            region,
            stratum: row.get(1).unwrap().to_string(),
            cluster: row.get(2).unwrap().to_string(),
            weight,
            rural,
            outcomes,
        });
    }
    SurveyDataset::new(
        records,
        n_outcomes,
        graph.n_nodes(),
        graph.labels().to_vec(),
    )
}

fn survey_header(n_outcomes: usize) -> Vec<String> {
    let mut h = vec![
        "region".to_string(),
        "stratum".to_string(),
        "cluster".to_string(),
        "weight".to_string(),
        "rural".to_string(),
    ];
    for c in 1..=n_outcomes {
        h.push(format!("y{c}"));
    }
    h
}

/// Write a dataset back to CSV, order-preserving and with shortest
/// round-trip float formatting so reloading is bit-exact.
pub fn write_survey_csv(data: &SurveyDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_survey(data, file)
}

pub fn write_survey(data: &SurveyDataset, writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(survey_header(data.n_outcomes()))?;
    for rec in data.records() {
        let mut row = vec![
            data.region_labels()[rec.region].clone(),
            rec.stratum.clone(),
            rec.cluster.clone(),
            format!("{}", rec.weight),
            if rec.rural { "1" } else { "0" }.to_string(),
        ];
        for y in &rec.outcomes {
            row.push(match y {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One entry of the validation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ValidationIssue {
    /// Region with zero sampled clusters.
    EmptyRegion { region: String },
    /// Stratum with a single cluster inside a region (lonely PSU).
    LonelyPsu { region: String, stratum: String },
    /// Region with fewer than 2 observations for an outcome.
    SparseOutcome { region: String, outcome: usize, count: usize },
}

/// Report from [`validate_dataset`]; empty iff the dataset supports full
/// Stage-1 estimation.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn lonely_psus(&self) -> Vec<&ValidationIssue> {
        self.issues
            .iter()
            .filter(|i| matches!(i, ValidationIssue::LonelyPsu { .. }))
            .collect()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for issue in &self.issues {
            match issue {
                ValidationIssue::EmptyRegion { region } => {
                    writeln!(f, "region {region}: no sampled clusters")?
                }
                ValidationIssue::LonelyPsu { region, stratum } => {
                    writeln!(f, "region {region}, stratum {stratum}: single cluster (lonely PSU)")?
                }
                ValidationIssue::SparseOutcome { region, outcome, count } => writeln!(
                    f,
                    "region {region}: only {count} observation(s) for outcome {outcome}"
                )?,
            }
        }
        Ok(())
    }
}

/// Check a dataset against its geography and rural fractions.
///
/// Dimension mismatches are hard errors; data sparsity problems are
/// reported, not failed.
pub fn validate_dataset(
    data: &SurveyDataset,
    graph: &AdjacencyGraph,
    q: Option<&RuralFractions>,
) -> Result<ValidationReport> {
    let n = graph.n_nodes();
    if data.region_count() != n {
        return Err(SaeError::validation(format!(
            "dataset has {} regions, graph has {n}",
            data.region_count()
        )));
    }
    if let Some(q) = q {
        if q.len() != n {
            return Err(SaeError::validation(format!(
                "rural fractions have length {}, graph has {n} nodes",
                q.len()
            )));
        }
    }
    let mut issues = Vec::new();

    // Regions with zero sampled clusters.
    let clusters = data.clusters_per_region();
    for (r, &k) in clusters.iter().enumerate() {
        if k == 0 {
            issues.push(ValidationIssue::EmptyRegion {
                region: graph.label_of(r).to_string(),
            });
        }
    }

    // Lonely PSUs: within each region, strata with a single cluster.
    let mut strata_clusters: BTreeMap<(usize, &str), BTreeSet<&str>> = BTreeMap::new();
    for rec in data.records() {
        strata_clusters
            .entry((rec.region, rec.stratum.as_str()))
            .or_default()
            .insert(rec.cluster.as_str());
    }
    for ((region, stratum), cl) in &strata_clusters {
        if cl.len() == 1 {
            issues.push(ValidationIssue::LonelyPsu {
                region: graph.label_of(*region).to_string(),
                stratum: stratum.to_string(),
            });
        }
    }

    // Regions with fewer than 2 observations per outcome.
    let mut counts = vec![vec![0usize; data.n_outcomes()]; n];
    for rec in data.records() {
        for (c, y) in rec.outcomes.iter().enumerate() {
            if y.is_some() {
                counts[rec.region][c] += 1;
            }
        }
    }
    for (r, per_outcome) in counts.iter().enumerate() {
        for (c, &count) in per_outcome.iter().enumerate() {
            if count < 2 {
                issues.push(ValidationIssue::SparseOutcome {
                    region: graph.label_of(r).to_string(),
                    outcome: c + 1,
                    count,
                });
            }
        }
    }

    Ok(ValidationReport { issues })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> AdjacencyGraph {
        AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap()
    }

    fn small_csv() -> String {
        "region,stratum,cluster,weight,rural,y1,y2\n\
         1,s1,c1,1.5,0,0.1,0.2\n\
         1,s1,c2,2.0,0,0.3,\n\
         2,s2,c3,1.0,1,-0.5,0.0\n\
         2,s2,c4,1.0,1,0.7,0.9\n"
            .to_string()
    }

    #[test]
    fn loads_valid_file() {
        let g = path3();
        let data = read_survey_csv(small_csv().as_bytes(), 2, &g).unwrap();
        assert_eq!(data.records().len(), 4);
        assert_eq!(data.cluster_index().len(), 4);
        assert_eq!(data.records()[1].outcomes, vec![Some(0.3), None]);
        assert_eq!(data.records()[2].region, 1);
    }

    #[test]
    fn rejects_nonpositive_weight() {
        let g = path3();
        let csv = small_csv().replace("1,s1,c2,2.0", "1,s1,c2,-1");
        let err = read_survey_csv(csv.as_bytes(), 2, &g).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("weight"), "{msg}");
    }

    #[test]
    fn rejects_cluster_spanning_strata() {
        let g = path3();
        let csv = "region,stratum,cluster,weight,rural,y1,y2\n\
                   1,s1,c7,1.0,0,0.1,0.2\n\
                   1,s2,c7,1.0,0,0.3,0.4\n";
        let err = read_survey_csv(csv.as_bytes(), 2, &g).unwrap_err();
        assert!(err.to_string().contains("c7"), "{err}");
    }

    #[test]
    fn rejects_unknown_region_label() {
        let g = path3();
        let csv = small_csv().replace("2,s2,c4", "9,s2,c4");
        let err = read_survey_csv(csv.as_bytes(), 2, &g).unwrap_err();
        assert!(err.to_string().contains("\"9\""), "{err}");
    }

    #[test]
    fn all_missing_rows_kept_and_flagged() {
        let g = path3();
        let csv = "region,stratum,cluster,weight,rural,y1,y2\n\
                   1,s1,c1,1.0,0,,\n\
                   1,s1,c2,1.0,0,0.3,0.4\n";
        let data = read_survey_csv(csv.as_bytes(), 2, &g).unwrap();
        assert_eq!(data.records().len(), 2);
        assert_eq!(data.all_missing_records(), vec![0]);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let g = path3();
        let data = read_survey_csv(small_csv().as_bytes(), 2, &g).unwrap();
        let mut buf = Vec::new();
        write_survey(&data, &mut buf).unwrap();
        let reloaded = read_survey_csv(buf.as_slice(), 2, &g).unwrap();
        assert_eq!(data.records(), reloaded.records());
    }

    #[test]
    fn graph_parses_and_dedups() {
        let g = parse_adjacency(r#"{"n":3,"edges":[[1,2],[2,3],[2,1]]}"#).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.edges().len(), 2);
        assert_eq!(g.components().len(), 1);
    }

    #[test]
    fn graph_edge_reversal_invariant() {
        let a = parse_adjacency(r#"{"n":4,"edges":[[1,2],[3,4]]}"#).unwrap();
        let b = parse_adjacency(r#"{"n":4,"edges":[[2,1],[4,3]]}"#).unwrap();
        assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn edgeless_graph_has_singleton_components() {
        let g = parse_adjacency(r#"{"n":4,"edges":[]}"#).unwrap();
        assert_eq!(g.components().len(), 4);
        assert!(g.components().iter().all(|c| c.len() == 1));
    }

    #[test]
    fn graph_rejects_out_of_range_node() {
        let err = parse_adjacency(r#"{"n":3,"edges":[[1,5]]}"#).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn rural_fractions_bounds() {
        assert!(RuralFractions::new(vec![0.0, 0.5, 1.0]).is_ok());
        assert!(RuralFractions::new(vec![1.2]).is_err());
        assert!(RuralFractions::new(vec![-0.1]).is_err());
    }

    #[test]
    fn validation_report_complete_dataset_empty() {
        let g = AdjacencyGraph::new(2, &[(0, 1)], None).unwrap();
        let csv = "region,stratum,cluster,weight,rural,y1\n\
                   1,s1,c1,1.0,0,0.1\n\
                   1,s1,c1,1.0,0,0.4\n\
                   1,s1,c2,1.0,0,0.2\n\
                   1,s1,c2,1.0,0,0.5\n\
                   2,s2,c3,1.0,1,0.3\n\
                   2,s2,c3,1.0,1,0.6\n\
                   2,s2,c4,1.0,1,0.4\n\
                   2,s2,c4,1.0,1,0.7\n";
        let data = read_survey_csv(csv.as_bytes(), 1, &g).unwrap();
        let report = validate_dataset(&data, &g, None).unwrap();
        assert!(report.is_empty(), "{report}");
    }

    #[test]
    fn validation_report_names_missing_region() {
        let g = path3();
        let data = read_survey_csv(small_csv().as_bytes(), 2, &g).unwrap();
        let report = validate_dataset(&data, &g, None).unwrap();
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::EmptyRegion { region } if region == "3")));
    }

    #[test]
    fn validation_report_counts_lonely_psus() {
        let g = path3();
        // Stratum s1 has two clusters; s2 has exactly one.
        let csv = "region,stratum,cluster,weight,rural,y1,y2\n\
                   1,s1,c1,1.0,0,0.1,0.2\n\
                   1,s1,c2,1.0,0,0.3,0.4\n\
                   2,s2,c3,1.0,1,0.5,0.6\n\
                   2,s2,c3,1.0,1,0.8,0.9\n";
        let data = read_survey_csv(csv.as_bytes(), 2, &g).unwrap();
        let report = validate_dataset(&data, &g, None).unwrap();
        assert_eq!(report.lonely_psus().len(), 1);
        assert!(report.issues.iter().any(
            |i| matches!(i, ValidationIssue::LonelyPsu { region, stratum } if region == "2" && stratum == "s2")
        ));
    }
}
