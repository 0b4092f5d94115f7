//! Acceptance suite: every criterion below prints one PASS line with its
//! measured numbers, or fails its assertion. Expected values come from
//! independent oracles (brute-force linearization, dense matrix inversion,
//! grid quadrature) or from the qualitative orderings the simulation
//! studies must reproduce.
//!
//! Run with `cargo test -p sae-cli --release --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use sae_core::direct::{design_covariance, hajek_mean, DirectEstimateSet, LonelyPsuPolicy};
use sae_core::evaluation::loo_logscore_area;
use sae_core::mcmc::{fit, FitConfig, FitData, ModelFit};
use sae_core::model::{
    pc_prior_log_density, reparameterize_shared_direction, AreaFamily, AreaModelSpec, ModelSpec,
    UnitFamily, UnitModelSpec,
};
use sae_core::rng::{derive_seed, rng_from_seed};
use sae_core::simulate::{
    generate_area_replicate, run_simulation_study, ScenarioConfig, ScenarioLevel,
};
use sae_core::spatial::{build_icar_precision, compute_scaling};
use sae_core::survey::{AdjacencyGraph, IndividualRecord, RuralFractions, SurveyDataset};

// ====================================================================
// Criterion 1: Stage-1 oracle equivalence on randomized fixtures.
// ====================================================================

/// Brute-force stratified ultimate-cluster linearization, written from the
/// definition with naive loops; shares no code with the library path.
fn oracle_stage1(
    rows: &[(String, String, f64, [Option<f64>; 2])],
) -> ([Option<f64>; 2], [[f64; 2]; 2]) {
    let mut means = [None, None];
    for c in 0..2 {
        let (mut num, mut den) = (0.0, 0.0);
        for (_, _, w, y) in rows {
            if let Some(v) = y[c] {
                num += w * v;
                den += w;
            }
        }
        if den > 0.0 {
            means[c] = Some(num / den);
        }
    }
    let total_w: f64 = rows.iter().map(|r| r.2).sum();
    let mut wsum = [0.0f64; 2];
    for (_, _, w, y) in rows {
        for c in 0..2 {
            if y[c].is_some() {
                wsum[c] += w / total_w;
            }
        }
    }
    let mut totals: BTreeMap<(String, String), [f64; 2]> = BTreeMap::new();
    for (s, k, w, y) in rows {
        let t = totals.entry((s.clone(), k.clone())).or_insert([0.0; 2]);
        for c in 0..2 {
            if let (Some(v), Some(m)) = (y[c], means[c]) {
                t[c] += (w / total_w) * (v - m) / wsum[c];
            }
        }
    }
    let mut strata: BTreeMap<&str, Vec<&[f64; 2]>> = BTreeMap::new();
    for ((s, _), t) in &totals {
        strata.entry(s.as_str()).or_default().push(t);
    }
    let mut v = [[0.0f64; 2]; 2];
    for (_, ts) in strata {
        let n_h = ts.len() as f64;
        let mean_h: [f64; 2] = [
            ts.iter().map(|t| t[0]).sum::<f64>() / n_h,
            ts.iter().map(|t| t[1]).sum::<f64>() / n_h,
        ];
        for t in ts {
            for a in 0..2 {
                for b in 0..2 {
                    v[a][b] += n_h / (n_h - 1.0) * (t[a] - mean_h[a]) * (t[b] - mean_h[b]);
                }
            }
        }
    }
    (means, v)
}

#[test]
fn a1_stage1_oracle_equivalence() {
    use rand::Rng;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for fixture in 0..20u64 {
        let mut rng = rng_from_seed(31_000 + fixture);
        let r_regions = rng.gen_range(2..=5usize);
        let mut records = Vec::new();
        for region in 0..r_regions {
            let n_strata = rng.gen_range(1..=3usize);
            for s in 0..n_strata {
                let n_clusters = rng.gen_range(2..=4usize);
                for k in 0..n_clusters {
                    for _ in 0..rng.gen_range(1..=10usize) {
                        let y = |rng: &mut rand_chacha::ChaCha8Rng| {
                            if rng.gen_range(0.0..1.0) < 0.9 {
                                Some(rng.gen_range(-2.0..2.0))
                            } else {
                                None
                            }
                        };
                        records.push(IndividualRecord {
                            region,
                            stratum: format!("{region}s{s}"),
                            cluster: format!("{region}s{s}k{k}"),
                            weight: rng.gen_range(0.5..3.0),
                            rural: s % 2 == 1,
                            outcomes: vec![y(&mut rng), y(&mut rng)],
                        });
                    }
                }
            }
        }
        let labels = (1..=r_regions).map(|i| i.to_string()).collect();
        let data = SurveyDataset::new(records, 2, r_regions, labels).unwrap();
        for region in 0..r_regions {
            let rows: Vec<(String, String, f64, [Option<f64>; 2])> = data
                .records()
                .iter()
                .filter(|r| r.region == region)
                .map(|r| {
                    (
                        r.stratum.clone(),
                        r.cluster.clone(),
                        r.weight,
                        [r.outcomes[0], r.outcomes[1]],
                    )
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            let (means, v_oracle) = oracle_stage1(&rows);
            for c in 0..2 {
                let got = hajek_mean(&data, region, c);
                match (got, means[c]) {
                    (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                    (None, None) => {}
                    _ => panic!("availability mismatch"),
                }
            }
            let v = design_covariance(&data, region, LonelyPsuPolicy::Error).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    worst = worst.max((v[(a, b)] - v_oracle[a][b]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-10, "max |delta| = {worst:e}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("ACCEPTANCE 1 stage1-oracle-equivalence: PASS (max |delta| = {worst:.2e}, {elapsed:?})");
}

// ====================================================================
// Criterion 2: ICAR scaling against a dense inversion oracle.
// ====================================================================

#[test]
fn a2_icar_scaling() {
    let start = Instant::now();
    let path3 = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
    let lattice25 = AdjacencyGraph::lattice(25).unwrap();
    let lattice47 = AdjacencyGraph::lattice(47).unwrap();
    let mut worst: f64 = 0.0;
    for (name, graph) in [("path-3", &path3), ("5x5", &lattice25), ("47-lattice", &lattice47)] {
        let icar = compute_scaling(&build_icar_precision(graph)).unwrap();
        // Oracle: constrained covariance = (Q + J/m)^-1 - J/m by LU inversion.
        let n = graph.n_nodes();
        let q = icar.precision();
        let ones = DMatrix::from_element(n, n, 1.0 / n as f64);
        let inv = (q + &ones).try_inverse().expect("oracle inversion");
        let log_mean: f64 = (0..n)
            .map(|i| (inv[(i, i)] - 1.0 / n as f64).ln())
            .sum::<f64>()
            / n as f64;
        let geo_mean = log_mean.exp();
        worst = worst.max((geo_mean - 1.0).abs());
        assert!(
            (geo_mean - 1.0).abs() < 1e-8,
            "{name}: geometric mean {geo_mean}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("ACCEPTANCE 2 icar-scaling: PASS (max |geo mean - 1| = {worst:.2e}, {elapsed:?})");
}

// ====================================================================
// Criterion 3: sampler vs quadrature oracle, plus prior recovery.
// ====================================================================

fn fixture_estimates(y: &[[f64; 2]], v: &[[f64; 3]]) -> DirectEstimateSet {
    let r = y.len();
    let mut y_hat = DMatrix::zeros(r, 2);
    let mut v_hat = Vec::new();
    for i in 0..r {
        y_hat[(i, 0)] = y[i][0];
        y_hat[(i, 1)] = y[i][1];
        v_hat.push(DMatrix::from_row_slice(
            2,
            2,
            &[v[i][0], v[i][1], v[i][1], v[i][2]],
        ));
    }
    DirectEstimateSet {
        region_labels: (1..=r).map(|i| i.to_string()).collect(),
        n_outcomes: 2,
        y_hat,
        v_hat,
        availability: vec![vec![true, true]; r],
        psd_projected: vec![false; r],
    }
}

/// Grid quadrature over (sigma_1, sigma_2) with the latent field
/// integrated analytically; flat intercept priors.
fn grid_oracle(y: &[[f64; 2]; 3], v: &[[f64; 3]; 3]) -> (Vec<f64>, Vec<f64>) {
    let r = 3usize;
    let dim = 2 + 2 * r;
    let mut w = DMatrix::<f64>::zeros(2 * r, 2 * r);
    let mut yv = DVector::<f64>::zeros(2 * r);
    for i in 0..r {
        let det = v[i][0] * v[i][2] - v[i][1] * v[i][1];
        w[(2 * i, 2 * i)] = v[i][2] / det;
        w[(2 * i, 2 * i + 1)] = -v[i][1] / det;
        w[(2 * i + 1, 2 * i)] = -v[i][1] / det;
        w[(2 * i + 1, 2 * i + 1)] = v[i][0] / det;
        yv[2 * i] = y[i][0];
        yv[2 * i + 1] = y[i][1];
    }
    let grid: Vec<f64> = (1..=120).map(|i| i as f64 * 2.5 / 120.0).collect();
    let mut acc: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::new();
    for &s1 in &grid {
        for &s2 in &grid {
            let mut m = DMatrix::<f64>::zeros(2 * r, dim);
            for i in 0..r {
                m[(2 * i, 0)] = 1.0;
                m[(2 * i + 1, 1)] = 1.0;
                m[(2 * i, 2 + i)] = s1;
                m[(2 * i + 1, 2 + r + i)] = s2;
            }
            let mut p = m.transpose() * &w * &m;
            for j in 2..dim {
                p[(j, j)] += 1.0;
            }
            let b = m.transpose() * &w * &yv;
            let chol = p.clone().cholesky().unwrap();
            let mean_x = chol.solve(&b);
            let p_inv = chol.inverse();
            let mu_mean = &m * &mean_x;
            let mu_var = DVector::from_fn(2 * r, |j, _| (&m * &p_inv * m.transpose())[(j, j)]);
            let log_det: f64 = (0..dim).map(|j| chol.l_dirty()[(j, j)].ln()).sum::<f64>() * 2.0;
            let log_z = 0.5 * b.dot(&mean_x) - 0.5 * log_det
                + pc_prior_log_density(s1, 1.0, 0.01).unwrap()
                + pc_prior_log_density(s2, 1.0, 0.01).unwrap();
            acc.push((log_z, mu_mean, mu_var));
        }
    }
    let max_lz = acc.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = acc.iter().map(|a| (a.0 - max_lz).exp()).sum();
    let mut mean = vec![0.0; 2 * r];
    let mut m2 = vec![0.0; 2 * r];
    for (lz, mu, var) in &acc {
        let wt = (lz - max_lz).exp() / total;
        for j in 0..2 * r {
            mean[j] += wt * mu[j];
            m2[j] += wt * (var[j] + mu[j] * mu[j]);
        }
    }
    let sd: Vec<f64> = (0..2 * r).map(|j| (m2[j] - mean[j] * mean[j]).sqrt()).collect();
    (mean, sd)
}

fn col_stats(fit: &ModelFit, name: &str) -> (f64, f64, f64) {
    let col = fit.column(name).unwrap();
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let ess = fit.diagnostics.for_param(name).map(|p| p.ess).unwrap_or(n);
    (mean, var.sqrt(), ess)
}

#[test]
fn a3_sampler_correctness() {
    let start = Instant::now();
    let y = [[-1.1, -0.6], [-0.7, -0.95], [-1.05, -0.75]];
    let v = [
        [0.015, 0.006, 0.02],
        [0.025, 0.01, 0.03],
        [0.02, 0.008, 0.025],
    ];
    let graph = AdjacencyGraph::new(3, &[(0, 1), (1, 2)], None).unwrap();
    let est = fixture_estimates(&y, &v);
    let spec = ModelSpec::Area(AreaModelSpec::new(AreaFamily::BivNonsharedIid));
    let config = FitConfig {
        chains: 4,
        warmup: 1500,
        draws: 4000,
        seed: 314,
        ..FitConfig::default()
    };
    let f = fit(&spec, FitData::Area(&est), &graph, &config).unwrap();
    let (oracle_mean, oracle_sd) = grid_oracle(&y, &v);
    let mut worst_z: f64 = 0.0;
    for i in 0..3 {
        for c in 0..2 {
            let name = format!("mu.{}.{}", c + 1, i + 1);
            let (mean, sd, ess) = col_stats(&f, &name);
            let j = 2 * i + c;
            let mcse_mean = sd / ess.sqrt();
            let mcse_sd = sd / (2.0 * (ess - 1.0)).sqrt();
            let z_mean = (mean - oracle_mean[j]).abs() / mcse_mean;
            let z_sd = (sd - oracle_sd[j]).abs() / mcse_sd.max(0.02 * sd);
            worst_z = worst_z.max(z_mean).max(z_sd);
            assert!(z_mean < 3.0, "{name}: mean {mean} vs {} ({z_mean:.1} mcse)", oracle_mean[j]);
            assert!(z_sd < 3.0, "{name}: sd {sd} vs {} ({z_sd:.1} mcse)", oracle_sd[j]);
        }
    }

    // Prior recovery: likelihood disabled.
    let graph6 = AdjacencyGraph::lattice(6).unwrap();
    let est6 = fixture_estimates(
        &vec![[0.0, 0.0]; 6],
        &vec![[0.01, 0.0, 0.01]; 6],
    );
    let spec6 = ModelSpec::Area(AreaModelSpec::new(AreaFamily::BivSharedBym));
    let config6 = FitConfig {
        chains: 4,
        warmup: 1000,
        draws: 2000,
        seed: 217,
        prior_only: true,
        ..FitConfig::default()
    };
    let fp = fit(&spec6, FitData::Area(&est6), &graph6, &config6).unwrap();
    let sigma: Vec<f64> = fp.column("sigma.1").unwrap();
    let p_gt_1 = sigma.iter().filter(|&&s| s > 1.0).count() as f64 / sigma.len() as f64;
    assert!((p_gt_1 - 0.01).abs() <= 0.005, "P(sigma > 1) = {p_gt_1}");
    let rho: Vec<f64> = fp.column("rho.2").unwrap();
    let thinned: Vec<f64> = rho.iter().step_by(8).copied().collect();
    let mut sorted = thinned;
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut ks = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        ks = ks
            .max(((i + 1) as f64 / n - x).abs())
            .max((x - i as f64 / n).abs());
    }
    let critical = 1.63 / n.sqrt();
    assert!(ks < critical, "KS = {ks} vs {critical}");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 3 sampler-correctness: PASS (worst |z| = {worst_z:.2}, P(sigma>1) = {p_gt_1:.4}, KS = {ks:.4} < {critical:.4}, {elapsed:?})"
    );
}

// ====================================================================
// Criterion 4: area-level scenario 6 study, 100 replicates, 47 regions.
// ====================================================================

#[test]
fn a4_area_scenario6_study() {
    let start = Instant::now();
    let graph = AdjacencyGraph::lattice(47).unwrap();
    let q = RuralFractions::constant(0.7, 47).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Area,
        scenario_id: 6,
        replicates: 100,
        seed: 2026,
        overrides: BTreeMap::new(),
    };
    let models: Vec<ModelSpec> = AreaFamily::ALL
        .into_iter()
        .map(|f| ModelSpec::Area(AreaModelSpec::new(f)))
        .collect();
    let fit_config = FitConfig {
        chains: 2,
        warmup: 500,
        draws: 750,
        ..FitConfig::default()
    };
    let study = run_simulation_study(&config, &graph, &q, &models, &fit_config, None).unwrap();
    let overall = |id: &str, pick: fn(&sae_core::evaluation::MetricsRow) -> f64| -> f64 {
        let m = study.models.iter().find(|m| m.model_id == id).unwrap();
        m.metrics.summary.iter().map(pick).sum::<f64>() / m.metrics.summary.len() as f64
    };
    // (a) direct has the highest variance and MSE of all 7 models.
    let direct_var = overall("direct", |r| r.variance);
    let direct_mse = overall("direct", |r| r.mse);
    for m in &study.models {
        if m.model_id == "direct" {
            continue;
        }
        let var = overall(&m.model_id, |r| r.variance);
        let mse = overall(&m.model_id, |r| r.mse);
        assert!(
            direct_var > var && direct_mse > mse,
            "direct (var {direct_var:.5}, mse {direct_mse:.5}) not above {} (var {var:.5}, mse {mse:.5})",
            m.model_id
        );
    }
    // (b) shared BYM coverage within [0.90, 0.98].
    let shared_bym_cov = overall("biv_shared_bym", |r| r.coverage);
    assert!(
        (0.90..=0.98).contains(&shared_bym_cov),
        "biv_shared_bym coverage {shared_bym_cov}"
    );
    // (c) non-shared bivariate models undercover relative to both shared models.
    let shared_min = overall("biv_shared_bym", |r| r.coverage)
        .min(overall("biv_shared_iid", |r| r.coverage));
    for id in ["biv_nonshared_iid", "biv_nonshared_bym"] {
        let cov = overall(id, |r| r.coverage);
        assert!(
            cov < shared_min,
            "{id} coverage {cov} not below shared models' {shared_min}"
        );
    }
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 4 area-scenario6-study: PASS (direct var {direct_var:.5} / mse {direct_mse:.5} highest; shared BYM coverage {shared_bym_cov:.3}; nonshared below {shared_min:.3}; {elapsed:?})"
    );
}

// ====================================================================
// Criterion 5: unit-level scenario 7 study, 100 replicates.
// ====================================================================

#[test]
fn a5_unit_scenario7_study() {
    let start = Instant::now();
    let graph = AdjacencyGraph::lattice(47).unwrap();
    let q = RuralFractions::constant(0.7, 47).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Unit,
        scenario_id: 7,
        replicates: 100,
        seed: 509,
        overrides: BTreeMap::new(),
    };
    let models: Vec<ModelSpec> = UnitFamily::ALL
        .into_iter()
        .map(|f| ModelSpec::Unit(UnitModelSpec::new(f)))
        .collect();
    let fit_config = FitConfig {
        chains: 2,
        warmup: 400,
        draws: 500,
        ..FitConfig::default()
    };
    let study = run_simulation_study(&config, &graph, &q, &models, &fit_config, None).unwrap();
    // Outcome 1 is the imprecise one (its likelihood sd is scaled up 2x).
    let abs_bias = |id: &str| -> f64 {
        let m = study.models.iter().find(|m| m.model_id == id).unwrap();
        m.metrics
            .summary
            .iter()
            .find(|r| r.outcome == 1)
            .unwrap()
            .abs_bias
    };
    let pairs = [
        ("iid_shared", "iid_nonshared"),
        ("bym_shared", "bym_nonshared"),
    ];
    let mut detail = String::new();
    for (shared, nonshared) in pairs {
        let s = abs_bias(shared);
        let n = abs_bias(nonshared);
        assert!(
            s < n,
            "{shared} abs bias {s:.5} not below {nonshared} {n:.5} on the imprecise outcome"
        );
        detail.push_str(&format!("{shared} {s:.4} < {nonshared} {n:.4}; "));
    }
    let elapsed = start.elapsed();
    println!("ACCEPTANCE 5 unit-scenario7-study: PASS ({detail}{elapsed:?})");
}

// ====================================================================
// Criterion 6: LOO ranking over 50 shared-BYM replicates.
// ====================================================================

#[test]
fn a6_loo_ranking() {
    let start = Instant::now();
    let graph = AdjacencyGraph::lattice(25).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Area,
        scenario_id: 6,
        replicates: 50,
        seed: 606,
        overrides: BTreeMap::new(),
    };
    let candidates = [
        AreaFamily::UniIid,
        AreaFamily::UniBym,
        AreaFamily::BivNonsharedIid,
        AreaFamily::BivNonsharedBym,
        AreaFamily::BivSharedIid,
        AreaFamily::BivSharedBym,
    ];
    let loo_config = FitConfig {
        chains: 1,
        warmup: 300,
        draws: 1000,
        ..FitConfig::default()
    };
    let mut wins = 0usize;
    for k in 0..config.replicates {
        let (_, est) = generate_area_replicate(&config, &graph, k).unwrap();
        let mut best: Option<(f64, AreaFamily)> = None;
        for (mi, family) in candidates.iter().enumerate() {
            let spec = AreaModelSpec::new(*family);
            let cfg = FitConfig {
                seed: derive_seed(config.seed, &[0x66, k as u64, mi as u64]),
                ..loo_config.clone()
            };
            let report = loo_logscore_area(&spec, &est, &graph, &cfg, 1000).unwrap();
            let score = report.logscore_mean;
            if best.map_or(true, |(b, _)| score < b) {
                best = Some((score, *family));
            }
        }
        if best.unwrap().1 == AreaFamily::BivSharedBym {
            wins += 1;
        }
    }
    let share = wins as f64 / config.replicates as f64;
    assert!(
        share >= 0.80,
        "biv_shared_bym won only {wins}/{} replicates",
        config.replicates
    );
    let elapsed = start.elapsed();
    println!(
        "ACCEPTANCE 6 loo-ranking: PASS (biv_shared_bym best in {wins}/{total} = {share:.2}, {elapsed:?})",
        total = config.replicates
    );
}

// ====================================================================
// Criterion 7: shared-direction sensitivity.
// ====================================================================

#[test]
fn a7_shared_direction_sensitivity() {
    let start = Instant::now();
    let graph = AdjacencyGraph::lattice(47).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Area,
        scenario_id: 6,
        replicates: 1,
        seed: 707,
        overrides: BTreeMap::new(),
    };
    let (_, est) = generate_area_replicate(&config, &graph, 0).unwrap();
    let spec = ModelSpec::Area(AreaModelSpec::new(AreaFamily::BivSharedBym));
    let flipped = reparameterize_shared_direction(&spec).unwrap();
    let fit_config = FitConfig {
        chains: 2,
        warmup: 800,
        draws: 1200,
        seed: 7070,
        ..FitConfig::default()
    };
    let f_a = fit(&spec, FitData::Area(&est), &graph, &fit_config).unwrap();
    let f_b = fit(&flipped, FitData::Area(&est), &graph, &fit_config).unwrap();
    let sa = f_a.summary();
    let sb = f_b.summary();
    let mut worst: f64 = 0.0;
    for (ra, rb) in sa.iter().zip(&sb) {
        // Posterior sd approximated from the central 95% interval.
        let sd = (ra.q975 - ra.q025) / (2.0 * 1.959963984540054);
        let delta = (ra.median - rb.median).abs() / sd;
        worst = worst.max(delta);
        assert!(
            delta < 0.5,
            "region {} outcome {}: |median delta| = {delta:.3} posterior sds",
            ra.region,
            ra.outcome
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}");
    println!(
        "ACCEPTANCE 7 shared-direction-sensitivity: PASS (max |delta| = {worst:.3} posterior sds, {elapsed:?})"
    );
}

// ====================================================================
// Criterion 8: CLI determinism (byte-identical outputs on rerun).
// ====================================================================

fn sae_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sae"))
}

fn run_cli(args: &[&str], extra_paths: &[(&str, &Path)], out_dir: &Path) {
    let mut cmd = sae_bin();
    for a in args {
        cmd.arg(a);
    }
    for (flag, p) in extra_paths {
        cmd.arg(flag).arg(p);
    }
    cmd.arg("--out-dir").arg(out_dir);
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn assert_dirs_identical(a: &Path, b: &Path) {
    let fa = dir_files(a);
    let fb = dir_files(b);
    let rel = |base: &Path, p: &PathBuf| p.strip_prefix(base).unwrap().to_path_buf();
    let ra: Vec<PathBuf> = fa.iter().map(|p| rel(a, p)).collect();
    let rb: Vec<PathBuf> = fb.iter().map(|p| rel(b, p)).collect();
    assert_eq!(ra, rb, "file sets differ");
    for r in &ra {
        if r.file_name().unwrap() == "manifest.json" {
            // The manifest embeds a timestamp, and input paths may live
            // under the per-pass directory; compare fields and the digest
            // multiset instead of raw bytes.
            let va: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(a.join(r)).unwrap()).unwrap();
            let vb: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(b.join(r)).unwrap()).unwrap();
            for key in ["command", "seed", "version"] {
                assert_eq!(va[key], vb[key], "manifest {key} differs");
            }
            let digests = |v: &serde_json::Value| -> Vec<String> {
                let mut d: Vec<String> = v["inputs"]
                    .as_object()
                    .unwrap()
                    .values()
                    .map(|x| x.as_str().unwrap().to_string())
                    .collect();
                d.sort();
                d
            };
            assert_eq!(digests(&va), digests(&vb), "manifest input digests differ");
            continue;
        }
        let ba = std::fs::read(a.join(r)).unwrap();
        let bb = std::fs::read(b.join(r)).unwrap();
        assert_eq!(ba, bb, "{} differs between reruns", r.display());
    }
}

#[test]
fn a8_cli_determinism() {
    let start = Instant::now();
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    // Shared fixtures.
    let graph = dir.join("graph.json");
    std::fs::write(&graph, r#"{"n": 4, "edges": [[1,2],[2,3],[3,4],[1,3]]}"#).unwrap();
    let q = dir.join("q.json");
    std::fs::write(&q, r#"{"q": [0.6, 0.7, 0.5, 0.8]}"#).unwrap();
    let area_model = dir.join("area.json");
    std::fs::write(&area_model, r#"{"level": "area", "family": "biv_shared_bym"}"#).unwrap();
    let unit_model = dir.join("unit.json");
    std::fs::write(&unit_model, r#"{"level": "unit", "family": "bym_shared"}"#).unwrap();
    let survey = dir.join("survey.csv");
    {
        let mut rows = vec!["region,stratum,cluster,weight,rural,y1,y2".to_string()];
        let mut x = 0.41f64;
        for r in 1..=4 {
            for (z, rural) in [("u", 0), ("r", 1)] {
                for k in 0..2 {
                    for i in 0..5 {
                        x = (x * 73.0 + 1.1).fract();
                        let y1 = -0.9 + 0.6 * (x - 0.5) - 0.2 * rural as f64;
                        x = (x * 73.0 + 1.1).fract();
                        let y2 = -0.7 + 0.5 * (x - 0.5) - 0.15 * rural as f64;
                        rows.push(format!(
                            "{r},{r}{z},{r}{z}{k},{},{rural},{y1},{y2}",
                            0.7 + 0.15 * i as f64
                        ));
                    }
                }
            }
        }
        std::fs::write(&survey, rows.join("\n") + "\n").unwrap();
    }

    for pass in ["one", "two"] {
        let base = dir.join(pass);
        run_cli(
            &["direct", "--seed", "5"],
            &[("--data", &survey), ("--graph", &graph)],
            &base.join("direct"),
        );
        let est = base.join("direct/direct_estimates.csv");
        run_cli(
            &[
                "fit", "--seed", "5", "--chains", "2", "--warmup", "150", "--draws", "150",
            ],
            &[("--model", &area_model), ("--data", &est), ("--graph", &graph)],
            &base.join("fit"),
        );
        run_cli(
            &[
                "fit", "--seed", "5", "--chains", "1", "--warmup", "100", "--draws", "100",
                "--keep-cluster-errors",
            ],
            &[
                ("--model", &unit_model),
                ("--data", &survey),
                ("--graph", &graph),
                ("--q", &q),
            ],
            &base.join("unitfit"),
        );
        run_cli(
            &[
                "loo", "--seed", "5", "--models", "uni_iid,biv_shared_bym", "--chains", "1",
                "--warmup", "100", "--draws", "200", "--score-draws", "200",
            ],
            &[("--data", &est), ("--graph", &graph)],
            &base.join("loo"),
        );
        run_cli(
            &[
                "simulate", "--seed", "5", "--scenario", "area:2", "--replicates", "2",
                "--models", "uni_bym", "--chains", "1", "--warmup", "100", "--draws", "150",
                "--archive",
            ],
            &[("--graph", &graph)],
            &base.join("sim"),
        );
        run_cli(
            &["aggregate", "--seed", "5"],
            &[
                ("--samples", &base.join("unitfit/fit_samples.csv")),
                ("--model", &unit_model),
                ("--q", &q),
                ("--graph", &graph),
            ],
            &base.join("agg"),
        );
    }
    assert_dirs_identical(&dir.join("one"), &dir.join("two"));
    let elapsed = start.elapsed();
    println!("ACCEPTANCE 8 cli-determinism: PASS (all command outputs byte-identical, {elapsed:?})");
}

// ====================================================================
// Criterion 9: single-fit wall clock at R = 47 under the default config.
// ====================================================================

#[test]
fn a9_single_fit_wall_clock() {
    let graph = AdjacencyGraph::lattice(47).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Area,
        scenario_id: 6,
        replicates: 1,
        seed: 909,
        overrides: BTreeMap::new(),
    };
    let (_, est) = generate_area_replicate(&config, &graph, 0).unwrap();
    let spec = ModelSpec::Area(AreaModelSpec::new(AreaFamily::BivSharedBym));
    let start = Instant::now();
    let f = fit(&spec, FitData::Area(&est), &graph, &FitConfig { seed: 1, ..FitConfig::default() })
        .unwrap();
    let area_elapsed = start.elapsed();
    assert!(f.n_draws() == 8000);
    assert!(
        area_elapsed.as_secs() < 600,
        "area fit took {area_elapsed:?}"
    );

    let q = RuralFractions::constant(0.7, 47).unwrap();
    let unit_config = ScenarioConfig {
        level: ScenarioLevel::Unit,
        scenario_id: 4,
        replicates: 1,
        seed: 909,
        overrides: BTreeMap::new(),
    };
    let (_, data) =
        sae_core::simulate::generate_unit_replicate(&unit_config, &graph, &q, 0).unwrap();
    let unit_spec = ModelSpec::Unit(UnitModelSpec::new(UnitFamily::BymShared));
    let start = Instant::now();
    let f = fit(
        &unit_spec,
        FitData::Unit(&data, &q),
        &graph,
        &FitConfig { seed: 1, ..FitConfig::default() },
    )
    .unwrap();
    let unit_elapsed = start.elapsed();
    assert!(f.n_draws() == 8000);
    assert!(
        unit_elapsed.as_secs() < 600,
        "unit fit took {unit_elapsed:?}"
    );
    println!(
        "ACCEPTANCE 9 single-fit-wall-clock: PASS (area {area_elapsed:?}, unit {unit_elapsed:?}, budget 600 s each)"
    );
}
