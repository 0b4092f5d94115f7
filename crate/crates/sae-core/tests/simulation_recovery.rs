//! Generator/model consistency: fitting the correctly specified model to
//! its own scenario recovers the generating hyperparameters. The truth
//! must sit inside the central 90% of the replicate distribution of
//! posterior medians.

use std::collections::BTreeMap;

use sae_core::mcmc::{fit, quantile_sorted, FitConfig, FitData};
use sae_core::model::{AreaFamily, AreaModelSpec, ModelSpec};
use sae_core::rng::{derive_seed, stream};
use sae_core::simulate::{generate_area_replicate, ScenarioConfig, ScenarioLevel};
use sae_core::survey::AdjacencyGraph;

#[test]
fn shared_bym_scenario_recovers_generating_values() {
    let graph = AdjacencyGraph::lattice(16).unwrap();
    let replicates = 30usize;
    let config = ScenarioConfig {
        level: ScenarioLevel::Area,
        scenario_id: 6,
        replicates,
        seed: 4242,
        overrides: BTreeMap::new(),
    };
    let spec = ModelSpec::Area(AreaModelSpec::new(AreaFamily::BivSharedBym));
    let mut medians: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for k in 0..replicates {
        let (_, est) = generate_area_replicate(&config, &graph, k).unwrap();
        let fit_config = FitConfig {
            chains: 2,
            warmup: 500,
            draws: 500,
            seed: derive_seed(config.seed, &[stream::REPLICATE, k as u64, 99]),
            ..FitConfig::default()
        };
        let f = fit(&spec, FitData::Area(&est), &graph, &fit_config).unwrap();
        for name in ["beta.1", "beta.2", "sigma.1", "sigma.2", "lambda"] {
            let mut col = f.column(name).unwrap();
            col.sort_by(|a, b| a.total_cmp(b));
            medians
                .entry(name)
                .or_default()
                .push(quantile_sorted(&col, 0.5));
        }
    }
    // Generating values for the baseline shared BYM scenario.
    let truth: &[(&str, f64)] = &[
        ("beta.1", -0.98),
        ("beta.2", -0.87),
        ("sigma.1", 0.19),
        ("sigma.2", 0.25),
        ("lambda", 0.75),
    ];
    for (name, value) in truth {
        let mut meds = medians[name].clone();
        meds.sort_by(|a, b| a.total_cmp(b));
        let lo = quantile_sorted(&meds, 0.05);
        let hi = quantile_sorted(&meds, 0.95);
        assert!(
            lo <= *value && *value <= hi,
            "{name}: truth {value} outside central 90% of medians [{lo}, {hi}]"
        );
    }
}
