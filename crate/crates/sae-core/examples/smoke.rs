use std::collections::BTreeMap;
use sae_core::direct::{direct_estimates, LonelyPsuPolicy};
use sae_core::evaluation::loo_logscore_unit;
use sae_core::mcmc::FitConfig;
use sae_core::model::{UnitFamily, UnitModelSpec};
use sae_core::rng::derive_seed;
use sae_core::simulate::{generate_unit_replicate, ScenarioConfig, ScenarioLevel};
use sae_core::survey::{AdjacencyGraph, RuralFractions};

fn main() {
    let r = 47;
    let graph = AdjacencyGraph::lattice(r).unwrap();
    let q = RuralFractions::constant(0.7, r).unwrap();
    let config = ScenarioConfig {
        level: ScenarioLevel::Unit, scenario_id: 4, replicates: 1, seed: 8080,
        overrides: BTreeMap::new(),
    };
    let fit_config = FitConfig { chains: 1, warmup: 250, draws: 600, ..FitConfig::default() };
    let mut wins = 0;
    let t0 = std::time::Instant::now();
    for k in 0..6usize {
        let (_, data) = generate_unit_replicate(&config, &graph, &q, k).unwrap();
        let targets = direct_estimates(&data, LonelyPsuPolicy::Error).unwrap();
        let mut means = Vec::new();
        for (mi, family) in [UnitFamily::BymShared, UnitFamily::BymNonshared].into_iter().enumerate() {
            let spec = UnitModelSpec::new(family);
            let cfg = FitConfig { seed: derive_seed(config.seed, &[0x77, k as u64, mi as u64]), ..fit_config.clone() };
            let rep = loo_logscore_unit(&spec, &data, &graph, &q, &targets, &cfg, 600).unwrap();
            means.push(rep.logscore_mean);
        }
        println!("  rep {k}: shared {:.4} vs nonshared {:.4} -> {}", means[0], means[1], if means[0] < means[1] {"shared"} else {"nonshared"});
        if means[0] < means[1] { wins += 1; }
    }
    println!("unit R=47: shared wins {wins}/6 in {:?}", t0.elapsed());
}
