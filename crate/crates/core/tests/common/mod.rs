#![allow(dead_code)]

use rgia_core::attack::{PriorSize, StatePrior, TransitionModel, TransitionModelConfig};
use rgia_core::envs::EnvSpec;
use rgia_core::experiments::{Scenario, ScenarioConfig};
use rgia_core::frlcore::FederationConfig;

pub fn federation(batch: usize) -> FederationConfig {
    FederationConfig {
        local_batch_size: batch,
        ..FederationConfig::default()
    }
}

/// Packets of `packets` agents intercepted at round 10 of a fresh federation.
pub fn scenario(env: &EnvSpec, seed: u64, batch: usize, packets: usize) -> Scenario {
    let sc = ScenarioConfig {
        packets,
        ..ScenarioConfig::default()
    };
    Scenario::capture(env, &sc, &federation(batch), seed, None, None).unwrap()
}

pub fn prior(sc: &Scenario) -> StatePrior {
    sc.prior(PriorSize::default()).unwrap()
}

/// A quickly fitted dynamics model; good enough for checking formulas.
pub fn quick_model(sc: &Scenario) -> TransitionModel {
    let mut cfg = TransitionModelConfig::for_env(&sc.env);
    cfg.epochs = 3;
    sc.model(PriorSize::Count(300), &cfg).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
