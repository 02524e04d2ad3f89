use serde::{Deserialize, Serialize};

use crate::attack::{
    estimate_state_prior, train_transition_model, PriorSize, ReconstructionResult, StatePrior,
    TransitionModel, TransitionModelConfig,
};
use crate::defenses::DefenseSpec;
use crate::envs::{generate_dataset, Dataset, EnvSpec, Policy, Transition};
use crate::error::{Error, Result};
use crate::frlcore::{
    mix, run_federation, FederationConfig, FederationOutcome, InterceptedPacket, RecordingTap,
    TdSetup,
};
use crate::metrics::{action_matches, gme, mse, transition_error, Dynamics, EncodedTriple};
use crate::numcore::squared_distance;

/// Largest reward error still counted as an exact recovery.
pub const REWARD_TOL: f64 = 0.05;

/// Slack around the reward range before a reconstructed reward counts as invalid.
pub const REWARD_RANGE_TOL: f64 = 1e-3;

/// How the private data, the intercepted packets and the attacker's prior
/// knowledge are produced for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Transitions collected by a uniform policy and split across agents.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    /// Round whose uploads are intercepted.
    #[serde(default = "default_packet_round")]
    pub packet_round: usize,
    /// Packets attacked per seed (agents 0, 1, ... of the intercepted round).
    #[serde(default = "default_packets")]
    pub packets: usize,
    #[serde(default)]
    pub prior_size: PriorSize,
    /// Prior transitions the dynamics model is fitted on.
    #[serde(default = "default_model_data")]
    pub model_data: PriorSize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<TransitionModelConfig>,
}

fn default_dataset_size() -> usize {
    3000
}
fn default_packet_round() -> usize {
    10
}
fn default_packets() -> usize {
    1
}
fn default_model_data() -> PriorSize {
    PriorSize::Count(2000)
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dataset_size: default_dataset_size(),
            packet_round: default_packet_round(),
            packets: default_packets(),
            prior_size: PriorSize::default(),
            model_data: default_model_data(),
            model: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, fed: &FederationConfig) -> Result<()> {
        if self.dataset_size < fed.n_agents {
            return Err(Error::Config("dataset_size must cover every agent".into()));
        }
        if self.packets == 0 || self.packets > fed.n_agents {
            return Err(Error::Config(format!(
                "packets must be in 1..={} (one per agent)",
                fed.n_agents
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, env: &EnvSpec) -> TransitionModelConfig {
        self.model
            .clone()
            .unwrap_or_else(|| TransitionModelConfig::for_env(env))
    }
}

/// Private data and intercepted uploads for one seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub env: EnvSpec,
    pub seed: u64,
    pub dataset: Dataset,
    pub outcome: FederationOutcome,
    pub packets: Vec<InterceptedPacket>,
}

impl Scenario {
    /// Collects data, trains the federation for `rounds` rounds (at least
    /// up to the intercepted round) and keeps the intercepted packets.
    pub fn capture(
        env: &EnvSpec,
        sc: &ScenarioConfig,
        fed: &FederationConfig,
        seed: u64,
        rounds: Option<usize>,
        defense: Option<&DefenseSpec>,
    ) -> Result<Scenario> {
        sc.validate(fed)?;
        let dataset = generate_dataset(env, Policy::Uniform, sc.dataset_size, mix(seed, 1, 0))?;
        let shards = dataset.split(fed.n_agents, mix(seed, 2, 0))?;
        let fed = FederationConfig {
            seed,
            rounds: rounds
                .unwrap_or(sc.packet_round + 1)
                .max(sc.packet_round + 1),
            ..fed.clone()
        };
        let tap = RecordingTap::for_rounds(vec![sc.packet_round]);
        let outcome = run_federation(env, &fed, &shards, defense, Some(&tap))?;
        let mut packets = tap.into_packets();
        packets.truncate(sc.packets);
        Ok(Scenario {
            env: env.clone(),
            seed,
            dataset,
            outcome,
            packets,
        })
    }

    pub fn prior(&self, size: PriorSize) -> Result<StatePrior> {
        estimate_state_prior(&self.dataset, size, mix(self.seed, 3, 0))
    }

    pub fn model(
        &self,
        data: PriorSize,
        config: &TransitionModelConfig,
    ) -> Result<TransitionModel> {
        let n = data.resolve(self.dataset.len())?;
        let sample = self.dataset.sample(n, mix(self.seed, 4, 0))?;
        train_transition_model(&sample, config, mix(self.seed, 5, 0))
    }
}

/// Pairing of reconstructed samples with true samples (`order[i]` is the
/// reconstruction matched to truth `i`) minimizing total squared distance of
/// the encodings. Exact for batches up to 16.
pub fn match_samples(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = truth.len();
    if recon.len() != n {
        return Err(Error::shape("match_samples: batch sizes differ"));
    }
    if n > 16 {
        return Err(Error::invalid("match_samples supports at most 16 samples"));
    }
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| recon.iter().map(|r| squared_distance(t, r)).collect())
        .collect();
    let full = 1usize << n;
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask].is_infinite() {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == n {
            continue;
        }
        for (j, &cij) in cost[i].iter().enumerate() {
            if mask & (1 << j) != 0 {
                continue;
            }
            let next = mask | (1 << j);
            let c = best[mask] + cij;
            if c < best[next] {
                best[next] = c;
                choice[next] = j;
            }
        }
    }
    let mut order = vec![0; n];
    let mut mask = full - 1;
    for i in (0..n).rev() {
        let j = choice[mask];
        order[i] = j;
        mask &= !(1 << j);
    }
    Ok(order)
}

/// Reconstruction quality of one attack on one packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackScore {
    pub gme: f64,
    pub state_mse: f64,
    pub next_state_mse: f64,
    pub ra: f64,
    pub reward_error: f64,
    /// Fraction of reconstructed rewards more than [`REWARD_RANGE_TOL`]
    /// outside the reward range.
    pub invalid_reward: f64,
    /// Transition error of the relaxed reconstruction under the true dynamics.
    pub te: f64,
    /// Fraction of samples recovered exactly (rewards within [`REWARD_TOL`]).
    pub exact: f64,
}

impl AttackScore {
    pub fn insert_into(&self, row: &mut super::ReportRow) {
        row.set("gme", self.gme)
            .set("state_mse", self.state_mse)
            .set("next_state_mse", self.next_state_mse)
            .set("ra", self.ra)
            .set("reward_error", self.reward_error)
            .set("invalid_reward", self.invalid_reward)
            .set("te", self.te)
            .set("exact", self.exact);
    }
}

pub fn score_attack(
    env: &EnvSpec,
    truth: &[Transition],
    result: &ReconstructionResult,
) -> Result<AttackScore> {
    let layout = TdSetup::for_env(env).layout();
    let w = layout.sample_width();
    let truth_flat = layout.encode(env, truth)?;
    let split = |flat: &[f64]| -> Vec<Vec<f64>> { flat.chunks(w).map(<[f64]>::to_vec).collect() };
    let order = match_samples(&split(&truth_flat), &split(&result.relaxed))?;

    let n = truth.len() as f64;
    let (mut smse, mut nmse, mut hits, mut rerr, mut exact) = (0.0, 0.0, 0usize, 0.0, 0usize);
    for (t, &j) in truth.iter().zip(&order) {
        let d = &result.decoded[j];
        let s = mse(&d.s, &t.s)?;
        let sn = mse(&d.s_next, &t.s_next)?;
        let hit = action_matches(env, &d.a, &t.a);
        smse += s;
        nmse += sn;
        rerr += (d.r - t.r).abs();
        hits += hit as usize;
        exact += (s == 0.0 && sn == 0.0 && hit && (d.r - t.r).abs() <= REWARD_TOL) as usize;
    }
    let (lo, hi) = (env.reward_min(), env.reward_max());
    let invalid = result
        .decoded
        .iter()
        .filter(|d| d.r < lo - REWARD_RANGE_TOL || d.r > hi + REWARD_RANGE_TOL)
        .count();
    let triples: Vec<EncodedTriple> = (0..result.decoded.len())
        .map(|i| {
            let v = layout.sample(&result.relaxed, i);
            EncodedTriple {
                s: v.s.to_vec(),
                a: v.a.to_vec(),
                s_next: v.s_next.to_vec(),
            }
        })
        .collect();
    Ok(AttackScore {
        gme: result.gme,
        state_mse: smse / n,
        next_state_mse: nmse / n,
        ra: hits as f64 / n,
        reward_error: rerr / n,
        invalid_reward: invalid as f64 / n,
        te: transition_error(&triples, Dynamics::Env(env))?,
        exact: exact as f64 / n,
    })
}

/// GME of `result.relaxed` recomputed from the packet, for cross-checks.
pub fn recompute_gme(env: &EnvSpec, packet: &InterceptedPacket, relaxed: &[f64]) -> Result<f64> {
    gme(
        &packet.packet,
        relaxed,
        &packet.snapshot,
        &TdSetup::for_env(env),
    )
}
