//! Federated TD learning: agents upload gradients, the server averages and applies them.

mod td;

use std::io::Write;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defenses::DefenseSpec;
use crate::envs::{greedy_action, Dataset, Env, EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::numcore::{Activation, MlpSpec, QNetwork, Vector};

pub use td::{
    record_td_loss, td_loss, td_value_and_grad, NetSnapshot, SampleView, TdSetup, TransitionLayout,
};

/// A flattened parameter gradient as it travels from an agent to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPacket {
    pub agent_id: usize,
    pub round: usize,
    pub batch_size: usize,
    pub net_fingerprint: String,
    pub grad: Vector,
    /// Logical send time: `round · n_agents + agent_id`.
    #[serde(default)]
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseSpec>,
}

impl GradientPacket {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: GradientPacket = serde_json::from_str(text)?;
        if p.batch_size == 0 {
            return Err(Error::invalid("packet batch_size must be >= 1"));
        }
        Ok(p)
    }

    /// Fails unless the packet was computed against `snapshot`.
    pub fn check_snapshot(&self, snapshot: &NetSnapshot) -> Result<()> {
        if self.net_fingerprint != snapshot.fingerprint() {
            return Err(Error::Protocol(format!(
                "packet fingerprint {} does not match network {}",
                short(&self.net_fingerprint),
                short(&snapshot.fingerprint())
            )));
        }
        if self.grad.len() != snapshot.online.param_count() {
            return Err(Error::shape(
                "packet gradient length differs from parameter count",
            ));
        }
        Ok(())
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_agents: usize,
    pub rounds: usize,
    pub local_batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// θ⁻ ← θ every this many rounds.
    #[serde(default = "default_refresh")]
    pub target_refresh: usize,
    /// Evaluate the greedy policy every this many rounds (0: final round only).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![16]
}
fn default_activation() -> Activation {
    Activation::Tanh
}
fn default_refresh() -> usize {
    50
}
fn default_eval_episodes() -> usize {
    20
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            n_agents: 3,
            rounds: 500,
            local_batch_size: 8,
            learning_rate: 0.2,
            aggregation: Aggregation::Mean,
            seed: 0,
            hidden_dims: default_hidden(),
            activation: default_activation(),
            target_refresh: default_refresh(),
            eval_every: 0,
            eval_episodes: default_eval_episodes(),
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.local_batch_size == 0 || self.target_refresh == 0 {
            return Err(Error::Config(
                "local_batch_size and target_refresh must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn q_spec(&self, env: &EnvSpec) -> Result<MlpSpec> {
        MlpSpec::new(
            env.q_input_dim(),
            self.hidden_dims.clone(),
            env.q_output_dim(),
            self.activation,
        )
    }

    /// Freshly initialised central network.
    pub fn init_network(&self, env: &EnvSpec) -> Result<QNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0x5eed, 0));
        QNetwork::init(self.q_spec(env)?, &mut rng)
    }
}

/// SplitMix-style mixing of a base seed with two stream indices.
pub fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Result of one agent's local computation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentUpload {
    pub packet: GradientPacket,
    pub td_loss: f64,
    /// The private batch behind the gradient. Only the lab harness sees it.
    pub batch: Vec<Transition>,
}

/// Samples `local_batch_size` transitions (without replacement when the shard
/// allows) and returns the TD-loss gradient against `snapshot`.
pub fn agent_round(
    agent_id: usize,
    round: usize,
    shard: &Dataset,
    snapshot: &NetSnapshot,
    config: &FederationConfig,
) -> Result<AgentUpload> {
    if shard.is_empty() {
        return Err(Error::invalid(format!(
            "agent {agent_id} has an empty shard"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, round as u64 + 1, agent_id as u64));
    let k = config.local_batch_size;
    let batch: Vec<Transition> = if k <= shard.len() {
        rand::seq::index::sample(&mut rng, shard.len(), k)
            .iter()
            .map(|i| shard.transitions[i].clone())
            .collect()
    } else {
        (0..k)
            .map(|_| shard.transitions[rng.random_range(0..shard.len())].clone())
            .collect()
    };
    let (td_loss, grad) = gradient_for_batch(snapshot, &shard.env, &batch)?;
    Ok(AgentUpload {
        packet: GradientPacket {
            agent_id,
            round,
            batch_size: batch.len(),
            net_fingerprint: snapshot.fingerprint(),
            grad,
            created_at: (round * config.n_agents + agent_id) as u64,
            defense: None,
        },
        td_loss,
        batch,
    })
}

/// TD loss and parameter gradient of `batch` against `snapshot`.
pub fn gradient_for_batch(
    snapshot: &NetSnapshot,
    env: &EnvSpec,
    batch: &[Transition],
) -> Result<(f64, Vector)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let setup = TdSetup::for_env(env);
    let flat = setup.layout().encode(env, batch)?;
    td_value_and_grad(snapshot, &setup, &flat)
}

/// Element-wise mean of packets that share a network fingerprint.
pub fn aggregate(packets: &[GradientPacket]) -> Result<Vector> {
    let first = packets
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    let n = first.grad.len();
    for p in packets {
        if p.net_fingerprint != first.net_fingerprint {
            return Err(Error::Protocol(format!(
                "agent {} sent a gradient for a different network",
                p.agent_id
            )));
        }
        if p.grad.len() != n {
            return Err(Error::Protocol("gradient lengths differ".into()));
        }
    }
    if packets.len() == 1 {
        return Ok(first.grad.clone());
    }
    let k = packets.len() as f64;
    let mean = (0..n)
        .map(|i| {
            let base = first.grad[i];
            base + packets.iter().map(|p| p.grad[i] - base).sum::<f64>() / k
        })
        .collect();
    Vector::new(mean)
}

/// `θ ← θ − α·g`, descent on the TD loss.
pub fn apply_update(net: &QNetwork, agg_grad: &[f64], learning_rate: f64) -> Result<QNetwork> {
    if agg_grad.len() != net.param_count() {
        return Err(Error::shape(format!(
            "update of length {} for {} parameters",
            agg_grad.len(),
            net.param_count()
        )));
    }
    let params = net
        .params()
        .iter()
        .zip(agg_grad)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    net.with_params(params)
}

/// What a tap sees for each upload.
#[derive(Debug, Clone, Copy)]
pub struct Interception<'a> {
    pub packet: &'a GradientPacket,
    pub snapshot: &'a Arc<NetSnapshot>,
    /// Ground truth for evaluating reconstructions; never given to the attacker.
    pub truth: &'a [Transition],
}

/// Passive observer of uploaded packets. Called from concurrent agents.
pub trait PacketTap: Sync {
    fn intercept(&self, event: Interception<'_>);
}

/// A captured packet together with the network it was computed against.
#[derive(Debug, Clone)]
pub struct InterceptedPacket {
    pub packet: GradientPacket,
    pub snapshot: Arc<NetSnapshot>,
    pub truth: Vec<Transition>,
}

/// Stores intercepted packets, optionally only from selected rounds.
#[derive(Debug, Default)]
pub struct RecordingTap {
    rounds: Option<Vec<usize>>,
    captured: Mutex<Vec<InterceptedPacket>>,
}

impl RecordingTap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_rounds(rounds: Vec<usize>) -> Self {
        RecordingTap {
            rounds: Some(rounds),
            captured: Mutex::new(Vec::new()),
        }
    }

    /// Captured packets ordered by `(round, agent_id)`.
    pub fn into_packets(self) -> Vec<InterceptedPacket> {
        let mut v = self.captured.into_inner().expect("tap lock poisoned");
        v.sort_by_key(|c| (c.packet.round, c.packet.agent_id));
        v
    }

    pub fn len(&self) -> usize {
        self.captured.lock().expect("tap lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PacketTap for RecordingTap {
    fn intercept(&self, event: Interception<'_>) {
        if let Some(rounds) = &self.rounds {
            if !rounds.contains(&event.packet.round) {
                return;
            }
        }
        self.captured
            .lock()
            .expect("tap lock poisoned")
            .push(InterceptedPacket {
                packet: event.packet.clone(),
                snapshot: Arc::clone(event.snapshot),
                truth: event.truth.to_vec(),
            });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub round: usize,
    pub agent_id: usize,
    pub td_loss: f64,
    pub eval_return: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn final_td_loss(&self) -> Option<f64> {
        let last = self.rows.last()?.round;
        let tail: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.round == last)
            .map(|r| r.td_loss)
            .collect();
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    pub fn final_eval_return(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_return)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "agent_id", "td_loss", "eval_return"])?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.agent_id.to_string(),
                format!("{:e}", r.td_loss),
                r.eval_return.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub log: TrainingLog,
    pub snapshot: NetSnapshot,
}

/// Greedy-policy evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    /// Fraction of episodes that ended with a positive terminal reward.
    pub success_rate: f64,
}

/// Rolls out the greedy policy of `net` for `episodes` episodes. Evaluation
/// starts are drawn from a fixed stream so different networks face the same ones.
pub fn evaluate_greedy(
    env: &EnvSpec,
    net: &QNetwork,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::invalid("need at least one evaluation episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xe7a1, 0));
    let mut inst = Env::new(env.clone())?;
    let mut total = 0.0;
    let mut successes = 0usize;
    for _ in 0..episodes {
        let mut obs = inst.reset(&mut rng);
        let mut ret = 0.0;
        loop {
            let a = greedy_action(env, net, &obs)?;
            let step = inst.step(&a, &mut rng)?;
            ret += step.transition.r;
            if step.terminal {
                if step.transition.r > 0.0 {
                    successes += 1;
                }
                break;
            }
            if step.truncated {
                break;
            }
            obs = step.transition.s_next;
        }
        total += ret;
    }
    Ok(EvalStats {
        mean_return: total / episodes as f64,
        success_rate: successes as f64 / episodes as f64,
    })
}

/// Runs `config.rounds` rounds of federated TD learning over `shards`.
/// Every upload passes through `defense` and then `tap`.
pub fn run_federation(
    env: &EnvSpec,
    config: &FederationConfig,
    shards: &[Dataset],
    defense: Option<&DefenseSpec>,
    tap: Option<&dyn PacketTap>,
) -> Result<FederationOutcome> {
    config.validate()?;
    if shards.len() != config.n_agents {
        return Err(Error::Config(format!(
            "{} shards for {} agents",
            shards.len(),
            config.n_agents
        )));
    }
    if let Some(d) = defense {
        d.validate()?;
    }
    let mut online = config.init_network(env)?;
    let mut target = online.clone();
    let mut log = TrainingLog::default();

    for round in 0..config.rounds {
        let snapshot = Arc::new(NetSnapshot::new(online.clone(), target.clone())?);
        let uploads: Vec<(GradientPacket, f64)> = shards
            .par_iter()
            .enumerate()
            .map(|(agent_id, shard)| {
                let up = agent_round(agent_id, round, shard, &snapshot, config)?;
                let packet = match defense {
                    Some(d) if !d.is_none() => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(
                            d.seed,
                            round as u64 + 1,
                            agent_id as u64,
                        ));
                        d.apply(&up.packet, &mut rng)?
                    }
                    _ => up.packet,
                };
                if let Some(t) = tap {
                    t.intercept(Interception {
                        packet: &packet,
                        snapshot: &snapshot,
                        truth: &up.batch,
                    });
                }
                Ok((packet, up.td_loss))
            })
            .collect::<Result<Vec<_>>>()?;

        let packets: Vec<GradientPacket> = uploads.iter().map(|(p, _)| p.clone()).collect();
        let agg = aggregate(&packets)?;
        online = apply_update(&online, &agg, config.learning_rate)?;
        if (round + 1) % config.target_refresh == 0 {
            target = online.clone();
        }

        let last = round + 1 == config.rounds;
        let evaluate = last || (config.eval_every > 0 && (round + 1) % config.eval_every == 0);
        let eval_return = if evaluate {
            Some(evaluate_greedy(env, &online, config.eval_episodes, config.seed)?.mean_return)
        } else {
            None
        };
        for (agent_id, (_, td_loss)) in uploads.iter().enumerate() {
            log.rows.push(LogRow {
                round,
                agent_id,
                td_loss: *td_loss,
                eval_return,
            });
        }
    }
    Ok(FederationOutcome {
        log,
        snapshot: NetSnapshot::new(online, target)?,
    })
}
