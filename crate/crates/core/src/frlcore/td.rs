use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{argmax, ActionSpace, EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::numcore::{
    check_len, loss_and_param_grad, tape::Tape, tape::Var, tape_forward, Loss, QNetwork,
    TapeParams, Vector,
};

/// Online network θ and the frozen target network θ⁻ a gradient was computed against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub online: QNetwork,
    pub target: QNetwork,
}

impl NetSnapshot {
    pub fn new(online: QNetwork, target: QNetwork) -> Result<Self> {
        if online.spec() != target.spec() {
            return Err(Error::shape(
                "online and target networks differ in architecture",
            ));
        }
        Ok(NetSnapshot { online, target })
    }

    /// Same network for θ and θ⁻.
    pub fn frozen(online: QNetwork) -> Self {
        NetSnapshot {
            target: online.clone(),
            online,
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.online.hash_into(&mut h);
        self.target.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}

/// Everything the TD target needs from the environment: discount, action
/// head shape, the lattice for `max_a'` on continuous actions, and the
/// terminal indicator over state encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSetup {
    pub gamma: f64,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub lattice: Vec<Vec<f64>>,
    pub terminal_weights: Option<Vec<f64>>,
}

impl TdSetup {
    pub fn for_env(env: &EnvSpec) -> Self {
        TdSetup {
            gamma: env.gamma(),
            state_dim: env.state_dim(),
            action_space: env.action_space(),
            lattice: env.action_lattice(),
            terminal_weights: env.terminal_weights(),
        }
    }

    pub fn layout(&self) -> TransitionLayout {
        TransitionLayout {
            state_dim: self.state_dim,
            action_width: self.action_space.width(),
        }
    }

    fn discrete(&self) -> bool {
        matches!(self.action_space, ActionSpace::Discrete { .. })
    }

    fn continuation(&self, s_next: &[f64]) -> f64 {
        match &self.terminal_weights {
            Some(w) => 1.0 - w.iter().zip(s_next).map(|(a, b)| a * b).sum::<f64>(),
            None => 1.0,
        }
    }

    /// `max_a' Q⁻(s', a')` and the maximising index (ties to the lowest).
    pub fn max_target_q(&self, target: &QNetwork, s_next: &[f64]) -> Result<(f64, usize)> {
        if self.discrete() {
            let out = target.forward(s_next)?;
            let k = argmax(&out);
            Ok((out[k], k))
        } else {
            let mut input = s_next.to_vec();
            let mut qs = Vec::with_capacity(self.lattice.len());
            for a in &self.lattice {
                input.truncate(s_next.len());
                input.extend_from_slice(a);
                qs.push(target.forward(&input)?[0]);
            }
            let k = argmax(&qs);
            Ok((qs[k], k))
        }
    }

    /// `y = r + γ·(1 − w·s')·max_a' Q⁻(s', a')`
    pub fn target_value(&self, target: &QNetwork, r: f64, s_next: &[f64]) -> Result<f64> {
        let (m, _) = self.max_target_q(target, s_next)?;
        Ok(r + self.gamma * (self.continuation(s_next) * m))
    }

    /// Network input and output weights that select `Q(s, a)`.
    fn q_query(&self, s: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        if self.discrete() {
            (s.to_vec(), a.to_vec())
        } else {
            let mut input = s.to_vec();
            input.extend_from_slice(a);
            (input, vec![1.0])
        }
    }
}

/// Flat layout of relaxed transitions: per sample `[s, a, r, s']`, samples
/// concatenated. Discrete actions appear as weights over actions (one-hot for
/// real data); continuous actions as raw vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionLayout {
    pub state_dim: usize,
    pub action_width: usize,
}

/// Views of one sample inside a flat relaxed vector.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    pub s: &'a [f64],
    pub a: &'a [f64],
    pub r: f64,
    pub s_next: &'a [f64],
}

impl TransitionLayout {
    pub fn sample_width(&self) -> usize {
        2 * self.state_dim + self.action_width + 1
    }

    pub fn s_range(&self) -> std::ops::Range<usize> {
        0..self.state_dim
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        self.state_dim..self.state_dim + self.action_width
    }

    pub fn r_index(&self) -> usize {
        self.state_dim + self.action_width
    }

    pub fn s_next_range(&self) -> std::ops::Range<usize> {
        let start = self.r_index() + 1;
        start..start + self.state_dim
    }

    pub fn batch_size(&self, flat: &[f64]) -> Result<usize> {
        let w = self.sample_width();
        if flat.is_empty() || !flat.len().is_multiple_of(w) {
            return Err(Error::shape(format!(
                "relaxed batch length {} is not a positive multiple of {w}",
                flat.len()
            )));
        }
        Ok(flat.len() / w)
    }

    pub fn sample<'a>(&self, flat: &'a [f64], i: usize) -> SampleView<'a> {
        let x = &flat[i * self.sample_width()..(i + 1) * self.sample_width()];
        SampleView {
            s: &x[self.s_range()],
            a: &x[self.a_range()],
            r: x[self.r_index()],
            s_next: &x[self.s_next_range()],
        }
    }

    pub fn encode(&self, env: &EnvSpec, batch: &[Transition]) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(batch.len() * self.sample_width());
        for t in batch {
            check_len(self.state_dim, t.s.len(), "state")?;
            check_len(self.state_dim, t.s_next.len(), "next state")?;
            flat.extend_from_slice(&t.s);
            flat.extend(env.encode_action(&t.a)?);
            flat.push(t.r);
            flat.extend_from_slice(&t.s_next);
        }
        Ok(flat)
    }
}

/// Mean TD loss `½(Q_θ(s,a) − y)²` over `batch`, with `y` computed from θ⁻.
pub fn td_loss(
    snapshot: &NetSnapshot,
    setup: &TdSetup,
    env: &EnvSpec,
    batch: &[Transition],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("TD loss needs a non-empty batch"));
    }
    let flat = setup.layout().encode(env, batch)?;
    Ok(td_value_and_grad(snapshot, setup, &flat)?.0)
}

/// TD loss and its parameter gradient for a relaxed batch (one sample per
/// `setup.layout().sample_width()` entries).
pub fn td_value_and_grad(
    snapshot: &NetSnapshot,
    setup: &TdSetup,
    flat: &[f64],
) -> Result<(f64, Vector)> {
    let loss = td_loss_expr(snapshot, setup, flat)?;
    loss_and_param_grad(&snapshot.online, &loss)
}

fn td_loss_expr(snapshot: &NetSnapshot, setup: &TdSetup, flat: &[f64]) -> Result<Loss> {
    let layout = setup.layout();
    let n = layout.batch_size(flat)?;
    let terms = (0..n)
        .map(|i| {
            let x = layout.sample(flat, i);
            let y = setup.target_value(&snapshot.target, x.r, x.s_next)?;
            let (input, weights) = setup.q_query(x.s, x.a);
            Ok(Loss::HalfSquaredProjection {
                input,
                weights,
                target: y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Loss::mean(terms))
}

/// Records the mean TD loss of a relaxed batch on `tape`. `params` are the
/// online parameters; `inputs` the relaxed batch. The max over `a'` follows
/// the branch chosen at the current values.
pub fn record_td_loss(
    tape: &mut Tape,
    snapshot: &NetSnapshot,
    setup: &TdSetup,
    params: &[Var],
    inputs: &[Var],
) -> Result<Var> {
    let layout = setup.layout();
    let w = layout.sample_width();
    if inputs.is_empty() || !inputs.len().is_multiple_of(w) {
        return Err(Error::shape("relaxed batch width"));
    }
    let n = inputs.len() / w;
    let spec = snapshot.online.spec().clone();
    let zero = tape.var(0.0);
    let mut total = zero;
    for i in 0..n {
        let x = &inputs[i * w..(i + 1) * w];
        let s = &x[layout.s_range()];
        let a = &x[layout.a_range()];
        let r = x[layout.r_index()];
        let s_next = &x[layout.s_next_range()];

        let q = if setup.discrete() {
            let out = tape_forward(tape, &spec, TapeParams::Vars(params), s);
            a.iter()
                .zip(&out)
                .fold(zero, |acc, (&wa, &o)| tape.mul_add(acc, wa, o))
        } else {
            let input: Vec<Var> = s.iter().chain(a).copied().collect();
            tape_forward(tape, &spec, TapeParams::Vars(params), &input)[0]
        };

        let target_params = TapeParams::Const(snapshot.target.params());
        let max_q = if setup.discrete() {
            let out = tape_forward(tape, &spec, target_params, s_next);
            let vals: Vec<f64> = out.iter().map(|&v| tape.value(v)).collect();
            out[argmax(&vals)]
        } else {
            let mut best: Option<Var> = None;
            for act in &setup.lattice {
                let consts: Vec<Var> = act.iter().map(|&v| tape.var(v)).collect();
                let input: Vec<Var> = s_next.iter().copied().chain(consts).collect();
                let q = tape_forward(tape, &spec, target_params, &input)[0];
                if best.is_none_or(|b| tape.value(q) > tape.value(b)) {
                    best = Some(q);
                }
            }
            best.expect("non-empty lattice")
        };
        let bootstrap = match &setup.terminal_weights {
            Some(tw) => {
                let dot = tape.weighted_sum(zero, s_next, tw);
                let cont = tape.scale(dot, -1.0);
                let cont = tape.add_const(cont, 1.0);
                tape.mul(cont, max_q)
            }
            None => max_q,
        };
        let y = tape.fma_const(r, bootstrap, setup.gamma);
        let diff = tape.sub(q, y);
        let sq = tape.square(diff);
        total = tape.fma_const(total, sq, 0.5);
    }
    Ok(tape.scale(total, 1.0 / n as f64))
}
