//! Desk-scale environments with known dynamics, reward bounds and a pixel renderer.

mod spec;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{squared_distance, QNetwork, Vector};

pub use spec::{
    Action, ActionSpace, EnvKind, EnvSpec, GridlakeSpec, PixelgridSpec, PointmassSpec, PIXEL_SIDE,
};

/// One private sample `(s, a, r, s')`. States are stored in their network
/// encoding (one-hot cells, raw vectors or flattened images).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vector,
    pub a: Action,
    pub r: f64,
    pub s_next: Vector,
}

impl Transition {
    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        let dim = env.state_dim();
        if self.s.len() != dim || self.s_next.len() != dim {
            return Err(Error::shape(format!(
                "transition states must have length {dim}"
            )));
        }
        env.check_action(&self.a)?;
        if !(env.reward_min()..=env.reward_max()).contains(&self.r) {
            return Err(Error::invalid(format!(
                "reward {} outside [{}, {}]",
                self.r,
                env.reward_min(),
                env.reward_max()
            )));
        }
        let bounds = env.state_bounds();
        for state in [&self.s, &self.s_next] {
            if state
                .iter()
                .zip(&bounds)
                .any(|(x, (lo, hi))| x < lo || x > hi)
            {
                return Err(Error::invalid("state outside environment bounds"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EnvState {
    Cell(usize),
    Point(Vec<f64>),
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub transition: Transition,
    pub terminal: bool,
    pub truncated: bool,
    /// Gridlake only: the move went perpendicular to the chosen direction.
    pub slipped: bool,
}

/// A running environment instance. Advance it with an explicit RNG.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    t: usize,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.validate()?;
        let state = match &spec {
            EnvSpec::Gridlake(g) => EnvState::Cell(g.start_cell()),
            EnvSpec::Pixelgrid(_) => EnvState::Cell(0),
            EnvSpec::Pointmass(_) => EnvState::Point(vec![0.0; 4]),
        };
        Ok(Env { spec, state, t: 0 })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Gridlake and pixelgrid start in the fixed start cell; point mass starts
    /// at rest at a uniform position in `[-1, 1]²`.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vector {
        self.t = 0;
        self.state = match &self.spec {
            EnvSpec::Gridlake(g) => EnvState::Cell(g.start_cell()),
            EnvSpec::Pixelgrid(_) => EnvState::Cell(0),
            EnvSpec::Pointmass(_) => EnvState::Point(vec![
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                0.0,
                0.0,
            ]),
        };
        self.observation()
    }

    /// Places the agent in a specific cell (grid environments).
    pub fn set_cell(&mut self, cell: usize) -> Result<()> {
        let n = match &self.spec {
            EnvSpec::Gridlake(g) => g.n_cells(),
            EnvSpec::Pixelgrid(p) => p.n_cells(),
            EnvSpec::Pointmass(_) => return Err(Error::invalid("pointmass has no cells")),
        };
        if cell >= n {
            return Err(Error::invalid(format!("cell {cell} out of range")));
        }
        self.state = EnvState::Cell(cell);
        Ok(())
    }

    /// Places the point mass at a specific state.
    pub fn set_point(&mut self, state: &[f64]) -> Result<()> {
        if !matches!(self.spec, EnvSpec::Pointmass(_)) || state.len() != 4 {
            return Err(Error::invalid("set_point needs a pointmass and a 4-vector"));
        }
        self.state = EnvState::Point(state.to_vec());
        Ok(())
    }

    pub fn cell(&self) -> Option<usize> {
        match self.state {
            EnvState::Cell(c) => Some(c),
            EnvState::Point(_) => None,
        }
    }

    pub fn observation(&self) -> Vector {
        encode_state(&self.spec, &self.state)
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: &Action, rng: &mut R) -> Result<Step> {
        self.spec.check_action(action)?;
        let s = self.observation();
        self.t += 1;
        let (next, r, terminal, truncated, slipped) = match (&self.spec, &self.state) {
            (EnvSpec::Gridlake(g), &EnvState::Cell(c)) => {
                let a = action.index().expect("checked");
                let (dir, slipped) = if g.slip > 0.0 && rng.random::<f64>() < g.slip {
                    let side = if rng.random::<bool>() { 1 } else { 3 };
                    ((a + side) % 4, true)
                } else {
                    (a, false)
                };
                let next = if g.is_terminal(c) {
                    c
                } else {
                    g.move_cell(c, dir)
                };
                let terminal = g.is_terminal(next);
                (
                    EnvState::Cell(next),
                    g.reward_for(next),
                    terminal,
                    !terminal && self.t >= g.max_steps,
                    slipped,
                )
            }
            (EnvSpec::Pixelgrid(p), &EnvState::Cell(c)) => {
                let next = p.move_cell(c, action.index().expect("checked"));
                (
                    EnvState::Cell(next),
                    p.reward_for(next),
                    false,
                    self.t >= p.max_steps,
                    false,
                )
            }
            (EnvSpec::Pointmass(p), EnvState::Point(x)) => {
                let Action::Continuous(a) = action else {
                    unreachable!("checked")
                };
                let next = p.next_state(x, a);
                let r = p.reward_for(&next);
                (
                    EnvState::Point(next),
                    r,
                    false,
                    self.t >= p.episode_len,
                    false,
                )
            }
            _ => unreachable!("state matches spec"),
        };
        self.state = next;
        Ok(Step {
            transition: Transition {
                s,
                a: action.clone(),
                r,
                s_next: self.observation(),
            },
            terminal,
            truncated,
            slipped,
        })
    }
}

fn encode_state(spec: &EnvSpec, state: &EnvState) -> Vector {
    match (spec, state) {
        (EnvSpec::Gridlake(g), &EnvState::Cell(c)) => Vector::basis(g.n_cells(), c),
        (EnvSpec::Pixelgrid(p), &EnvState::Cell(c)) => render_pixel_state(p, c),
        (EnvSpec::Pointmass(_), EnvState::Point(x)) => {
            Vector::new(x.clone()).expect("finite state")
        }
        _ => unreachable!("state matches spec"),
    }
}

/// Renders a grid position as a 16×16 grayscale image in `[0, 1]`, flattened
/// row-major: background 0.1, goal cell 0.5, agent cell 1.0.
pub fn render_pixel_state(spec: &PixelgridSpec, cell: usize) -> Vector {
    let block = PIXEL_SIDE / spec.size;
    let goal = spec.goal_cell();
    let mut img = vec![0.1; PIXEL_SIDE * PIXEL_SIDE];
    for (which, value) in [(goal, 0.5), (cell, 1.0)] {
        let (r, c) = (which / spec.size, which % spec.size);
        for y in r * block..(r + 1) * block {
            for x in c * block..(c + 1) * block {
                img[y * PIXEL_SIDE + x] = value;
            }
        }
    }
    Vector::new(img).expect("finite")
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Grid cell represented by a (possibly relaxed) state encoding: argmax for
/// one-hot cells, nearest rendering for images. `None` for point mass.
pub fn decode_cell(spec: &EnvSpec, s: &[f64]) -> Option<usize> {
    match spec {
        EnvSpec::Gridlake(_) => Some(argmax(s)),
        EnvSpec::Pixelgrid(p) => {
            let dists: Vec<f64> = (0..p.n_cells())
                .map(|c| -squared_distance(&render_pixel_state(p, c), s))
                .collect();
            Some(argmax(&dists))
        }
        EnvSpec::Pointmass(_) => None,
    }
}

/// Expected next-state encoding under the true dynamics, for a state
/// encoding `s` and action encoding `a` (relaxed encodings are mixed linearly).
pub fn expected_next_state(spec: &EnvSpec, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if s.len() != spec.state_dim() || a.len() != spec.action_space().width() {
        return Err(Error::shape("expected_next_state: encoding widths"));
    }
    Ok(match spec {
        EnvSpec::Gridlake(g) => {
            let mut out = vec![0.0; g.n_cells()];
            for (c, &pc) in s.iter().enumerate() {
                for (act, &wa) in a.iter().enumerate() {
                    let weight = pc * wa;
                    if weight == 0.0 {
                        continue;
                    }
                    for (o, p) in out.iter_mut().zip(g.next_distribution(c, act)) {
                        *o += weight * p;
                    }
                }
            }
            out
        }
        EnvSpec::Pointmass(p) => p.next_state(s, a),
        EnvSpec::Pixelgrid(p) => {
            let cell = decode_cell(spec, s).expect("grid");
            let mut out = vec![0.0; s.len()];
            for (act, &wa) in a.iter().enumerate() {
                let img = render_pixel_state(p, p.move_cell(cell, act));
                for (o, v) in out.iter_mut().zip(img.iter()) {
                    *o += wa * v;
                }
            }
            out
        }
    })
}

/// Action with the highest Q-value; ties go to the lowest index (or lattice
/// point for continuous actions).
pub fn greedy_action(spec: &EnvSpec, net: &QNetwork, s: &[f64]) -> Result<Action> {
    match spec.action_space() {
        ActionSpace::Discrete { .. } => Ok(Action::Discrete(argmax(&net.forward(s)?))),
        ActionSpace::Continuous { .. } => {
            let lattice = spec.action_lattice();
            let mut input = s.to_vec();
            let q = lattice
                .iter()
                .map(|a| {
                    input.truncate(s.len());
                    input.extend_from_slice(a);
                    Ok(net.forward(&input)?[0])
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Action::Continuous(Vector::new(
                lattice[argmax(&q)].clone(),
            )?))
        }
    }
}

pub fn random_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Action {
    match spec.action_space() {
        ActionSpace::Discrete { n } => Action::Discrete(rng.random_range(0..n)),
        ActionSpace::Continuous { low, high } => Action::Continuous(
            Vector::new(
                low.iter()
                    .zip(&high)
                    .map(|(&l, &h)| rng.random_range(l..=h))
                    .collect(),
            )
            .expect("finite bounds"),
        ),
    }
}

/// Behaviour policy used to collect data.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Uniform,
    EpsilonGreedy { net: &'a QNetwork, epsilon: f64 },
}

/// An offline set of transitions collected from one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub env: EnvSpec,
    pub seed: u64,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(env: EnvSpec, seed: u64, transitions: Vec<Transition>) -> Result<Self> {
        let ds = Dataset {
            env,
            seed,
            transitions,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::invalid("dataset must not be empty"));
        }
        self.transitions
            .iter()
            .try_for_each(|t| t.validate(&self.env))
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Shuffles with `seed` and deals the transitions round-robin into `n` shards.
    pub fn split(&self, n: usize, seed: u64) -> Result<Vec<Dataset>> {
        if n == 0 || n > self.len() {
            return Err(Error::invalid(format!(
                "cannot split {} transitions into {n} shards",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut shards = vec![Vec::new(); n];
        for (k, i) in order.into_iter().enumerate() {
            shards[k % n].push(self.transitions[i].clone());
        }
        Ok(shards
            .into_iter()
            .map(|transitions| Dataset {
                env: self.env.clone(),
                seed: self.seed,
                transitions,
            })
            .collect())
    }

    /// `count` transitions drawn without replacement.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Dataset> {
        if count == 0 || count > self.len() {
            return Err(Error::invalid(format!(
                "cannot sample {count} of {} transitions",
                self.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rand::seq::index::sample(&mut rng, self.len(), count);
        Ok(Dataset {
            env: self.env.clone(),
            seed: self.seed,
            transitions: idx.iter().map(|i| self.transitions[i].clone()).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.env.validate()?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Dataset::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rolls out `policy` from resets until `n` transitions are collected.
pub fn generate_dataset(env: &EnvSpec, policy: Policy<'_>, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst = Env::new(env.clone())?;
    let mut obs = inst.reset(&mut rng);
    let mut transitions = Vec::with_capacity(n);
    while transitions.len() < n {
        let action = match policy {
            Policy::Uniform => random_action(env, &mut rng),
            Policy::EpsilonGreedy { net, epsilon } => {
                if rng.random::<f64>() < epsilon {
                    random_action(env, &mut rng)
                } else {
                    greedy_action(env, net, &obs)?
                }
            }
        };
        let step = inst.step(&action, &mut rng)?;
        let done = step.terminal || step.truncated;
        transitions.push(step.transition);
        obs = if done {
            inst.reset(&mut rng)
        } else {
            inst.observation()
        };
    }
    Dataset::new(env.clone(), seed, transitions)
}
