use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Vector};

pub const PIXEL_SIDE: usize = 16;

/// Static description of a desk-scale environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Gridlake(GridlakeSpec),
    Pointmass(PointmassSpec),
    Pixelgrid(PixelgridSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Gridlake,
    Pointmass,
    Pixelgrid,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::Gridlake => "gridlake",
            EnvKind::Pointmass => "pointmass",
            EnvKind::Pixelgrid => "pixelgrid",
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// FrozenLake-style grid. `S` start, `F` ice, `H` hole, `G` goal.
/// States are one-hot over cells; actions are left, down, right, up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridlakeSpec {
    #[serde(default = "default_lake_map")]
    pub map: Vec<String>,
    /// Probability of moving perpendicular to the chosen direction.
    #[serde(default)]
    pub slip: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_grid_steps")]
    pub max_steps: usize,
}

/// Planar point mass: state `(px, py, vx, vy)`, action `(ax, ay) ∈ [-1, 1]²`,
/// `p' = p + dt·v`, `v' = damping·v + gain·a`, reward `-‖p'‖² / (2·p_max²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointmassSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_gain")]
    pub gain: f64,
    #[serde(default = "default_episode_len")]
    pub episode_len: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Grid points per action dimension used for `max_a'` and greedy control.
    #[serde(default = "default_lattice")]
    pub lattice_per_dim: usize,
}

/// Open grid rendered as a 16×16 grayscale image; reward 1 whenever the
/// agent occupies the goal corner. Episodes end only by time limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelgridSpec {
    #[serde(default = "default_pixel_size")]
    pub size: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_pixel_steps")]
    pub max_steps: usize,
}

fn default_lake_map() -> Vec<String> {
    ["SFFF", "FHFH", "FFFH", "HFFG"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn default_gamma() -> f64 {
    0.9
}
fn default_grid_steps() -> usize {
    100
}
fn default_dt() -> f64 {
    0.1
}
fn default_damping() -> f64 {
    0.8
}
fn default_gain() -> f64 {
    0.2
}
fn default_episode_len() -> usize {
    25
}
fn default_lattice() -> usize {
    3
}
fn default_pixel_size() -> usize {
    4
}
fn default_pixel_steps() -> usize {
    20
}

impl Default for GridlakeSpec {
    fn default() -> Self {
        GridlakeSpec {
            map: default_lake_map(),
            slip: 0.0,
            gamma: default_gamma(),
            max_steps: default_grid_steps(),
        }
    }
}

impl Default for PointmassSpec {
    fn default() -> Self {
        PointmassSpec {
            dt: default_dt(),
            damping: default_damping(),
            gain: default_gain(),
            episode_len: default_episode_len(),
            gamma: default_gamma(),
            lattice_per_dim: default_lattice(),
        }
    }
}

impl Default for PixelgridSpec {
    fn default() -> Self {
        PixelgridSpec {
            size: default_pixel_size(),
            gamma: default_gamma(),
            max_steps: default_pixel_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    /// Width of the action block in a network input or candidate vector.
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Discrete { n } => *n,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }
}

/// Either a discrete action index or a continuous action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vector),
}

impl Action {
    pub fn index(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Cell {
    Start,
    Ice,
    Hole,
    Goal,
}

impl GridlakeSpec {
    pub fn rows(&self) -> usize {
        self.map.len()
    }

    pub fn cols(&self) -> usize {
        self.map.first().map_or(0, String::len)
    }

    pub fn n_cells(&self) -> usize {
        self.rows() * self.cols()
    }

    pub(crate) fn cell(&self, idx: usize) -> Cell {
        let (r, c) = (idx / self.cols(), idx % self.cols());
        match self.map[r].as_bytes()[c] {
            b'S' => Cell::Start,
            b'H' => Cell::Hole,
            b'G' => Cell::Goal,
            _ => Cell::Ice,
        }
    }

    pub fn start_cell(&self) -> usize {
        (0..self.n_cells())
            .find(|&i| self.cell(i) == Cell::Start)
            .unwrap_or(0)
    }

    pub fn is_terminal(&self, idx: usize) -> bool {
        matches!(self.cell(idx), Cell::Hole | Cell::Goal)
    }

    /// Deterministic result of moving in `dir` (0 left, 1 down, 2 right, 3 up).
    pub fn move_cell(&self, idx: usize, dir: usize) -> usize {
        let (mut r, mut c) = (idx / self.cols(), idx % self.cols());
        match dir {
            0 => c = c.saturating_sub(1),
            1 => r = (r + 1).min(self.rows() - 1),
            2 => c = (c + 1).min(self.cols() - 1),
            _ => r = r.saturating_sub(1),
        }
        r * self.cols() + c
    }

    /// `P(next | idx, action)` as a dense vector over cells.
    pub fn next_distribution(&self, idx: usize, action: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.n_cells()];
        if self.is_terminal(idx) {
            p[idx] = 1.0;
            return p;
        }
        p[self.move_cell(idx, action)] += 1.0 - self.slip;
        if self.slip > 0.0 {
            p[self.move_cell(idx, (action + 1) % 4)] += self.slip / 2.0;
            p[self.move_cell(idx, (action + 3) % 4)] += self.slip / 2.0;
        }
        p
    }

    pub fn reward_for(&self, next: usize) -> f64 {
        if self.cell(next) == Cell::Goal {
            1.0
        } else {
            0.0
        }
    }
}

impl PointmassSpec {
    /// Velocity bound implied by damping, gain and `|a| ≤ 1`.
    pub fn velocity_bound(&self) -> f64 {
        self.gain / (1.0 - self.damping)
    }

    pub fn position_bound(&self) -> f64 {
        1.0 + self.episode_len as f64 * self.dt * self.velocity_bound()
    }

    /// `(A, B)` with `s' = A·s + B·a`.
    pub fn dynamics_matrices(&self) -> (Matrix, Matrix) {
        let (dt, d, g) = (self.dt, self.damping, self.gain);
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, dt, 0.0],
            vec![0.0, 1.0, 0.0, dt],
            vec![0.0, 0.0, d, 0.0],
            vec![0.0, 0.0, 0.0, d],
        ])
        .expect("4x4");
        let b = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![g, 0.0], vec![0.0, g]])
            .expect("4x2");
        (a, b)
    }

    pub fn next_state(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        vec![
            s[0] + self.dt * s[2],
            s[1] + self.dt * s[3],
            self.damping * s[2] + self.gain * a[0],
            self.damping * s[3] + self.gain * a[1],
        ]
    }

    pub fn reward_for(&self, next: &[f64]) -> f64 {
        let pmax = self.position_bound();
        let r = -(next[0] * next[0] + next[1] * next[1]) / (2.0 * pmax * pmax);
        r.max(-1.0)
    }

    /// Lattice of actions over `[-1, 1]²`, row-major.
    pub fn action_lattice(&self) -> Vec<Vec<f64>> {
        let k = self.lattice_per_dim;
        let pts: Vec<f64> = if k == 1 {
            vec![0.0]
        } else {
            (0..k)
                .map(|i| -1.0 + 2.0 * i as f64 / (k - 1) as f64)
                .collect()
        };
        pts.iter()
            .flat_map(|&x| pts.iter().map(move |&y| vec![x, y]))
            .collect()
    }
}

impl PixelgridSpec {
    pub fn n_cells(&self) -> usize {
        self.size * self.size
    }

    pub fn goal_cell(&self) -> usize {
        self.n_cells() - 1
    }

    pub fn move_cell(&self, idx: usize, dir: usize) -> usize {
        let (mut r, mut c) = (idx / self.size, idx % self.size);
        match dir {
            0 => c = c.saturating_sub(1),
            1 => r = (r + 1).min(self.size - 1),
            2 => c = (c + 1).min(self.size - 1),
            _ => r = r.saturating_sub(1),
        }
        r * self.size + c
    }

    pub fn reward_for(&self, next: usize) -> f64 {
        if next == self.goal_cell() {
            1.0
        } else {
            0.0
        }
    }
}

impl EnvSpec {
    pub fn gridlake() -> Self {
        EnvSpec::Gridlake(GridlakeSpec::default())
    }

    pub fn pointmass() -> Self {
        EnvSpec::Pointmass(PointmassSpec::default())
    }

    pub fn pixelgrid() -> Self {
        EnvSpec::Pixelgrid(PixelgridSpec::default())
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvSpec::Gridlake(_) => EnvKind::Gridlake,
            EnvSpec::Pointmass(_) => EnvKind::Pointmass,
            EnvSpec::Pixelgrid(_) => EnvKind::Pixelgrid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gamma = self.gamma();
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!(
                "discount must lie in (0, 1), got {gamma}"
            )));
        }
        match self {
            EnvSpec::Gridlake(g) => {
                if g.rows() == 0 || g.map.iter().any(|r| r.len() != g.cols() || r.is_empty()) {
                    return Err(Error::Config(
                        "gridlake map must be a non-empty rectangle".into(),
                    ));
                }
                if g.map
                    .iter()
                    .any(|r| r.bytes().any(|b| !b"SFHG".contains(&b)))
                {
                    return Err(Error::Config("gridlake map uses only S, F, H, G".into()));
                }
                if g.map.iter().map(|r| r.matches('S').count()).sum::<usize>() != 1 {
                    return Err(Error::Config("gridlake map needs exactly one start".into()));
                }
                if !(0.0..=1.0).contains(&g.slip) {
                    return Err(Error::Config("slip must lie in [0, 1]".into()));
                }
                if g.max_steps == 0 {
                    return Err(Error::Config("max_steps must be >= 1".into()));
                }
            }
            EnvSpec::Pointmass(p) => {
                let finite = [p.dt, p.damping, p.gain].iter().all(|x| x.is_finite());
                if !finite || p.dt <= 0.0 || !(0.0..1.0).contains(&p.damping) || p.gain <= 0.0 {
                    return Err(Error::Config(
                        "pointmass needs dt > 0, damping in [0,1), gain > 0".into(),
                    ));
                }
                if p.episode_len == 0 || p.lattice_per_dim == 0 {
                    return Err(Error::Config(
                        "episode_len and lattice_per_dim must be >= 1".into(),
                    ));
                }
            }
            EnvSpec::Pixelgrid(p) => {
                if p.size < 2 || !PIXEL_SIDE.is_multiple_of(p.size) {
                    return Err(Error::Config(format!(
                        "pixelgrid size must be >= 2 and divide {PIXEL_SIDE}"
                    )));
                }
                if p.max_steps == 0 {
                    return Err(Error::Config("max_steps must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvSpec::Gridlake(g) => g.gamma,
            EnvSpec::Pointmass(p) => p.gamma,
            EnvSpec::Pixelgrid(p) => p.gamma,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSpec::Gridlake(g) => g.n_cells(),
            EnvSpec::Pointmass(_) => 4,
            EnvSpec::Pixelgrid(_) => PIXEL_SIDE * PIXEL_SIDE,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvSpec::Gridlake(_) | EnvSpec::Pixelgrid(_) => ActionSpace::Discrete { n: 4 },
            EnvSpec::Pointmass(_) => ActionSpace::Continuous {
                low: vec![-1.0; 2],
                high: vec![1.0; 2],
            },
        }
    }

    pub fn reward_min(&self) -> f64 {
        match self {
            EnvSpec::Pointmass(_) => -1.0,
            _ => 0.0,
        }
    }

    pub fn reward_max(&self) -> f64 {
        match self {
            EnvSpec::Pointmass(_) => 0.0,
            _ => 1.0,
        }
    }

    /// Per-dimension `(low, high)` bounds on states.
    pub fn state_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            EnvSpec::Gridlake(_) | EnvSpec::Pixelgrid(_) => vec![(0.0, 1.0); self.state_dim()],
            EnvSpec::Pointmass(p) => {
                let (pb, vb) = (p.position_bound(), p.velocity_bound());
                vec![(-pb, pb), (-pb, pb), (-vb, vb), (-vb, vb)]
            }
        }
    }

    /// States are categorical (one-hot over cells) rather than real-valued.
    pub fn categorical_states(&self) -> bool {
        matches!(self, EnvSpec::Gridlake(_))
    }

    /// Linear terminal indicator over the state encoding: the bootstrap term
    /// of a TD target is scaled by `1 − w·s'`. `None` when nothing terminates.
    pub fn terminal_weights(&self) -> Option<Vec<f64>> {
        match self {
            EnvSpec::Gridlake(g) => Some(
                (0..g.n_cells())
                    .map(|i| if g.is_terminal(i) { 1.0 } else { 0.0 })
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Input width of the Q-network: the state for discrete actions (one
    /// output per action), state and action concatenated for continuous ones.
    pub fn q_input_dim(&self) -> usize {
        match self.action_space() {
            ActionSpace::Discrete { .. } => self.state_dim(),
            ActionSpace::Continuous { low, .. } => self.state_dim() + low.len(),
        }
    }

    pub fn q_output_dim(&self) -> usize {
        match self.action_space() {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { .. } => 1,
        }
    }

    /// Candidate actions for `max_a'` over continuous spaces.
    pub fn action_lattice(&self) -> Vec<Vec<f64>> {
        match self {
            EnvSpec::Pointmass(p) => p.action_lattice(),
            _ => Vec::new(),
        }
    }

    /// Dense encoding of an action: one-hot for discrete, raw otherwise.
    pub fn encode_action(&self, action: &Action) -> Result<Vec<f64>> {
        self.check_action(action)?;
        Ok(match (action, self.action_space()) {
            (Action::Discrete(i), ActionSpace::Discrete { n }) => {
                let mut v = vec![0.0; n];
                v[*i] = 1.0;
                v
            }
            (Action::Continuous(v), _) => v.to_vec(),
            _ => unreachable!("checked above"),
        })
    }

    pub fn check_action(&self, action: &Action) -> Result<()> {
        match (action, self.action_space()) {
            (Action::Discrete(i), ActionSpace::Discrete { n }) if *i < n => Ok(()),
            (Action::Continuous(v), ActionSpace::Continuous { low, high })
                if v.len() == low.len()
                    && v.iter()
                        .zip(low.iter().zip(&high))
                        .all(|(x, (l, h))| x >= l && x <= h) =>
            {
                Ok(())
            }
            _ => Err(Error::invalid(format!(
                "action {action:?} is not valid here"
            ))),
        }
    }
}
