use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::{argmax, Action, EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::frlcore::TransitionLayout;
use crate::numcore::Vector;

/// Maps unconstrained candidate variables to the encoded transitions the
/// Q-network consumes. Categorical parts (grid cells, discrete actions) are
/// logits passed through a softmax; everything else is used as is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relaxation {
    pub layout: TransitionLayout,
    pub categorical_state: bool,
    pub categorical_action: bool,
}

impl Relaxation {
    pub fn for_env(env: &EnvSpec) -> Self {
        Relaxation {
            layout: TransitionLayout {
                state_dim: env.state_dim(),
                action_width: env.action_space().width(),
            },
            categorical_state: env.categorical_states(),
            categorical_action: env.action_space().is_discrete(),
        }
    }

    /// Ranges within one sample that hold logits.
    fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let l = &self.layout;
        let mut out = Vec::with_capacity(3);
        if self.categorical_state {
            out.push(l.s_range());
        }
        if self.categorical_action {
            out.push(l.a_range());
        }
        if self.categorical_state {
            out.push(l.s_next_range());
        }
        out
    }

    pub fn relax(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let n = self.layout.batch_size(raw)?;
        let w = self.layout.sample_width();
        let mut out = raw.to_vec();
        for i in 0..n {
            for b in self.blocks() {
                softmax_into(
                    &raw[i * w + b.start..i * w + b.end],
                    &mut out[i * w + b.start..i * w + b.end],
                );
            }
        }
        Ok(out)
    }

    /// Chains a gradient with respect to relaxed values back to the raw
    /// variables. `relaxed` must be `self.relax(raw)`.
    pub fn pullback(&self, relaxed: &[f64], grad: &[f64]) -> Vec<f64> {
        let w = self.layout.sample_width();
        let n = relaxed.len() / w;
        let mut out = grad.to_vec();
        for i in 0..n {
            for b in self.blocks() {
                let p = &relaxed[i * w + b.start..i * w + b.end];
                let g = &grad[i * w + b.start..i * w + b.end];
                let pg: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for (k, o) in out[i * w + b.start..i * w + b.end].iter_mut().enumerate() {
                    *o = p[k] * (g[k] - pg);
                }
            }
        }
        out
    }

    /// Decodes raw variables into transitions: argmax over each block of
    /// logits (ties to the lowest index), identity elsewhere.
    pub fn decode(&self, raw: &[f64]) -> Result<Vec<Transition>> {
        let n = self.layout.batch_size(raw)?;
        let l = &self.layout;
        let state = |x: &[f64]| -> Result<Vector> {
            if self.categorical_state {
                Ok(Vector::basis(x.len(), argmax(x)))
            } else {
                Vector::new(x.to_vec())
            }
        };
        (0..n)
            .map(|i| {
                let x = l.sample(raw, i);
                let a = if self.categorical_action {
                    Action::Discrete(argmax(x.a))
                } else {
                    Action::Continuous(Vector::new(x.a.to_vec())?)
                };
                if !x.r.is_finite() {
                    return Err(Error::Numeric {
                        layer: 0,
                        context: "decoded reward".into(),
                    });
                }
                Ok(Transition {
                    s: state(x.s)?,
                    a,
                    r: x.r,
                    s_next: state(x.s_next)?,
                })
            })
            .collect()
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Unconstrained attack variables for a batch of candidate transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    pub relaxation: Relaxation,
    pub raw: Vec<f64>,
}

impl CandidateBatch {
    /// Every variable drawn from N(0, 1).
    pub fn sample<R: Rng + ?Sized>(relaxation: Relaxation, batch_size: usize, rng: &mut R) -> Self {
        let raw = (0..batch_size * relaxation.layout.sample_width())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        CandidateBatch { relaxation, raw }
    }

    pub fn batch_size(&self) -> usize {
        self.raw.len() / self.relaxation.layout.sample_width()
    }

    pub fn relaxed(&self) -> Result<Vec<f64>> {
        self.relaxation.relax(&self.raw)
    }

    pub fn decode(&self) -> Result<Vec<Transition>> {
        self.relaxation.decode(&self.raw)
    }
}
