use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Dataset, EnvSpec};
use crate::error::{Error, Result};
use crate::numcore::{
    check_len, loss_and_param_grad, squared_distance, Activation, Loss, MlpSpec, Optimizer,
    OptimizerConfig, QNetwork, Vector,
};

/// Empirical mean state known to the attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePrior {
    pub mu: Vector,
    pub n_samples: usize,
    pub source: String,
}

/// How many transitions the prior is estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSize {
    Count(usize),
    Fraction(f64),
    All,
}

impl Default for PriorSize {
    fn default() -> Self {
        PriorSize::Fraction(0.003)
    }
}

/// Smallest prior a fractional request is rounded up to.
pub const PRIOR_FLOOR: usize = 30;

impl PriorSize {
    /// Resolved count for a dataset of `n` transitions. Fractions are
    /// floored at [`PRIOR_FLOOR`] and capped at `n`.
    pub fn resolve(&self, n: usize) -> Result<usize> {
        let k = match *self {
            PriorSize::Count(k) => k,
            PriorSize::All => n,
            PriorSize::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::invalid(format!("prior fraction {f} not in (0, 1]")));
                }
                ((f * n as f64).ceil() as usize).max(PRIOR_FLOOR).min(n)
            }
        };
        if k == 0 || k > n {
            return Err(Error::invalid(format!(
                "cannot draw a prior of {k} from {n} transitions"
            )));
        }
        Ok(k)
    }
}

pub fn dataset_id(ds: &Dataset) -> String {
    format!("{}-seed{}-n{}", ds.env.kind(), ds.seed, ds.len())
}

/// Mean of the states of `size` transitions drawn without replacement.
pub fn estimate_state_prior(dataset: &Dataset, size: PriorSize, seed: u64) -> Result<StatePrior> {
    let k = size.resolve(dataset.len())?;
    let idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), dataset.len(), k);
    let d = dataset.env.state_dim();
    let mut mu = vec![0.0; d];
    for i in idx.iter() {
        for (m, v) in mu.iter_mut().zip(dataset.transitions[i].s.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= k as f64;
    }
    Ok(StatePrior {
        mu: Vector::new(mu)?,
        n_samples: k,
        source: dataset_id(dataset),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub learning_rate: f64,
    pub minibatch: usize,
}

impl TransitionModelConfig {
    /// Linear for point mass, one tanh layer otherwise.
    pub fn for_env(env: &EnvSpec) -> Self {
        match env {
            EnvSpec::Pointmass(_) => TransitionModelConfig {
                hidden_dims: vec![],
                activation: Activation::Tanh,
                epochs: 300,
                learning_rate: 0.02,
                minibatch: 32,
            },
            _ => TransitionModelConfig {
                hidden_dims: vec![64],
                activation: Activation::Tanh,
                epochs: 150,
                learning_rate: 0.01,
                minibatch: 32,
            },
        }
    }
}

/// Learned dynamics `f(s, a) ≈ s'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    pub net: QNetwork,
    pub train_size: usize,
    pub validation_mse: f64,
}

impl TransitionModel {
    pub fn state_dim(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn predict(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_len(self.state_dim(), s.len(), "model state")?;
        check_len(self.net.spec().input_dim - s.len(), a.len(), "model action")?;
        let mut input = s.to_vec();
        input.extend_from_slice(a);
        Ok(self.net.forward(&input)?.into_inner())
    }
}

fn model_examples(env: &EnvSpec, data: &Dataset) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    data.transitions
        .iter()
        .map(|t| {
            let mut x = t.s.to_vec();
            x.extend(env.encode_action(&t.a)?);
            Ok((x, t.s_next.to_vec()))
        })
        .collect()
}

/// Fits a transition model by minibatch Adam on 80% of `data` (shuffled with
/// `seed`) and reports per-coordinate MSE on the remaining 20%. The step size
/// decays linearly to zero over training.
pub fn train_transition_model(
    data: &Dataset,
    config: &TransitionModelConfig,
    seed: u64,
) -> Result<TransitionModel> {
    if data.is_empty() {
        return Err(Error::invalid("transition model needs data"));
    }
    let env = &data.env;
    let d = env.state_dim();
    let spec = MlpSpec::new(
        d + env.action_space().width(),
        config.hidden_dims.clone(),
        d,
        config.activation,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = QNetwork::init(spec, &mut rng)?;

    let mut examples = model_examples(env, data)?;
    examples.shuffle(&mut rng);
    let n_val = if examples.len() >= 2 {
        (examples.len() / 5).max(1)
    } else {
        0
    };
    let (train, val) = examples.split_at(examples.len() - n_val);
    let val = if val.is_empty() { train } else { val };

    let opt_cfg = OptimizerConfig::adam(config.learning_rate);
    opt_cfg.validate()?;
    let mut opt = Optimizer::new(opt_cfg, net.param_count());
    let mb = config.minibatch.max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = (config.epochs * train.len().div_ceil(mb)) as f64;
    let mut params = net.params().to_vec();
    let mut t = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(mb) {
            let loss = Loss::mean(
                chunk
                    .iter()
                    .map(|&i| Loss::HalfSquaredError {
                        input: train[i].0.clone(),
                        target: train[i].1.clone(),
                    })
                    .collect(),
            );
            let (value, grad) = loss_and_param_grad(&net, &loss).map_err(|_| Error::Diverged {
                iteration: epoch,
                context: "transition model loss is not finite".into(),
            })?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: epoch,
                    context: "transition model loss is not finite".into(),
                });
            }
            opt.set_step(config.learning_rate * (1.0 - t as f64 / total_steps));
            opt.step(&mut params, &grad);
            net = net
                .with_params(params.clone())
                .map_err(|_| Error::Diverged {
                    iteration: epoch,
                    context: "transition model parameters are not finite".into(),
                })?;
            t += 1;
        }
    }

    let mut sq = 0.0;
    for (x, y) in val {
        sq += squared_distance(&net.forward(x)?, y);
    }
    Ok(TransitionModel {
        net,
        train_size: train.len(),
        validation_mse: sq / (val.len() * d) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{argmax, decode_cell, generate_dataset, Policy, Transition};

    #[test]
    fn prior_of_identical_states_is_that_state() {
        let env = EnvSpec::pointmass();
        let s = Vector::new(vec![0.1, 0.2, -0.3, 0.0]).unwrap();
        let t = Transition {
            s: s.clone(),
            a: crate::envs::Action::Continuous(Vector::new(vec![0.0, 0.0]).unwrap()),
            r: -0.1,
            s_next: s.clone(),
        };
        let ds = Dataset::new(env, 0, vec![t; 7]).unwrap();
        let p = estimate_state_prior(&ds, PriorSize::Count(4), 1).unwrap();
        assert_eq!(p.mu, s);
        assert_eq!(p.n_samples, 4);
        assert!(estimate_state_prior(&ds, PriorSize::Count(0), 1).is_err());
        assert!(estimate_state_prior(&ds, PriorSize::Count(8), 1).is_err());
    }

    #[test]
    fn full_prior_matches_column_means() {
        let ds = generate_dataset(&EnvSpec::pointmass(), Policy::Uniform, 200, 3).unwrap();
        let p = estimate_state_prior(&ds, PriorSize::All, 9).unwrap();
        for k in 0..4 {
            let mean = ds.transitions.iter().map(|t| t.s[k]).sum::<f64>() / 200.0;
            assert!((p.mu[k] - mean).abs() < 1e-12);
        }
        let one = estimate_state_prior(&ds, PriorSize::Count(1), 4).unwrap();
        assert!(ds.transitions.iter().any(|t| t.s == one.mu));
    }

    #[test]
    fn fraction_has_a_floor() {
        assert_eq!(PriorSize::Fraction(0.003).resolve(2000).unwrap(), 30);
        assert_eq!(PriorSize::Fraction(0.003).resolve(20_000).unwrap(), 60);
        assert_eq!(PriorSize::Fraction(0.003).resolve(10).unwrap(), 10);
    }

    #[test]
    fn pointmass_linear_model_is_exact() {
        let env = EnvSpec::pointmass();
        let ds = generate_dataset(&env, Policy::Uniform, 1000, 5).unwrap();
        let m = train_transition_model(&ds, &TransitionModelConfig::for_env(&env), 1).unwrap();
        assert!(m.validation_mse < 1e-6, "mse {}", m.validation_mse);
        let EnvSpec::Pointmass(p) = &env else {
            unreachable!()
        };
        let (a, b) = p.dynamics_matrices();
        let layers = m.net.unflatten();
        let w = &layers[0].weights;
        for i in 0..4 {
            for j in 0..4 {
                assert!((w.get(i, j) - a.get(i, j)).abs() < 1e-3);
            }
            for j in 0..2 {
                assert!((w.get(i, 4 + j) - b.get(i, j)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let env = EnvSpec::pointmass();
        let ds = generate_dataset(&env, Policy::Uniform, 50, 5).unwrap();
        let cfg = TransitionModelConfig {
            epochs: 0,
            ..TransitionModelConfig::for_env(&env)
        };
        let m = train_transition_model(&ds, &cfg, 2).unwrap();
        assert!(m.validation_mse > 0.0);
        assert_eq!(m.train_size, 40);
    }

    #[test]
    fn gridlake_model_decodes_next_cell() {
        let env = EnvSpec::gridlake();
        let ds = generate_dataset(&env, Policy::Uniform, 2000, 8).unwrap();
        let m = train_transition_model(&ds, &TransitionModelConfig::for_env(&env), 3).unwrap();
        let test = generate_dataset(&env, Policy::Uniform, 500, 99).unwrap();
        let hits = test
            .transitions
            .iter()
            .filter(|t| {
                let a = env.encode_action(&t.a).unwrap();
                let pred = m.predict(&t.s, &a).unwrap();
                Some(argmax(&pred)) == decode_cell(&env, &t.s_next)
            })
            .count();
        assert!(hits as f64 / 500.0 > 0.95, "hits {hits}");
    }
}
