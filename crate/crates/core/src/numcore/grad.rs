use super::linalg::{all_finite, check_len, Vector};
use super::mlp::{Activation, MlpSpec, QNetwork};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Scalar losses whose parameter gradient [`param_grad`] can take.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `½‖f(x) − y‖²`
    HalfSquaredError {
        input: Vec<f64>,
        target: Vec<f64>,
    },
    /// `½(w·f(x) − y)²` with `y` held constant.
    HalfSquaredProjection {
        input: Vec<f64>,
        weights: Vec<f64>,
        target: f64,
    },
    Scaled(f64, Box<Loss>),
    Sum(Vec<Loss>),
}

impl Loss {
    /// Mean of `terms`.
    pub fn mean(terms: Vec<Loss>) -> Loss {
        let k = terms.len() as f64;
        Loss::Scaled(1.0 / k, Box::new(Loss::Sum(terms)))
    }
}

/// Value and flattened parameter gradient of `loss` at `net`.
pub fn loss_and_param_grad(net: &QNetwork, loss: &Loss) -> Result<(f64, Vector)> {
    let mut grad = vec![0.0; net.param_count()];
    let value = accumulate(net, loss, 1.0, &mut grad)?;
    if !value.is_finite() {
        return Err(Error::Numeric {
            layer: net.spec().hidden_dims.len(),
            context: "loss value".into(),
        });
    }
    Ok((value, Vector::new(grad)?))
}

pub fn param_grad(net: &QNetwork, loss: &Loss) -> Result<Vector> {
    loss_and_param_grad(net, loss).map(|(_, g)| g)
}

fn accumulate(net: &QNetwork, loss: &Loss, scale: f64, grad: &mut [f64]) -> Result<f64> {
    match loss {
        Loss::HalfSquaredError { input, target } => {
            let cache = net.forward_cached(input)?;
            check_len(net.spec().output_dim, target.len(), "regression target")?;
            let residual: Vec<f64> = cache
                .output()
                .iter()
                .zip(target)
                .map(|(o, t)| o - t)
                .collect();
            net.vjp_accumulate(&cache, &residual, scale, grad)?;
            Ok(0.5 * residual.iter().map(|r| r * r).sum::<f64>())
        }
        Loss::HalfSquaredProjection {
            input,
            weights,
            target,
        } => {
            let cache = net.forward_cached(input)?;
            check_len(net.spec().output_dim, weights.len(), "output weights")?;
            let q: f64 = weights.iter().zip(cache.output()).map(|(w, o)| w * o).sum();
            let residual = q - target;
            net.vjp_accumulate(&cache, weights, scale * residual, grad)?;
            Ok(0.5 * residual * residual)
        }
        Loss::Scaled(k, inner) => Ok(k * accumulate(net, inner, scale * k, grad)?),
        Loss::Sum(terms) => terms.iter().map(|t| accumulate(net, t, scale, grad)).sum(),
    }
}

/// Where a taped forward pass reads its parameters from.
#[derive(Debug, Clone, Copy)]
pub enum TapeParams<'a> {
    /// Differentiable parameters already on the tape.
    Vars(&'a [Var]),
    /// Frozen parameters folded in as constants.
    Const(&'a [f64]),
}

/// Forward pass of an MLP recorded on `tape`.
pub fn tape_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    params: TapeParams<'_>,
    input: &[Var],
) -> Vec<Var> {
    debug_assert_eq!(input.len(), spec.input_dim);
    let offsets = spec.layer_offsets();
    let last = offsets.len() - 1;
    let mut x = input.to_vec();
    for (l, off) in offsets.iter().enumerate() {
        let mut out = Vec::with_capacity(off.fan_out);
        for j in 0..off.fan_out {
            let row = off.weights + j * off.fan_in;
            let z = match params {
                TapeParams::Vars(p) => {
                    x.iter().enumerate().fold(p[off.bias + j], |acc, (i, &xi)| {
                        tape.mul_add(acc, p[row + i], xi)
                    })
                }
                TapeParams::Const(p) => {
                    let b = tape.var(p[off.bias + j]);
                    tape.weighted_sum(b, &x, &p[row..row + off.fan_in])
                }
            };
            out.push(if l == last {
                z
            } else {
                match spec.activation {
                    Activation::Tanh => tape.tanh(z),
                    Activation::Relu => tape.relu(z),
                }
            });
        }
        x = out;
    }
    x
}

/// How [`matching_loss_input_grad`] differentiates the outer loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    /// Double backprop through the taped parameter gradient.
    Analytic,
    /// Central differences of the outer loss, step `eps` per input coordinate.
    FiniteDifference { eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchingGrad {
    /// `‖∇θL(x) − target‖²`
    pub loss: f64,
    /// Gradient of `loss` with respect to the inputs `x`.
    pub input_grad: Vec<f64>,
}

/// Gradient with respect to `inputs` of `‖∇θL(inputs) − target_grad‖²`, where
/// `build` records the inner scalar loss `L` on a tape given the parameter
/// nodes of `net` and the input nodes.
pub fn matching_loss_input_grad<F>(
    net: &QNetwork,
    inputs: &[f64],
    target_grad: &[f64],
    mode: GradMode,
    tape: &mut Tape,
    build: F,
) -> Result<MatchingGrad>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    check_len(net.param_count(), target_grad.len(), "target gradient")?;
    match mode {
        GradMode::Analytic => {
            let (loss, input_vars, outer) =
                record_matching_loss(net, inputs, target_grad, tape, &build)?;
            let input_grad = tape.grad(outer, &input_vars);
            if !all_finite(&input_grad) {
                return Err(Error::Numeric {
                    layer: 0,
                    context: "matching-loss input gradient".into(),
                });
            }
            Ok(MatchingGrad { loss, input_grad })
        }
        GradMode::FiniteDifference { eps } => {
            let loss = record_matching_loss(net, inputs, target_grad, tape, &build)?.0;
            let mut x = inputs.to_vec();
            let mut input_grad = Vec::with_capacity(inputs.len());
            for i in 0..x.len() {
                let x0 = x[i];
                x[i] = x0 + eps;
                let up = record_matching_loss(net, &x, target_grad, tape, &build)?.0;
                x[i] = x0 - eps;
                let down = record_matching_loss(net, &x, target_grad, tape, &build)?.0;
                x[i] = x0;
                input_grad.push((up - down) / (2.0 * eps));
            }
            Ok(MatchingGrad { loss, input_grad })
        }
    }
}

/// Value of `‖∇θL(inputs) − target_grad‖²` evaluated through the tape.
pub fn matching_loss_value<F>(
    net: &QNetwork,
    inputs: &[f64],
    target_grad: &[f64],
    tape: &mut Tape,
    build: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    check_len(net.param_count(), target_grad.len(), "target gradient")?;
    Ok(record_matching_loss(net, inputs, target_grad, tape, &build)?.0)
}

fn record_matching_loss<F>(
    net: &QNetwork,
    inputs: &[f64],
    target_grad: &[f64],
    tape: &mut Tape,
    build: &F,
) -> Result<(f64, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    tape.clear();
    let params = tape.vars(net.params());
    let input_vars = tape.vars(inputs);
    let inner = build(tape, &params, &input_vars)?;
    let grads = tape.grad_graph(inner, &params);

    // Structurally zero entries contribute a constant t² and no gradient.
    let mut constant = 0.0;
    let mut outer = tape.var(0.0);
    for (g, &t) in grads.iter().zip(target_grad) {
        match g {
            Some(g) => {
                let d = tape.add_const(*g, -t);
                outer = tape.mul_add(outer, d, d);
            }
            None => constant += t * t,
        }
    }
    let outer = tape.add_const(outer, constant);
    let loss = tape.value(outer);
    if !loss.is_finite() {
        return Err(Error::Numeric {
            layer: 0,
            context: "matching loss".into(),
        });
    }
    Ok((loss, input_vars, outer))
}
