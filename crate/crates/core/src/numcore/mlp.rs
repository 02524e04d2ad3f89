use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::linalg::{all_finite, check_len, Matrix, Vector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture of a fully connected network. Hidden layers use `activation`;
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "all layer dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(i, o)| i * o + o).sum()
    }

    /// Offsets of each layer's `(weights, bias)` blocks in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<LayerOffsets> {
        let mut offset = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let weights = offset;
                let bias = weights + fan_in * fan_out;
                offset = bias + fan_out;
                LayerOffsets {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: usize,
    pub bias: usize,
}

/// Layer-wise weight and bias storage, the unflattened view of a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Activations saved during a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` is layer `l`'s output.
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input")
    }
}

/// A multilayer perceptron with parameters stored flat, layer-major with each
/// layer's row-major weights followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl QNetwork {
    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        check_len(spec.param_count(), params.len(), "network parameters")?;
        if !all_finite(&params) {
            return Err(Error::Numeric {
                layer: 0,
                context: "parameters contain non-finite values".into(),
            });
        }
        Ok(QNetwork { spec, params })
    }

    /// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..fan_in * fan_out + fan_out).map(|_| dist.sample(rng)));
        }
        Ok(QNetwork { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        QNetwork::from_params(self.spec.clone(), params)
    }

    pub fn unflatten(&self) -> Vec<Layer> {
        self.spec
            .layer_offsets()
            .into_iter()
            .map(|off| Layer {
                weights: Matrix::new(
                    off.fan_out,
                    off.fan_in,
                    self.params[off.weights..off.bias].to_vec(),
                )
                .expect("offsets match spec"),
                bias: self.params[off.bias..off.bias + off.fan_out].to_vec(),
            })
            .collect()
    }

    pub fn flatten(spec: MlpSpec, layers: &[Layer]) -> Result<Self> {
        let shapes = spec.layer_shapes();
        check_len(shapes.len(), layers.len(), "layer count")?;
        let mut params = Vec::with_capacity(spec.param_count());
        for (layer, &(fan_in, fan_out)) in layers.iter().zip(&shapes) {
            if layer.weights.rows() != fan_out
                || layer.weights.cols() != fan_in
                || layer.bias.len() != fan_out
            {
                return Err(Error::shape("layer does not match spec"));
            }
            params.extend_from_slice(layer.weights.data());
            params.extend_from_slice(&layer.bias);
        }
        QNetwork::from_params(spec, params)
    }

    /// Hex SHA-256 over the architecture and the little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for d in [self.spec.input_dim, self.spec.output_dim] {
            h.update((d as u64).to_le_bytes());
        }
        for &d in &self.spec.hidden_dims {
            h.update((d as u64).to_le_bytes());
        }
        h.update([self.spec.activation as u8]);
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vector> {
        let cache = self.forward_cached(input)?;
        Vector::new(cache.activations.into_iter().last().expect("non-empty"))
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        check_len(self.spec.input_dim, input.len(), "network input")?;
        let offsets = self.spec.layer_offsets();
        let last = offsets.len() - 1;
        let mut activations = Vec::with_capacity(offsets.len() + 1);
        let mut pre_activations = Vec::with_capacity(offsets.len());
        activations.push(input.to_vec());
        for (l, off) in offsets.iter().enumerate() {
            let x = &activations[l];
            let w = &self.params[off.weights..off.bias];
            let b = &self.params[off.bias..off.bias + off.fan_out];
            let z: Vec<f64> = (0..off.fan_out)
                .map(|j| {
                    let row = &w[j * off.fan_in..(j + 1) * off.fan_in];
                    let mut acc = b[j];
                    for (wi, xi) in row.iter().zip(x) {
                        acc += wi * xi;
                    }
                    acc
                })
                .collect();
            if !all_finite(&z) {
                return Err(Error::Numeric {
                    layer: l,
                    context: "forward pre-activation".into(),
                });
            }
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Vector-Jacobian product of the output with `seed`: returns
    /// `(∂(seed·f)/∂θ, ∂(seed·f)/∂x)`.
    pub fn vjp(&self, cache: &ForwardCache, seed: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let input_grad = self.vjp_accumulate(cache, seed, 1.0, &mut grad)?;
        Ok((grad, input_grad))
    }

    /// Adds `scale · ∂(seed·f)/∂θ` into `grad` and returns the unscaled input gradient.
    pub fn vjp_accumulate(
        &self,
        cache: &ForwardCache,
        seed: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_len(self.spec.output_dim, seed.len(), "output seed")?;
        check_len(self.params.len(), grad.len(), "gradient buffer")?;
        let offsets = self.spec.layer_offsets();
        let mut delta = seed.to_vec();
        for (l, off) in offsets.iter().enumerate().rev() {
            let x = &cache.activations[l];
            for j in 0..off.fan_out {
                let d = scale * delta[j];
                let row =
                    &mut grad[off.weights + j * off.fan_in..off.weights + (j + 1) * off.fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[off.bias + j] += d;
            }
            let w = &self.params[off.weights..off.bias];
            let mut prev = vec![0.0; off.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                for (p, wi) in prev
                    .iter_mut()
                    .zip(&w[j * off.fan_in..(j + 1) * off.fan_in])
                {
                    *p += wi * dj;
                }
            }
            if l > 0 {
                let z = &cache.pre_activations[l - 1];
                let a = &cache.activations[l];
                for ((p, &zi), &ai) in prev.iter_mut().zip(z).zip(a) {
                    *p *= self.spec.activation.derivative(zi, ai);
                }
            }
            if !all_finite(&prev) {
                return Err(Error::Numeric {
                    layer: l,
                    context: "backward delta".into(),
                });
            }
            delta = prev;
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, spec: MlpSpec) -> QNetwork {
        QNetwork::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn param_count_matches_layers() {
        let spec = MlpSpec::new(4, vec![8, 3], 2, Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), 4 * 8 + 8 + 8 * 3 + 3 + 3 * 2 + 2);
        let linear = MlpSpec::new(3, vec![], 2, Activation::Relu).unwrap();
        assert_eq!(linear.param_count(), 8);
        assert!(MlpSpec::new(0, vec![], 1, Activation::Tanh).is_err());
        assert!(MlpSpec::new(2, vec![0], 1, Activation::Tanh).is_err());
    }

    #[test]
    fn linear_identity_network_is_affine() {
        let spec = MlpSpec::new(3, vec![], 3, Activation::Tanh).unwrap();
        let layer = Layer {
            weights: Matrix::identity(3),
            bias: vec![0.5, -1.0, 2.0],
        };
        let q = QNetwork::flatten(spec, &[layer]).unwrap();
        let out = q.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 1.0, 5.0]);
    }

    #[test]
    fn wrong_input_length_is_a_shape_error() {
        let q = net(1, MlpSpec::new(4, vec![8], 2, Activation::Tanh).unwrap());
        assert!(matches!(q.forward(&[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let spec = MlpSpec::new(4, vec![8], 2, Activation::Tanh).unwrap();
        let q = net(7, spec);
        let x = [0.3, -1.2, 0.7, 2.0];
        let p = q.params();
        // layer 0: 8x4 weights then 8 biases; layer 1: 2x8 weights then 2 biases
        let mut h = [0.0; 8];
        for j in 0..8 {
            let mut z = p[32 + j];
            for i in 0..4 {
                z += p[j * 4 + i] * x[i];
            }
            h[j] = z.tanh();
        }
        let base = 40;
        let mut expected = [0.0; 2];
        for k in 0..2 {
            let mut z = p[base + 16 + k];
            for j in 0..8 {
                z += p[base + k * 8 + j] * h[j];
            }
            expected[k] = z;
        }
        let out = q.forward(&x).unwrap();
        for k in 0..2 {
            assert!((out[k] - expected[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        for hidden in [vec![], vec![5], vec![3, 4]] {
            let spec = MlpSpec::new(3, hidden, 2, Activation::Relu).unwrap();
            let q = net(3, spec.clone());
            let back = QNetwork::flatten(spec, &q.unflatten()).unwrap();
            assert_eq!(back, q);
        }
    }

    #[test]
    fn fingerprint_tracks_params() {
        let spec = MlpSpec::new(2, vec![3], 1, Activation::Tanh).unwrap();
        let a = net(1, spec.clone());
        let b = net(2, spec);
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn non_finite_forward_reports_layer() {
        let spec = MlpSpec::new(1, vec![1], 1, Activation::Tanh).unwrap();
        let q = QNetwork::from_params(spec, vec![1e308, 0.0, 1.0, 0.0]).unwrap();
        match q.forward(&[1e10]) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
