use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's own output. Valid for
    /// all four variants: relu outputs are positive exactly where the
    /// pre-activation was.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One affine layer `y = act(x W^T + b)` with weight shape `(out, in)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Xavier-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-limit..limit)).collect();
        DenseLayer {
            weight: Matrix::from_vec(out_dim, in_dim, data).expect("shape is consistent"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Batch forward: rows of `input` are samples.
    pub fn forward(&self, input: &Matrix) -> Matrix {
        let mut out = input.matmul_transpose_b(&self.weight);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v = self.activation.apply(*v + b);
            }
        }
        out
    }
}

/// Per-layer parameter gradients, shaped like the layer they belong to.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| LayerGrads {
                d_weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                d_bias: vec![0.0; l.out_dim()],
            })
            .collect();
        MlpGrads { layers }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weight.add_scaled(&b.d_weight, scale);
            for (x, y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                *x += scale * y;
            }
        }
    }

    /// Flat view in the same order as [`Mlp::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.d_weight.data());
            out.extend_from_slice(&l.d_bias);
        }
        out
    }
}

/// Activations recorded during a forward pass, consumed by `backward`.
#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Matrix,
    outputs: Vec<Matrix>,
}

impl MlpCache {
    fn layer_input(&self, i: usize) -> &Matrix {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }
}

/// A stack of dense layers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Builds `dims[0] -> dims[1] -> ... -> dims.last()`, applying `hidden`
    /// on every layer but the last, which uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Batch forward pass; rows of `input` are samples.
    pub fn forward(&self, input: &Matrix) -> (Matrix, MlpCache) {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
            outputs.push(x.clone());
        }
        (x, MlpCache { input: input.clone(), outputs })
    }

    /// Single-sample forward without a cache.
    pub fn forward_row(&self, input: &[f64]) -> Vec<f64> {
        let m = Matrix::from_vec(1, input.len(), input.to_vec()).expect("shape is consistent");
        let (out, _) = self.forward(&m);
        out.row(0).to_vec()
    }

    /// Backprop of `upstream` (dL/d output, same shape as the forward
    /// output) through the cached pass. Returns parameter gradients and the
    /// gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, upstream: &Matrix) -> (MlpGrads, Matrix) {
        assert_eq!(upstream.rows(), cache.input.rows());
        assert_eq!(upstream.cols(), self.output_dim());
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut up = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &cache.outputs[i];
            let mut dpre = Matrix::zeros(up.rows(), up.cols());
            for r in 0..up.rows() {
                for c in 0..up.cols() {
                    dpre[(r, c)] = up[(r, c)] * layer.activation.derivative_from_output(out[(r, c)]);
                }
            }
            let input = cache.layer_input(i);
            grads.push(LayerGrads {
                d_weight: dpre.matmul_transpose_a(input),
                d_bias: dpre.column_sums(),
            });
            up = dpre.matmul(&layer.weight);
        }
        grads.reverse();
        (MlpGrads { layers: grads }, up)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.out_dim() * l.in_dim() + l.out_dim()).sum()
    }

    /// All parameters as one flat vector: per layer, row-major weight then
    /// bias. [`MlpGrads::flatten`] uses the same order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Writes a flat vector produced by [`Mlp::flatten`] back into the
    /// layers.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weight.data_mut();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let blen = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + blen]);
            at += blen;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}
