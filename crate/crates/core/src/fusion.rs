//! Multi-channel gated attention fusion.
//!
//! Each modality's raw series X_m (T' x d_m) passes through a causal 1-D
//! convolution into a shared width h, then through its own multi-head
//! self-attention block:
//!
//! ```text
//! H_m = relu(causal_conv(X_m))            T' x h
//! Z_m = concat_heads(softmax(Q K^T / sqrt(d_k)) V) W_O
//! Z   = [Z_1 | Z_2 | ... | Z_M]            T' x M*h
//! G   = sigmoid(Z W_g^T + b_g)             T' x M*h
//! F   = G .* Z
//! ```
//!
//! The convolution left-pads with zeros, so H[t] depends only on inputs at
//! times <= t. Attention itself sees the whole series it is given; callers
//! that need causal fused features pass a prefix and read the last row,
//! which is what [`pool_state`] returns.
//!
//! Every parameter has a hand-derived gradient in
//! [`FusionParams::fuse_backward`], audited against central finite
//! differences in the tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Matrix};

/// One modality's raw observations: rows are time steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySeries {
    pub modality_id: usize,
    pub data: Matrix,
}

/// Shape hyperparameters of the fusion encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Shared per-modality width h.
    pub hidden: usize,
    pub n_heads: usize,
    /// Causal convolution width w.
    pub kernel_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { hidden: 8, n_heads: 2, kernel_width: 3 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_heads == 0 || self.kernel_width == 0 {
            return Err(Error::Config(
                "fusion hidden, n_heads, and kernel_width must all be at least 1".into(),
            ));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "fusion hidden {} must be divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Causal convolution parameters for one modality: `kernel[k]` is the h x
/// d_m tap applied to the input k steps back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: Vec<Matrix>,
    pub bias: Vec<f64>,
}

/// Per-head projections (each h x d_k) plus the output projection (h x h).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    pub conv: ConvParams,
    pub attention: AttentionParams,
}

/// All learnable parameters of the fusion encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub modalities: Vec<ModalityParams>,
    /// W_g, (M*h) x (M*h).
    pub gate_weight: Matrix,
    /// b_g, broadcast over time rows.
    pub gate_bias: Vec<f64>,
}

fn xavier_matrix(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent")
}

impl FusionParams {
    /// Xavier-uniform weights, zero biases.
    pub fn init(config: &FusionConfig, modality_dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if modality_dims.is_empty() {
            return Err(Error::Config("fusion needs at least one modality".into()));
        }
        let h = config.hidden;
        let d_k = h / config.n_heads;
        let mut modalities = Vec::with_capacity(modality_dims.len());
        for &d_m in modality_dims {
            if d_m == 0 {
                return Err(Error::Config("modality dimension must be at least 1".into()));
            }
            let kernel = (0..config.kernel_width)
                .map(|_| xavier_matrix(h, d_m, config.kernel_width * d_m, h, rng))
                .collect();
            let conv = ConvParams { kernel, bias: vec![0.0; h] };
            let heads = config.n_heads;
            let attention = AttentionParams {
                w_q: (0..heads).map(|_| xavier_matrix(h, d_k, h, d_k, rng)).collect(),
                w_k: (0..heads).map(|_| xavier_matrix(h, d_k, h, d_k, rng)).collect(),
                w_v: (0..heads).map(|_| xavier_matrix(h, d_k, h, d_k, rng)).collect(),
                w_o: xavier_matrix(h, h, h, h, rng),
            };
            modalities.push(ModalityParams { conv, attention });
        }
        let fused = modality_dims.len() * h;
        Ok(FusionParams {
            config: config.clone(),
            modalities,
            gate_weight: xavier_matrix(fused, fused, fused, fused, rng),
            gate_bias: vec![0.0; fused],
        })
    }

    /// Width of the fused feature vector, M * h.
    pub fn fused_dim(&self) -> usize {
        self.modalities.len() * self.config.hidden
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }
}

/// Causal convolution + relu for one modality. Output row t sums taps over
/// inputs at times t, t-1, ..., t-w+1, with times before 0 treated as zero.
pub fn encode_modality(params: &ConvParams, series: &Matrix) -> Matrix {
    let t_len = series.rows();
    let h = params.bias.len();
    let mut out = Matrix::zeros(t_len, h);
    for t in 0..t_len {
        for (k, tap) in params.kernel.iter().enumerate() {
            if k > t {
                break;
            }
            let x = series.row(t - k);
            let dst = out.row_mut(t);
            for o in 0..h {
                dst[o] += tap.row(o).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let dst = out.row_mut(t);
        for (v, b) in dst.iter_mut().zip(&params.bias) {
            *v = (*v + b).max(0.0);
        }
    }
    out
}

/// Intermediates of one modality's attention pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Row-stochastic attention weights per head.
    pub weights: Vec<Matrix>,
    /// Concatenated head outputs before W_O.
    pub concat: Matrix,
}

/// Multi-head self-attention over an encoded series H (T' x h). Returns
/// Z_m = concat_heads(softmax(Q K^T / sqrt(d_k)) V) W_O and the cache for
/// the backward pass.
pub fn multi_head_attention(
    params: &AttentionParams,
    encoded: &Matrix,
) -> (Matrix, AttentionCache) {
    let heads = params.w_q.len();
    let d_k = params.w_q[0].cols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut qs = Vec::with_capacity(heads);
    let mut ks = Vec::with_capacity(heads);
    let mut vs = Vec::with_capacity(heads);
    let mut ws = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for j in 0..heads {
        let q = encoded.matmul(&params.w_q[j]);
        let k = encoded.matmul(&params.w_k[j]);
        let v = encoded.matmul(&params.w_v[j]);
        let scores = q.matmul_transpose_b(&k).scale(scale);
        let weights = softmax_rows(&scores);
        outs.push(weights.matmul(&v));
        qs.push(q);
        ks.push(k);
        vs.push(v);
        ws.push(weights);
    }
    let concat = Matrix::hstack(&outs.iter().collect::<Vec<_>>());
    let z = concat.matmul(&params.w_o);
    (z, AttentionCache { q: qs, k: ks, v: vs, weights: ws, concat })
}

/// Output of the fusion encoder.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    /// F = G .* Z.
    pub fused: Matrix,
    /// Gate activations, elementwise in (0, 1).
    pub gate: Matrix,
    /// Pre-gate concatenation Z.
    pub pre_gate: Matrix,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct FuseCache {
    inputs: Vec<Matrix>,
    encoded: Vec<Matrix>,
    attention: Vec<AttentionCache>,
    pre_gate: Matrix,
    gate: Matrix,
}

/// Gradients shaped exactly like [`FusionParams`].
#[derive(Clone, Debug)]
pub struct FusionGrads {
    pub modalities: Vec<ModalityGrads>,
    pub gate_weight: Matrix,
    pub gate_bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModalityGrads {
    pub kernel: Vec<Matrix>,
    pub conv_bias: Vec<f64>,
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
    pub w_o: Matrix,
}

impl FusionParams {
    fn check_series(&self, series: &[ModalitySeries]) -> Result<usize> {
        if series.len() != self.modalities.len() {
            return Err(Error::Usage(format!(
                "fuse got {} modalities, encoder has {}",
                series.len(),
                self.modalities.len()
            )));
        }
        let t_len = series[0].data.rows();
        if t_len == 0 {
            return Err(Error::Usage("cannot fuse an empty series".into()));
        }
        for (m, s) in series.iter().enumerate() {
            if s.data.rows() != t_len {
                return Err(Error::Usage("modalities disagree on series length".into()));
            }
            let expected = self.modalities[m].conv.kernel[0].cols();
            if s.data.cols() != expected {
                return Err(Error::Usage(format!(
                    "modality {m} has dimension {}, encoder expects {expected}",
                    s.data.cols()
                )));
            }
        }
        Ok(t_len)
    }

    /// Full fusion pass over aligned modality series.
    pub fn fuse(&self, series: &[ModalitySeries]) -> Result<(FusedFeatures, FuseCache)> {
        self.check_series(series)?;
        let mut inputs = Vec::with_capacity(series.len());
        let mut encoded = Vec::with_capacity(series.len());
        let mut attention = Vec::with_capacity(series.len());
        let mut z_blocks = Vec::with_capacity(series.len());
        for (s, params) in series.iter().zip(&self.modalities) {
            let h = encode_modality(&params.conv, &s.data);
            let (z_m, cache) = multi_head_attention(&params.attention, &h);
            inputs.push(s.data.clone());
            encoded.push(h);
            attention.push(cache);
            z_blocks.push(z_m);
        }
        let pre_gate = Matrix::hstack(&z_blocks.iter().collect::<Vec<_>>());

        let mut gate = pre_gate.matmul_transpose_b(&self.gate_weight);
        for r in 0..gate.rows() {
            for (v, b) in gate.row_mut(r).iter_mut().zip(&self.gate_bias) {
                *v = 1.0 / (1.0 + (-(*v + b)).exp());
            }
        }
        let fused = gate.hadamard(&pre_gate);

        Ok((
            FusedFeatures { fused, gate: gate.clone(), pre_gate: pre_gate.clone() },
            FuseCache { inputs, encoded, attention, pre_gate, gate },
        ))
    }

    /// Backprop of `upstream` (dL/dF, T' x M*h) through the cached pass,
    /// yielding gradients for every fusion parameter.
    pub fn fuse_backward(&self, cache: &FuseCache, upstream: &Matrix) -> FusionGrads {
        let h = self.config.hidden;

        // Gate: F = G .* Z, G = sigmoid(A), A = Z W_g^T + b_g.
        let z = &cache.pre_gate;
        let g = &cache.gate;
        let d_g = upstream.hadamard(z);
        let mut d_z = upstream.hadamard(g);
        let mut d_a = Matrix::zeros(g.rows(), g.cols());
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let gv = g[(r, c)];
                d_a[(r, c)] = d_g[(r, c)] * gv * (1.0 - gv);
            }
        }
        let d_gate_weight = d_a.matmul_transpose_a(z);
        let d_gate_bias = d_a.column_sums();
        d_z.add_scaled(&d_a.matmul(&self.gate_weight), 1.0);

        let mut modalities = Vec::with_capacity(self.modalities.len());
        for (m, params) in self.modalities.iter().enumerate() {
            let d_z_m = d_z.column_block(m * h, h);
            let attn = &cache.attention[m];
            let encoded = &cache.encoded[m];
            let heads = params.attention.w_q.len();
            let d_k_dim = params.attention.w_q[0].cols();
            let scale = 1.0 / (d_k_dim as f64).sqrt();

            // Z_m = concat W_O.
            let d_w_o = attn.concat.matmul_transpose_a(&d_z_m);
            let d_concat = d_z_m.matmul_transpose_b(&params.attention.w_o);

            let mut d_encoded = Matrix::zeros(encoded.rows(), encoded.cols());
            let mut d_w_q = Vec::with_capacity(heads);
            let mut d_w_k = Vec::with_capacity(heads);
            let mut d_w_v = Vec::with_capacity(heads);
            for j in 0..heads {
                let d_head = d_concat.column_block(j * d_k_dim, d_k_dim);
                let weights = &attn.weights[j];
                // head = weights * V.
                let d_weights = d_head.matmul_transpose_b(&attn.v[j]);
                let d_v = weights.matmul_transpose_a(&d_head);
                // Softmax backward, row by row.
                let mut d_scores = Matrix::zeros(weights.rows(), weights.cols());
                for r in 0..weights.rows() {
                    let wrow = weights.row(r);
                    let drow = d_weights.row(r);
                    let dot: f64 = wrow.iter().zip(drow).map(|(a, b)| a * b).sum();
                    for c in 0..weights.cols() {
                        d_scores[(r, c)] = wrow[c] * (drow[c] - dot);
                    }
                }
                let d_q = d_scores.matmul(&attn.k[j]).scale(scale);
                let d_kk = d_scores.matmul_transpose_a(&attn.q[j]).scale(scale);
                d_w_q.push(encoded.matmul_transpose_a(&d_q));
                d_w_k.push(encoded.matmul_transpose_a(&d_kk));
                d_w_v.push(encoded.matmul_transpose_a(&d_v));
                d_encoded.add_scaled(&d_q.matmul_transpose_b(&params.attention.w_q[j]), 1.0);
                d_encoded.add_scaled(&d_kk.matmul_transpose_b(&params.attention.w_k[j]), 1.0);
                d_encoded.add_scaled(&d_v.matmul_transpose_b(&params.attention.w_v[j]), 1.0);
            }

            // Conv backward: relu derivative read off the activated output.
            let x = &cache.inputs[m];
            let mut d_pre = Matrix::zeros(encoded.rows(), encoded.cols());
            for r in 0..encoded.rows() {
                for c in 0..encoded.cols() {
                    if encoded[(r, c)] > 0.0 {
                        d_pre[(r, c)] = d_encoded[(r, c)];
                    }
                }
            }
            let width = params.conv.kernel.len();
            let mut d_kernel = Vec::with_capacity(width);
            for k in 0..width {
                let mut dk = Matrix::zeros(h, x.cols());
                for t in k..x.rows() {
                    let xrow = x.row(t - k);
                    let prow = d_pre.row(t);
                    for o in 0..h {
                        let p = prow[o];
                        if p == 0.0 {
                            continue;
                        }
                        let dst = dk.row_mut(o);
                        for (dv, &xv) in dst.iter_mut().zip(xrow) {
                            *dv += p * xv;
                        }
                    }
                }
                d_kernel.push(dk);
            }
            let d_conv_bias = d_pre.column_sums();

            modalities.push(ModalityGrads {
                kernel: d_kernel,
                conv_bias: d_conv_bias,
                w_q: d_w_q,
                w_k: d_w_k,
                w_v: d_w_v,
                w_o: d_w_o,
            });
        }

        FusionGrads { modalities, gate_weight: d_gate_weight, gate_bias: d_gate_bias }
    }

    pub fn param_count(&self) -> usize {
        self.flatten().len()
    }

    /// Canonical flat order: per modality, kernel taps then conv bias then
    /// per-head (W_Q, W_K, W_V) then W_O; finally gate weight and bias.
    /// [`FusionGrads::flatten`] matches.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.modalities {
            for tap in &m.conv.kernel {
                out.extend_from_slice(tap.data());
            }
            out.extend_from_slice(&m.conv.bias);
            for j in 0..m.attention.w_q.len() {
                out.extend_from_slice(m.attention.w_q[j].data());
                out.extend_from_slice(m.attention.w_k[j].data());
                out.extend_from_slice(m.attention.w_v[j].data());
            }
            out.extend_from_slice(m.attention.w_o.data());
        }
        out.extend_from_slice(self.gate_weight.data());
        out.extend_from_slice(&self.gate_bias);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        let take = |buf: &mut [f64], at: &mut usize| {
            buf.copy_from_slice(&flat[*at..*at + buf.len()]);
            *at += buf.len();
        };
        for m in &mut self.modalities {
            for tap in &mut m.conv.kernel {
                take(tap.data_mut(), &mut at);
            }
            take(&mut m.conv.bias, &mut at);
            for j in 0..m.attention.w_q.len() {
                take(m.attention.w_q[j].data_mut(), &mut at);
                take(m.attention.w_k[j].data_mut(), &mut at);
                take(m.attention.w_v[j].data_mut(), &mut at);
            }
            take(m.attention.w_o.data_mut(), &mut at);
        }
        take(self.gate_weight.data_mut(), &mut at);
        take(&mut self.gate_bias, &mut at);
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

impl FusionGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in &self.modalities {
            for tap in &m.kernel {
                out.extend_from_slice(tap.data());
            }
            out.extend_from_slice(&m.conv_bias);
            for j in 0..m.w_q.len() {
                out.extend_from_slice(m.w_q[j].data());
                out.extend_from_slice(m.w_k[j].data());
                out.extend_from_slice(m.w_v[j].data());
            }
            out.extend_from_slice(m.w_o.data());
        }
        out.extend_from_slice(self.gate_weight.data());
        out.extend_from_slice(&self.gate_bias);
        out
    }
}

/// The per-time-step fused state: the last row of F. The last row only
/// attends backward in time, so no future information leaks into it.
pub fn pool_state(features: &FusedFeatures) -> Vec<f64> {
    features.fused.row(features.fused.rows() - 1).to_vec()
}
