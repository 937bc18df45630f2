//! Layer wrappers over the autodiff engine. Every layer exposes its trainable
//! tensors through `collect_params`, which the optimizer and the checkpoint
//! archive consume by name.

use crate::autodiff::Tensor;
use crate::rng::Prng;

pub type NamedParams = Vec<(String, Tensor)>;

pub fn param_count(params: &NamedParams) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

fn normal_vec(rng: &mut Prng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal_with(0.0, std)).collect()
}

fn xavier_vec(rng: &mut Prng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.uniform(-limit, limit)).collect()
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Weight `[in, out]`, truncated-normal-style init used by the attention
    /// and MLP projections.
    pub fn new(rng: &mut Prng, dim_in: usize, dim_out: usize) -> Self {
        Linear {
            w: Tensor::param(&[dim_in, dim_out], normal_vec(rng, dim_in * dim_out, 0.02)),
            b: Tensor::param(&[dim_out], vec![0.0; dim_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_bias_last(&self.b)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        Conv2d {
            w: Tensor::param(&[c_out, c_in, k, k], xavier_vec(rng, c_out * fan_in, fan_in, fan_out)),
            b: Tensor::param(&[c_out], vec![0.0; c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct ConvT2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl ConvT2d {
    pub fn new(rng: &mut Prng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        ConvT2d {
            w: Tensor::param(&[c_in, c_out, k, k], xavier_vec(rng, c_in * c_out * k * k, fan_in, fan_out)),
            b: Tensor::param(&[c_out], vec![0.0; c_out]),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv_t2d(&self.w, &self.b, self.stride)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::param(&[dim], vec![1.0; dim]),
            beta: Tensor::param(&[dim], vec![0.0; dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Two-layer GELU MLP.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut Prng, dim: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.fc2.forward(&self.fc1.forward(x).gelu())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
}
