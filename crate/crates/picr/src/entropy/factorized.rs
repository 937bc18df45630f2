//! Learned per-channel factorized prior for the hyper-latent.
//!
//! Each channel carries an independent monotone CDF built from a stack of
//! tiny 1-d layers (widths 1-3-3-3-1). Monotonicity comes from softplus
//! reparameterized weights and tanh-bounded gates; the final sigmoid pins the
//! limits to 0 and 1. Bin probability of an integer value v is
//! `c(v + 0.5) - c(v - 0.5)`.

use crate::autodiff::Tensor;
use crate::nn::NamedParams;
use crate::rng::Prng;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];

pub struct FactorizedPrior {
    pub channels: usize,
    /// raw (pre-softplus) weights, one `[C, f_out, f_in]` per layer
    pub weights: Vec<Tensor>,
    /// `[C, f_out]` per layer
    pub biases: Vec<Tensor>,
    /// `[C, f_out]` per non-final layer
    pub gates: Vec<Tensor>,
}

impl FactorizedPrior {
    pub fn new(rng: &mut Prng, channels: usize) -> Self {
        let layers = FILTERS.len() - 1;
        let init_scale: f64 = 10.0;
        let scale = init_scale.powf(1.0 / layers as f64);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut gates = Vec::new();
        for k in 0..layers {
            let (f_in, f_out) = (FILTERS[k], FILTERS[k + 1]);
            // softplus^-1 of 1 / (scale * f_out), the classic monotone-CDF init
            let init = (1.0 / scale / f_out as f64).exp_m1().ln();
            weights.push(Tensor::param(
                &[channels, f_out, f_in],
                vec![init; channels * f_out * f_in],
            ));
            biases.push(Tensor::param(
                &[channels, f_out],
                (0..channels * f_out).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            ));
            if k + 1 < layers {
                gates.push(Tensor::param(&[channels, f_out], vec![0.0; channels * f_out]));
            }
        }
        FactorizedPrior {
            channels,
            weights,
            biases,
            gates,
        }
    }

    /// Pre-sigmoid logit chain on `[C, 1, M]`.
    fn chain(&self, x: &Tensor) -> Tensor {
        let mut x = x.clone();
        let layers = self.weights.len();
        for k in 0..layers {
            let w = self.weights[k].softplus();
            let u = w.bmm(&x).add_col_bias(&self.biases[k]);
            x = if k + 1 < layers {
                u.add(&u.tanh().mul_col_bias(&self.gates[k].tanh()))
            } else {
                u
            };
        }
        x
    }

    /// Differentiable bin probabilities of `z_hat [C, h, w]` (or `[C, n]`).
    /// Returns the same shape.
    pub fn likelihood(&self, z_hat: &Tensor) -> Tensor {
        let shape = z_hat.shape().to_vec();
        let c = shape[0];
        assert_eq!(c, self.channels, "channel mismatch");
        let m = z_hat.numel() / c;
        let flat = z_hat.reshape(&[c, 1, m]);
        let upper = self.chain(&flat.add_scalar(0.5)).sigmoid();
        let lower = self.chain(&flat.add_scalar(-0.5)).sigmoid();
        upper.sub(&lower).reshape(&shape)
    }

    /// Scalar CDF of one channel, no autodiff (table building, decode side).
    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        let layers = self.weights.len();
        let mut v = [x, 0.0, 0.0];
        let mut width = 1usize;
        for k in 0..layers {
            let (f_in, f_out) = (FILTERS[k], FILTERS[k + 1]);
            debug_assert_eq!(f_in, width);
            let wd = self.weights[k].data();
            let bd = self.biases[k].data();
            let mut out = [0.0f64; 3];
            for o in 0..f_out {
                let mut acc = bd[channel * f_out + o];
                for i in 0..f_in {
                    let raw = wd[(channel * f_out + o) * f_in + i];
                    acc += (raw.max(0.0) + (-raw.abs()).exp().ln_1p()) * v[i];
                }
                out[o] = acc;
            }
            if k + 1 < layers {
                let gd = self.gates[k].data();
                for (o, item) in out.iter_mut().enumerate().take(f_out) {
                    *item += gd[channel * f_out + o].tanh() * item.tanh();
                }
            }
            v = out;
            width = f_out;
        }
        0.5 * (1.0 + (0.5 * v[0]).tanh())
    }

    /// Bin probability of integer value `v` on the scalar path.
    pub fn bin_probability(&self, channel: usize, v: f64) -> f64 {
        self.cdf(channel, v + 0.5) - self.cdf(channel, v - 0.5)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (k, w) in self.weights.iter().enumerate() {
            out.push((format!("{prefix}.w{k}"), w.clone()));
        }
        for (k, b) in self.biases.iter().enumerate() {
            out.push((format!("{prefix}.b{k}"), b.clone()));
        }
        for (k, g) in self.gates.iter().enumerate() {
            out.push((format!("{prefix}.g{k}"), g.clone()));
        }
    }
}
