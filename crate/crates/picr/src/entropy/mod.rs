//! Quantization, likelihood models, quantized CDF tables and the entropy
//! coder that turns latents into decodable bytes.
//!
//! The hyper-latent is coded with a learned per-channel factorized prior; the
//! image latent with a conditional Gaussian whose scale is snapped onto a
//! 64-entry log-spaced table. Both likelihoods are exposed twice: as autodiff
//! graphs for the training rate term and as plain f64 evaluations for table
//! building, and the two paths are tested against each other.

mod cdf;
mod coder;
mod factorized;

pub use cdf::{build_factorized_tables, build_gaussian_tables, CdfRow, CdfTable, CDF_TOTAL};
pub use coder::{range_decode, range_encode, read_chunk, write_chunk};
pub use factorized::FactorizedPrior;

use crate::autodiff::{std_normal_cdf, Tensor};
use crate::rng::Prng;

/// Lower bound on every coded Gaussian scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Largest scale in the table.
pub const SIGMA_MAX: f64 = 256.0;
/// Entries in the log-spaced scale table.
pub const SCALE_TABLE_LEN: usize = 64;
/// Likelihoods are floored here before entering the rate term.
pub const LIKELIHOOD_FLOOR: f64 = 2.3283064365386963e-10; // 2^-32

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// additive uniform noise in [-0.5, 0.5)
    Train,
    /// round-half-away-from-zero against the offset
    Eval,
}

/// Rounds half away from zero (`f64::round` semantics), the platform-stable
/// rule used everywhere a value is quantized.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Training mode perturbs with uniform noise; eval mode rounds the offset
/// residual: `round(v - offset) + offset`.
pub fn quantize(v: &Tensor, mode: QuantMode, offset: Option<&Tensor>, rng: Option<&mut Prng>) -> Tensor {
    match mode {
        QuantMode::Train => {
            let rng = rng.expect("train-mode quantization needs an rng");
            let noise: Vec<f64> = (0..v.numel()).map(|_| rng.uniform(-0.5, 0.5)).collect();
            v.add(&Tensor::leaf(v.shape(), noise))
        }
        QuantMode::Eval => {
            let data = match offset {
                None => v.data().iter().map(|&x| round_half_away(x)).collect(),
                Some(off) => {
                    let od = off.data();
                    v.data()
                        .iter()
                        .zip(od.iter())
                        .map(|(&x, &o)| round_half_away(x - o) + o)
                        .collect()
                }
            };
            Tensor::leaf(v.shape(), data)
        }
    }
}

/// Conditional Gaussian coding model: a scale floor plus the log-spaced table
/// every runtime sigma is snapped onto for coding.
pub struct GaussianConditional {
    pub sigma_min: f64,
    pub scales: Vec<f64>,
}

impl Default for GaussianConditional {
    fn default() -> Self {
        let log_min = SIGMA_MIN.ln();
        let log_max = SIGMA_MAX.ln();
        let scales = (0..SCALE_TABLE_LEN)
            .map(|i| (log_min + (log_max - log_min) * i as f64 / (SCALE_TABLE_LEN - 1) as f64).exp())
            .collect();
        GaussianConditional {
            sigma_min: SIGMA_MIN,
            scales,
        }
    }
}

impl GaussianConditional {
    /// Probability mass of the unit bin centered on residual `r` under
    /// `N(0, sigma^2)`: the raw CDF difference, no floor.
    pub fn bin_probability(&self, r: f64, sigma: f64) -> f64 {
        let s = sigma.max(self.sigma_min);
        std_normal_cdf((r + 0.5) / s) - std_normal_cdf((r - 0.5) / s)
    }

    /// Discretized likelihood of `y_hat` under `N(mu, sigma^2)`, floored at
    /// `2^-32`. Scales below the floor are clamped, not rejected.
    pub fn likelihood(&self, y_hat: f64, mu: f64, sigma: f64) -> f64 {
        self.bin_probability(y_hat - mu, sigma).max(LIKELIHOOD_FLOOR)
    }

    /// Nearest table index in log-scale space.
    pub fn snap_index(&self, sigma: f64) -> usize {
        let s = sigma.clamp(self.scales[0], *self.scales.last().unwrap());
        let log_min = self.scales[0].ln();
        let log_max = self.scales.last().unwrap().ln();
        let step = (log_max - log_min) / (self.scales.len() - 1) as f64;
        let idx = ((s.ln() - log_min) / step).round() as usize;
        idx.min(self.scales.len() - 1)
    }

    pub fn snap(&self, sigma: f64) -> f64 {
        self.scales[self.snap_index(sigma)]
    }
}

/// Differentiable rate estimate in bits-per-pixel.
///
/// `y_resid = y_hat - mu` with its per-element `sigma`, `z_hat` under the
/// factorized prior; `pixels` is the ORIGINAL (pre-padding) pixel count.
pub fn estimate_rate_tensors(
    y_resid: &Tensor,
    sigma: &Tensor,
    z_hat: &Tensor,
    prior: &FactorizedPrior,
    pixels: usize,
) -> Tensor {
    let y_bits = y_resid
        .gaussian_bin(sigma)
        .neg_log2_clamped(LIKELIHOOD_FLOOR)
        .sum_all();
    let z_bits = prior
        .likelihood(z_hat)
        .neg_log2_clamped(LIKELIHOOD_FLOOR)
        .sum_all();
    y_bits.add(&z_bits).mul_scalar(1.0 / pixels as f64)
}
