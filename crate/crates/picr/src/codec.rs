//! The conditional autoencoder: main transforms `g_a`/`g_s`, hyperprior
//! `h_a`/`h_s`, and the prompt generators `p_a`/`p_s`.
//!
//! The encoder consumes the image together with an ROI mask and a uniform
//! lambda plane; both conditioning signals reach it only through prompt
//! tokens. The decoder is conditioned on the quantized latent and a
//! downscaled lambda plane alone; the ROI mask is never transmitted.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttnRecord, PromptWiring, Resample, Stb};
use crate::autodiff::Tensor;
use crate::entropy::{
    estimate_rate_tensors, quantize, FactorizedPrior, GaussianConditional, QuantMode, SIGMA_MIN,
};
use crate::error::{Error, Result};
use crate:: nn::{Conv2d, ConvT2d, NamedParams};
use crate::rng::Prng;

/// Input grids must be multiples of this (stride 16 to the latent, another
/// stride 4 to the hyper-latent).
pub const GRID_MULTIPLE: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodecConfig {
    /// encoder stage widths; the last one is the latent width
    pub stage_channels: [usize; 4],
    /// decoder stage widths, ending at the width fed to the output conv
    pub dec_channels: [usize; 4],
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub swin_layers_per_block: usize,
    pub window_size: usize,
    pub head_counts: [usize; 4],
    pub dec_head_counts: [usize; 4],
    pub hyper_head_count: usize,
    /// p_a pyramid widths, one per encoder stage
    pub prompt_channels: [usize; 4],
    /// p_s pyramid widths, one per decoder stage
    pub dec_prompt_channels: [usize; 4],
    /// distinct prompt tokens per Swin layer instead of one shared set per block
    #[serde(default)]
    pub per_layer_prompts: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            stage_channels: [96, 128, 160, 192],
            dec_channels: [160, 128, 96, 64],
            latent_channels: 192,
            hyper_channels: 128,
            swin_layers_per_block: 2,
            window_size: 8,
            head_counts: [3, 4, 5, 6],
            dec_head_counts: [5, 4, 3, 2],
            hyper_head_count: 4,
            prompt_channels: [48, 64, 80, 96],
            dec_prompt_channels: [96, 80, 64, 48],
            per_layer_prompts: false,
        }
    }
}

impl CodecConfig {
    /// Desk-scale configuration small enough to train on a CPU. Two Swin
    /// layers per block keep the shifted-window pass (a single layer would
    /// never shift).
    pub fn toy() -> Self {
        CodecConfig {
            stage_channels: [16, 24, 32, 40],
            dec_channels: [32, 24, 16, 16],
            latent_channels: 40,
            hyper_channels: 20,
            swin_layers_per_block: 2,
            window_size: 4,
            head_counts: [2, 3, 4, 5],
            dec_head_counts: [4, 3, 2, 2],
            hyper_head_count: 2,
            prompt_channels: [8, 12, 16, 20],
            dec_prompt_channels: [20, 16, 12, 8],
            per_layer_prompts: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels[3] != self.latent_channels {
            return Err(Error::Config(format!(
                "latent_channels {} must equal the last encoder width {}",
                self.latent_channels, self.stage_channels[3]
            )));
        }
        if self.window_size < 4 || self.window_size % 2 != 0 {
            return Err(Error::Config(format!(
                "window_size {} must be even and >= 4",
                self.window_size
            )));
        }
        if self.swin_layers_per_block == 0 {
            return Err(Error::Config("swin_layers_per_block must be >= 1".into()));
        }
        for i in 0..4 {
            if self.stage_channels[i] % self.head_counts[i] != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {i}: width {} not divisible by {} heads",
                    self.stage_channels[i], self.head_counts[i]
                )));
            }
            if self.dec_channels[i] % self.dec_head_counts[i] != 0 {
                return Err(Error::Config(format!(
                    "decoder stage {i}: width {} not divisible by {} heads",
                    self.dec_channels[i], self.dec_head_counts[i]
                )));
            }
            if self.prompt_channels[i] == 0 || self.dec_prompt_channels[i] == 0 {
                return Err(Error::Config("prompt widths must be positive".into()));
            }
        }
        if self.hyper_channels % self.hyper_head_count != 0 {
            return Err(Error::Config(format!(
                "hyper width {} not divisible by {} heads",
                self.hyper_channels, self.hyper_head_count
            )));
        }
        Ok(())
    }
}

/// Image plus its two conditioning planes. The lambda plane is spatially
/// uniform by construction, so only the scalar is stored;
/// [`ConditioningInput::lambda_plane`] materializes it.
pub struct ConditioningInput {
    /// `[3, H, W]` in [0, 1]
    pub image: Tensor,
    /// `[1, H, W]` in [0, 1]
    pub roi_mask: Tensor,
    /// uniform rate parameter in [0, 1]
    pub m_lambda: f64,
}

impl ConditioningInput {
    pub fn new(image: Tensor, roi_mask: Tensor, m_lambda: f64) -> Result<Self> {
        let is_ = image.shape();
        let ms = roi_mask.shape();
        if is_.len() != 3 || is_[0] != 3 {
            return Err(Error::Shape(format!("image must be [3,H,W], got {is_:?}")));
        }
        if ms != [1, is_[1], is_[2]] {
            return Err(Error::Shape(format!(
                "roi mask {ms:?} does not match image {is_:?}"
            )));
        }
        if !(0.0..=1.0).contains(&m_lambda) {
            return Err(Error::Range(format!("m_lambda {m_lambda} outside [0, 1]")));
        }
        if roi_mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Range("roi mask values outside [0, 1]".into()));
        }
        Ok(ConditioningInput {
            image,
            roi_mask,
            m_lambda,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn lambda_plane(&self) -> Tensor {
        Tensor::full(&[1, self.height(), self.width()], self.m_lambda)
    }

    pub fn lambda_small(&self) -> Tensor {
        Tensor::full(
            &[1, self.height() / 16, self.width() / 16],
            self.m_lambda,
        )
    }
}

/// Everything `analyze` produces for one image.
pub struct LatentBundle {
    pub y: Tensor,
    pub y_hat: Tensor,
    pub z: Tensor,
    pub z_hat: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// `p_a`: a five-channel input convolution, then one strided convolution per
/// stage. The pyramid entry for stage `i` sits at that stage's input
/// resolution.
pub struct PromptEncoder {
    pub conv_in: Conv2d,
    pub downs: Vec<Conv2d>,
}

impl PromptEncoder {
    fn new(rng: &mut Prng, widths: &[usize; 4]) -> Self {
        PromptEncoder {
            conv_in: Conv2d::new(rng, 5, widths[0], 3, 1, 1),
            downs: (0..3)
                .map(|i| Conv2d::new(rng, widths[i], widths[i + 1], 3, 2, 1))
                .collect(),
        }
    }

    pub fn forward(&self, cond: &Tensor) -> [Tensor; 4] {
        let x0 = self.conv_in.forward(cond).gelu();
        let x1 = self.downs[0].forward(&x0).gelu();
        let x2 = self.downs[1].forward(&x1).gelu();
        let x3 = self.downs[2].forward(&x2).gelu();
        [x0, x1, x2, x3]
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv_in.collect_params(&format!("{prefix}.conv_in"), out);
        for (i, c) in self.downs.iter().enumerate() {
            c.collect_params(&format!("{prefix}.down{i}"), out);
        }
    }
}

/// `p_s`: mirrors `p_a` with transposed convolutions; consumes the quantized
/// latent concatenated with the downscaled lambda plane.
pub struct PromptDecoder {
    pub conv_in: Conv2d,
    pub ups: Vec<ConvT2d>,
}

impl PromptDecoder {
    fn new(rng: &mut Prng, latent_channels: usize, widths: &[usize; 4]) -> Self {
        PromptDecoder {
            conv_in: Conv2d::new(rng, latent_channels + 1, widths[0], 3, 1, 1),
            ups: (0..3)
                .map(|i| ConvT2d::new(rng, widths[i], widths[i + 1], 2, 2))
                .collect(),
        }
    }

    pub fn forward(&self, latent_and_lambda: &Tensor) -> [Tensor; 4] {
        let x0 = self.conv_in.forward(latent_and_lambda).gelu();
        let x1 = self.ups[0].forward(&x0).gelu();
        let x2 = self.ups[1].forward(&x1).gelu();
        let x3 = self.ups[2].forward(&x2).gelu();
        [x0, x1, x2, x3]
    }

    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv_in.collect_params(&format!("{prefix}.conv_in"), out);
        for (i, c) in self.ups.iter().enumerate() {
            c.collect_params(&format!("{prefix}.up{i}"), out);
        }
    }
}

/// Per-block prompt-count audit entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAudit {
    pub network: &'static str,
    pub stage: usize,
    pub grid: usize,
    pub s_i: usize,
    pub s_p: usize,
}

pub struct Codec {
    pub config: CodecConfig,
    pub g_a: Vec<Stb>,
    pub g_s: Vec<Stb>,
    pub g_s_out: Conv2d,
    pub h_a: Vec<Stb>,
    pub h_s: Vec<Stb>,
    pub h_s_out: Conv2d,
    pub p_a: PromptEncoder,
    pub p_s: PromptDecoder,
    pub prior: FactorizedPrior,
    pub gaussian: GaussianConditional,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Prng::new(seed);
        let c = &config;
        let l = c.swin_layers_per_block;
        let w = c.window_size;
        let per_layer = c.per_layer_prompts;

        let mut g_a = Vec::with_capacity(4);
        for i in 0..4 {
            let c_in = if i == 0 { 3 } else { c.stage_channels[i - 1] };
            let wiring = PromptWiring {
                in_channels: c.prompt_channels[i],
                stride: 4,
                per_layer,
            };
            let down = Resample::Down(Conv2d::new(&mut rng, c_in, c.stage_channels[i], 3, 2, 1));
            g_a.push(Stb::new(&mut rng, down, l, c.head_counts[i], w, Some(&wiring)));
        }

        let mut g_s = Vec::with_capacity(4);
        for i in 0..4 {
            let c_in = if i == 0 {
                c.latent_channels
            } else {
                c.dec_channels[i - 1]
            };
            let wiring = PromptWiring {
                in_channels: c.dec_prompt_channels[i],
                stride: 1,
                per_layer,
            };
            let up = Resample::Up(ConvT2d::new(&mut rng, c_in, c.dec_channels[i], 2, 2));
            g_s.push(Stb::new(&mut rng, up, l, c.dec_head_counts[i], w, Some(&wiring)));
        }
        let g_s_out = Conv2d::new(&mut rng, c.dec_channels[3], 3, 3, 1, 1);

        let mut h_a = Vec::with_capacity(2);
        for i in 0..2 {
            let c_in = if i == 0 { c.latent_channels } else { c.hyper_channels };
            let down = Resample::Down(Conv2d::new(&mut rng, c_in, c.hyper_channels, 3, 2, 1));
            h_a.push(Stb::new(&mut rng, down, l, c.hyper_head_count, w, None));
        }
        let mut h_s = Vec::with_capacity(2);
        for _ in 0..2 {
            let up = Resample::Up(ConvT2d::new(&mut rng, c.hyper_channels, c.hyper_channels, 2, 2));
            h_s.push(Stb::new(&mut rng, up, l, c.hyper_head_count, w, None));
        }
        let h_s_out = Conv2d::new(&mut rng, c.hyper_channels, 2 * c.latent_channels, 3, 1, 1);

        let p_a = PromptEncoder::new(&mut rng, &c.prompt_channels);
        let p_s = PromptDecoder::new(&mut rng, c.latent_channels, &c.dec_prompt_channels);
        let prior = FactorizedPrior::new(&mut rng, c.hyper_channels);

        Ok(Codec {
            config,
            g_a,
            g_s,
            g_s_out,
            h_a,
            h_s,
            h_s_out,
            p_a,
            p_s,
            prior,
            gaussian: GaussianConditional::default(),
        })
    }

    fn check_padded(h: usize, w: usize) -> Result<()> {
        if h % GRID_MULTIPLE != 0 || w % GRID_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be padded to multiples of {GRID_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// `p_a` pyramid from the conditioning planes (mask, lambda plane, image
    /// concatenated in that order).
    pub fn encoder_prompts(&self, cond: &ConditioningInput) -> Result<[Tensor; 4]> {
        Self::check_padded(cond.height(), cond.width())?;
        let stacked = Tensor::concat(
            &[cond.roi_mask.clone(), cond.lambda_plane(), cond.image.clone()],
            0,
        );
        Ok(self.p_a.forward(&stacked))
    }

    /// `p_s` pyramid from the quantized latent and the downscaled lambda map.
    pub fn decoder_prompts(&self, y_hat: &Tensor, lambda_small: &Tensor) -> Result<[Tensor; 4]> {
        let ys = y_hat.shape();
        let ls = lambda_small.shape();
        if ls != [1, ys[1], ys[2]] {
            return Err(Error::Shape(format!(
                "lambda map {ls:?} does not match latent grid {ys:?}"
            )));
        }
        let stacked = Tensor::concat(&[y_hat.clone(), lambda_small.clone()], 0);
        Ok(self.p_s.forward(&stacked))
    }

    pub fn analyze(
        &self,
        cond: &ConditioningInput,
        mode: QuantMode,
        mut rng: Option<&mut Prng>,
        use_prompts: bool,
    ) -> Result<LatentBundle> {
        self.analyze_captured(cond, mode, rng.take(), use_prompts, None)
    }

    /// `analyze` with attention-probability capture per encoder stage.
    pub fn analyze_captured(
        &self,
        cond: &ConditioningInput,
        mode: QuantMode,
        mut rng: Option<&mut Prng>,
        use_prompts: bool,
        mut capture: Option<&mut [Vec<AttnRecord>; 4]>,
    ) -> Result<LatentBundle> {
        Self::check_padded(cond.height(), cond.width())?;
        let pyramid = if use_prompts {
            Some(self.encoder_prompts(cond)?)
        } else {
            None
        };
        let mut x = cond.image.clone();
        for i in 0..4 {
            let feat = pyramid.as_ref().map(|p| &p[i]);
            let cap = capture.as_mut().map(|c| &mut c[i]);
            x = self.g_a[i].forward(&x, feat, cap)?;
        }
        let y = x;

        let mut z = y.clone();
        for stb in &self.h_a {
            z = stb.forward(&z, None, None)?;
        }
        let z_hat = quantize(&z, mode, None, rng.as_deref_mut());

        let mut hs = z_hat.clone();
        for stb in &self.h_s {
            hs = stb.forward(&hs, None, None)?;
        }
        let params = self.h_s_out.forward(&hs);
        let c_y = self.config.latent_channels;
        let mu = slice_channels(&params, 0, c_y);
        let sigma = slice_channels(&params, c_y, 2 * c_y)
            .softplus()
            .add_scalar(SIGMA_MIN);

        let y_resid = y.sub(&mu);
        let y_hat = quantize(&y_resid, mode, None, rng).add(&mu);

        Ok(LatentBundle {
            y,
            y_hat,
            z,
            z_hat,
            mu,
            sigma,
        })
    }

    pub fn synthesize(
        &self,
        y_hat: &Tensor,
        lambda_small: &Tensor,
        mode: QuantMode,
        use_prompts: bool,
    ) -> Result<Tensor> {
        let pyramid = if use_prompts {
            Some(self.decoder_prompts(y_hat, lambda_small)?)
        } else {
            None
        };
        let mut x = y_hat.clone();
        for i in 0..4 {
            let feat = pyramid.as_ref().map(|p| &p[i]);
            x = self.g_s[i].forward(&x, feat, None)?;
        }
        let x = self.g_s_out.forward(&x);
        Ok(match mode {
            QuantMode::Train => x,
            QuantMode::Eval => {
                let clamped: Vec<f64> = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Tensor::leaf(x.shape(), clamped)
            }
        })
    }

    /// Differentiable rate of a bundle in bits per pixel of the ORIGINAL
    /// (pre-padding) image.
    pub fn estimate_bpp(&self, bundle: &LatentBundle, orig_h: usize, orig_w: usize) -> Tensor {
        let resid = bundle.y_hat.sub(&bundle.mu);
        estimate_rate_tensors(
            &resid,
            &bundle.sigma,
            &bundle.z_hat,
            &self.prior,
            orig_h * orig_w,
        )
    }

    /// Static audit: per-window token counts of every prompted block for a
    /// padded input size.
    pub fn audit_prompt_counts(&self, h: usize, w: usize) -> Result<Vec<PromptAudit>> {
        Self::check_padded(h, w)?;
        let mut out = Vec::new();
        let mut grid = h.min(w);
        for (i, stb) in self.g_a.iter().enumerate() {
            grid /= 2;
            let (s_i, s_p) = stb.prompt_token_counts(grid);
            out.push(PromptAudit {
                network: "g_a",
                stage: i,
                grid,
                s_i,
                s_p,
            });
        }
        let mut grid = h.min(w) / 16;
        for (i, stb) in self.g_s.iter().enumerate() {
            grid *= 2;
            let (s_i, s_p) = stb.prompt_token_counts(grid);
            out.push(PromptAudit {
                network: "g_s",
                stage: i,
                grid,
                s_i,
                s_p,
            });
        }
        Ok(out)
    }

    pub fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (i, stb) in self.g_a.iter().enumerate() {
            stb.collect_params(&format!("g_a.{i}"), &mut out);
        }
        for (i, stb) in self.g_s.iter().enumerate() {
            stb.collect_params(&format!("g_s.{i}"), &mut out);
        }
        self.g_s_out.collect_params("g_s.out", &mut out);
        for (i, stb) in self.h_a.iter().enumerate() {
            stb.collect_params(&format!("h_a.{i}"), &mut out);
        }
        for (i, stb) in self.h_s.iter().enumerate() {
            stb.collect_params(&format!("h_s.{i}"), &mut out);
        }
        self.h_s_out.collect_params("h_s.out", &mut out);
        self.p_a.collect_params("p_a", &mut out);
        self.p_s.collect_params("p_s", &mut out);
        self.prior.collect_params("prior", &mut out);
        out
    }

    /// Everything except the prompt generators (the stage-1 trainable set).
    pub fn base_params(&self) -> NamedParams {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("p_a.") && !n.starts_with("p_s."))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        crate::nn::param_count(&self.named_params())
    }
}

/// `[C,H,W] -> [to-from,H,W]` channel slice.
pub fn slice_channels(x: &Tensor, from: usize, to: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(from < to && to <= c);
    let mut idx = Vec::with_capacity((to - from) * h * w);
    for ch in from..to {
        for i in 0..h * w {
            idx.push((ch * h * w + i) as u32);
        }
    }
    x.gather(Rc::new(idx), &[to - from, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::no_grad;

    fn rand_cond(rng: &mut Prng, h: usize, w: usize, m: f64) -> ConditioningInput {
        let img: Vec<f64> = (0..3 * h * w).map(|_| rng.f64()).collect();
        let mask: Vec<f64> = (0..h * w).map(|_| rng.f64()).collect();
        ConditioningInput::new(
            Tensor::leaf(&[3, h, w], img),
            Tensor::leaf(&[1, h, w], mask),
            m,
        )
        .unwrap()
    }

    #[test]
    fn latent_grids_follow_stride_arithmetic() {
        let codec = Codec::new(CodecConfig::toy(), 1).unwrap();
        let mut rng = Prng::new(2);
        let cond = rand_cond(&mut rng, 256, 256, 0.5);
        let bundle = no_grad(|| codec.analyze(&cond, QuantMode::Eval, None, true)).unwrap();
        assert_eq!(bundle.y.shape(), [40, 16, 16]);
        assert_eq!(bundle.z.shape(), [20, 4, 4]);
        assert_eq!(bundle.mu.shape(), [40, 16, 16]);
        assert_eq!(bundle.sigma.shape(), [40, 16, 16]);
        assert!(bundle.sigma.data().iter().all(|&s| s >= SIGMA_MIN));
    }

    #[test]
    fn eval_quantization_is_integer_residual() {
        let codec = Codec::new(CodecConfig::toy(), 3).unwrap();
        let mut rng = Prng::new(4);
        let cond = rand_cond(&mut rng, 64, 64, 1.0);
        let bundle = no_grad(|| codec.analyze(&cond, QuantMode::Eval, None, true)).unwrap();
        let y_hat = bundle.y_hat.data();
        let mu = bundle.mu.data();
        for i in 0..y_hat.len() {
            let r = y_hat[i] - mu[i];
            assert!((r - r.round()).abs() < 1e-9, "residual {r} not integer");
        }
        for &z in bundle.z_hat.data().iter() {
            assert_eq!(z, z.round());
        }
    }

    #[test]
    fn train_quantization_stays_within_half() {
        let codec = Codec::new(CodecConfig::toy(), 5).unwrap();
        let mut rng = Prng::new(6);
        let cond = rand_cond(&mut rng, 64, 64, 0.0);
        let mut noise_rng = Prng::new(7);
        let bundle = codec
            .analyze(&cond, QuantMode::Train, Some(&mut noise_rng), true)
            .unwrap();
        let y = bundle.y.data();
        let y_hat = bundle.y_hat.data();
        for i in 0..y.len() {
            let d = y_hat[i] - y[i];
            assert!((-0.5..0.5).contains(&d), "noise {d} outside [-0.5, 0.5)");
        }
    }

    #[test]
    fn rejects_unpadded_input() {
        let codec = Codec::new(CodecConfig::toy(), 1).unwrap();
        let mut rng = Prng::new(2);
        let cond = rand_cond(&mut rng, 48, 64, 0.5);
        assert!(matches!(
            codec.analyze(&cond, QuantMode::Eval, None, true),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn synthesize_round_trip_is_deterministic() {
        let codec = Codec::new(CodecConfig::toy(), 8).unwrap();
        let mut rng = Prng::new(9);
        let cond = rand_cond(&mut rng, 64, 64, 0.3);
        no_grad(|| {
            let bundle = codec.analyze(&cond, QuantMode::Eval, None, true).unwrap();
            let lam = cond.lambda_small();
            let a = codec.synthesize(&bundle.y_hat, &lam, QuantMode::Eval, true).unwrap();
            let b = codec.synthesize(&bundle.y_hat, &lam, QuantMode::Eval, true).unwrap();
            assert_eq!(a.shape(), [3, 64, 64]);
            assert_eq!(a.to_vec(), b.to_vec());
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        });
    }

    #[test]
    fn decoder_prompts_respond_to_lambda() {
        let codec = Codec::new(CodecConfig::toy(), 10).unwrap();
        let y_hat = Tensor::zeros(&[40, 4, 4]);
        no_grad(|| {
            let p_lo = codec
                .decoder_prompts(&y_hat, &Tensor::full(&[1, 4, 4], 0.1))
                .unwrap();
            let p_hi = codec
                .decoder_prompts(&y_hat, &Tensor::full(&[1, 4, 4], 0.9))
                .unwrap();
            let diff: f64 = p_lo[0]
                .data()
                .iter()
                .zip(p_hi[0].data().iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-9, "lambda conditioning is dead");
            // determinism under repetition
            let p_again = codec
                .decoder_prompts(&y_hat, &Tensor::full(&[1, 4, 4], 0.1))
                .unwrap();
            assert_eq!(p_lo[3].to_vec(), p_again[3].to_vec());
        });
    }

    #[test]
    fn decoder_prompts_constant_on_uniform_input() {
        // zero latent + uniform lambda -> interior of every pyramid level is
        // spatially constant (stride-2 transposed convs are exactly
        // translation covariant, and the k3 input conv only bends the border)
        let codec = Codec::new(CodecConfig::toy(), 11).unwrap();
        let y_hat = Tensor::zeros(&[40, 8, 8]);
        no_grad(|| {
            let pyr = codec
                .decoder_prompts(&y_hat, &Tensor::full(&[1, 8, 8], 0.6))
                .unwrap();
            // level 0 has no upsampling yet: a stride-1 conv on constant
            // input is constant away from the border
            let p = &pyr[0];
            let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
            let d = p.data();
            for ch in 0..c {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        let v = d[(ch * h + y) * w + x];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                assert!(hi - lo < 1e-9, "level 0 interior must be constant");
            }
        });
    }

    #[test]
    fn prompt_audit_confirms_one_fourth() {
        let codec = Codec::new(CodecConfig::toy(), 12).unwrap();
        let audits = codec.audit_prompt_counts(128, 128).unwrap();
        assert_eq!(audits.len(), 8);
        for a in &audits {
            assert!(a.s_p > 0, "{} stage {} lost its prompts", a.network, a.stage);
            assert_eq!(a.s_i, 4 * a.s_p, "{:?}", a);
        }
    }

    #[test]
    fn encoder_prompt_pyramid_resolutions() {
        let codec = Codec::new(CodecConfig::toy(), 13).unwrap();
        let mut rng = Prng::new(14);
        let cond = rand_cond(&mut rng, 64, 64, 0.5);
        let pyr = no_grad(|| codec.encoder_prompts(&cond)).unwrap();
        assert_eq!(pyr[0].shape(), [8, 64, 64]);
        assert_eq!(pyr[1].shape(), [12, 32, 32]);
        assert_eq!(pyr[2].shape(), [16, 16, 16]);
        assert_eq!(pyr[3].shape(), [20, 8, 8]);
        // determinism
        let again = no_grad(|| codec.encoder_prompts(&cond)).unwrap();
        assert_eq!(pyr[2].to_vec(), again[2].to_vec());
    }

    #[test]
    fn encoder_prompts_are_local_to_the_receptive_field() {
        let codec = Codec::new(CodecConfig::toy(), 15).unwrap();
        let mut rng = Prng::new(16);
        let base = rand_cond(&mut rng, 64, 64, 0.5);
        let mut bumped_img = base.image.to_vec();
        // poke one pixel in the middle
        let (py, px) = (32usize, 32usize);
        bumped_img[(0 * 64 + py) * 64 + px] += 0.4;
        let bumped = ConditioningInput::new(
            Tensor::leaf(&[3, 64, 64], bumped_img),
            base.roi_mask.clone(),
            base.m_lambda,
        )
        .unwrap();
        let pa = no_grad(|| codec.encoder_prompts(&base)).unwrap();
        let pb = no_grad(|| codec.encoder_prompts(&bumped)).unwrap();
        // receptive radius per level: conv_in r=1 at stride 1, then k3 s2
        // convs: r_{l+1} = (r_l + 1) / 2 in the downsampled grid, +1 halo
        let radii = [1usize, 2, 2, 2];
        for (lvl, (a, b)) in pa.iter().zip(pb.iter()).enumerate() {
            let scale = 1 << lvl;
            let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (cy, cx) = (py / scale, px / scale);
            let r = radii[lvl];
            let ad = a.data();
            let bd = b.data();
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let inside = y.abs_diff(cy) <= r && x.abs_diff(cx) <= r;
                        let i = (ch * h + y) * w + x;
                        if !inside {
                            assert_eq!(ad[i], bd[i], "level {lvl} leaked outside footprint");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn full_forward_finite_over_conditioning_grid() {
        let codec = Codec::new(CodecConfig::toy(), 17).unwrap();
        let mut rng = Prng::new(18);
        for &m in &[0.0, 0.5, 1.0] {
            for mask_kind in 0..3 {
                let mask = match mask_kind {
                    0 => Tensor::zeros(&[1, 64, 64]),
                    1 => Tensor::leaf(&[1, 64, 64], (0..4096).map(|_| rng.f64()).collect()),
                    _ => Tensor::full(&[1, 64, 64], 1.0),
                };
                let img: Vec<f64> = (0..3 * 4096).map(|_| rng.f64()).collect();
                let cond =
                    ConditioningInput::new(Tensor::leaf(&[3, 64, 64], img), mask, m).unwrap();
                let mut nrng = Prng::new(99);
                let bundle = codec
                    .analyze(&cond, QuantMode::Train, Some(&mut nrng), true)
                    .unwrap();
                let x_rec = codec
                    .synthesize(&bundle.y_hat, &cond.lambda_small(), QuantMode::Train, true)
                    .unwrap();
                let bpp = codec.estimate_bpp(&bundle, 64, 64);
                assert!(bpp.item().is_finite());
                assert!(x_rec.data().iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn gradients_reach_every_subnetwork() {
        let codec = Codec::new(CodecConfig::toy(), 19).unwrap();
        let mut rng = Prng::new(20);
        let cond = rand_cond(&mut rng, 64, 64, 0.7);
        let mut nrng = Prng::new(21);
        let bundle = codec
            .analyze(&cond, QuantMode::Train, Some(&mut nrng), true)
            .unwrap();
        let x_rec = codec
            .synthesize(&bundle.y_hat, &cond.lambda_small(), QuantMode::Train, true)
            .unwrap();
        let bpp = codec.estimate_bpp(&bundle, 64, 64);
        let mse = cond
            .image
            .sub(&x_rec)
            .mul(&cond.image.sub(&x_rec))
            .mean_all();
        let loss = mse.mul_scalar(1000.0).add(&bpp);
        loss.backward();
        for net in ["g_a.", "g_s.", "h_a.", "h_s.", "p_a.", "p_s.", "prior."] {
            let has_grad = codec
                .named_params()
                .iter()
                .filter(|(n, _)| n.starts_with(net))
                .any(|(_, t)| {
                    t.grad()
                        .map(|g| g.iter().any(|&v| v != 0.0))
                        .unwrap_or(false)
                });
            assert!(has_grad, "no gradient reached {net}");
        }
    }

    #[test]
    fn plain_mode_skips_prompt_networks() {
        let codec = Codec::new(CodecConfig::toy(), 22).unwrap();
        let mut rng = Prng::new(23);
        let cond = rand_cond(&mut rng, 64, 64, 1.0);
        let mut nrng = Prng::new(24);
        let bundle = codec
            .analyze(&cond, QuantMode::Train, Some(&mut nrng), false)
            .unwrap();
        let x_rec = codec
            .synthesize(&bundle.y_hat, &cond.lambda_small(), QuantMode::Train, false)
            .unwrap();
        let loss = cond.image.sub(&x_rec).mul(&cond.image.sub(&x_rec)).mean_all();
        loss.backward();
        for (name, t) in codec.named_params() {
            if name.starts_with("p_a.") || name.starts_with("p_s.") {
                assert!(t.grad().is_none(), "{name} received gradient in plain mode");
            }
        }
    }

    #[test]
    fn per_layer_prompt_switch_builds_and_runs() {
        let mut cfg = CodecConfig::toy();
        cfg.per_layer_prompts = true;
        cfg.swin_layers_per_block = 2;
        let codec = Codec::new(cfg, 25).unwrap();
        assert_eq!(codec.g_a[0].prompt_convs.len(), 2);
        let mut rng = Prng::new(26);
        let cond = rand_cond(&mut rng, 64, 64, 0.5);
        let bundle = no_grad(|| codec.analyze(&cond, QuantMode::Eval, None, true)).unwrap();
        assert_eq!(bundle.y_hat.shape(), [40, 4, 4]);
    }
}
