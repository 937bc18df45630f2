//! ROI-masked rate-distortion loss and the three-stage training protocol.
//!
//! Stage 1 pre-trains the base codec (no prompt networks) at the highest
//! rate point. Stage 2 trains everything for variable-rate coding with the
//! rate parameter drawn uniformly per sample and an all-ones ROI mask.
//! Stage 3 fine-tunes with random ROI masks for spatial quality control.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::codec::{Codec, CodecConfig, ConditioningInput};
use crate::conditioning::{generate_mask, lambda_of, MaskSpec, RateMapping};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::imageio::{load_image, Planes};
use crate::nn::NamedParams;
use crate::rng::Prng;

/// Scale applied to the MSE term so the community lambda range produces
/// sensible trade-offs on [0, 1] pixels (255-scaled squared error).
pub const D_SCALE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked_mse: f64,
    pub bpp: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Masked rate-distortion objective:
/// `lambda * D_SCALE * sum(M * (x - x')^2) / N + bpp`, with the mask
/// broadcast across color channels and `N` the total sample count.
pub fn rd_loss(
    x: &Tensor,
    x_recon: &Tensor,
    roi_mask: &Tensor,
    m_lambda: f64,
    bpp: &Tensor,
    mapping: &RateMapping,
) -> Result<(Tensor, LossBreakdown)> {
    let xs = x.shape().to_vec();
    if xs != x_recon.shape() {
        return Err(Error::Shape(format!(
            "image {xs:?} vs reconstruction {:?}",
            x_recon.shape()
        )));
    }
    if xs.len() != 3 || roi_mask.shape() != [1, xs[1], xs[2]] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match image {xs:?}",
            roi_mask.shape()
        )));
    }
    let lambda = lambda_of(m_lambda, mapping)?;
    let channels = xs[0];
    let hw = xs[1] * xs[2];
    let mask3 = {
        let mut idx = Vec::with_capacity(channels * hw);
        for _ in 0..channels {
            for i in 0..hw {
                idx.push(i as u32);
            }
        }
        roi_mask.gather(std::rc::Rc::new(idx), &xs)
    };
    let diff = x.sub(x_recon);
    let masked = diff.mul(&diff).mul(&mask3);
    let masked_mse = masked.sum_all().mul_scalar(1.0 / x.numel() as f64);
    let total = masked_mse.mul_scalar(lambda * D_SCALE).add(bpp);
    let breakdown = LossBreakdown {
        masked_mse: masked_mse.item(),
        bpp: bpp.item(),
        lambda,
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// First-order adaptive-moment optimizer with global gradient-norm clipping.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(params: &NamedParams, lr: f64) -> Self {
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let m = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let v = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            params: tensors,
            m,
            v,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }

    /// Applies accumulated gradients and clears them.
    pub fn step(&mut self) {
        self.t += 1;
        let grads: Vec<Option<Vec<f64>>> = self.params.iter().map(|p| p.take_grad()).collect();
        let mut scale = 1.0;
        if let Some(clip) = self.clip_norm {
            let norm_sq: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum();
            let norm = norm_sq.sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let mut data = p.to_vec();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(&data);
        }
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    4
}
fn default_crop() -> usize {
    256
}

/// One stage of the protocol. The sampling rules are functions of the stage
/// number: stage 1 fixes `m = 1` with a unit mask and trains the base codec
/// only; stage 2 draws `m ~ U[0,1]` per sample under a unit mask; stage 3
/// additionally draws a random mask family per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_crop")]
    pub crop: usize,
    /// 0 = checkpoint only at stage end
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl StagePlan {
    pub fn new(stage: u8, steps: usize) -> Self {
        StagePlan {
            stage,
            steps,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            crop: default_crop(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!("stage {} outside 1..=3", self.stage)));
        }
        if self.crop % crate::codec::GRID_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of {}",
                self.crop,
                crate::codec::GRID_MULTIPLE
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_m(&self, rng: &mut Prng) -> f64 {
        if self.stage == 1 {
            1.0
        } else {
            rng.f64()
        }
    }

    pub fn sample_mask(&self, rng: &mut Prng, h: usize, w: usize) -> Tensor {
        if self.stage <= 2 {
            Tensor::full(&[1, h, w], 1.0)
        } else {
            generate_mask(&MaskSpec::sample_kind(rng), h, w)
        }
    }

    pub fn uses_prompts(&self) -> bool {
        self.stage >= 2
    }

    pub fn trainable(&self, codec: &Codec) -> NamedParams {
        if self.stage == 1 {
            codec.base_params()
        } else {
            codec.named_params()
        }
    }
}

/// Per-step metrics record (newline-delimited JSON in the log file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: u8,
    pub m_lambda: f64,
    pub bpp: f64,
    pub masked_mse: f64,
    pub total: f64,
}

/// In-memory training set: every image preloaded, random crops on demand.
pub struct ImageFolder {
    pub images: Vec<(String, Planes)>,
}

impl ImageFolder {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "ppm" || e == "pgm" || e == "pnm"
                )
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!(
                "no images (png/ppm) found in {}",
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(paths.len());
        for p in paths {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            images.push((name, load_image(&p)?));
        }
        Ok(ImageFolder { images })
    }

    pub fn from_planes(images: Vec<(String, Planes)>) -> Self {
        ImageFolder { images }
    }

    /// Random crop of the requested size; smaller images are mirror-padded up.
    pub fn sample_crop(&self, rng: &mut Prng, size: usize) -> Planes {
        let (_, img) = &self.images[rng.below(self.images.len())];
        let img = if img.height < size || img.width < size {
            img.mirror_pad(size.max(img.height), size.max(img.width))
        } else {
            img.clone()
        };
        let y0 = if img.height > size {
            rng.below(img.height - size + 1)
        } else {
            0
        };
        let x0 = if img.width > size {
            rng.below(img.width - size + 1)
        } else {
            0
        };
        img.crop_at(y0, x0, size, size)
    }
}

/// Runs one stage. Gradients accumulate over the batch (scaled by its
/// inverse size) before each optimizer step; a non-finite loss aborts.
pub fn train_stage(
    codec: &Codec,
    plan: &StagePlan,
    data: &ImageFolder,
    mapping: &RateMapping,
    rng: &mut Prng,
    mut log: Option<&mut dyn Write>,
    checkpoint_to: Option<&Path>,
) -> Result<Vec<MetricsRecord>> {
    plan.validate()?;
    let mut opt = Adam::new(&plan.trainable(codec), plan.learning_rate);
    let mut records = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let mut sum = LossBreakdown {
            masked_mse: 0.0,
            bpp: 0.0,
            lambda: 0.0,
            total: 0.0,
        };
        let mut m_mean = 0.0;
        for _ in 0..plan.batch_size {
            let crop = data.sample_crop(rng, plan.crop);
            let m = plan.sample_m(rng);
            let mask = plan.sample_mask(rng, plan.crop, plan.crop);
            let cond = ConditioningInput::new(crop.tensor(), mask, m)?;
            let bundle = codec.analyze(&cond, QuantMode::Train, Some(rng), plan.uses_prompts())?;
            let recon = codec.synthesize(
                &bundle.y_hat,
                &cond.lambda_small(),
                QuantMode::Train,
                plan.uses_prompts(),
            )?;
            let bpp = codec.estimate_bpp(&bundle, plan.crop, plan.crop);
            let (total, breakdown) = rd_loss(&cond.image, &recon, &cond.roi_mask, m, &bpp, mapping)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at stage {} step {step}",
                    plan.stage
                )));
            }
            total.mul_scalar(1.0 / plan.batch_size as f64).backward();
            sum.masked_mse += breakdown.masked_mse;
            sum.bpp += breakdown.bpp;
            sum.lambda += breakdown.lambda;
            sum.total += breakdown.total;
            m_mean += m;
        }
        opt.step();
        let n = plan.batch_size as f64;
        let rec = MetricsRecord {
            step,
            stage: plan.stage,
            m_lambda: m_mean / n,
            bpp: sum.bpp / n,
            masked_mse: sum.masked_mse / n,
            total: sum.total / n,
        };
        if let Some(log) = log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
        }
        records.push(rec);
        if let (Some(path), true) = (
            checkpoint_to,
            plan.checkpoint_every > 0 && (step + 1) % plan.checkpoint_every == 0,
        ) {
            crate::checkpoint::save(codec, path)?;
        }
    }
    if let Some(path) = checkpoint_to {
        crate::checkpoint::save(codec, path)?;
    }
    Ok(records)
}

/// Full training configuration (the `train --config` file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub codec: CodecConfig,
    #[serde(default)]
    pub rate: RateMapping,
    pub stages: Vec<StagePlan>,
    /// resume or fine-tune from an existing checkpoint instead of fresh init
    #[serde(default)]
    pub init_from: Option<PathBuf>,
}

/// Runs the staged protocol; every stage transition saves a checkpoint and
/// the next stage reloads it. Returns the final checkpoint path.
pub fn run_training(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.codec.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let data = ImageFolder::load(&cfg.dataset)?;
    let mut rng = Prng::new(cfg.seed);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(cfg.out_dir.join("metrics.ndjson"))?;
    let mut codec = match &cfg.init_from {
        Some(path) => {
            let loaded = crate::checkpoint::load(path)?;
            if loaded.config != cfg.codec {
                return Err(Error::Config(format!(
                    "init_from checkpoint {} carries a different codec config",
                    path.display()
                )));
            }
            loaded
        }
        None => Codec::new(cfg.codec.clone(), cfg.seed)?,
    };
    let mut last_ckpt: Option<PathBuf> = None;
    for plan in &cfg.stages {
        if let Some(prev) = &last_ckpt {
            codec = crate::checkpoint::load(prev)?;
        }
        let path = cfg.out_dir.join(format!("stage{}.ckpt", plan.stage));
        eprintln!(
            "stage {}: {} steps, lr {}, batch {}, crop {}",
            plan.stage, plan.steps, plan.learning_rate, plan.batch_size, plan.crop
        );
        let records = train_stage(
            &codec,
            plan,
            &data,
            &cfg.rate,
            &mut rng,
            Some(&mut log),
            Some(&path),
        )?;
        if let (Some(first), Some(last)) = (records.first(), records.last()) {
            eprintln!(
                "stage {}: loss {:.4} -> {:.4}",
                plan.stage, first.total, last.total
            );
        }
        last_ckpt = Some(path);
    }
    let final_path = cfg.out_dir.join("final.ckpt");
    crate::checkpoint::save(&codec, &final_path)?;
    Ok(final_path)
}

/// Snapshot of parameter data by name (equality audits in tests).
pub fn param_snapshot(params: &NamedParams) -> HashMap<String, Vec<f64>> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_image;

    #[test]
    fn rd_loss_hand_examples() {
        let mapping = RateMapping::default();
        // unit mask reduces to plain mse
        let x = Tensor::leaf(&[1, 1, 2], vec![0.3, 0.9]);
        let xr = Tensor::leaf(&[1, 1, 2], vec![0.2, 0.4]);
        let ones = Tensor::full(&[1, 1, 2], 1.0);
        let bpp = Tensor::scalar(0.25);
        let (_, b) = rd_loss(&x, &xr, &ones, 0.5, &bpp, &mapping).unwrap();
        let plain_mse = (0.01 + 0.25) / 2.0;
        assert!((b.masked_mse - plain_mse).abs() < 1e-12);

        // zero mask: total equals bpp
        let zeros = Tensor::zeros(&[1, 1, 2]);
        let (total, b) = rd_loss(&x, &xr, &zeros, 0.5, &bpp, &mapping).unwrap();
        assert!((b.total - 0.25).abs() < 1e-12);
        assert!((total.item() - 0.25).abs() < 1e-12);

        // 1x2 toy with errors (0.1, 0.5) and mask (1, 0)
        let mask = Tensor::leaf(&[1, 1, 2], vec![1.0, 0.0]);
        let (_, b) = rd_loss(&x, &xr, &mask, 0.5, &bpp, &mapping).unwrap();
        assert!((b.masked_mse - 0.005).abs() < 1e-12);
        // invariant: total = lambda * mse * D_SCALE + bpp
        assert!((b.total - (b.lambda * 0.005 * D_SCALE + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn rd_loss_shape_mismatch_is_rejected() {
        let mapping = RateMapping::default();
        let x = Tensor::zeros(&[3, 2, 2]);
        let xr = Tensor::zeros(&[3, 2, 3]);
        let mask = Tensor::zeros(&[1, 2, 2]);
        let bpp = Tensor::scalar(0.0);
        assert!(rd_loss(&x, &xr, &mask, 0.5, &bpp, &mapping).is_err());
    }

    #[test]
    fn rd_loss_gradient_matches_finite_differences() {
        let mapping = RateMapping::default();
        let mut rng = Prng::new(5);
        let n = 12;
        let xv: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let rv: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let mv: Vec<f64> = (0..n).map(|_| rng.f64()).collect();
        let x = Tensor::leaf(&[3, 3, 4], xv);
        let xr = Tensor::param(&[3, 3, 4], rv);
        let mask = Tensor::leaf(&[1, 3, 4], mv);
        let bpp = Tensor::scalar(0.125);
        let build = || rd_loss(&x, &xr, &mask, 0.7, &bpp, &mapping).unwrap().0;
        build().backward();
        let g = xr.grad().unwrap();
        let h = 1e-6;
        let base = xr.to_vec();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            xr.set_data(&p);
            let up = build().item();
            p[i] = base[i] - h;
            xr.set_data(&p);
            let down = build().item();
            xr.set_data(&base);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!(((fd - g[i]) / denom).abs() < 1e-4, "elem {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rd_loss_is_permutation_invariant() {
        let mapping = RateMapping::default();
        let mut rng = Prng::new(7);
        let n = 24usize;
        let xv: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let rv: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let mv: Vec<f64> = (0..n).map(|_| rng.f64()).collect();
        let bpp = Tensor::scalar(0.5);
        let loss = |xv: &[f64], rv: &[f64], mv: &[f64]| {
            rd_loss(
                &Tensor::leaf(&[3, 4, 6], xv.to_vec()),
                &Tensor::leaf(&[3, 4, 6], rv.to_vec()),
                &Tensor::leaf(&[1, 4, 6], mv.to_vec()),
                0.3,
                &bpp,
                &mapping,
            )
            .unwrap()
            .1
            .total
        };
        let base = loss(&xv, &rv, &mv);
        // joint pixel permutation: reverse
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |v: &[f64], ch: usize| -> Vec<f64> {
            let mut out = vec![0.0; v.len()];
            for c in 0..ch {
                for (dst, &src) in perm.iter().enumerate() {
                    out[c * n + dst] = v[c * n + src];
                }
            }
            out
        };
        let shuffled = loss(&permute(&xv, 3), &permute(&rv, 3), &permute(&mv, 1));
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn rd_total_is_monotone_in_m_lambda() {
        let mapping = RateMapping::default();
        let x = Tensor::leaf(&[1, 1, 2], vec![0.3, 0.9]);
        let xr = Tensor::leaf(&[1, 1, 2], vec![0.2, 0.4]);
        let ones = Tensor::full(&[1, 1, 2], 1.0);
        let bpp = Tensor::scalar(0.25);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=10 {
            let m = i as f64 / 10.0;
            let (_, b) = rd_loss(&x, &xr, &ones, m, &bpp, &mapping).unwrap();
            assert!(b.total > prev, "not strictly increasing at m={m}");
            prev = b.total;
        }
    }

    #[test]
    fn stage2_lambda_sampling_is_uniform() {
        let plan = StagePlan::new(2, 1);
        let mut rng = Prng::new(1234);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n).map(|_| plan.sample_m(&mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov statistic against U[0,1]
        let mut d = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d = d.max((x - lo).abs()).max((hi - x).abs());
        }
        assert!(d < 0.02, "KS statistic {d}");
    }

    #[test]
    fn stage_rules_follow_the_protocol() {
        let mut rng = Prng::new(5);
        let s1 = StagePlan::new(1, 1);
        assert_eq!(s1.sample_m(&mut rng), 1.0);
        assert!(!s1.uses_prompts());
        assert!(s1.sample_mask(&mut rng, 4, 4).data().iter().all(|&v| v == 1.0));
        let s2 = StagePlan::new(2, 1);
        assert!(s2.uses_prompts());
        assert!(s2.sample_mask(&mut rng, 4, 4).data().iter().all(|&v| v == 1.0));
        let s3 = StagePlan::new(3, 1);
        let m3 = s3.sample_mask(&mut rng, 16, 16);
        assert!(m3.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(StagePlan::new(4, 1).validate().is_err());
        let mut bad_crop = StagePlan::new(1, 1);
        bad_crop.crop = 100;
        assert!(bad_crop.validate().is_err());
    }

    fn tiny_folder(seed: u64, n: usize, size: usize) -> ImageFolder {
        let mut rng = Prng::new(seed);
        ImageFolder::from_planes(
            (0..n)
                .map(|i| (format!("img{i}"), synth_image(&mut rng, size, size)))
                .collect(),
        )
    }

    #[test]
    fn stage1_leaves_prompt_networks_untouched() {
        let codec = Codec::new(CodecConfig::toy(), 31).unwrap();
        let before = param_snapshot(&codec.named_params());
        let data = tiny_folder(1, 2, 64);
        let mut plan = StagePlan::new(1, 2);
        plan.batch_size = 1;
        plan.crop = 64;
        let mut rng = Prng::new(2);
        train_stage(&codec, &plan, &data, &RateMapping::default(), &mut rng, None, None).unwrap();
        let after = param_snapshot(&codec.named_params());
        let mut base_changed = false;
        for (name, old) in &before {
            let new = &after[name];
            if name.starts_with("p_a.") || name.starts_with("p_s.") {
                assert_eq!(old, new, "{name} moved during stage 1");
            } else if old != new {
                base_changed = true;
            }
        }
        assert!(base_changed, "base codec did not train");
    }

    #[test]
    fn divergence_guard_aborts_on_nonfinite_loss() {
        let codec = Codec::new(CodecConfig::toy(), 33).unwrap();
        // poison one weight
        codec.named_params()[0].1.map_data(|v| *v = f64::NAN);
        let data = tiny_folder(3, 1, 64);
        let mut plan = StagePlan::new(1, 1);
        plan.batch_size = 1;
        plan.crop = 64;
        let mut rng = Prng::new(4);
        let got = train_stage(&codec, &plan, &data, &RateMapping::default(), &mut rng, None, None);
        assert!(matches!(got, Err(Error::Diverged(_))));
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let p = Tensor::param(&[2], vec![3.0, -2.0]);
        let mut opt = Adam::new(&vec![("p".into(), p.clone())], 0.05);
        for _ in 0..400 {
            let loss = p.mul(&p).sum_all();
            loss.backward();
            opt.step();
        }
        let v = p.to_vec();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn metrics_records_serialize_as_ndjson() {
        let codec = Codec::new(CodecConfig::toy(), 35).unwrap();
        let data = tiny_folder(5, 1, 64);
        let mut plan = StagePlan::new(3, 2);
        plan.batch_size = 1;
        plan.crop = 64;
        let mut rng = Prng::new(6);
        let mut buf = Vec::new();
        train_stage(
            &codec,
            &plan,
            &data,
            &RateMapping::default(),
            &mut rng,
            Some(&mut buf),
            None,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for (i, line) in lines.iter().enumerate() {
            let rec: MetricsRecord = serde_json::from_str(line).unwrap();
            assert_eq!(rec.step, i);
            assert_eq!(rec.stage, 3);
            assert!(rec.total.is_finite());
        }
    }
}
