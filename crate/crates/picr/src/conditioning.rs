//! Rate-parameter mapping and conditioning-plane synthesis.
//!
//! The scalar rate parameter `m` in [0, 1] maps log-linearly onto the
//! Lagrange multiplier; ROI masks come from four reconstruction-era mask
//! families (uniform, gradient, rectangles, blobs), all pure functions of
//! `(spec, H, W)` through a counter-based generator.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Prng;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateMapping {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for RateMapping {
    fn default() -> Self {
        RateMapping {
            lambda_min: 0.0018,
            lambda_max: 0.0932,
        }
    }
}

impl RateMapping {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(Error::Config(format!(
                "rate mapping needs 0 < min < max, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        Ok(())
    }
}

/// `lambda = exp((log l_max - log l_min) * m + log l_min)`, m in [0, 1].
pub fn lambda_of(m: f64, mapping: &RateMapping) -> Result<f64> {
    mapping.validate()?;
    if !(0.0..=1.0).contains(&m) || !m.is_finite() {
        return Err(Error::Range(format!("rate parameter m = {m} outside [0, 1]")));
    }
    Ok(((mapping.lambda_max.ln() - mapping.lambda_min.ln()) * m + mapping.lambda_min.ln()).exp())
}

/// Uniform lambda plane at full resolution plus its latent-grid counterpart.
/// Both are constant `m`; the downscale is declared nearest-value, which is
/// exact on a uniform map.
pub fn make_lambda_maps(m: f64, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!(
            "lambda maps need dims divisible by 16, got {h}x{w}"
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Range(format!("rate parameter m = {m} outside [0, 1]")));
    }
    Ok((
        Tensor::full(&[1, h, w], m),
        Tensor::full(&[1, h / 16, w / 16], m),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RectSpec {
    pub y0: usize,
    pub x0: usize,
    /// exclusive
    pub y1: usize,
    /// exclusive
    pub x1: usize,
    pub value: f64,
}

/// The four random ROI-mask families used for spatial-quality fine-tuning.
/// Every field left `None` is drawn from the seed, so `(kind, seed)` fully
/// determines the mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    Uniform {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value: Option<f64>,
    },
    Gradient {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        horizontal: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<f64>,
    },
    Rectangles {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        background: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rects: Option<Vec<RectSpec>>,
    },
    Blobs {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        softness: Option<f64>,
    },
}

impl MaskSpec {
    fn stream(&self) -> u64 {
        match self {
            MaskSpec::Uniform { .. } => 1,
            MaskSpec::Gradient { .. } => 2,
            MaskSpec::Rectangles { .. } => 3,
            MaskSpec::Blobs { .. } => 4,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            MaskSpec::Uniform { seed, .. }
            | MaskSpec::Gradient { seed, .. }
            | MaskSpec::Rectangles { seed, .. }
            | MaskSpec::Blobs { seed, .. } => *seed,
        }
    }

    /// Random spec of a random kind, for stage-3 sampling.
    pub fn sample_kind(rng: &mut Prng) -> MaskSpec {
        let seed = (rng.f64() * u32::MAX as f64) as u64;
        match rng.below(4) {
            0 => MaskSpec::Uniform { seed, value: None },
            1 => MaskSpec::Gradient {
                seed,
                horizontal: None,
                from: None,
                to: None,
            },
            2 => MaskSpec::Rectangles {
                seed,
                background: None,
                rects: None,
            },
            _ => MaskSpec::Blobs {
                seed,
                scale: None,
                threshold: None,
                softness: None,
            },
        }
    }
}

/// Renders a `1 x H x W` mask with values in [0, 1], deterministic under
/// `(kind, seed)`.
pub fn generate_mask(spec: &MaskSpec, h: usize, w: usize) -> Tensor {
    let mut rng = Prng::with_stream(spec.seed(), spec.stream());
    let mut data = vec![0.0f64; h * w];
    match spec {
        MaskSpec::Uniform { value, .. } => {
            let v = value.unwrap_or_else(|| rng.f64());
            data.fill(v.clamp(0.0, 1.0));
        }
        MaskSpec::Gradient {
            horizontal,
            from,
            to,
            ..
        } => {
            let horiz = horizontal.unwrap_or_else(|| rng.bool());
            let a = from.unwrap_or_else(|| rng.f64());
            let b = to.unwrap_or_else(|| rng.f64());
            for y in 0..h {
                for x in 0..w {
                    let t = if horiz {
                        if w > 1 { x as f64 / (w - 1) as f64 } else { 0.0 }
                    } else if h > 1 {
                        y as f64 / (h - 1) as f64
                    } else {
                        0.0
                    };
                    data[y * w + x] = (a + (b - a) * t).clamp(0.0, 1.0);
                }
            }
        }
        MaskSpec::Rectangles {
            background, rects, ..
        } => {
            // half the draws snap to the binary extremes so ROI-style masks
            // (foreground 1, background 0) are well represented
            let bg = background.unwrap_or_else(|| if rng.bool() { 0.0 } else { rng.f64() });
            data.fill(bg.clamp(0.0, 1.0));
            let rects = rects.clone().unwrap_or_else(|| {
                let n = 1 + rng.below(3);
                (0..n)
                    .map(|_| {
                        let y0 = rng.below(h.max(2) - 1);
                        let x0 = rng.below(w.max(2) - 1);
                        let y1 = y0 + 1 + rng.below(h - y0);
                        let x1 = x0 + 1 + rng.below(w - x0);
                        RectSpec {
                            y0,
                            x0,
                            y1,
                            x1,
                            value: if rng.bool() { 1.0 } else { rng.f64() },
                        }
                    })
                    .collect()
            });
            for r in &rects {
                for y in r.y0..r.y1.min(h) {
                    for x in r.x0..r.x1.min(w) {
                        data[y * w + x] = r.value.clamp(0.0, 1.0);
                    }
                }
            }
        }
        MaskSpec::Blobs {
            scale,
            threshold,
            softness,
            ..
        } => {
            let sc = scale.unwrap_or_else(|| rng.uniform(0.06, 0.16));
            let thr = threshold.unwrap_or_else(|| rng.uniform(0.4, 0.6));
            let soft = softness.unwrap_or_else(|| rng.uniform(0.08, 0.2));
            for v in data.iter_mut() {
                *v = rng.f64();
            }
            let sigma = (sc * h.min(w) as f64).max(1.0);
            gaussian_blur(&mut data, h, w, sigma);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in &data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-12);
            for v in data.iter_mut() {
                let n = (*v - lo) / span;
                let t = ((n - thr) / (2.0 * soft) + 0.5).clamp(0.0, 1.0);
                *v = t * t * (3.0 - 2.0 * t); // smoothstep
            }
        }
    }
    Tensor::leaf(&[1, h, w], data)
}

/// Separable Gaussian blur with reflected boundaries.
fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let period = (2 * n - 2).max(1);
        let mut t = i.rem_euclid(period);
        if t >= n {
            t = period - t;
        }
        t as usize
    };
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w as isize);
                acc += kv * data[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h as isize);
                acc += kv * tmp[sy * w + x];
            }
            data[y * w + x] = acc;
        }
    }
}

/// Mask plane from 8-bit grayscale samples (values / 255).
pub fn mask_from_gray(data: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if data.len() != h * w {
        return Err(Error::Shape(format!(
            "mask samples {} do not fill {h}x{w}",
            data.len()
        )));
    }
    Ok(Tensor::leaf(
        &[1, h, w],
        data.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

/// Mask spec from its JSON description.
pub fn mask_spec_from_json(json: &str) -> Result<MaskSpec> {
    Ok(serde_json::from_str(json)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_endpoints_match_the_mapping_range() {
        let map = RateMapping::default();
        assert!((lambda_of(0.0, &map).unwrap() - 0.0018).abs() < 1e-12);
        assert!((lambda_of(1.0, &map).unwrap() - 0.0932).abs() < 1e-12);
    }

    #[test]
    fn lambda_midpoint_is_the_geometric_mean() {
        let map = RateMapping::default();
        let expected = (0.0018f64 * 0.0932).sqrt();
        assert!((lambda_of(0.5, &map).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.0129522).abs() < 1e-6);
    }

    #[test]
    fn lambda_log_affine_second_differences_vanish() {
        let map = RateMapping::default();
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
        let logs: Vec<f64> = grid
            .iter()
            .map(|&m| lambda_of(m, &map).unwrap().ln())
            .collect();
        for i in 1..logs.len() - 1 {
            let second = logs[i + 1] - 2.0 * logs[i] + logs[i - 1];
            assert!(second.abs() < 1e-12, "second difference {second}");
        }
        // strictly increasing
        for w in logs.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn lambda_rejects_out_of_range() {
        let map = RateMapping::default();
        assert!(lambda_of(-0.01, &map).is_err());
        assert!(lambda_of(1.01, &map).is_err());
        assert!(lambda_of(f64::NAN, &map).is_err());
    }

    #[test]
    fn lambda_maps_are_uniform_and_consistent() {
        let (full, small) = make_lambda_maps(0.7, 64, 64).unwrap();
        assert_eq!(full.shape(), [1, 64, 64]);
        assert_eq!(small.shape(), [1, 4, 4]);
        assert!(full.data().iter().all(|&v| v == 0.7));
        assert!(small.data().iter().all(|&v| v == 0.7));
        // exact mean round trip on an exactly representable value
        let (full, small) = make_lambda_maps(0.75, 64, 64).unwrap();
        let mean_full: f64 = full.data().iter().sum::<f64>() / full.numel() as f64;
        let mean_small: f64 = small.data().iter().sum::<f64>() / small.numel() as f64;
        assert_eq!(mean_full, mean_small);

        let (z_full, z_small) = make_lambda_maps(0.0, 32, 48).unwrap();
        assert!(z_full.data().iter().all(|&v| v == 0.0));
        assert!(z_small.data().iter().all(|&v| v == 0.0));
        assert!(make_lambda_maps(0.5, 30, 64).is_err());
    }

    #[test]
    fn uniform_mask_takes_the_given_value() {
        let m = generate_mask(
            &MaskSpec::Uniform {
                seed: 0,
                value: Some(0.4),
            },
            5,
            7,
        );
        assert!(m.data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn rectangle_mask_hand_construction() {
        let spec = MaskSpec::Rectangles {
            seed: 0,
            background: Some(0.0),
            rects: Some(vec![RectSpec {
                y0: 0,
                x0: 0,
                y1: 2,
                x1: 4,
                value: 1.0,
            }]),
        };
        let m = generate_mask(&spec, 4, 4);
        let ones = m.data().iter().filter(|&&v| v == 1.0).count();
        let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (8, 8));
    }

    #[test]
    fn mask_harness_bounds_and_determinism() {
        // 1000 samples per kind
        for seed in 0..1000u64 {
            for kind in 0..4 {
                let spec = match kind {
                    0 => MaskSpec::Uniform { seed, value: None },
                    1 => MaskSpec::Gradient {
                        seed,
                        horizontal: None,
                        from: None,
                        to: None,
                    },
                    2 => MaskSpec::Rectangles {
                        seed,
                        background: None,
                        rects: None,
                    },
                    _ => MaskSpec::Blobs {
                        seed,
                        scale: None,
                        threshold: None,
                        softness: None,
                    },
                };
                let a = generate_mask(&spec, 24, 20);
                assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let b = generate_mask(&spec, 24, 20);
                assert_eq!(*a.data(), *b.data(), "seed {seed} kind {kind} not reproducible");
            }
        }
    }

    #[test]
    fn mask_spec_json_round_trip() {
        let spec = mask_spec_from_json(r#"{"kind":"rectangles","seed":3}"#).unwrap();
        assert!(matches!(spec, MaskSpec::Rectangles { seed: 3, .. }));
        let spec = mask_spec_from_json(r#"{"kind":"uniform","value":0.25}"#).unwrap();
        let m = generate_mask(&spec, 2, 2);
        assert!(m.data().iter().all(|&v| v == 0.25));
        assert!(mask_spec_from_json(r#"{"kind":"nope"}"#).is_err());
    }
}
