//! Weighted PSNR, rate-distortion sweeps over real bitstreams, complexity
//! profiling (closed-form and instrumented MAC counts) and prompt-attention
//! heat maps.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{effective_window, AttnRecord, Resample, Stb};
use crate::autodiff::conv_out_size;
use crate::autodiff::{macs, no_grad, Tensor};
use crate::bitstream::{decode_from_bytes, encode_to_bytes};
use crate::codec::{Codec, ConditioningInput};
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::imageio::{save_gray_png, Planes};
use crate::nn::{Conv2d, ConvT2d};
use crate::plot::draw_rd_plot;

/// Weighting of ROI vs non-ROI squared error. The mask is strictly binary
/// for metric purposes; soft masks are thresholded at 0.5 first.
pub struct WeightedPsnrSpec {
    pub alpha: f64,
    pub beta: f64,
    /// per-pixel ROI membership, length H*W
    pub roi: Vec<bool>,
}

impl WeightedPsnrSpec {
    pub fn from_soft_mask(alpha: f64, beta: f64, mask: &Planes) -> Self {
        WeightedPsnrSpec {
            alpha,
            beta,
            roi: binarize_mask(&mask.data),
        }
    }
}

/// Threshold a soft mask at 0.5 into ROI membership.
pub fn binarize_mask(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&v| v >= 0.5).collect()
}

/// Weighted PSNR over all color channels, MAX = 1.0:
/// `wmse = (a*SSE_roi + b*SSE_nroi) / (a*N_roi + b*N_nroi)`, capped at 100 dB
/// when the weighted error vanishes.
pub fn weighted_psnr(x: &Planes, recon: &Planes, spec: &WeightedPsnrSpec) -> Result<f64> {
    if spec.alpha < 0.0 || spec.beta < 0.0 || spec.alpha + spec.beta == 0.0 {
        return Err(Error::Range(format!(
            "weights alpha={} beta={} need alpha + beta > 0",
            spec.alpha, spec.beta
        )));
    }
    if x.channels != recon.channels || x.height != recon.height || x.width != recon.width {
        return Err(Error::Shape(format!(
            "image {}x{}x{} vs reconstruction {}x{}x{}",
            x.channels, x.height, x.width, recon.channels, recon.height, recon.width
        )));
    }
    let hw = x.height * x.width;
    if spec.roi.len() != hw {
        return Err(Error::Shape(format!(
            "roi length {} does not cover {hw} pixels",
            spec.roi.len()
        )));
    }
    let mut sse_roi = 0.0;
    let mut sse_nroi = 0.0;
    let mut n_roi = 0usize;
    let mut n_nroi = 0usize;
    for c in 0..x.channels {
        for i in 0..hw {
            let e = x.data[c * hw + i] - recon.data[c * hw + i];
            if spec.roi[i] {
                sse_roi += e * e;
                n_roi += 1;
            } else {
                sse_nroi += e * e;
                n_nroi += 1;
            }
        }
    }
    let denom = spec.alpha * n_roi as f64 + spec.beta * n_nroi as f64;
    let wmse = if denom == 0.0 {
        0.0
    } else {
        (spec.alpha * sse_roi + spec.beta * sse_nroi) / denom
    };
    Ok((-10.0 * wmse.max(1e-10).log10()).min(100.0))
}

/// One measured rate-distortion point on a real bitstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RdPoint {
    pub image: String,
    pub m_lambda: f64,
    /// actual file size in bits per original pixel
    pub bpp: f64,
    pub wpsnr_db: f64,
    pub bytes: usize,
    pub ms_encode: f64,
    pub ms_decode: f64,
}

pub enum SweepMasks {
    UniformOnes,
    /// one soft mask per image (drives the encoder; the metric thresholds it)
    PerImage(Vec<Planes>),
}

/// Encodes/decodes every `(image, m)` pair through real bitstreams, measuring
/// actual byte counts and weighted PSNR. A decoder-side latent mismatch is a
/// hard failure. With a report path prefix, writes `<prefix>.csv`,
/// `<prefix>.json` and `<prefix>.png`.
pub fn rd_sweep(
    codec: &Codec,
    images: &[(String, Planes)],
    masks: &SweepMasks,
    m_values: &[f64],
    alpha: f64,
    beta: f64,
    report: Option<&Path>,
) -> Result<Vec<RdPoint>> {
    let mut points = Vec::with_capacity(images.len() * m_values.len());
    for (idx, (name, image)) in images.iter().enumerate() {
        let hw = image.height * image.width;
        let mask = match masks {
            SweepMasks::UniformOnes => Planes::new(1, image.height, image.width, vec![1.0; hw])?,
            SweepMasks::PerImage(list) => {
                let m = &list[idx];
                if m.height != image.height || m.width != image.width {
                    m.resize_nearest(image.height, image.width)
                } else {
                    m.clone()
                }
            }
        };
        let spec = WeightedPsnrSpec::from_soft_mask(alpha, beta, &mask);
        for &m in m_values {
            points.push(measure_point(codec, name, image, &mask, &spec, m)?);
        }
    }
    if let Some(prefix) = report {
        write_reports(&points, prefix)?;
    }
    Ok(points)
}

/// The local rate-variation protocol: at a fixed rate parameter, re-encode
/// with the ROI region's mask value set to each entry of `roi_values`
/// (default 0.25, 0.5, 0.75, 1) and zero outside.
pub fn roi_value_sub_sweep(
    codec: &Codec,
    name: &str,
    image: &Planes,
    region: &[bool],
    m: f64,
    roi_values: &[f64],
    alpha: f64,
    beta: f64,
) -> Result<Vec<RdPoint>> {
    let hw = image.height * image.width;
    if region.len() != hw {
        return Err(Error::Shape("roi region does not cover the image".into()));
    }
    let spec = WeightedPsnrSpec {
        alpha,
        beta,
        roi: region.to_vec(),
    };
    let mut points = Vec::with_capacity(roi_values.len());
    for &v in roi_values {
        let mask_data: Vec<f64> = region.iter().map(|&r| if r { v } else { 0.0 }).collect();
        let mask = Planes::new(1, image.height, image.width, mask_data)?;
        let label = format!("{name}@roi={v}");
        points.push(measure_point(codec, &label, image, &mask, &spec, m)?);
    }
    Ok(points)
}

fn measure_point(
    codec: &Codec,
    name: &str,
    image: &Planes,
    mask: &Planes,
    spec: &WeightedPsnrSpec,
    m: f64,
) -> Result<RdPoint> {
    let t0 = Instant::now();
    let enc = encode_to_bytes(codec, image, mask, m)?;
    let t1 = Instant::now();
    let dec = decode_from_bytes(codec, &enc.bytes)?;
    let t2 = Instant::now();
    for (a, b) in enc.y_hat.iter().zip(&dec.y_hat) {
        if a.to_bits() != b.to_bits() {
            return Err(Error::CorruptStream(
                "decoder latent mismatch (codec invariant broken)".into(),
            ));
        }
    }
    let wpsnr = weighted_psnr(image, &dec.image, spec)?;
    Ok(RdPoint {
        image: name.to_string(),
        m_lambda: m,
        bpp: enc.bytes.len() as f64 * 8.0 / (image.height * image.width) as f64,
        wpsnr_db: wpsnr,
        bytes: enc.bytes.len(),
        ms_encode: (t1 - t0).as_secs_f64() * 1e3,
        ms_decode: (t2 - t1).as_secs_f64() * 1e3,
    })
}

/// Writes the sweep artifacts: CSV, JSON and the plotted curves.
pub fn write_reports(points: &[RdPoint], prefix: &Path) -> Result<()> {
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut csv = String::from("image,m_lambda,bpp,wpsnr_db,bytes,ms_encode,ms_decode\n");
    for p in points {
        csv.push_str(&format!(
            "{},{},{:.6},{:.4},{},{:.3},{:.3}\n",
            p.image, p.m_lambda, p.bpp, p.wpsnr_db, p.bytes, p.ms_encode, p.ms_decode
        ));
    }
    std::fs::write(prefix.with_extension("csv"), csv)?;
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_vec_pretty(points)?,
    )?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for p in points {
        match series.iter_mut().find(|(n, _)| *n == p.image) {
            Some((_, v)) => v.push((p.bpp, p.wpsnr_db)),
            None => series.push((p.image.clone(), vec![(p.bpp, p.wpsnr_db)])),
        }
    }
    draw_rd_plot(&series, &prefix.with_extension("png"))
}

#[derive(Debug, Clone)]
pub struct ComplexityReport {
    pub macs: u128,
    pub kmacs_per_pixel: f64,
    pub param_count: usize,
    pub per_layer: Vec<(String, u128)>,
}

struct MacWalk {
    per_layer: Vec<(String, u128)>,
    total: u128,
}

impl MacWalk {
    fn new() -> Self {
        MacWalk {
            per_layer: Vec::new(),
            total: 0,
        }
    }

    fn add(&mut self, name: String, macs: u128) {
        self.total += macs;
        self.per_layer.push((name, macs));
    }

    fn conv(&mut self, name: &str, c: &Conv2d, h: usize, w: usize) -> (usize, usize) {
        let k = c.kernel();
        let ho = conv_out_size(h, k, c.stride, c.pad);
        let wo = conv_out_size(w, k, c.stride, c.pad);
        self.add(
            name.to_string(),
            (c.out_channels() * c.in_channels() * k * k * ho * wo) as u128,
        );
        (ho, wo)
    }

    fn conv_t(&mut self, name: &str, c: &ConvT2d, h: usize, w: usize) -> (usize, usize) {
        let k = c.kernel();
        self.add(
            name.to_string(),
            (c.in_channels() * c.out_channels() * k * k * h * w) as u128,
        );
        ((h - 1) * c.stride + k, (w - 1) * c.stride + k)
    }

    /// Mirrors `Stb::forward` exactly: resample, prompt convs, then per layer
    /// the window-padded attention and the MLP on unpadded tokens.
    fn stb(
        &mut self,
        name: &str,
        stb: &Stb,
        h: usize,
        w: usize,
        prompt_dims: Option<(usize, usize)>,
    ) -> (usize, usize) {
        let (gh, gw) = match &stb.resample {
            Resample::Down(c) => self.conv(&format!("{name}.resample"), c, h, w),
            Resample::Up(c) => self.conv_t(&format!("{name}.resample"), c, h, w),
        };
        let prompted = prompt_dims.is_some() && !stb.prompt_convs.is_empty();
        if let Some((ph, pw)) = prompt_dims {
            for (i, conv) in stb.prompt_convs.iter().enumerate() {
                self.conv(&format!("{name}.prompt_conv{i}"), conv, ph, pw);
            }
        }
        let window = effective_window(gh.min(gw), stb.window);
        let padded_h = gh.div_ceil(window) * window;
        let padded_w = gw.div_ceil(window) * window;
        let n_win = (padded_h / window) * (padded_w / window);
        let s_i = window * window;
        let s_p = if prompted { (window / 2) * (window / 2) } else { 0 };
        let s_kv = s_i + s_p;
        for (i, layer) in stb.layers.iter().enumerate() {
            let d = layer.wq.w.shape()[0];
            let hidden = layer.mlp.fc1.w.shape()[1];
            let proj = n_win * (s_i + 2 * s_kv + s_i) * d * d;
            let attn = 2 * n_win * s_i * s_kv * d;
            let mlp = gh * gw * d * hidden * 2;
            self.add(format!("{name}.layer{i}.proj"), proj as u128);
            self.add(format!("{name}.layer{i}.attn"), attn as u128);
            self.add(format!("{name}.layer{i}.mlp"), mlp as u128);
        }
        (gh, gw)
    }
}

/// Closed-form MAC count of a full conditional encode+decode network pass
/// (entropy coding excluded), per layer. Sizes are padded to the codec grid
/// first, exactly as the encoder pads, and the per-pixel figure is
/// normalized by the padded extent.
pub fn profile_complexity(codec: &Codec, h: usize, w: usize) -> Result<ComplexityReport> {
    let mult = crate::codec::GRID_MULTIPLE;
    let (h, w) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
    let mut walk = MacWalk::new();

    // p_a pyramid
    let mut dims = vec![(h, w)];
    let (mut ph, mut pw) = walk.conv("p_a.conv_in", &codec.p_a.conv_in, h, w);
    for (i, c) in codec.p_a.downs.iter().enumerate() {
        dims.push((ph, pw));
        let next = walk.conv(&format!("p_a.down{i}"), c, ph, pw);
        ph = next.0;
        pw = next.1;
        let _ = &dims;
    }
    // pyramid entries sit at stage input resolutions [h, h/2, h/4, h/8]
    let enc_prompt_dims = [(h, w), (h / 2, w / 2), (h / 4, w / 4), (h / 8, w / 8)];

    let (mut gh, mut gw) = (h, w);
    for (i, stb) in codec.g_a.iter().enumerate() {
        let next = walk.stb(&format!("g_a.{i}"), stb, gh, gw, Some(enc_prompt_dims[i]));
        gh = next.0;
        gw = next.1;
    }
    let (mut zh, mut zw) = (gh, gw);
    for (i, stb) in codec.h_a.iter().enumerate() {
        let next = walk.stb(&format!("h_a.{i}"), stb, zh, zw, None);
        zh = next.0;
        zw = next.1;
    }
    let (mut hh, mut hw_) = (zh, zw);
    for (i, stb) in codec.h_s.iter().enumerate() {
        let next = walk.stb(&format!("h_s.{i}"), stb, hh, hw_, None);
        hh = next.0;
        hw_ = next.1;
    }
    walk.conv("h_s.out", &codec.h_s_out, hh, hw_);

    // p_s pyramid from the latent grid up
    let (yh, yw) = (h / 16, w / 16);
    let (mut sh, mut sw) = walk.conv("p_s.conv_in", &codec.p_s.conv_in, yh, yw);
    for (i, c) in codec.p_s.ups.iter().enumerate() {
        let next = walk.conv_t(&format!("p_s.up{i}"), c, sh, sw);
        sh = next.0;
        sw = next.1;
    }
    let dec_prompt_dims = [
        (yh, yw),
        (yh * 2, yw * 2),
        (yh * 4, yw * 4),
        (yh * 8, yw * 8),
    ];
    let (mut dh, mut dw) = (yh, yw);
    for (i, stb) in codec.g_s.iter().enumerate() {
        let next = walk.stb(&format!("g_s.{i}"), stb, dh, dw, Some(dec_prompt_dims[i]));
        dh = next.0;
        dw = next.1;
    }
    walk.conv("g_s.out", &codec.g_s_out, dh, dw);

    Ok(ComplexityReport {
        macs: walk.total,
        kmacs_per_pixel: walk.total as f64 / (h * w) as f64 / 1000.0,
        param_count: codec.param_count(),
        per_layer: walk.per_layer,
    })
}

/// Instrumented MAC count: runs the same encode+decode network pass with the
/// engine's multiply-accumulate counter enabled.
pub fn measure_macs(codec: &Codec, h: usize, w: usize) -> Result<u128> {
    let mult = crate::codec::GRID_MULTIPLE;
    let (h, w) = (h.div_ceil(mult) * mult, w.div_ceil(mult) * mult);
    let cond = ConditioningInput::new(
        Tensor::full(&[3, h, w], 0.5),
        Tensor::full(&[1, h, w], 1.0),
        0.5,
    )?;
    no_grad(|| {
        macs::start();
        let bundle = codec.analyze(&cond, QuantMode::Eval, None, true)?;
        let _ = codec.synthesize(&bundle.y_hat, &cond.lambda_small(), QuantMode::Eval, true)?;
        Ok(macs::stop())
    })
}

/// Per-token attention mass given to prompt columns in one encoder P-STB:
/// softmax weights summed over the window's prompt tokens, averaged over
/// heads and the block's layers, reassembled onto the stage grid. Values lie
/// in [0, 1].
pub fn prompt_attention_map(
    codec: &Codec,
    cond: &ConditioningInput,
    stage_index: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    if stage_index >= 4 {
        return Err(Error::NoPrompts(stage_index));
    }
    let mut capture: [Vec<AttnRecord>; 4] = Default::default();
    no_grad(|| -> Result<()> {
        codec.analyze_captured(cond, QuantMode::Eval, None, true, Some(&mut capture))?;
        Ok(())
    })?;
    let records = &capture[stage_index];
    if records.is_empty() || records.iter().all(|r| r.s_kv == r.s_i) {
        return Err(Error::NoPrompts(stage_index));
    }
    let (gh, gw) = records[0].orig_grid;
    let mut acc = vec![0.0f64; gh * gw];
    let mut layers = 0usize;
    for rec in records {
        if rec.s_kv == rec.s_i {
            continue;
        }
        layers += 1;
        let lay = rec.layout;
        let (nwy, nwx) = lay.windows();
        let win = lay.window;
        for wy in 0..nwy {
            for wx in 0..nwx {
                let wi = wy * nwx + wx;
                for ty in 0..win {
                    for tx in 0..win {
                        let tok = ty * win + tx;
                        let mut mass = 0.0;
                        for head in 0..rec.heads {
                            let base = ((wi * rec.heads + head) * rec.s_i + tok) * rec.s_kv;
                            for p in rec.s_i..rec.s_kv {
                                mass += rec.probs[base + p];
                            }
                        }
                        mass /= rec.heads as f64;
                        // invert the cyclic roll back onto the padded grid
                        let ry = (wy * win + ty + lay.shift) % lay.height;
                        let rx = (wx * win + tx + lay.shift) % lay.width;
                        if ry < gh && rx < gw {
                            acc[ry * gw + rx] += mass;
                        }
                    }
                }
            }
        }
    }
    for v in acc.iter_mut() {
        *v /= layers as f64;
    }
    Ok((acc, gh, gw))
}

/// Writes a heat map as an 8-bit grayscale PNG scaled by 255.
pub fn save_attention_map(path: &Path, map: &[f64], h: usize, w: usize) -> Result<()> {
    save_gray_png(path, map, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::rng::Prng;

    #[test]
    fn weighted_psnr_hand_examples() {
        // identical images cap at 100 dB
        let x = Planes::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let spec = WeightedPsnrSpec {
            alpha: 1.0,
            beta: 1.0,
            roi: vec![true, false],
        };
        assert_eq!(weighted_psnr(&x, &x, &spec).unwrap(), 100.0);

        // alpha=1, beta=0 with errors only outside the ROI still caps
        let y = Planes::new(1, 1, 2, vec![0.3, 0.2]).unwrap();
        let spec_roi_only = WeightedPsnrSpec {
            alpha: 1.0,
            beta: 0.0,
            roi: vec![true, false],
        };
        assert_eq!(weighted_psnr(&x, &y, &spec_roi_only).unwrap(), 100.0);

        // 1x2 toy: errors (0.1, 0.5), roi (1, 0), weights (0.8, 0.2)
        let recon = Planes::new(1, 1, 2, vec![0.3 - 0.1, 0.7 - 0.5]).unwrap();
        let spec = WeightedPsnrSpec {
            alpha: 0.8,
            beta: 0.2,
            roi: vec![true, false],
        };
        let db = weighted_psnr(&x, &recon, &spec).unwrap();
        let expected = -10.0 * (0.058f64).log10();
        assert!((db - expected).abs() < 1e-9);
        assert!((db - 12.366).abs() < 1e-3, "db={db}");
    }

    #[test]
    fn equal_weights_reduce_to_plain_psnr() {
        let mut rng = Prng::new(3);
        let n = 48;
        let a: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let b: Vec<f64> = (0..3 * n).map(|_| rng.f64()).collect();
        let x = Planes::new(3, 6, 8, a.clone()).unwrap();
        let y = Planes::new(3, 6, 8, b.clone()).unwrap();
        let roi: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let spec = WeightedPsnrSpec {
            alpha: 0.4,
            beta: 0.4,
            roi,
        };
        let weighted = weighted_psnr(&x, &y, &spec).unwrap();
        let mse: f64 =
            a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (3 * n) as f64;
        let plain = -10.0 * mse.log10();
        assert!((weighted - plain).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_are_rejected() {
        let x = Planes::new(1, 1, 1, vec![0.5]).unwrap();
        let spec = WeightedPsnrSpec {
            alpha: 0.0,
            beta: 0.0,
            roi: vec![true],
        };
        assert!(weighted_psnr(&x, &x, &spec).is_err());
    }

    #[test]
    fn profiler_conv_hand_example() {
        // 3->8 channels, k=3, stride 1, 16x16 input: 55,296 MACs = 216/px
        let mut rng = Prng::new(1);
        let conv = Conv2d::new(&mut rng, 3, 8, 3, 1, 1);
        let mut walk = MacWalk::new();
        walk.conv("conv", &conv, 16, 16);
        assert_eq!(walk.total, 55_296);
        assert_eq!(walk.total / (16 * 16), 216);

        // instrumented agreement on the same conv
        let x = Tensor::zeros(&[3, 16, 16]);
        macs::start();
        let _ = conv.forward(&x);
        assert_eq!(macs::stop(), 55_296);
    }

    #[test]
    fn attention_layer_parameter_count() {
        // 4 projections with biases at d = 8: 4 * (64 + 8) = 288
        let mut rng = Prng::new(2);
        let layer = crate::attention::SwinLayer::new(&mut rng, 8, 1, 4);
        let mut params = Vec::new();
        layer.collect_params("l", &mut params);
        let proj_params: usize = params
            .iter()
            .filter(|(n, _)| ["l.wq", "l.wk", "l.wv", "l.proj"].iter().any(|p| n.starts_with(p)))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(proj_params, 288);
    }

    #[test]
    fn closed_form_matches_instrumented_exactly() {
        let codec = Codec::new(CodecConfig::toy(), 11).unwrap();
        let report = profile_complexity(&codec, 64, 64).unwrap();
        let measured = measure_macs(&codec, 64, 64).unwrap();
        assert_eq!(report.macs, measured, "closed-form vs instrumented");
        assert!(report.param_count > 0);
    }

    #[test]
    fn macs_per_pixel_resolution_invariance() {
        // window sizes saturate at the config window for both sizes, so the
        // per-pixel count is exactly resolution-independent
        let codec = Codec::new(CodecConfig::toy(), 12).unwrap();
        let a = profile_complexity(&codec, 256, 256).unwrap();
        let b = profile_complexity(&codec, 512, 512).unwrap();
        assert!(
            (a.kmacs_per_pixel - b.kmacs_per_pixel).abs() < 1e-9,
            "{} vs {}",
            a.kmacs_per_pixel,
            b.kmacs_per_pixel
        );
    }

    #[test]
    fn attention_map_uniform_scores_value() {
        // zero queries and zero bias tables make the softmax uniform:
        // prompt mass = S_P / (S_I + S_P) = 4/20 at w = 4
        let codec = Codec::new(CodecConfig::toy(), 13).unwrap();
        for stb in &codec.g_a {
            for layer in &stb.layers {
                layer.wq.w.set_data(&vec![0.0; layer.wq.w.numel()]);
                layer.wq.b.set_data(&vec![0.0; layer.wq.b.numel()]);
                layer.bias_img.set_data(&vec![0.0; layer.bias_img.numel()]);
                layer.bias_prompt.set_data(&vec![0.0; layer.bias_prompt.numel()]);
            }
        }
        let mut rng = Prng::new(14);
        let img: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.f64()).collect();
        let cond = ConditioningInput::new(
            Tensor::leaf(&[3, 64, 64], img),
            Tensor::full(&[1, 64, 64], 1.0),
            0.5,
        )
        .unwrap();
        let (map, gh, gw) = prompt_attention_map(&codec, &cond, 0).unwrap();
        assert_eq!((gh, gw), (32, 32));
        for &v in &map {
            assert!((v - 0.2).abs() < 1e-9, "expected uniform 0.2, got {v}");
        }
    }

    #[test]
    fn rd_sweep_measures_real_bitstreams_and_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let codec = Codec::new(CodecConfig::toy(), 21).unwrap();
        let mut rng = Prng::new(22);
        let images = vec![
            ("a".to_string(), crate::data::synth_image(&mut rng, 64, 64)),
            ("b".to_string(), crate::data::synth_image(&mut rng, 72, 48)),
        ];
        let prefix = dir.path().join("report");
        let points = rd_sweep(
            &codec,
            &images,
            &SweepMasks::UniformOnes,
            &[0.2, 0.8],
            1.0,
            0.0,
            Some(&prefix),
        )
        .unwrap();
        assert_eq!(points.len(), 4);
        for p in &points {
            assert!(p.bpp > 0.0);
            assert!(p.wpsnr_db.is_finite());
            let hw = if p.image == "a" { 64 * 64 } else { 72 * 48 };
            assert!((p.bpp - p.bytes as f64 * 8.0 / hw as f64).abs() < 1e-12);
        }
        for ext in ["csv", "json", "png"] {
            assert!(prefix.with_extension(ext).exists());
        }
        let json = std::fs::read_to_string(prefix.with_extension("json")).unwrap();
        let parsed: Vec<RdPoint> = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed.len(), 4);
    }

    #[test]
    fn roi_sub_sweep_emits_the_four_protocol_points() {
        let codec = Codec::new(CodecConfig::toy(), 23).unwrap();
        let mut rng = Prng::new(24);
        let image = crate::data::synth_image(&mut rng, 64, 64);
        let region: Vec<bool> = (0..64 * 64)
            .map(|i| (i / 64 >= 16 && i / 64 < 48) && (i % 64 >= 16 && i % 64 < 48))
            .collect();
        let points = roi_value_sub_sweep(
            &codec,
            "img",
            &image,
            &region,
            0.5,
            &[0.25, 0.5, 0.75, 1.0],
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(points.len(), 4);
        for (p, v) in points.iter().zip([0.25, 0.5, 0.75, 1.0]) {
            assert_eq!(p.image, format!("img@roi={v}"));
            assert_eq!(p.m_lambda, 0.5);
            assert!(p.bpp > 0.0);
        }
    }

    #[test]
    fn attention_map_bounds_and_no_prompt_error() {
        let codec = Codec::new(CodecConfig::toy(), 15).unwrap();
        let mut rng = Prng::new(16);
        let img: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.f64()).collect();
        let mask: Vec<f64> = (0..64 * 64).map(|_| rng.f64()).collect();
        let cond = ConditioningInput::new(
            Tensor::leaf(&[3, 64, 64], img),
            Tensor::leaf(&[1, 64, 64], mask),
            0.8,
        )
        .unwrap();
        for stage in 0..4 {
            let (map, _, _) = prompt_attention_map(&codec, &cond, stage).unwrap();
            assert!(map.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(matches!(
            prompt_attention_map(&codec, &cond, 7),
            Err(Error::NoPrompts(7))
        ));
    }
}
