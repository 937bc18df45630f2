//! The decodable container: a 10-byte header followed by the coded
//! hyper-latent and latent chunks.
//!
//! Header: magic `PICR`, version 1, original height and width as big-endian
//! u16, the 8-bit quantized rate parameter, one reserved zero byte. The rate
//! parameter is quantized BEFORE conditioning so encoder and decoder see the
//! same lambda plane. The ROI mask never enters the stream; spatial quality
//! reaches the decoder only through the latent itself.

use std::path::Path;
use std::time::Instant;

use crate::autodiff::{no_grad, Tensor};
use crate::checkpoint;
use crate::codec::{Codec, ConditioningInput, GRID_MULTIPLE};
use crate::conditioning::{generate_mask, MaskSpec};
use crate::entropy::{
    build_factorized_tables, build_gaussian_tables, range_decode, range_encode, read_chunk,
    round_half_away, write_chunk, QuantMode, LIKELIHOOD_FLOOR,
};
use crate::error::{Error, Result};
use crate::imageio::{load_gray, load_image, save_rgb_png, Planes};

pub const MAGIC: [u8; 4] = *b"PICR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    /// original (pre-padding) dimensions
    pub height: u16,
    pub width: u16,
    /// quantized rate parameter; both sides condition on `m_q / 255`
    pub m_q: u8,
}

impl Header {
    pub fn m_lambda(&self) -> f64 {
        self.m_q as f64 / 255.0
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.push(self.m_q);
    }

    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedStream {
                expected: HEADER_LEN - bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes[4] != VERSION {
            return Err(Error::BadVersion(bytes[4]));
        }
        Ok(Header {
            height: u16::from_be_bytes([bytes[5], bytes[6]]),
            width: u16::from_be_bytes([bytes[7], bytes[8]]),
            m_q: bytes[9],
        })
    }
}

fn pad_up(n: usize) -> usize {
    n.div_ceil(GRID_MULTIPLE) * GRID_MULTIPLE
}

pub struct EncodeResult {
    pub bytes: Vec<u8>,
    /// encoder-side quantized latent (padded grid), for integration audits
    pub y_hat: Vec<f64>,
    pub estimated_bpp: f64,
    pub actual_bpp: f64,
}

/// Runs the full encoder: pad, analyze, entropy-code, frame. The rate
/// estimate uses the snapped per-element scales, i.e. the distribution the
/// coder actually uses, against the original pixel count.
pub fn encode_to_bytes(codec: &Codec, image: &Planes, mask: &Planes, m: f64) -> Result<EncodeResult> {
    if image.channels != 3 {
        return Err(Error::Shape("encoder expects an RGB image".into()));
    }
    if mask.channels != 1 || mask.height != image.height || mask.width != image.width {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height, mask.width, image.height, image.width
        )));
    }
    if image.height == 0 || image.width == 0 || image.height > u16::MAX as usize || image.width > u16::MAX as usize {
        return Err(Error::Shape("image dimensions must fit in 16 bits".into()));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Range(format!("rate parameter {m} outside [0, 1]")));
    }
    let m_q = round_half_away(m * 255.0) as u8;
    let m_used = m_q as f64 / 255.0;
    let (h, w) = (image.height, image.width);
    let (ph, pw) = (pad_up(h), pad_up(w));
    let padded = image.mirror_pad(ph, pw);
    let mask_p = mask.mirror_pad(ph, pw);

    no_grad(|| {
        let cond = ConditioningInput::new(padded.tensor(), mask_p.tensor(), m_used)?;
        let bundle = codec.analyze(&cond, QuantMode::Eval, None, true)?;

        // hyper-latent symbols, one context per channel
        let z = bundle.z_hat.data();
        let c_z = bundle.z_hat.shape()[0];
        let z_spatial = bundle.z_hat.numel() / c_z;
        let z_syms: Vec<i64> = z.iter().map(|&v| v as i64).collect();
        let z_ctxs: Vec<usize> = (0..z.len()).map(|i| i / z_spatial).collect();
        let fact_tables = build_factorized_tables(&codec.prior);
        let z_payload = range_encode(&z_syms, &fact_tables, &z_ctxs);

        // latent residual symbols against snapped scales
        let y_hat = bundle.y_hat.data();
        let mu = bundle.mu.data();
        let sigma = bundle.sigma.data();
        let y_syms: Vec<i64> = y_hat
            .iter()
            .zip(mu.iter())
            .map(|(&yh, &m)| round_half_away(yh - m) as i64)
            .collect();
        let y_ctxs: Vec<usize> = sigma.iter().map(|&s| codec.gaussian.snap_index(s)).collect();
        let gauss_tables = build_gaussian_tables(&codec.gaussian);
        let y_payload = range_encode(&y_syms, &gauss_tables, &y_ctxs);

        let mut bytes = Vec::with_capacity(HEADER_LEN + z_payload.len() + y_payload.len() + 12);
        Header {
            height: h as u16,
            width: w as u16,
            m_q,
        }
        .write(&mut bytes);
        write_chunk(&mut bytes, &z_payload);
        write_chunk(&mut bytes, &y_payload);

        let mut bits = 0.0;
        for (i, &r) in y_syms.iter().enumerate() {
            let snapped = codec.gaussian.scales[y_ctxs[i]];
            let p = codec.gaussian.bin_probability(r as f64, snapped);
            bits += -p.max(LIKELIHOOD_FLOOR).log2();
        }
        for (i, &zv) in z_syms.iter().enumerate() {
            let p = codec.prior.bin_probability(z_ctxs[i], zv as f64);
            bits += -p.max(LIKELIHOOD_FLOOR).log2();
        }
        let pixels = (h * w) as f64;
        Ok(EncodeResult {
            actual_bpp: bytes.len() as f64 * 8.0 / pixels,
            estimated_bpp: bits / pixels,
            y_hat: y_hat.clone(),
            bytes,
        })
    })
}

pub struct DecodeResult {
    pub image: Planes,
    pub header: Header,
    /// decoder-side quantized latent (padded grid)
    pub y_hat: Vec<f64>,
}

/// Exact inverse of [`encode_to_bytes`] given the same checkpoint.
pub fn decode_from_bytes(codec: &Codec, bytes: &[u8]) -> Result<DecodeResult> {
    let header = Header::parse(bytes)?;
    let (h, w) = (header.height as usize, header.width as usize);
    if h == 0 || w == 0 {
        return Err(Error::CorruptStream("zero image dimensions".into()));
    }
    let (ph, pw) = (pad_up(h), pad_up(w));
    let c_z = codec.config.hyper_channels;
    let c_y = codec.config.latent_channels;
    let (zh, zw) = (ph / 64, pw / 64);
    let (yh, yw) = (ph / 16, pw / 16);

    let (z_payload, off) = read_chunk(bytes, HEADER_LEN)?;
    let (y_payload, _end) = read_chunk(bytes, off)?;

    no_grad(|| {
        let z_ctxs: Vec<usize> = (0..c_z * zh * zw).map(|i| i / (zh * zw)).collect();
        let fact_tables = build_factorized_tables(&codec.prior);
        let z_syms = range_decode(z_payload, &fact_tables, &z_ctxs, z_ctxs.len())?;
        let z_hat = Tensor::leaf(&[c_z, zh, zw], z_syms.iter().map(|&v| v as f64).collect());

        // reproduce the entropy parameters from the side information
        let mut hs = z_hat.clone();
        for stb in &codec.h_s {
            hs = stb.forward(&hs, None, None)?;
        }
        let params = codec.h_s_out.forward(&hs);
        let mu = crate::codec::slice_channels(&params, 0, c_y);
        let sigma = crate::codec::slice_channels(&params, c_y, 2 * c_y)
            .softplus()
            .add_scalar(crate::entropy::SIGMA_MIN);

        let y_ctxs: Vec<usize> = sigma
            .data()
            .iter()
            .map(|&s| codec.gaussian.snap_index(s))
            .collect();
        let gauss_tables = build_gaussian_tables(&codec.gaussian);
        let y_syms = range_decode(y_payload, &gauss_tables, &y_ctxs, y_ctxs.len())?;
        let y_hat_vec: Vec<f64> = y_syms
            .iter()
            .zip(mu.data().iter())
            .map(|(&r, &m)| r as f64 + m)
            .collect();
        let y_hat = Tensor::leaf(&[c_y, yh, yw], y_hat_vec.clone());

        let lambda_small = Tensor::full(&[1, yh, yw], header.m_lambda());
        let recon = codec.synthesize(&y_hat, &lambda_small, QuantMode::Eval, true)?;
        let cropped = crate::attention::crop_chw(&recon, h, w);
        Ok(DecodeResult {
            image: Planes::from_tensor(&cropped),
            header,
            y_hat: y_hat_vec,
        })
    })
}

/// Mask source for the encode entry points.
pub enum MaskInput {
    /// all-ones mask (pure variable-rate coding)
    UniformOnes,
    /// 8-bit grayscale image, nearest-resized to the input when needed
    Path(std::path::PathBuf),
    Spec(MaskSpec),
}

impl MaskInput {
    pub fn realize(&self, h: usize, w: usize) -> Result<Planes> {
        Ok(match self {
            MaskInput::UniformOnes => Planes::new(1, h, w, vec![1.0; h * w])?,
            MaskInput::Path(p) => {
                let m = load_gray(p)?;
                if m.height != h || m.width != w {
                    m.resize_nearest(h, w)
                } else {
                    m
                }
            }
            MaskInput::Spec(spec) => Planes::from_tensor(&generate_mask(spec, h, w)),
        })
    }
}

pub struct FileEncodeStats {
    pub bytes_written: usize,
    pub estimated_bpp: f64,
    pub actual_bpp: f64,
    pub encode_ms: f64,
}

/// Encode an image file to a bitstream file. Returns the byte count written
/// plus the estimated-vs-actual rate report.
pub fn encode_file(
    image_path: &Path,
    mask: &MaskInput,
    m: f64,
    checkpoint_path: &Path,
    out_path: &Path,
) -> Result<FileEncodeStats> {
    let codec = checkpoint::load(checkpoint_path)?;
    let image = load_image(image_path)?;
    let mask = mask.realize(image.height, image.width)?;
    let start = Instant::now();
    let res = encode_to_bytes(&codec, &image, &mask, m)?;
    let encode_ms = start.elapsed().as_secs_f64() * 1e3;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out_path, &res.bytes)?;
    Ok(FileEncodeStats {
        bytes_written: res.bytes.len(),
        estimated_bpp: res.estimated_bpp,
        actual_bpp: res.actual_bpp,
        encode_ms,
    })
}

/// Decode a bitstream file to an 8-bit RGB image file. No output is written
/// unless the whole stream decodes.
pub fn decode_file(in_path: &Path, checkpoint_path: &Path, out_image_path: &Path) -> Result<()> {
    let codec = checkpoint::load(checkpoint_path)?;
    let bytes = std::fs::read(in_path)?;
    let res = decode_from_bytes(&codec, &bytes)?;
    save_rgb_png(out_image_path, &res.image)
}
