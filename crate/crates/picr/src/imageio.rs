//! PNG and PPM image I/O on CHW float planes in [0, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// CHW, values in [0, 1]
    pub data: Vec<f64>,
}

impl Planes {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} samples do not fill {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Planes {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planes {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::leaf(&[self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Planes {
            channels: s[0],
            height: s[1],
            width: s[2],
            data: t.to_vec(),
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Top-left crop.
    pub fn crop(&self, h: usize, w: usize) -> Planes {
        assert!(h <= self.height && w <= self.width);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Planes {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    /// Crop at an offset.
    pub fn crop_at(&self, y0: usize, x0: usize, h: usize, w: usize) -> Planes {
        assert!(y0 + h <= self.height && x0 + w <= self.width);
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in 0..h {
                let row = (c * self.height + y0 + y) * self.width + x0;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Planes {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    /// Mirror-pads on the bottom/right to the target size (period 2n-2,
    /// degenerating to replication for extent 1).
    pub fn mirror_pad(&self, new_h: usize, new_w: usize) -> Planes {
        assert!(new_h >= self.height && new_w >= self.width);
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * n - 2;
            let t = i % period;
            if t < n {
                t
            } else {
                period - t
            }
        };
        let mut data = Vec::with_capacity(self.channels * new_h * new_w);
        for c in 0..self.channels {
            for y in 0..new_h {
                let sy = reflect(y, self.height);
                for x in 0..new_w {
                    let sx = reflect(x, self.width);
                    data.push(self.get(c, sy, sx));
                }
            }
        }
        Planes {
            channels: self.channels,
            height: new_h,
            width: new_w,
            data,
        }
    }

    /// Nearest-neighbor resize (mask alignment).
    pub fn resize_nearest(&self, new_h: usize, new_w: usize) -> Planes {
        let mut data = Vec::with_capacity(self.channels * new_h * new_w);
        for c in 0..self.channels {
            for y in 0..new_h {
                let sy = (y * self.height) / new_h;
                for x in 0..new_w {
                    let sx = (x * self.width) / new_w;
                    data.push(self.get(c, sy.min(self.height - 1), sx.min(self.width - 1)));
                }
            }
        }
        Planes {
            channels: self.channels,
            height: new_h,
            width: new_w,
            data,
        }
    }
}

fn u8_to_f64(b: u8) -> f64 {
    b as f64 / 255.0
}

/// 8-bit quantization of a [0, 1] sample, round half away from zero.
pub fn f64_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_png(path: &Path) -> Result<(Vec<u8>, png::ColorType, usize, usize)> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((buf, info.color_type, info.height as usize, info.width as usize))
}

fn interleaved_to_planes(buf: &[u8], samples: usize, keep: usize, h: usize, w: usize) -> Planes {
    let mut data = vec![0.0; keep * h * w];
    for (i, px) in buf.chunks_exact(samples).enumerate() {
        for c in 0..keep {
            data[c * h * w + i] = u8_to_f64(px[c.min(samples - 1)]);
        }
    }
    Planes {
        channels: keep,
        height: h,
        width: w,
        data,
    }
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "ppm" || e == "pgm" || e == "pnm"
    )
}

fn load_pnm(path: &Path) -> Result<Planes> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // magic, width, height, maxval with whitespace and # comments
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace()) {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    if fields.len() < 4 {
        return Err(Error::Image(format!("{}: malformed pnm header", path.display())));
    }
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => {
            return Err(Error::Image(format!(
                "{}: unsupported pnm magic {other} (want binary P5/P6)",
                path.display()
            )))
        }
    };
    let w: usize = fields[1].parse().map_err(|_| Error::Image("bad pnm width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| Error::Image("bad pnm height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| Error::Image("bad pnm maxval".into()))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("pnm maxval {maxval} unsupported")));
    }
    pos += 1; // single whitespace after maxval
    let need = channels * h * w;
    if bytes.len() < pos + need {
        return Err(Error::Image(format!(
            "{}: pnm payload short by {} bytes",
            path.display(),
            pos + need - bytes.len()
        )));
    }
    let raw = &bytes[pos..pos + need];
    let mut data = vec![0.0; need];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for c in 0..channels {
            data[c * h * w + i] = px[c] as f64 / maxval as f64;
        }
    }
    Ok(Planes {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Loads an RGB image from PNG or binary PPM/PGM. Grayscale inputs are
/// replicated to three channels; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Planes> {
    let p = if is_ppm(path) {
        load_pnm(path)?
    } else {
        let (buf, color, h, w) = decode_png(path)?;
        match color {
            png::ColorType::Rgb => interleaved_to_planes(&buf, 3, 3, h, w),
            png::ColorType::Rgba => interleaved_to_planes(&buf, 4, 3, h, w),
            png::ColorType::Grayscale => interleaved_to_planes(&buf, 1, 1, h, w),
            png::ColorType::GrayscaleAlpha => interleaved_to_planes(&buf, 2, 1, h, w),
            other => {
                return Err(Error::Image(format!(
                    "{}: unsupported png color type {other:?}",
                    path.display()
                )))
            }
        }
    };
    if p.channels == 3 {
        return Ok(p);
    }
    // replicate gray to rgb
    let mut data = Vec::with_capacity(3 * p.height * p.width);
    for _ in 0..3 {
        data.extend_from_slice(&p.data[..p.height * p.width]);
    }
    Planes::new(3, p.height, p.width, data)
}

/// Loads an 8-bit grayscale mask (values / 255); color inputs average to luma.
pub fn load_gray(path: &Path) -> Result<Planes> {
    let p = if is_ppm(path) {
        load_pnm(path)?
    } else {
        let (buf, color, h, w) = decode_png(path)?;
        match color {
            png::ColorType::Grayscale => interleaved_to_planes(&buf, 1, 1, h, w),
            png::ColorType::GrayscaleAlpha => interleaved_to_planes(&buf, 2, 1, h, w),
            png::ColorType::Rgb => interleaved_to_planes(&buf, 3, 3, h, w),
            png::ColorType::Rgba => interleaved_to_planes(&buf, 4, 3, h, w),
            other => {
                return Err(Error::Image(format!(
                    "{}: unsupported png color type {other:?}",
                    path.display()
                )))
            }
        }
    };
    if p.channels == 1 {
        return Ok(p);
    }
    let hw = p.height * p.width;
    let mut data = vec![0.0; hw];
    for (i, v) in data.iter_mut().enumerate() {
        *v = (0..p.channels).map(|c| p.data[c * hw + i]).sum::<f64>() / p.channels as f64;
    }
    Planes::new(1, p.height, p.width, data)
}

pub fn save_rgb_png(path: &Path, planes: &Planes) -> Result<()> {
    if planes.channels != 3 {
        return Err(Error::Shape(format!(
            "save_rgb_png wants 3 channels, got {}",
            planes.channels
        )));
    }
    let hw = planes.height * planes.width;
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            buf.push(f64_to_u8(planes.data[c * hw + i]));
        }
    }
    write_png(path, &buf, planes.width, planes.height, png::ColorType::Rgb)
}

pub fn save_gray_png(path: &Path, data: &[f64], height: usize, width: usize) -> Result<()> {
    if data.len() != height * width {
        return Err(Error::Shape("gray png data does not fill the grid".into()));
    }
    let buf: Vec<u8> = data.iter().map(|&v| f64_to_u8(v)).collect();
    write_png(path, &buf, width, height, png::ColorType::Grayscale)
}

pub(crate) fn write_png(
    path: &Path,
    buf: &[u8],
    width: usize,
    height: usize,
    color: png::ColorType,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(buf)?;
    Ok(())
}
