//! Synthetic image synthesis for desk-scale training runs: layered gradients,
//! value-noise octaves, soft shapes and stripe textures. Nothing here feeds
//! the codec at test time except as ordinary image files.

use std::path::Path;

use crate::error::Result;
use crate::imageio::{save_rgb_png, Planes};
use crate::rng::Prng;

/// Bilinearly upsampled white noise on a coarse grid.
fn value_noise(rng: &mut Prng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h.div_ceil(cell) + 1;
    let gw = w.div_ceil(cell) + 1;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.f64()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y as f64 / cell as f64;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / cell as f64;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f64;
            let v00 = grid[y0 * gw + x0];
            let v01 = grid[y0 * gw + x0 + 1];
            let v10 = grid[(y0 + 1) * gw + x0];
            let v11 = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = v00 * (1.0 - fy) * (1.0 - fx)
                + v01 * (1.0 - fy) * fx
                + v10 * fy * (1.0 - fx)
                + v11 * fy * fx;
        }
    }
    out
}

/// One random structured image: gradient base, noise octaves, a few soft
/// shapes, occasional stripes.
pub fn synth_image(rng: &mut Prng, h: usize, w: usize) -> Planes {
    let mut data = vec![0.0; 3 * h * w];
    // gradient base between two random colors along a random direction
    let c0: [f64; 3] = [rng.f64(), rng.f64(), rng.f64()];
    let c1: [f64; 3] = [rng.f64(), rng.f64(), rng.f64()];
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    for y in 0..h {
        for x in 0..w {
            let t = 0.5
                + 0.5 * (dy * (y as f64 / h as f64 - 0.5) + dx * (x as f64 / w as f64 - 0.5))
                    / std::f64::consts::FRAC_1_SQRT_2;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * h * w + y * w + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }
    // noise octaves, partially correlated across channels
    for &cell in &[h.max(w) / 4, h.max(w) / 8, 4] {
        let cell = cell.max(2);
        let amp = 0.25 * cell as f64 / h.max(w) as f64 + 0.05;
        let shared = value_noise(rng, h, w, cell);
        for c in 0..3 {
            let own = value_noise(rng, h, w, cell);
            for i in 0..h * w {
                data[c * h * w + i] += amp * (0.7 * shared[i] + 0.3 * own[i] - 0.5);
            }
        }
    }
    // soft shapes
    let shapes = 1 + rng.below(4);
    for _ in 0..shapes {
        let cy = rng.uniform(0.1, 0.9) * h as f64;
        let cx = rng.uniform(0.1, 0.9) * w as f64;
        let ry = rng.uniform(0.08, 0.35) * h as f64;
        let rx = rng.uniform(0.08, 0.35) * w as f64;
        let color: [f64; 3] = [rng.f64(), rng.f64(), rng.f64()];
        let alpha = rng.uniform(0.4, 0.95);
        let soft = rng.uniform(0.05, 0.5);
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                if d < 1.0 + soft {
                    let t = ((1.0 + soft - d) / soft).clamp(0.0, 1.0) * alpha;
                    for c in 0..3 {
                        let i = c * h * w + y * w + x;
                        data[i] = data[i] * (1.0 - t) + color[c] * t;
                    }
                }
            }
        }
    }
    // stripes on one image in three
    if rng.below(3) == 0 {
        let freq = rng.uniform(0.05, 0.4);
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let amp = rng.uniform(0.05, 0.2);
        let vertical = rng.bool();
        for y in 0..h {
            for x in 0..w {
                let t = if vertical { x } else { y } as f64;
                let s = amp * (freq * t + phase).sin();
                for c in 0..3 {
                    data[c * h * w + y * w + x] += s;
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Planes {
        channels: 3,
        height: h,
        width: w,
        data,
    }
}

/// Writes `count` synthetic PNGs into `dir`.
pub fn write_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = Prng::with_stream(seed, 7);
    for i in 0..count {
        let img = synth_image(&mut rng, size, size);
        save_rgb_png(&dir.join(format!("synth_{i:04}.png")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_images_are_in_range_and_structured() {
        let mut rng = Prng::new(1);
        let img = synth_image(&mut rng, 64, 64);
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // not constant
        let mean = img.data.iter().sum::<f64>() / img.data.len() as f64;
        let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / img.data.len() as f64;
        assert!(var > 1e-4, "image is flat (var {var})");
    }

    #[test]
    fn dataset_writer_emits_files() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 32, 9).unwrap();
        let n = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(n, 3);
    }
}
