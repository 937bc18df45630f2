//! Dependency-free rate-distortion plots: polylines per image on a white
//! canvas with tick labels from a tiny 5x7 bitmap font, written as PNG.

use std::path::Path;

use crate::error::Result;
use crate::imageio::write_png;

const GLYPH_W: usize = 5;

fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        'b' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'd' => [0x01, 0x01, 0x0F, 0x11, 0x11, 0x11, 0x0F],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        '=' => [0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00, 0x00],
        _ => [0; 7],
    }
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    pub fn set(&mut self, x: isize, y: isize, color: [u8; 3]) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    pub fn line(&mut self, x0: isize, y0: isize, x1: isize, y1: isize, color: [u8; 3]) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn marker(&mut self, x: isize, y: isize, color: [u8; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.set(x + dx, y + dy, color);
            }
        }
    }

    pub fn text(&mut self, x: isize, y: isize, s: &str, color: [u8; 3]) {
        for (i, c) in s.chars().enumerate() {
            let g = glyph(c);
            for (gy, row) in g.iter().enumerate() {
                for gx in 0..GLYPH_W {
                    if row >> (GLYPH_W - 1 - gx) & 1 == 1 {
                        self.set(x + (i * (GLYPH_W + 1) + gx) as isize, y + gy as isize, color);
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_png(path, &self.rgb, self.width, self.height, png::ColorType::Rgb)
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [196, 30, 58],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
    [140, 86, 75],
    [127, 127, 127],
];

/// One polyline per named series of `(bpp, wpsnr_db)` points.
pub fn draw_rd_plot(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let (w, h) = (720usize, 480usize);
    let (ml, mr, mt, mb) = (70isize, 20isize, 20isize, 50isize);
    let mut canvas = Canvas::new(w, h);

    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let (mut x0, mut x1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad_x = (x1 - x0) * 0.05;
    let pad_y = (y1 - y0) * 0.05;
    x0 -= pad_x;
    x1 += pad_x;
    y0 -= pad_y;
    y1 += pad_y;

    let px = |bx: f64| -> isize {
        ml + (((bx - x0) / (x1 - x0)) * (w as f64 - (ml + mr) as f64)) as isize
    };
    let py = |by: f64| -> isize {
        (h as isize - mb) - (((by - y0) / (y1 - y0)) * (h as f64 - (mt + mb) as f64)) as isize
    };

    let black = [0, 0, 0];
    let gray = [200, 200, 200];
    canvas.line(ml, mt, ml, h as isize - mb, black);
    canvas.line(ml, h as isize - mb, w as isize - mr, h as isize - mb, black);
    for i in 0..=5 {
        let tx = x0 + (x1 - x0) * i as f64 / 5.0;
        let ty = y0 + (y1 - y0) * i as f64 / 5.0;
        let gx = px(tx);
        let gy = py(ty);
        canvas.line(gx, mt, gx, h as isize - mb, gray);
        canvas.line(ml, gy, w as isize - mr, gy, gray);
        canvas.line(gx, h as isize - mb, gx, h as isize - mb + 4, black);
        canvas.line(ml - 4, gy, ml, gy, black);
        canvas.text(gx - 12, h as isize - mb + 8, &format!("{tx:.2}"), black);
        canvas.text(ml - 42, gy - 3, &format!("{ty:.1}"), black);
    }
    canvas.text((w / 2) as isize - 8, h as isize - 18, "bpp", black);
    canvas.text(8, mt, "dB", black);

    for (si, (_, points)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts = points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for wpair in pts.windows(2) {
            canvas.line(px(wpair[0].0), py(wpair[0].1), px(wpair[1].0), py(wpair[1].1), color);
        }
        for p in &pts {
            canvas.marker(px(p.0), py(p.1), color);
        }
    }
    canvas.save(path)
}
