//! Rate-distortion sweep: encodes every image at a grid of rate parameters,
//! measures real file sizes and weighted PSNR, and writes CSV/JSON/plot
//! reports. Also demonstrates the local rate-variation protocol that holds
//! the rate parameter fixed while stepping the ROI mask value through
//! 0.25 / 0.5 / 0.75 / 1.
//!
//!   cargo run --release --example rd_sweep -- <ckpt> <image_dir> [report_prefix]

use std::path::PathBuf;

use picr::checkpoint;
use picr::evaluation::{binarize_mask, rd_sweep, roi_value_sub_sweep, SweepMasks};
use picr::training::ImageFolder;

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().expect("usage: rd_sweep <ckpt> <image_dir> [prefix]"));
    let images = PathBuf::from(args.next().expect("usage: rd_sweep <ckpt> <image_dir> [prefix]"));
    let prefix = PathBuf::from(args.next().unwrap_or_else(|| "rd_report".into()));

    let codec = checkpoint::load(&ckpt)?;
    let folder = ImageFolder::load(&images)?;
    let m_grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let points = rd_sweep(
        &codec,
        &folder.images,
        &SweepMasks::UniformOnes,
        &m_grid,
        1.0,
        0.0,
        Some(&prefix),
    )?;
    for p in &points {
        println!(
            "{:<12} m={:.1}  {:.4} bpp  {:.2} dB  ({} bytes)",
            p.image, p.m_lambda, p.bpp, p.wpsnr_db, p.bytes
        );
    }

    // ROI sub-sweep on the first image: a centered box as the region
    if let Some((name, image)) = folder.images.first() {
        let (h, w) = (image.height, image.width);
        let mut region = vec![0.0; h * w];
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                region[y * w + x] = 1.0;
            }
        }
        let points = roi_value_sub_sweep(
            &codec,
            name,
            image,
            &binarize_mask(&region),
            0.5,
            &[0.25, 0.5, 0.75, 1.0],
            1.0,
            0.0,
        )?;
        println!("\nroi-value sub-sweep at m=0.5 (centered box):");
        for p in &points {
            println!("  {:<20} {:.4} bpp  {:.2} dB", p.image, p.bpp, p.wpsnr_db);
        }
    }
    println!("\nreports: {}.csv / .json / .png", prefix.display());
    Ok(())
}
