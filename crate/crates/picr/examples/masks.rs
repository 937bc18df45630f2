//! Renders the four ROI-mask families (uniform, gradient, rectangles, blobs)
//! at a few seeds each, as grayscale PNGs.
//!
//!   cargo run --release --example masks -- [out_dir]

use std::path::PathBuf;

use picr::conditioning::{generate_mask, MaskSpec};
use picr::imageio::save_gray_png;

fn main() -> picr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "masks_out".into()));
    std::fs::create_dir_all(&out)?;
    let (h, w) = (128, 128);
    for seed in 0..3u64 {
        let specs: [(&str, MaskSpec); 4] = [
            ("uniform", MaskSpec::Uniform { seed, value: None }),
            (
                "gradient",
                MaskSpec::Gradient {
                    seed,
                    horizontal: None,
                    from: None,
                    to: None,
                },
            ),
            (
                "rectangles",
                MaskSpec::Rectangles {
                    seed,
                    background: None,
                    rects: None,
                },
            ),
            (
                "blobs",
                MaskSpec::Blobs {
                    seed,
                    scale: None,
                    threshold: None,
                    softness: None,
                },
            ),
        ];
        for (name, spec) in specs {
            let mask = generate_mask(&spec, h, w);
            let path = out.join(format!("{name}_{seed}.png"));
            save_gray_png(&path, &mask.data(), h, w)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
