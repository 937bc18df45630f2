//! Extracts prompt-attention heat maps: for every image token, the softmax
//! mass its window's prompt tokens receive, per encoder P-STB, saved as
//! grayscale PNGs. On a trained model the early stages separate ROI from
//! non-ROI most clearly.
//!
//!   cargo run --release --example attention_maps -- <ckpt> <image> [mask.png] [out_dir]

use std::path::PathBuf;

use picr::autodiff::Tensor;
use picr::checkpoint;
use picr::codec::{Codec, CodecConfig, ConditioningInput};
use picr::conditioning::{generate_mask, MaskSpec};
use picr::data::synth_image;
use picr::evaluation::{prompt_attention_map, save_attention_map};
use picr::imageio::{load_gray, load_image};
use picr::rng::Prng;

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let codec = match args.next() {
        Some(p) => checkpoint::load(&PathBuf::from(p))?,
        None => Codec::new(CodecConfig::toy(), 1)?,
    };
    let image = match args.next() {
        Some(p) => load_image(&PathBuf::from(p))?,
        None => synth_image(&mut Prng::new(8), 128, 128),
    };
    let (h, w) = (image.height, image.width);
    let mask = match args.next() {
        Some(p) => load_gray(&PathBuf::from(p))?.resize_nearest(h, w).tensor(),
        None => generate_mask(
            &MaskSpec::Rectangles {
                seed: 2,
                background: Some(0.0),
                rects: None,
            },
            h,
            w,
        ),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "attention_out".into()));
    std::fs::create_dir_all(&out)?;

    // pad to the codec grid
    let ph = h.div_ceil(64) * 64;
    let pw = w.div_ceil(64) * 64;
    let padded = image.mirror_pad(ph, pw);
    let mask_planes = picr::imageio::Planes::from_tensor(&mask).mirror_pad(ph, pw);
    let cond = ConditioningInput::new(
        padded.tensor(),
        Tensor::leaf(&[1, ph, pw], mask_planes.data.clone()),
        0.7,
    )?;

    for stage in 0..4 {
        let (map, gh, gw) = prompt_attention_map(&codec, &cond, stage)?;
        let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let path = out.join(format!("stage{stage}_{gh}x{gw}.png"));
        save_attention_map(&path, &map, gh, gw)?;
        println!(
            "stage {stage}: grid {gh}x{gw}, prompt mass in [{lo:.3}, {hi:.3}] -> {}",
            path.display()
        );
    }
    Ok(())
}
