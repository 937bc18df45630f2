//! Encodes and decodes one image through a real bitstream and reports rate,
//! weighted PSNR and the latent-equality audit.
//!
//!   cargo run --release --example roundtrip -- <ckpt> <image> [m] [mask.png]
//!
//! Without arguments, builds a random-weights toy codec and a synthetic
//! image: reconstruction quality is then meaningless, but the container,
//! entropy coder and latent round trip are exercised for real.

use std::path::PathBuf;

use picr::bitstream::{decode_from_bytes, encode_to_bytes};
use picr::checkpoint;
use picr::codec::{Codec, CodecConfig};
use picr::data::synth_image;
use picr::evaluation::{weighted_psnr, WeightedPsnrSpec};
use picr::imageio::{load_gray, load_image, save_rgb_png, Planes};
use picr::rng::Prng;

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let codec = match args.next() {
        Some(p) => checkpoint::load(&PathBuf::from(p))?,
        None => Codec::new(CodecConfig::toy(), 1)?,
    };
    let image = match args.next() {
        Some(p) => load_image(&PathBuf::from(p))?,
        None => synth_image(&mut Prng::new(5), 96, 128),
    };
    let m: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0.8);
    let mask = match args.next() {
        Some(p) => {
            let raw = load_gray(&PathBuf::from(p))?;
            raw.resize_nearest(image.height, image.width)
        }
        None => Planes::new(1, image.height, image.width, vec![1.0; image.height * image.width])?,
    };

    let enc = encode_to_bytes(&codec, &image, &mask, m)?;
    println!(
        "{}x{} at m={m}: {} bytes, {:.4} bpp actual vs {:.4} bpp estimated",
        image.width,
        image.height,
        enc.bytes.len(),
        enc.actual_bpp,
        enc.estimated_bpp
    );

    let dec = decode_from_bytes(&codec, &enc.bytes)?;
    let identical = enc
        .y_hat
        .iter()
        .zip(&dec.y_hat)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("decoder latent bit-identical: {identical}");

    let spec = WeightedPsnrSpec::from_soft_mask(1.0, 0.0, &mask);
    println!("roi psnr: {:.2} dB", weighted_psnr(&image, &dec.image, &spec)?);
    save_rgb_png(&PathBuf::from("roundtrip_decoded.png"), &dec.image)?;
    println!("wrote roundtrip_decoded.png");
    Ok(())
}
