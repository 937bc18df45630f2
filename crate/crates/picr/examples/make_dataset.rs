//! Synthesizes a folder of structured random images for desk-scale training.
//!
//!   cargo run --release --example make_dataset -- out_dir [count] [size] [seed]

use std::path::PathBuf;

use picr::data::write_dataset;

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "dataset".into()));
    let count: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(240);
    let size: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(96);
    let seed: u64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(1234);
    write_dataset(&dir, count, size, seed)?;
    println!("wrote {count} images of {size}x{size} to {}", dir.display());
    Ok(())
}
