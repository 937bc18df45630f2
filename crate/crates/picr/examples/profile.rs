//! Complexity profile of a codec configuration: closed-form kMACs/pixel per
//! sub-network, parameter count, and the instrumented cross-check that runs
//! the real forward pass with the multiply-accumulate counter on.
//!
//!   cargo run --release --example profile -- [ckpt] [size]

use std::path::PathBuf;

use picr::checkpoint;
use picr::codec::{Codec, CodecConfig};
use picr::evaluation::{measure_macs, profile_complexity};

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let codec = match args.next() {
        Some(p) => checkpoint::load(&PathBuf::from(p))?,
        None => Codec::new(CodecConfig::toy(), 0)?,
    };
    let size: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(256);

    let report = profile_complexity(&codec, size, size)?;
    println!("input            {size}x{size}");
    println!("params           {}", report.param_count);
    println!("kmacs_per_pixel  {:.4}", report.kmacs_per_pixel);
    let mut by_net: Vec<(String, u128)> = Vec::new();
    for (name, macs) in &report.per_layer {
        let net = name.split('.').next().unwrap_or("?").to_string();
        match by_net.iter_mut().find(|(n, _)| *n == net) {
            Some((_, acc)) => *acc += macs,
            None => by_net.push((net, *macs)),
        }
    }
    for (net, macs) in &by_net {
        println!(
            "  {net:<6} {:>10.3} kMACs/px  ({:.1}%)",
            *macs as f64 / (size * size) as f64 / 1000.0,
            *macs as f64 / report.macs as f64 * 100.0
        );
    }

    let measured = measure_macs(&codec, size, size)?;
    println!(
        "instrumented      {measured} MACs ({})",
        if measured == report.macs {
            "exact match"
        } else {
            "MISMATCH vs closed form"
        }
    );
    Ok(())
}
