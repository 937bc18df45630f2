//! Trains a desk-scale codec end to end: synthesizes a small dataset if none
//! is given, then runs the three-stage protocol (base codec at the top rate,
//! variable-rate with uniform masks, ROI fine-tuning with random masks).
//!
//!   cargo run --release --example train_toy -- runs/toy [dataset_dir]
//!
//! Stage lengths come from PICR_STEPS="s1,s2,s3" (default "2500,3500,2500").

use std::path::PathBuf;

use picr::codec::CodecConfig;
use picr::conditioning::RateMapping;
use picr::data::write_dataset;
use picr::training::{run_training, StagePlan, TrainConfig};

fn main() -> picr::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/toy".into()));
    let dataset = match args.next() {
        Some(d) => PathBuf::from(d),
        None => {
            let dir = out_dir.join("dataset");
            if !dir.exists() {
                eprintln!("synthesizing 240 training images into {}", dir.display());
                write_dataset(&dir, 240, 96, 1234)?;
            }
            dir
        }
    };
    let steps: Vec<usize> = std::env::var("PICR_STEPS")
        .unwrap_or_else(|_| "2500,3500,2500".into())
        .split(',')
        .map(|s| s.trim().parse().expect("PICR_STEPS wants three integers"))
        .collect();
    assert_eq!(steps.len(), 3, "PICR_STEPS wants three integers");

    let stage = |n: u8, steps: usize| {
        let mut p = StagePlan::new(n, steps);
        p.batch_size = 4;
        p.crop = 64;
        p.checkpoint_every = 500;
        p
    };
    let cfg = TrainConfig {
        seed: 7,
        dataset,
        out_dir: out_dir.clone(),
        codec: CodecConfig::toy(),
        rate: RateMapping::default(),
        stages: vec![stage(1, steps[0]), stage(2, steps[1]), stage(3, steps[2])],
        init_from: None,
    };
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(
        out_dir.join("train_config.json"),
        serde_json::to_vec_pretty(&cfg).expect("config serializes"),
    )?;
    let ckpt = run_training(&cfg)?;
    println!("trained checkpoint: {}", ckpt.display());
    Ok(())
}
