//! Command-line entry points. The binary stays thin; everything here
//! dispatches into the library.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bitstream::{decode_file, encode_file, MaskInput};
use crate::checkpoint;
use crate::codec::CodecConfig;
use crate::conditioning::mask_spec_from_json;
use crate::error::{Error, Result};
use crate::evaluation::{profile_complexity, rd_sweep, SweepMasks};
use crate::imageio::{load_gray, Planes};
use crate::training::{run_training, ImageFolder, TrainConfig};

#[derive(Parser)]
#[command(name = "picr", version, about = "prompt-conditioned transformer image codec")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the staged training protocol from a JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compress an image to a bitstream
    Encode {
        #[arg(long)]
        image: PathBuf,
        /// 8-bit grayscale ROI mask image (defaults to all ones)
        #[arg(long)]
        mask: Option<PathBuf>,
        /// inline JSON mask spec, e.g. '{"kind":"blobs","seed":7}'
        #[arg(long, conflicts_with = "mask")]
        mask_spec: Option<String>,
        /// rate parameter in [0, 1]
        #[arg(long)]
        m: f64,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decompress a bitstream to a PNG
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep rate points over an image folder and write CSV/JSON/plot reports
    Eval {
        #[arg(long)]
        images: PathBuf,
        /// folder of masks matching image file stems (defaults to all ones)
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// comma-separated rate grid
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        m_grid: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// report path prefix (writes .csv, .json, .png)
        #[arg(long)]
        report: PathBuf,
    },
    /// Closed-form complexity profile (kMACs/pixel and parameter count)
    Profile {
        #[arg(long, required_unless_present = "config")]
        ckpt: Option<PathBuf>,
        /// profile a fresh model from a JSON CodecConfig instead
        #[arg(long)]
        config: Option<PathBuf>,
        /// input size, WxH or a single square extent
        #[arg(long, default_value = "256")]
        size: String,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let parse = |t: &str| -> Result<usize> {
        t.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad size component {t}")))
    };
    match parts.as_slice() {
        [one] => {
            let n = parse(one)?;
            Ok((n, n))
        }
        [w, h] => Ok((parse(h)?, parse(w)?)),
        _ => Err(Error::Config(format!("bad size {s}, want N or WxH"))),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg: TrainConfig = serde_json::from_str(&text)?;
            let ckpt = run_training(&cfg)?;
            println!("final checkpoint: {}", ckpt.display());
        }
        Cmd::Encode {
            image,
            mask,
            mask_spec,
            m,
            ckpt,
            out,
        } => {
            let mask_input = match (mask, mask_spec) {
                (Some(p), _) => MaskInput::Path(p),
                (None, Some(json)) => MaskInput::Spec(mask_spec_from_json(&json)?),
                (None, None) => MaskInput::UniformOnes,
            };
            let stats = encode_file(&image, &mask_input, m, &ckpt, &out)?;
            println!(
                "wrote {} bytes ({:.4} bpp actual, {:.4} bpp estimated, {:.1} ms)",
                stats.bytes_written, stats.actual_bpp, stats.estimated_bpp, stats.encode_ms
            );
        }
        Cmd::Decode { input, ckpt, out } => {
            decode_file(&input, &ckpt, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Eval {
            images,
            masks,
            ckpt,
            m_grid,
            alpha,
            beta,
            report,
        } => {
            let codec = checkpoint::load(&ckpt)?;
            let folder = ImageFolder::load(&images)?;
            let mask_source = match masks {
                None => SweepMasks::UniformOnes,
                Some(dir) => {
                    let mut planes: Vec<Planes> = Vec::with_capacity(folder.images.len());
                    for (name, img) in &folder.images {
                        planes.push(find_mask(&dir, name, img.height, img.width)?);
                    }
                    SweepMasks::PerImage(planes)
                }
            };
            let points = rd_sweep(
                &codec,
                &folder.images,
                &mask_source,
                &m_grid,
                alpha,
                beta,
                Some(&report),
            )?;
            println!(
                "{} rd points -> {}.csv / .json / .png",
                points.len(),
                report.display()
            );
        }
        Cmd::Profile { ckpt, config, size } => {
            let codec = match (ckpt, config) {
                (Some(p), _) => checkpoint::load(&p)?,
                (None, Some(cfg_path)) => {
                    let text = std::fs::read_to_string(&cfg_path)?;
                    let cfg: CodecConfig = serde_json::from_str(&text)?;
                    crate::codec::Codec::new(cfg, 0)?
                }
                (None, None) => unreachable!("clap enforces ckpt or config"),
            };
            let (h, w) = parse_size(&size)?;
            let report = profile_complexity(&codec, h, w)?;
            println!("input           {w}x{h}");
            println!("kmacs_per_pixel {:.4}", report.kmacs_per_pixel);
            println!("params          {}", report.param_count);
            let mut by_net: Vec<(String, u128)> = Vec::new();
            for (name, macs) in &report.per_layer {
                let net = name.split('.').next().unwrap_or("?").to_string();
                match by_net.iter_mut().find(|(n, _)| *n == net) {
                    Some((_, acc)) => *acc += macs,
                    None => by_net.push((net, *macs)),
                }
            }
            for (net, macs) in by_net {
                println!(
                    "  {net:<6} {:>10.2} kMACs/px",
                    macs as f64 / (h * w) as f64 / 1000.0
                );
            }
        }
    }
    Ok(())
}

fn find_mask(dir: &Path, stem: &str, h: usize, w: usize) -> Result<Planes> {
    for ext in ["png", "pgm", "ppm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            let m = load_gray(&p)?;
            return Ok(if m.height != h || m.width != w {
                m.resize_nearest(h, w)
            } else {
                m
            });
        }
    }
    // no mask for this image: treat everything as ROI
    Ok(Planes::new(1, h, w, vec![1.0; h * w])?)
}

/// Parses arguments and runs; returns the process exit code (0 success,
/// 1 runtime error, 2 usage error).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with code 0, usage errors
            // on stderr with code 2
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Test hook: dispatch from an argv slice.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Err(e) => e.exit_code(),
    }
}
