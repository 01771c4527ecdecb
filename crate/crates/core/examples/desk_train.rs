//! Trains on the default synthetic benchmark.
//!
//! `cargo run --release --example desk_train -- <out_dir> <width_scale> <batch> <iters> [seed]`

use std::path::PathBuf;

use onedir::datasets::{generate_synthetic_benchmark, DatasetSpec};
use onedir::trainer::{run_training, TrainConfig, TrainPaths};

fn main() -> onedir::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(&args[1]);
    let width: f64 = args[2].parse().unwrap();
    let batch: usize = args[3].parse().unwrap();
    let iters: u64 = args[4].parse().unwrap();
    let seed: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = out.join("data");
    if !data.join("synth.json").exists() {
        generate_synthetic_benchmark(&DatasetSpec::default(), &data)?;
    }
    let cfg = TrainConfig {
        width_scale: width,
        batch_size: batch,
        total_iterations: iters,
        decay_iterations: iters / 4,
        checkpoint_every: (iters / 10).max(1),
        seed,
        ..TrainConfig::default()
    };
    let run = run_training(
        &cfg,
        &TrainPaths {
            data_root: data,
            out_dir: out.join("train"),
            resume: None,
        },
    )?;
    println!("{:?}", run.final_checkpoint);
    Ok(())
}
