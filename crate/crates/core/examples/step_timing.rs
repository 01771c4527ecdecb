//! Times training iterations on a synthetic benchmark.
//!
//! `cargo run --release --example step_timing -- <width_scale> <batch> <iters>`

use std::time::Instant;

use onedir::datasets::{generate_synthetic_benchmark, DatasetSpec};
use onedir::trainer::{load_training_sets, train_iteration, TrainConfig, TrainData, TrainState};

fn main() -> onedir::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let width: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.125);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let iters: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    let dir = std::env::temp_dir().join("onedir_step_timing");
    if !dir.join("synth.json").exists() {
        generate_synthetic_benchmark(&DatasetSpec::default(), &dir)?;
    }
    let cfg = TrainConfig {
        width_scale: width,
        batch_size: batch,
        total_iterations: 10_000,
        decay_iterations: 2_500,
        ..TrainConfig::default()
    };
    let (a, b) = load_training_sets(&dir, cfg.image_size, cfg.channels)?;
    let data = TrainData { set_a: &a, set_b: &b };
    let mut state = TrainState::new(&cfg)?;
    let t = Instant::now();
    for _ in 0..iters {
        let o = train_iteration(&mut state, &data, &cfg)?;
        if o.generator_updated {
            println!("{} {:?}", o.iteration, o.losses);
        }
    }
    let per = t.elapsed().as_secs_f64() / iters as f64;
    println!("{per:.3} s/iter, {:.1} min per 10k", per * 10_000.0 / 60.0);
    Ok(())
}
