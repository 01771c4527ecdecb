//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Runs sequentially under a custom harness so timings are not distorted by
//! other tests. Set `ONEDIR_ACCEPTANCE_QUICK=1` to skip the long training run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use onedir::composition::{
    compose_healthy, compose_healthy_var, compose_pair, compose_reconstruction, compose_reconstruction_var,
};
use onedir::datasets::{
    generate_synthetic_benchmark, load_split, DatasetSpec, ImageSet, Label, SampleRecord, Split,
};
use onedir::evaluation::{classification_metrics, evaluate_generator, roc_auc, EvalOptions};
use onedir::losses::{
    critic_loss, focus_loss, generator_adversarial_loss, generator_losses, identity_loss, read_loss_log,
    reconstruction_loss, LossWeights,
};
use onedir::networks::{init_critic, init_generator, Critic, CriticParams, GeneratorParams};
use onedir::selection::{frechet_distance, select_best_checkpoint, FeatureStats, RandomConvEmbedder};
use onedir::trainer::{learning_rate, run_training, TrainConfig, TrainPaths, TrainingRun};
use onedir::{ImageBatch, MaskBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::check::{probe_with, Stencil};
use tapegrad::{Tape, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(line: &str) {
    // bypasses output capture so the line always reaches the log
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

// ---------------------------------------------------------------------------
// 1. composition algebra

fn ulp(x: f32) -> f32 {
    let x = x.abs();
    f32::from_bits(x.to_bits() + 1) - x
}

fn composition_algebra() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c, h, w) = (1, 3, 8, 8);
    let mut worst_ulps = 0.0f32;
    let mut endpoints_ok = true;
    for _ in 0..1000 {
        let a = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0f32..=1.0));
        let b = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0f32..=1.0));
        let m = Tensor::from_fn(&[n, 1, h, w], |_| rng.random_range(0.0f32..=1.0));
        let (ab, bb) = (ImageBatch::new(a.clone()).unwrap(), ImageBatch::new(b.clone()).unwrap());
        let ones = MaskBatch::new(Tensor::full(&[n, 1, h, w], 1.0f32)).unwrap();
        let zeros = MaskBatch::new(Tensor::full(&[n, 1, h, w], 0.0f32)).unwrap();
        endpoints_ok &= compose_healthy(&ab, &bb, &ones).unwrap().tensor() == &b
            && compose_healthy(&ab, &bb, &zeros).unwrap().tensor() == &a
            && compose_reconstruction(&ab, &bb, &ones).unwrap().tensor() == &a
            && compose_reconstruction(&ab, &bb, &zeros).unwrap().tensor() == &b;
        let pair = compose_pair(&ab, &bb, &MaskBatch::new(m).unwrap()).unwrap();
        for i in 0..a.numel() {
            let lhs = pair.healthy_out.tensor().data()[i] + pair.reconstruction.tensor().data()[i];
            let rhs = a.data()[i] + b.data()[i];
            let scale = a.data()[i].abs().max(b.data()[i].abs());
            worst_ulps = worst_ulps.max((lhs - rhs).abs() / ulp(scale));
        }
    }
    let elapsed = t.elapsed();
    outcome(
        endpoints_ok && worst_ulps <= 4.0 && within(elapsed, Duration::from_secs(5)),
        format!("1000 triples, endpoints exact: {endpoints_ok}, worst sum deviation {worst_ulps} ulp, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------------------
// 2. gradient correctness

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Parameters moved off their initial values so norm affines carry gradient
/// signal of their own.
fn perturbed_generator(seed: u64) -> GeneratorParams<f64> {
    let g = init_generator::<f64>(1, GRAD_WIDTH, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let tensors = g
        .params()
        .names()
        .iter()
        .zip(g.params().tensors())
        .map(|(name, t)| {
            if name.ends_with("gamma") {
                uniform(t.shape(), 0.7, 1.3, &mut rng)
            } else if name.ends_with("beta") {
                uniform(t.shape(), -0.3, 0.3, &mut rng)
            } else {
                t.clone()
            }
        })
        .collect();
    g.with_tensors(tensors).unwrap()
}

/// Critic weights redrawn at unit gain: at the training initialisation its
/// scores are so small that their gradients sink below finite-difference
/// round-off.
fn perturbed_critic(seed: u64) -> CriticParams<f64> {
    let c = init_critic::<f64>(1, 64, GRAD_WIDTH, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let tensors = c
        .params()
        .names()
        .iter()
        .zip(c.params().tensors())
        .map(|(name, t)| {
            if name.ends_with("bias") {
                uniform(t.shape(), -0.05, 0.05, &mut rng)
            } else {
                let fan_in = (t.numel() / t.shape()[0]) as f64;
                let a = (6.0 / fan_in).sqrt();
                uniform(t.shape(), -a, a, &mut rng)
            }
        })
        .collect();
    c.with_tensors(tensors).unwrap()
}

/// Smallest width at which every parameter tensor holds at least ten values.
const GRAD_WIDTH: f64 = 0.16;
const COORDS_PER_TENSOR: usize = 10;

fn coords_for(tensors: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in tensors.iter().enumerate() {
        assert!(t.numel() >= COORDS_PER_TENSOR, "tensor {i} has only {} values", t.numel());
        out.extend((0..COORDS_PER_TENSOR).map(|j| (i, (j * 7919 + 13) % t.numel())));
    }
    out
}

struct GradCheck {
    worst: f64,
    probes: usize,
    /// Coordinates whose perturbation always crossed a kink and were replaced.
    resampled: usize,
    /// Coordinates still crossing a kink after every replacement.
    unresolved: usize,
}

fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, stencil: Stencil, f: F) -> GradCheck
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let mut coords = coords_for(inputs);
    let mut out = GradCheck {
        worst: 0.0,
        probes: coords.len(),
        resampled: 0,
        unresolved: 0,
    };
    for round in 1..=5 {
        let mut kinked = Vec::new();
        for p in probe_with(inputs, &coords, h, stencil, &f) {
            if p.smooth {
                out.worst = out.worst.max(p.rel_error(1e-7));
            } else {
                kinked.push((p.input, (p.index + round * 104_729) % inputs[p.input].numel()));
            }
        }
        if kinked.is_empty() {
            return out;
        }
        if round == 5 {
            out.unresolved = kinked.len();
        } else {
            out.resampled += kinked.len();
        }
        coords = kinked;
    }
    out
}

/// Smooth stand-in scoring `tanh` of a fixed projection per sample, so the
/// combined generator objective can be probed at 8×8.
struct ProjectionCritic {
    w: Var<f64>,
}

impl Critic<f64> for ProjectionCritic {
    fn score(&self, x: &Var<f64>) -> onedir::Result<Var<f64>> {
        let n = x.shape()[0];
        Ok(x.mul_b(&self.w).sum_to(&[n, 1, 1, 1]).tanh())
    }
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gen = perturbed_generator(5);
    let critic = perturbed_critic(6);
    let w = LossWeights::default();
    let gt: Vec<Tensor<f64>> = gen.params().tensors().to_vec();
    let ct: Vec<Tensor<f64>> = critic.params().tensors().to_vec();
    let small_a = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let small_b = uniform(&[2, 1, 8, 8], -1.0, 1.0, &mut rng);
    let big_a = uniform(&[2, 1, 64, 64], -1.0, 1.0, &mut rng);
    let big_b = uniform(&[2, 1, 64, 64], -1.0, 1.0, &mut rng);
    let one_a = uniform(&[1, 1, 64, 64], -1.0, 1.0, &mut rng);
    let projection = uniform(&[1, 1, 8, 8], -0.3, 0.3, &mut rng);
    let mut parts = Vec::new();
    let mut total = GradCheck {
        worst: 0.0,
        probes: 0,
        resampled: 0,
        unresolved: 0,
    };
    let mut lap = Instant::now();
    let mut record = |name: &str, g: GradCheck| {
        parts.push(format!("{name} {:.1e} in {:.1?}", g.worst, lap.elapsed()));
        lap = Instant::now();
        total.worst = total.worst.max(g.worst);
        total.probes += g.probes;
        total.resampled += g.resampled;
        total.unresolved += g.unresolved;
    };

    // critic objective with its double-backward penalty, w.r.t. critic weights;
    // the critic only accepts multiples of 64 pixels
    record(
        "critic",
        check_gradients(&ct, 1e-4, Stencil::Richardson, |tape, vars| {
            let c = critic.bind_vars(vars.to_vec()).unwrap();
            let g = gen.bind(tape, false);
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let (a, b) = (tape.constant(big_a.clone()), tape.constant(big_b.clone()));
            critic_loss(&c, &g, &a, &b, &w, &mut r).unwrap().total
        }),
    );
    record(
        "adversarial",
        check_gradients(&gt, 1e-4, Stencil::Central, |tape, vars| {
            let g = gen.bind_vars(vars.to_vec()).unwrap();
            let c = critic.bind(tape, false);
            let a = tape.constant(one_a.clone());
            let out = g.forward(&a).unwrap();
            let fake = compose_healthy_var(&a, &out.intermediate, &out.mask).unwrap();
            generator_adversarial_loss(&c, &fake, None).unwrap()
        }),
    );
    record(
        "identity",
        check_gradients(&gt, 1e-4, Stencil::Richardson, |tape, vars| {
            let g = gen.bind_vars(vars.to_vec()).unwrap();
            let b = tape.constant(small_b.clone());
            identity_loss(&g.forward(&b).unwrap().intermediate, &b).unwrap()
        }),
    );
    record(
        "reconstruction",
        check_gradients(&gt, 1e-4, Stencil::Richardson, |tape, vars| {
            let g = gen.bind_vars(vars.to_vec()).unwrap();
            let a = tape.constant(small_a.clone());
            let out = g.forward(&a).unwrap();
            let ap = compose_reconstruction_var(&a, &out.intermediate, &out.mask).unwrap();
            reconstruction_loss(&a, &ap).unwrap()
        }),
    );
    // 1/(|M − ½| + ε) is sharply curved near ½, so focus terms take a smaller step
    record(
        "focus",
        check_gradients(&gt, 1e-6, Stencil::Richardson, |tape, vars| {
            let g = gen.bind_vars(vars.to_vec()).unwrap();
            let a = tape.constant(small_a.clone());
            focus_loss(&g.forward(&a).unwrap().mask, &w).unwrap()
        }),
    );
    record(
        "combined",
        check_gradients(&gt, 1e-6, Stencil::Richardson, |tape, vars| {
            let g = gen.bind_vars(vars.to_vec()).unwrap();
            let c = ProjectionCritic {
                w: tape.constant(projection.clone()),
            };
            let (a, b) = (tape.constant(small_a.clone()), tape.constant(small_b.clone()));
            generator_losses(&c, &g, &a, &b, &w, true).unwrap().total
        }),
    );
    let elapsed = t.elapsed();
    outcome(
        total.worst < 1e-5 && total.unresolved == 0 && within(elapsed, Duration::from_secs(120)),
        format!(
            "{} probes over {} generator and {} critic tensors ({} resampled off kinks, {} unresolved), worst rel err {:.2e} ({}), {elapsed:.1?}",
            total.probes,
            gt.len(),
            ct.len(),
            total.resampled,
            total.unresolved,
            total.worst,
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. shape conformance

fn shape_conformance() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = init_generator::<f32>(3, 1.0, 0).unwrap();
    let expected_g: [(&str, [usize; 4]); 6] = [
        ("enc1.weight", [64, 3, 7, 7]),
        ("enc2.weight", [128, 64, 4, 4]),
        ("enc3.weight", [256, 128, 4, 4]),
        ("dec1.weight", [256, 128, 4, 4]),
        ("dec2.weight", [128, 64, 4, 4]),
        ("out.weight", [64, 4, 7, 7]),
    ];
    let mut table_ok = expected_g
        .iter()
        .all(|(n, s)| g.params().get(n).map(|t| t.shape() == s).unwrap_or(false));
    table_ok &= (0..6).all(|b| {
        g.params().get(&format!("res{b}.conv1.weight")).unwrap().shape() == [256, 256, 3, 3]
            && g.params().get(&format!("res{b}.conv2.weight")).unwrap().shape() == [256, 256, 3, 3]
    });
    let x = ImageBatch::new(Tensor::from_fn(&[1, 3, 256, 256], |_| rng.random_range(-1.0f32..1.0))).unwrap();
    let out = g.forward(&x).unwrap();
    let gen_ok = out.intermediate.tensor().shape() == [1, 3, 256, 256] && out.mask.tensor().shape() == [1, 1, 256, 256];

    let c256 = init_critic::<f32>(3, 256, 1.0, 0).unwrap();
    let widths = [64, 128, 256, 512, 1024, 2048];
    let mut prev = 3;
    for (i, &w) in widths.iter().enumerate() {
        table_ok &= c256.params().get(&format!("conv{i}.weight")).unwrap().shape() == [w, prev, 4, 4];
        prev = w;
    }
    table_ok &= c256.params().get("out.weight").unwrap().shape() == [1, 2048, 3, 3];
    let s256 = c256.forward(&x).unwrap();
    let c128 = init_critic::<f32>(3, 128, 1.0, 0).unwrap();
    let x128 = ImageBatch::new(Tensor::from_fn(&[2, 3, 128, 128], |_| rng.random_range(-1.0f32..1.0))).unwrap();
    let s128 = c128.forward(&x128).unwrap();
    let critic_ok = s256.shape() == [1, 1, 4, 4] && s128.shape() == [2, 1, 2, 2];
    outcome(
        table_ok && gen_ok && critic_ok,
        format!(
            "layer tables {table_ok}; generator 256² → {:?} + {:?}; critic 256² → {:?}, 128² → {:?}; {:.1?}",
            out.intermediate.tensor().shape(),
            out.mask.tensor().shape(),
            s256.shape(),
            s128.shape(),
            t.elapsed()
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. update ratio and schedule

fn ratio_and_schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let updates = (0..1000).filter(|&i| cfg.updates_generator(i)).count();
    let lr0 = learning_rate(0, &cfg).unwrap();
    let onset = cfg.total_iterations - cfg.decay_iterations;
    let lr_onset = learning_rate(onset, &cfg).unwrap();
    let lr_last = learning_rate(cfg.total_iterations - 1, &cfg).unwrap();
    let target = cfg.base_lr / cfg.decay_iterations as f64;
    let pass = updates == 500 && lr0 == 1e-4 && lr_onset == 1e-4 && (lr_last - target).abs() <= 1e-9;
    outcome(
        pass,
        format!("{updates} generator updates in 1000 iterations; lr(0)={lr0:e}, lr({onset})={lr_onset:e}, lr(total−1)={lr_last:e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. metric oracles

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn random_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=max_n);
    let levels = rng.random_range(2..40);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

fn metric_oracles() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut auc_ok = 0;
    for _ in 0..500 {
        let (s, l) = random_instance(&mut rng, 200);
        auc_ok += (roc_auc(&s, &l).unwrap() == brute_auc(&s, &l)) as usize;
    }
    let mut cm_ok = 0;
    for _ in 0..100 {
        let (s, l) = random_instance(&mut rng, 200);
        let thr = rng.random_range(0.0..1.0);
        let m = classification_metrics(&s, &l, thr).unwrap();
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&v, &y) in s.iter().zip(&l) {
            match (v >= thr, y) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let p = safe(tp, tp + fp);
        let r = safe(tp, tp + fn_);
        let f1 = safe(2.0 * p * r, p + r);
        let ok = m.precision == p
            && m.recall == r
            && m.specificity == safe(tn, tn + fp)
            && (m.f1 - f1).abs() < 1e-15
            && m.confusion.total() as usize == s.len();
        cm_ok += ok as usize;
    }
    let elapsed = t.elapsed();
    outcome(
        auc_ok == 500 && cm_ok == 100 && within(elapsed, Duration::from_secs(30)),
        format!("roc_auc exact on {auc_ok}/500, confusion arithmetic on {cm_ok}/100, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------------------
// 6. FID properties

fn fid_properties() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| {
            let z: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..16).map(|j| z[j] + 0.3 * z[(j + 3) % 16]).collect()
        })
        .collect();
    let s = FeatureStats::from_features(&rows).unwrap();
    let self_fid = frechet_distance(&s, &s).unwrap();
    let eye = DMatrix::identity(2, 2);
    let g0 = FeatureStats {
        mean: DVector::from_vec(vec![0.0, 0.0]),
        covariance: eye.clone(),
        n: 2,
    };
    let g1 = FeatureStats {
        mean: DVector::from_vec(vec![3.0, 4.0]),
        covariance: eye,
        n: 2,
    };
    let closed = frechet_distance(&g0, &g1).unwrap();
    let other: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| 1.5 * v + 0.2).collect()).collect();
    let s2 = FeatureStats::from_features(&other).unwrap();
    let asym = (frechet_distance(&s, &s2).unwrap() - frechet_distance(&s2, &s).unwrap()).abs();
    let elapsed = t.elapsed();
    outcome(
        self_fid <= 1e-6 && (closed - 25.0).abs() <= 1e-4 && asym <= 1e-8 && within(elapsed, Duration::from_secs(10)),
        format!("self {self_fid:.2e}, closed form {closed:.6} (25), asymmetry {asym:.2e}, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------------------
// 7. desk-scale end to end

/// Frozen settings for the desk-scale experiment.
const E2E_SEED: u64 = 0;
const E2E_WIDTH: f64 = 0.125;
const E2E_BATCH: usize = 8;
const E2E_ITERATIONS: u64 = 10_000;

fn e2e_spec() -> DatasetSpec {
    DatasetSpec {
        image_size: 64,
        channels: 1,
        n_healthy_b: 400,
        n_mixed_healthy_a: 140,
        n_mixed_anomalous_a: 60,
        n_val: 40,
        n_test: 60,
        lesion_size_range: (8, 16),
        lesion_contrast: 0.35,
        seed: E2E_SEED,
    }
}

fn unlabeled(root: &Path, split: Split) -> Vec<SampleRecord> {
    load_split(root, split)
        .unwrap()
        .iter()
        .map(|r| SampleRecord::unlabeled(r.path()))
        .collect()
}

/// Fraction by which the reconstruction loss fell from its moving average
/// around iteration 100 to its average over the last 500 logged values.
fn reconstruction_drop(run: &TrainingRun) -> Option<f64> {
    let rec: Vec<(u64, f64)> = read_loss_log(&run.loss_log)
        .ok()?
        .into_iter()
        .filter_map(|r| r.rec.map(|v| (r.iteration, v)))
        .collect();
    let early: Vec<f64> = rec.iter().filter(|(i, _)| (50..150).contains(i)).map(|p| p.1).collect();
    let late: Vec<f64> = rec.iter().rev().take(500).map(|p| p.1).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (!early.is_empty() && !late.is_empty()).then(|| 1.0 - mean(&late) / mean(&early))
}

fn desk_scale_end_to_end(work: &Path) -> Outcome {
    let t = Instant::now();
    let data = work.join("data");
    generate_synthetic_benchmark(&e2e_spec(), &data).unwrap();
    let cfg = TrainConfig {
        width_scale: E2E_WIDTH,
        batch_size: E2E_BATCH,
        total_iterations: E2E_ITERATIONS,
        decay_iterations: E2E_ITERATIONS / 4,
        checkpoint_every: E2E_ITERATIONS / 10,
        seed: E2E_SEED,
        ..TrainConfig::default()
    };
    let run = match run_training(
        &cfg,
        &TrainPaths {
            data_root: data.clone(),
            out_dir: work.join("train"),
            resume: None,
        },
    ) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let trained = t.elapsed();
    let inputs = ImageSet::load(unlabeled(&data, Split::Val), 64, 1).unwrap();
    let reference = ImageSet::load(unlabeled(&data, Split::TrainB), 64, 1).unwrap();
    let sel = select_best_checkpoint(&run.checkpoints, &inputs, &reference, &RandomConvEmbedder::new(1, 0), 16).unwrap();
    let chosen = sel.best().path.clone();
    let (generator, _) = onedir::trainer::load_generator(&chosen).unwrap();
    let (r, _) = evaluate_generator(&generator, &data, 64, &EvalOptions::default()).unwrap();
    let dice = r.mean_dice.unwrap_or(0.0);
    let drop = reconstruction_drop(&run);
    report(&format!(
        "INFO criterion 7: reconstruction loss fell {:.0}% from its iteration-100 average",
        drop.unwrap_or(f64::NAN) * 100.0
    ));
    outcome(
        r.auc >= 0.90 && dice >= 0.30,
        format!(
            "selected {} (fid {:.3}); test AUC {:.4}, F1 {:.3}, mean Dice {dice:.3} over {} detected lesions at pixel threshold {:.2}; trained in {:.1?}, total {:.1?}",
            chosen.file_name().unwrap().to_string_lossy(),
            sel.best().fid.unwrap_or(f64::NAN),
            r.auc,
            r.f1,
            r.n_dice,
            r.pixel_threshold,
            trained,
            t.elapsed()
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. checkpoint resume

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        n_healthy_b: 10,
        n_mixed_healthy_a: 6,
        n_mixed_anomalous_a: 4,
        n_val: 3,
        n_test: 3,
        seed: 8,
        ..DatasetSpec::default()
    }
}

fn small_cfg(total: u64, every: u64) -> TrainConfig {
    TrainConfig {
        width_scale: 1.0 / 16.0,
        batch_size: 4,
        total_iterations: total,
        decay_iterations: total / 2,
        checkpoint_every: every,
        seed: 8,
        ..TrainConfig::default()
    }
}

fn checkpoint_resume(work: &Path) -> Outcome {
    let t = Instant::now();
    let data = work.join("data");
    generate_synthetic_benchmark(&small_spec(), &data).unwrap();
    let cfg = small_cfg(30, 20);
    let paths = |out: &str, resume: Option<PathBuf>| TrainPaths {
        data_root: data.clone(),
        out_dir: work.join(out),
        resume,
    };
    let full = run_training(&cfg, &paths("full", None)).unwrap();
    // the resumed run starts from the iteration-20 checkpoint with nothing else carried over
    let resumed = run_training(&cfg, &paths("resumed", Some(full.checkpoints[0].clone()))).unwrap();
    let a = read_loss_log(&full.loss_log).unwrap();
    let b = read_loss_log(&resumed.loss_log).unwrap();
    let tail = &a[20..];
    let bits = |r: &onedir::losses::LossRow| {
        [Some(r.adv_d), Some(r.gp), r.adv_g, r.id, r.rec, r.focus, r.total_g, Some(r.lr)]
            .map(|v| v.map(f64::to_bits))
    };
    let same = b.len() == 10 && tail.iter().zip(&b).all(|(x, y)| x.iteration == y.iteration && bits(x) == bits(y));
    let same_final = fs::read(&full.final_checkpoint).unwrap() == fs::read(&resumed.final_checkpoint).unwrap();
    let elapsed = t.elapsed();
    outcome(
        same && same_final && within(elapsed, Duration::from_secs(300)),
        format!("10 post-resume rows bit-identical: {same}; final checkpoints identical: {same_final}; {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------------------
// 9. label-blindness audit

fn strip_labels(root: &Path, split: Split) {
    let p = split.manifest_path(root);
    let text = fs::read_to_string(&p).unwrap();
    let stripped: String = text.lines().map(|l| format!("{}\n", l.split(',').next().unwrap())).collect();
    fs::write(&p, stripped).unwrap();
}

fn label_blindness(work: &Path) -> Outcome {
    let data = work.join("data");
    generate_synthetic_benchmark(&small_spec(), &data).unwrap();
    let cfg = small_cfg(4, 2);
    let run = |out: &str| {
        run_training(
            &cfg,
            &TrainPaths {
                data_root: data.clone(),
                out_dir: work.join(out),
                resume: None,
            },
        )
    };
    let select = |ckpts: &[PathBuf]| -> onedir::Result<PathBuf> {
        // selection reads val images through the labelled loader, so stripped labels are exercised
        let val = ImageSet::load(load_split(&data, Split::Val)?, 64, 1)?;
        let reference = ImageSet::load(load_split(&data, Split::TrainB)?, 64, 1)?;
        Ok(select_best_checkpoint(ckpts, &val, &reference, &RandomConvEmbedder::new(1, 0), 8)?
            .best()
            .path
            .clone())
    };
    let labelled = run("labelled").unwrap();
    let before = select(&labelled.checkpoints).unwrap();
    for split in [Split::TrainA, Split::TrainB, Split::Val] {
        strip_labels(&data, split);
    }
    let val_labels = load_split(&data, Split::Val).unwrap().iter().filter(|r| r.label().is_some()).count();
    let stripped = run("stripped");
    let ok_train = stripped.is_ok();
    let after = stripped.as_ref().map_err(|e| e.to_string()).and_then(|r| select(&r.checkpoints).map_err(|e| e.to_string()));
    let same_choice = matches!(&after, Ok(p) if p.file_name() == before.file_name());
    let test_labels = load_split(&data, Split::Test)
        .unwrap()
        .iter()
        .filter(|r| r.label() == Some(Label::Anomalous))
        .count();
    outcome(
        ok_train && same_choice && val_labels == 0,
        format!(
            "training after stripping: {ok_train}; selection unchanged: {same_choice}; val labels visible: {val_labels}; test split still labelled ({test_labels} anomalous)"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let quick = std::env::var("ONEDIR_ACCEPTANCE_QUICK").is_ok_and(|v| !v.is_empty() && v != "0");
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| {
        let d = root.path().join(name);
        fs::create_dir_all(&d).unwrap();
        d
    };
    let mut results: Vec<(usize, &str, Option<Outcome>)> = Vec::new();
    let mut step = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let o = f();
        report(&format!(
            "{} criterion {n} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        ));
        results.push((n, name, Some(o)));
    };
    step(1, "composition algebra", &composition_algebra);
    step(2, "gradient correctness", &gradient_correctness);
    step(3, "shape conformance", &shape_conformance);
    step(4, "update ratio and schedule", &ratio_and_schedule);
    step(5, "metric oracles", &metric_oracles);
    step(6, "FID properties", &fid_properties);
    let w8 = dir("resume");
    step(8, "checkpoint resume", &|| checkpoint_resume(&w8));
    let w9 = dir("audit");
    step(9, "label-blindness audit", &|| label_blindness(&w9));
    if quick {
        report("SKIP criterion 7 (desk-scale end to end): ONEDIR_ACCEPTANCE_QUICK is set");
        results.push((7, "desk-scale end to end", None));
    } else {
        let w7 = dir("e2e");
        step(7, "desk-scale end to end", &|| desk_scale_end_to_end(&w7));
    }
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, o)| o.as_ref().is_some_and(|o| !o.pass))
        .map(|r| r.0)
        .collect();
    let passed = results.iter().filter(|(_, _, o)| o.as_ref().is_some_and(|o| o.pass)).count();
    report(&format!("acceptance: {passed} passed, {} failed, {} skipped", failed.len(), results.len() - passed - failed.len()));
    drop(root);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
