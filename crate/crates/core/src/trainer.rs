//! Alternating critic/generator optimisation, checkpoints and resume.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Real, Tape, Tensor};

use crate::archive::{read_archive, write_archive, ArchiveMeta};
use crate::datasets::{load_split, sample_unpaired_batch, ImageSet, Split, UnpairedSampler};
use crate::error::{Error, IoContext, Result};
use crate::losses::{critic_loss, generator_losses, LossBreakdown, LossLog, LossRow, LossWeights};
use crate::networks::{init_critic, init_generator, CriticParams, GeneratorParams, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub image_size: usize,
    pub channels: usize,
    pub width_scale: f64,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub decay_iterations: u64,
    pub base_lr: f64,
    pub critic_steps_per_gen_step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Include the fake translated from set B in the generator's adversarial term.
    pub adv_on_b: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            width_scale: 1.0,
            batch_size: 16,
            total_iterations: 400_000,
            decay_iterations: 100_000,
            base_lr: 1e-4,
            critic_steps_per_gen_step: 2,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            adv_on_b: true,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decay_iterations > self.total_iterations {
            return bad(format!(
                "decay_iterations {} exceeds total_iterations {}",
                self.decay_iterations, self.total_iterations
            ));
        }
        if self.critic_steps_per_gen_step == 0 {
            return bad("critic_steps_per_gen_step must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.width_scale > 0.0) {
            return bad(format!("width_scale {} must be positive", self.width_scale));
        }
        self.weights.validate()
    }

    /// Whether iteration `i` ends with a generator update.
    pub fn updates_generator(&self, iteration: u64) -> bool {
        let k = self.critic_steps_per_gen_step;
        iteration % k == k - 1
    }
}

/// Constant `base_lr`, then linear decay reaching 0 at `total_iterations`.
pub fn learning_rate(iteration: u64, cfg: &TrainConfig) -> Result<f64> {
    if iteration > cfg.total_iterations {
        return Err(Error::Range(format!(
            "iteration {iteration} beyond total_iterations {}",
            cfg.total_iterations
        )));
    }
    let onset = cfg.total_iterations - cfg.decay_iterations;
    if iteration <= onset || cfg.decay_iterations == 0 {
        return Ok(cfg.base_lr);
    }
    let remaining = (cfg.total_iterations - iteration) as f64;
    Ok(cfg.base_lr * remaining / cfg.decay_iterations as f64)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Shape("optimizer moment layout mismatch".into()));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Shape("gradient count does not match parameters".into()));
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("non-finite parameter gradient".into()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (one_b1, one_b2) = (T::one() - b1t, T::one() - b2t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..pd.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1t * m[j] + one_b1 * gj;
                v[j] = b2t * v[j] + one_b2 * gj * gj;
                pd[j] -= step * m[j] / ((v[j] * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Everything needed to continue training exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub generator: GeneratorParams<f32>,
    pub critic: CriticParams<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub sampler: UnpairedSampler,
    /// Source of gradient-penalty interpolation weights.
    pub rng: ChaCha8Rng,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = init_generator(cfg.channels, cfg.width_scale, cfg.seed.wrapping_mul(2).wrapping_add(11))?;
        let critic = init_critic(
            cfg.channels,
            cfg.image_size,
            cfg.width_scale,
            cfg.seed.wrapping_mul(2).wrapping_add(12),
        )?;
        let opt_g = Adam::new(generator.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        let opt_d = Adam::new(critic.params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            iteration: 0,
            generator,
            critic,
            opt_g,
            opt_d,
            sampler: UnpairedSampler::new(cfg.seed),
            rng: stream_rng(cfg.seed, 3),
            seed: cfg.seed,
        })
    }
}

/// What one call to [`train_iteration`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationOutcome {
    pub iteration: u64,
    pub lr: f64,
    pub generator_updated: bool,
    pub losses: LossBreakdown,
}

/// Training images: set A (mixed) and set B (healthy).
pub struct TrainData<'a> {
    pub set_a: &'a ImageSet,
    pub set_b: &'a ImageSet,
}

fn param_grads(tape: &Tape<f32>, loss: &tapegrad::Var<f32>, vars: &[tapegrad::Var<f32>]) -> Result<Vec<Option<Tensor<f32>>>> {
    let refs: Vec<_> = vars.iter().collect();
    Ok(tape
        .grad(loss, &refs, false)?
        .into_iter()
        .map(|g| g.map(|g| g.value().clone()))
        .collect())
}

/// One critic update on fresh batches, then a generator update on fresh
/// batches when the iteration index closes a critic cycle.
pub fn train_iteration(state: &mut TrainState, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<IterationOutcome> {
    let it = state.iteration;
    let lr = learning_rate(it, cfg)?;

    let (a, b) = sample_unpaired_batch(data.set_a, data.set_b, cfg.batch_size, &mut state.sampler)?;
    let tape = Tape::<f32>::new();
    let gen = state.generator.bind(&tape, false);
    let critic = state.critic.bind(&tape, true);
    let (av, bv) = (tape.constant(a.into_tensor()), tape.constant(b.into_tensor()));
    let d_terms = critic_loss(&critic, &gen, &av, &bv, &cfg.weights, &mut state.rng)?;
    let d_grads = param_grads(&tape, &d_terms.total, critic.vars())?;
    drop(gen);
    drop(critic);
    state.opt_d.step(state.critic.params_mut(), &d_grads, lr)?;

    let generator_updated = cfg.updates_generator(it);
    let mut g_terms = None;
    if generator_updated {
        let (a, b) = sample_unpaired_batch(data.set_a, data.set_b, cfg.batch_size, &mut state.sampler)?;
        let tape = Tape::<f32>::new();
        let gen = state.generator.bind(&tape, true);
        let critic = state.critic.bind(&tape, false);
        let (av, bv) = (tape.constant(a.into_tensor()), tape.constant(b.into_tensor()));
        let terms = generator_losses(&critic, &gen, &av, &bv, &cfg.weights, cfg.adv_on_b)?;
        let g_grads = param_grads(&tape, &terms.total, gen.vars())?;
        state.opt_g.step(state.generator.params_mut(), &g_grads, lr)?;
        g_terms = Some(terms);
    }
    let losses = LossBreakdown::from_terms(&d_terms, g_terms.as_ref());
    state.iteration += 1;
    Ok(IterationOutcome {
        iteration: it,
        lr,
        generator_updated,
        losses,
    })
}

#[derive(Serialize, Deserialize)]
struct StateExtra {
    seed: u64,
    opt_g_steps: u64,
    opt_d_steps: u64,
    betas: (f64, f64),
    adam_eps: f64,
    sampler_a_word: String,
    sampler_b_word: String,
    rng_word: String,
}

fn push_set<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, names: &[String], ts: &'a [Tensor<f32>]) {
    for (n, t) in names.iter().zip(ts) {
        out.push((format!("{prefix}{n}"), t));
    }
}

/// Writes the full training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = ArchiveMeta {
        channels: state.generator.channels(),
        image_size: state.critic.image_size(),
        width_scale: state.generator.width_scale(),
        iteration: state.iteration,
    };
    let gn = state.generator.params().names();
    let cn = state.critic.params().names();
    let mut arrays = Vec::new();
    push_set(&mut arrays, "generator.", gn, state.generator.params().tensors());
    push_set(&mut arrays, "critic.", cn, state.critic.params().tensors());
    push_set(&mut arrays, "opt_g.m.", gn, state.opt_g.moments().0);
    push_set(&mut arrays, "opt_g.v.", gn, state.opt_g.moments().1);
    push_set(&mut arrays, "opt_d.m.", cn, state.opt_d.moments().0);
    push_set(&mut arrays, "opt_d.v.", cn, state.opt_d.moments().1);
    let extra = StateExtra {
        seed: state.seed,
        opt_g_steps: state.opt_g.steps,
        opt_d_steps: state.opt_d.steps,
        betas: (state.opt_g.beta1, state.opt_g.beta2),
        adam_eps: state.opt_g.eps,
        sampler_a_word: state.sampler.rng_a.get_word_pos().to_string(),
        sampler_b_word: state.sampler.rng_b.get_word_pos().to_string(),
        rng_word: state.rng.get_word_pos().to_string(),
    };
    let extra = serde_json::to_value(extra).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write_archive(path, &meta, &arrays, extra)
}

fn take(path: &Path, arrays: Vec<(String, Tensor<f32>)>, names: &[String]) -> Result<Vec<Tensor<f32>>> {
    let missing = |n: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("missing array {n}"),
    };
    names
        .iter()
        .map(|n| {
            arrays
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| missing(n))
        })
        .collect()
}

/// Loads a full training state written by [`save_checkpoint`], checking it
/// against the model described by `cfg`.
pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let archive = read_archive::<f32>(path)?;
    let h = &archive.header;
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if h.image_size != cfg.image_size || h.channels != cfg.channels || h.width_scale != cfg.width_scale {
        return Err(fail(format!(
            "checkpoint is {}ch {}px width {} but config asks {}ch {}px width {}",
            h.channels, h.image_size, h.width_scale, cfg.channels, cfg.image_size, cfg.width_scale
        )));
    }
    let extra: StateExtra = serde_json::from_value(h.extra.clone())
        .map_err(|e| fail(format!("not a training checkpoint: {e}")))?;
    let mut state = TrainState::new(&TrainConfig {
        seed: extra.seed,
        beta1: extra.betas.0,
        beta2: extra.betas.1,
        adam_eps: extra.adam_eps,
        ..cfg.clone()
    })?;
    let gn = state.generator.params().names().to_vec();
    let cn = state.critic.params().names().to_vec();
    state.generator = state.generator.with_tensors(take(path, archive.with_prefix("generator."), &gn)?)?;
    state.critic = state.critic.with_tensors(take(path, archive.with_prefix("critic."), &cn)?)?;
    state.opt_g.set_moments(
        take(path, archive.with_prefix("opt_g.m."), &gn)?,
        take(path, archive.with_prefix("opt_g.v."), &gn)?,
    )?;
    state.opt_d.set_moments(
        take(path, archive.with_prefix("opt_d.m."), &cn)?,
        take(path, archive.with_prefix("opt_d.v."), &cn)?,
    )?;
    state.opt_g.steps = extra.opt_g_steps;
    state.opt_d.steps = extra.opt_d_steps;
    let word = |s: &str| s.parse::<u128>().map_err(|e| fail(format!("bad rng position: {e}")));
    state.sampler.rng_a.set_word_pos(word(&extra.sampler_a_word)?);
    state.sampler.rng_b.set_word_pos(word(&extra.sampler_b_word)?);
    state.rng.set_word_pos(word(&extra.rng_word)?);
    state.iteration = h.iteration;
    Ok(state)
}

/// Loads only the generator from any checkpoint archive.
pub fn load_generator(path: &Path) -> Result<(GeneratorParams<f32>, ArchiveMeta)> {
    let archive = read_archive::<f32>(path)?;
    let meta = archive.header.meta();
    let template = init_generator::<f32>(meta.channels, meta.width_scale, 0)?;
    let names = template.params().names().to_vec();
    let g = template.with_tensors(take(path, archive.with_prefix("generator."), &names)?)?;
    Ok((g, meta))
}

/// File name of the checkpoint written after `iteration` iterations.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.ckpt")
}

/// Outputs of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Where training reads data and writes artifacts.
#[derive(Clone, Debug)]
pub struct TrainPaths {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh state.
    pub resume: Option<PathBuf>,
}

/// Loads set A and set B; only training splits are ever opened.
pub fn load_training_sets(data_root: &Path, image_size: usize, channels: usize) -> Result<(ImageSet, ImageSet)> {
    let a = ImageSet::load(load_split(data_root, Split::TrainA)?, image_size, channels)?;
    let b = ImageSet::load(load_split(data_root, Split::TrainB)?, image_size, channels)?;
    Ok((a, b))
}

/// Trains to `cfg.total_iterations`, checkpointing every `checkpoint_every`
/// iterations and at the end. A non-finite loss aborts the run after writing
/// the current state to `nonfinite_snapshot.ckpt`.
pub fn run_training(cfg: &TrainConfig, paths: &TrainPaths) -> Result<TrainingRun> {
    cfg.validate()?;
    std::fs::create_dir_all(&paths.out_dir).at(&paths.out_dir)?;
    let (set_a, set_b) = load_training_sets(&paths.data_root, cfg.image_size, cfg.channels)?;
    let data = TrainData {
        set_a: &set_a,
        set_b: &set_b,
    };
    let mut state = match &paths.resume {
        Some(p) => load_checkpoint(p, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let log_path = paths.out_dir.join("losses.csv");
    let mut log = LossLog::open(&log_path)?;
    let mut checkpoints = Vec::new();
    let started = std::time::Instant::now();
    while state.iteration < cfg.total_iterations {
        let outcome = match train_iteration(&mut state, &data, cfg) {
            Ok(o) => o,
            Err(e @ Error::NonFinite(_)) => {
                let snap = paths.out_dir.join("nonfinite_snapshot.ckpt");
                if let Err(se) = save_checkpoint(&state, &snap) {
                    warn!("could not write snapshot: {se}");
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log.append(&LossRow::new(outcome.iteration, &outcome.losses, outcome.lr))?;
        if state.iteration % cfg.checkpoint_every == 0 || state.iteration == cfg.total_iterations {
            let p = paths.out_dir.join(checkpoint_name(state.iteration));
            save_checkpoint(&state, &p)?;
            info!(
                "iteration {} d={:.4} gp={:.4} rec={:?} ({:.1}s)",
                state.iteration,
                outcome.losses.adv_d,
                outcome.losses.gp,
                outcome.losses.reconstruction,
                started.elapsed().as_secs_f64()
            );
            checkpoints.push(p);
        }
    }
    let final_checkpoint = paths.out_dir.join(checkpoint_name(state.iteration));
    if !final_checkpoint.exists() {
        save_checkpoint(&state, &final_checkpoint)?;
        checkpoints.push(final_checkpoint.clone());
    }
    Ok(TrainingRun {
        checkpoints,
        final_checkpoint,
        loss_log: log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(0, &cfg).unwrap(), 1e-4);
        assert_eq!(learning_rate(300_000, &cfg).unwrap(), 1e-4);
        assert!((learning_rate(350_000, &cfg).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(learning_rate(400_000, &cfg).unwrap(), 0.0);
        assert!(learning_rate(400_001, &cfg).is_err());
    }

    #[test]
    fn generator_update_pattern() {
        let cfg = TrainConfig::default();
        let hits: Vec<u64> = (0..4).filter(|&i| cfg.updates_generator(i)).collect();
        assert_eq!(hits, vec![1, 3]);
        let every = TrainConfig {
            critic_steps_per_gen_step: 1,
            ..TrainConfig::default()
        };
        assert!((0..5).all(|i| every.updates_generator(i)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.decay_iterations = cfg.total_iterations + 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            critic_steps_per_gen_step: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    /// Adam's first step moves each coordinate by `lr` against the gradient sign.
    #[test]
    fn adam_first_step() {
        let mut p = init_generator::<f64>(1, 1.0 / 64.0, 0).unwrap();
        let before = p.params().clone();
        let mut opt = Adam::new(p.params(), 0.5, 0.999, 1e-12);
        let grads: Vec<Option<Tensor<f64>>> = before
            .tensors()
            .iter()
            .map(|t| Some(Tensor::full(t.shape(), -3.0)))
            .collect();
        opt.step(p.params_mut(), &grads, 1e-2).unwrap();
        for (a, b) in p.params().tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 1e-2).abs() < 1e-9);
            }
        }
    }
}
