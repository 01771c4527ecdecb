//! Critic and generator objectives.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Real, Tensor, Var};

use crate::composition::{compose_healthy_var, compose_reconstruction_var};
use crate::error::{Error, IoContext, Result};
use crate::networks::{Critic, Translator};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_gp: f64,
    pub lambda_rec: f64,
    pub lambda_id: f64,
    pub lambda_f: f64,
    pub lambda_fs: f64,
    pub lambda_fz: f64,
    pub epsilon_focus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            lambda_rec: 1.0,
            lambda_id: 1.0,
            lambda_f: 0.1,
            lambda_fs: 1.0,
            lambda_fz: 1.0,
            epsilon_focus: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_gp", self.lambda_gp),
            ("lambda_rec", self.lambda_rec),
            ("lambda_id", self.lambda_id),
            ("lambda_f", self.lambda_f),
            ("lambda_fs", self.lambda_fs),
            ("lambda_fz", self.lambda_fz),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if !(self.epsilon_focus > 0.0) || !self.epsilon_focus.is_finite() {
            return Err(Error::Config(format!(
                "epsilon_focus = {} must be positive",
                self.epsilon_focus
            )));
        }
        Ok(())
    }
}

fn c<T: Real>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn check_finite<T: Real>(v: &Var<T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} is not finite")))
    }
}

fn check_same<T: Real>(x: &Var<T>, y: &Var<T>, what: &str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Mean of the critic's patch map over batch and patches.
pub fn mean_score<T: Real>(critic: &impl Critic<T>, x: &Var<T>) -> Result<Var<T>> {
    Ok(critic.score(x)?.mean())
}

/// Gradient penalty at interpolates `u·real + (1 − u)·fake`, one `u` per
/// sample drawn from `rng`.
pub fn gradient_penalty<T: Real>(
    critic: &impl Critic<T>,
    real_b: &Var<T>,
    fake: &Var<T>,
    rng: &mut impl Rng,
) -> Result<Var<T>> {
    let n = real_b.shape().first().copied().unwrap_or(0);
    let u: Vec<T> = (0..n).map(|_| c(rng.random::<f64>())).collect();
    gradient_penalty_at(critic, real_b, fake, &u)
}

/// Gradient penalty with explicit interpolation weights. The interpolate is
/// a fresh leaf; the returned penalty stays differentiable in the critic's
/// parameters.
pub fn gradient_penalty_at<T: Real>(critic: &impl Critic<T>, real_b: &Var<T>, fake: &Var<T>, u: &[T]) -> Result<Var<T>> {
    check_same(real_b, fake, "gradient penalty endpoints")?;
    let s = real_b.shape().to_vec();
    if s.is_empty() || u.len() != s[0] {
        return Err(Error::Shape(format!("{} weights for batch shape {s:?}", u.len())));
    }
    let per = s[1..].iter().product::<usize>();
    let (r, f) = (real_b.value().data(), fake.value().data());
    let xhat = Tensor::from_fn(&s, |i| {
        let w = u[i / per];
        w * r[i] + (T::one() - w) * f[i]
    });
    let tape = real_b.tape();
    let xhat = tape.var(xhat);
    // per-sample patch mean, summed so each sample's gradient is its own
    let score = critic.score(&xhat)?.mean_per_sample().sum();
    let grad = tape.grad(&score, &[&xhat], true)?.remove(0);
    let mut stats = vec![1; s.len()];
    stats[0] = s[0];
    let norm = match grad {
        Some(g) => {
            check_finite(&g, "critic input gradient")?;
            g.square().sum_to(&stats).sqrt()
        }
        None => tape.constant(Tensor::zeros(&stats)),
    };
    Ok(norm.add_scalar(-T::one()).square().mean())
}

/// Critic-side terms: `total = E[D(fake)] − E[D(real)] + λ_gp·gp`.
#[derive(Clone, Debug)]
pub struct CriticTerms<T> {
    pub total: Var<T>,
    pub gp: Var<T>,
}

/// Critic objective on fakes translated from `batch_a` and real `batch_b`.
/// The generator runs outside the graph, so no gradient reaches it.
pub fn critic_loss<T: Real>(
    critic: &impl Critic<T>,
    generator: &impl Translator<T>,
    batch_a: &Var<T>,
    batch_b: &Var<T>,
    w: &LossWeights,
    rng: &mut impl Rng,
) -> Result<CriticTerms<T>> {
    let tape = batch_a.tape().clone();
    let fake = tape.no_grad(|| -> Result<Var<T>> {
        let out = generator.translate(&batch_a.detach())?;
        compose_healthy_var(&batch_a.detach(), &out.intermediate, &out.mask)
    })?;
    let fake = fake.detach();
    critic_loss_on_fakes(critic, &fake, batch_b, w, rng)
}

/// Critic objective given precomputed fakes.
pub fn critic_loss_on_fakes<T: Real>(
    critic: &impl Critic<T>,
    fake: &Var<T>,
    real_b: &Var<T>,
    w: &LossWeights,
    rng: &mut impl Rng,
) -> Result<CriticTerms<T>> {
    let real_b = real_b.detach();
    let gp = gradient_penalty(critic, &real_b, fake, rng)?;
    let adv = mean_score(critic, fake)?.sub(&mean_score(critic, &real_b)?);
    let total = adv.add(&gp.scale(c(w.lambda_gp)));
    check_finite(&total, "critic loss")?;
    Ok(CriticTerms { total, gp })
}

/// `−(E[D(fake_a)] + E[D(fake_b)])`; the second term is dropped when
/// `fakes_from_b` is `None`.
pub fn generator_adversarial_loss<T: Real>(
    critic: &impl Critic<T>,
    fakes_from_a: &Var<T>,
    fakes_from_b: Option<&Var<T>>,
) -> Result<Var<T>> {
    let mut s = mean_score(critic, fakes_from_a)?;
    if let Some(b) = fakes_from_b {
        check_same(fakes_from_a, b, "adversarial fakes")?;
        s = s.add(&mean_score(critic, b)?);
    }
    Ok(s.neg())
}

/// Mean absolute deviation of `B_int` on set-B inputs from those inputs.
pub fn identity_loss<T: Real>(intermediate_on_b: &Var<T>, batch_b: &Var<T>) -> Result<Var<T>> {
    check_same(intermediate_on_b, batch_b, "identity loss")?;
    Ok(intermediate_on_b.sub(batch_b).abs().mean())
}

/// Mean absolute deviation between `A` and its reconstruction `A'`.
pub fn reconstruction_loss<T: Real>(batch_a: &Var<T>, a_prime: &Var<T>) -> Result<Var<T>> {
    check_same(batch_a, a_prime, "reconstruction loss")?;
    Ok(batch_a.sub(a_prime).abs().mean())
}

/// Per sample `λ_fs·(mean M)² + λ_fz·mean(1/(|M − ½| + ε))`, averaged over the batch.
pub fn focus_loss<T: Real>(m: &Var<T>, w: &LossWeights) -> Result<Var<T>> {
    let s = m.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("focus loss expects (N, 1, H, W), got {s:?}")));
    }
    let (lo, hi) = m.value().min_max();
    if m.value().numel() > 0 && (lo < T::zero() || hi > T::one()) {
        return Err(Error::Range(format!("mask spans [{lo}, {hi}], expected within [0, 1]")));
    }
    let size = m.mean_per_sample().square().scale(c(w.lambda_fs));
    let zero_one = m
        .add_scalar(c(-0.5))
        .abs()
        .add_scalar(c(w.epsilon_focus))
        .recip()
        .mean_per_sample()
        .scale(c(w.lambda_fz));
    Ok(size.add(&zero_one).mean())
}

/// `adv + λ_rec·rec + λ_id·id + λ_f·focus`.
pub fn generator_total_loss<T: Real>(
    adv: &Var<T>,
    reconstruction: &Var<T>,
    identity: &Var<T>,
    focus: &Var<T>,
    w: &LossWeights,
) -> Var<T> {
    adv.add(&reconstruction.scale(c(w.lambda_rec)))
        .add(&identity.scale(c(w.lambda_id)))
        .add(&focus.scale(c(w.lambda_f)))
}

/// Generator-side terms.
#[derive(Clone, Debug)]
pub struct GeneratorTerms<T> {
    pub adv: Var<T>,
    pub identity: Var<T>,
    pub reconstruction: Var<T>,
    pub focus: Var<T>,
    pub total: Var<T>,
}

/// All generator objectives for one pair of batches. The focus term is the
/// mean of the focus loss over the masks produced for `A` and for `B`.
pub fn generator_losses<T: Real>(
    critic: &impl Critic<T>,
    generator: &impl Translator<T>,
    batch_a: &Var<T>,
    batch_b: &Var<T>,
    w: &LossWeights,
    adv_on_b: bool,
) -> Result<GeneratorTerms<T>> {
    let out_a = generator.translate(batch_a)?;
    let out_b = generator.translate(batch_b)?;
    let fake_a = compose_healthy_var(batch_a, &out_a.intermediate, &out_a.mask)?;
    let a_prime = compose_reconstruction_var(batch_a, &out_a.intermediate, &out_a.mask)?;
    let fake_b = if adv_on_b {
        Some(compose_healthy_var(batch_b, &out_b.intermediate, &out_b.mask)?)
    } else {
        None
    };
    let adv = generator_adversarial_loss(critic, &fake_a, fake_b.as_ref())?;
    let identity = identity_loss(&out_b.intermediate, batch_b)?;
    let reconstruction = reconstruction_loss(batch_a, &a_prime)?;
    let focus = focus_loss(&out_a.mask, w)?
        .add(&focus_loss(&out_b.mask, w)?)
        .scale(c(0.5));
    let total = generator_total_loss(&adv, &reconstruction, &identity, &focus, w);
    check_finite(&total, "generator loss")?;
    Ok(GeneratorTerms {
        adv,
        identity,
        reconstruction,
        focus,
        total,
    })
}

/// Scalar loss values for one iteration. Generator fields are absent on
/// iterations without a generator update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub gp: f64,
    pub adv_g: Option<f64>,
    pub identity: Option<f64>,
    pub reconstruction: Option<f64>,
    pub focus: Option<f64>,
    pub total_d: f64,
    pub total_g: Option<f64>,
}

impl LossBreakdown {
    pub fn from_terms<T: Real>(critic: &CriticTerms<T>, generator: Option<&GeneratorTerms<T>>) -> Self {
        let f = |v: &Var<T>| v.item().to_f64().unwrap();
        let adv_d = f(&critic.total);
        Self {
            adv_d,
            gp: f(&critic.gp),
            adv_g: generator.map(|g| f(&g.adv)),
            identity: generator.map(|g| f(&g.identity)),
            reconstruction: generator.map(|g| f(&g.reconstruction)),
            focus: generator.map(|g| f(&g.focus)),
            total_d: adv_d,
            total_g: generator.map(|g| f(&g.total)),
        }
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub adv_d: f64,
    pub gp: f64,
    pub adv_g: Option<f64>,
    pub id: Option<f64>,
    pub rec: Option<f64>,
    pub focus: Option<f64>,
    pub total_g: Option<f64>,
    pub lr: f64,
}

impl LossRow {
    pub fn new(iteration: u64, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            iteration,
            adv_d: b.adv_d,
            gp: b.gp,
            adv_g: b.adv_g,
            id: b.identity,
            rec: b.reconstruction,
            focus: b.focus,
            total_g: b.total_g,
            lr,
        }
    }
}

/// Appending CSV writer for [`LossRow`]s.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossLog {
    /// Opens `path` for appending, writing the header only to a new or empty file.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &LossRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| self.err(e))?;
        self.writer.flush().at(&self.path)
    }

    fn err(&self, e: csv::Error) -> Error {
        Error::Manifest {
            path: self.path.clone(),
            msg: e.to_string(),
        }
    }
}

/// Reads a loss log written by [`LossLog`].
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<LossRow>, _>>()
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}
