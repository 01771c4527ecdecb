//! Checkpoint selection by Fréchet distance between feature statistics of
//! translated validation images and real healthy images.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tapegrad::conv::conv2d;
use tapegrad::{ConvGeom, Tensor};

use crate::batch::ImageBatch;
use crate::composition::compose_healthy;
use crate::datasets::ImageSet;
use crate::error::{Error, Result};
use crate::networks::GeneratorParams;
use crate::trainer::load_generator;

/// Maps image batches to one feature vector per image.
pub trait FeatureExtractor {
    fn channels(&self) -> usize;
    fn dim(&self) -> usize;
    fn embed(&self, batch: &ImageBatch) -> Result<Vec<Vec<f64>>>;
}

/// Fixed random convolutional embedder: three 4×4 stride-2 convolutions with
/// leaky ReLU, then global average and standard-deviation pooling.
#[derive(Clone, Debug)]
pub struct RandomConvEmbedder {
    channels: usize,
    weights: Vec<Tensor<f32>>,
}

impl RandomConvEmbedder {
    pub const WIDTHS: [usize; 3] = [16, 32, 32];

    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = channels;
        let mut weights = Vec::new();
        for &w in &Self::WIDTHS {
            // variance-preserving scale for the fan-in
            let std = (2.0 / (prev * 16) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            weights.push(Tensor::from_fn(&[w, prev, 4, 4], |_| normal.sample(&mut rng) as f32));
            prev = w;
        }
        Self { channels, weights }
    }
}

impl FeatureExtractor for RandomConvEmbedder {
    fn channels(&self) -> usize {
        self.channels
    }

    fn dim(&self) -> usize {
        2 * Self::WIDTHS[Self::WIDTHS.len() - 1]
    }

    fn embed(&self, batch: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        if batch.channels() != self.channels {
            return Err(Error::Shape(format!(
                "embedder expects {} channels, got {}",
                self.channels,
                batch.channels()
            )));
        }
        let mut y = batch.tensor().clone();
        for w in &self.weights {
            y = conv2d(&y, w, ConvGeom::new(2, 1))?.map(|v| if v > 0.0 { v } else { 0.2 * v });
        }
        let s = y.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        let d = y.data();
        Ok((0..s[0])
            .map(|n| {
                let mut f = Vec::with_capacity(2 * c);
                let mut sd = Vec::with_capacity(c);
                for k in 0..c {
                    let v = &d[(n * c + k) * plane..(n * c + k + 1) * plane];
                    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
                    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
                    f.push(mean);
                    sd.push(var.sqrt());
                }
                f.extend(sd);
                f
            })
            .collect())
    }
}

/// Running mean and co-moment accumulator, mergeable across streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAccumulator {
    n: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl FeatureAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("feature of length {} for dimension {}", x.len(), self.dim())));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.comoment += &delta * delta2.transpose();
        Ok(())
    }

    /// Combines two accumulators as if their samples had been pushed into one.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Shape("merging accumulators of different dimension".into()));
        }
        if other.n == 0 {
            return Ok(());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment + &delta * delta.transpose() * (na * nb / n);
        self.mean += &delta * (nb / n);
        self.n += other.n;
        Ok(())
    }

    /// Sample statistics with the unbiased covariance.
    pub fn finish(&self) -> Result<FeatureStats> {
        if self.n < 2 {
            return Err(Error::Degenerate(format!("{} feature samples, need at least 2", self.n)));
        }
        let cov = &self.comoment / (self.n - 1) as f64;
        Ok(FeatureStats {
            mean: self.mean.clone(),
            covariance: (&cov + cov.transpose()) * 0.5,
            n: self.n,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let dim = features.first().map_or(0, |f| f.len());
        let mut acc = FeatureAccumulator::new(dim);
        for f in features {
            acc.push(f)?;
        }
        acc.finish()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Streams image batches through `extractor` into feature statistics.
pub fn extract_features<I>(batches: I, extractor: &dyn FeatureExtractor) -> Result<FeatureStats>
where
    I: IntoIterator<Item = Result<ImageBatch>>,
{
    let mut acc = FeatureAccumulator::new(extractor.dim());
    for b in batches {
        for f in extractor.embed(&b?)? {
            acc.push(&f)?;
        }
    }
    acc.finish()
}

/// Symmetric positive semi-definite square root, negative eigenvalues clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_RETRIES: usize = 3;

/// Trace of `(Σ₁ Σ₂)^{1/2}` via the eigenvalues of `√Σ₁ Σ₂ √Σ₁`. `None` when
/// a negative eigenvalue exceeds the rounding tolerance.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let r = psd_sqrt(s1);
    let p = &r * s2 * &r;
    let p = (&p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(p);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-9 * scale * eig.eigenvalues.len() as f64;
    if eig.eigenvalues.iter().any(|&v| v < -tol || !v.is_finite()) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, clamped at zero.
pub fn frechet_distance(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!("feature dimensions {} and {}", s1.dim(), s2.dim())));
    }
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let (c1, c2) = (sym(&s1.covariance), sym(&s2.covariance));
    let mean_term = (&s1.mean - &s2.mean).norm_squared();
    let d = s1.dim();
    let mut jitter = 0.0;
    for attempt in 0..=JITTER_RETRIES {
        if attempt > 0 {
            jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        }
        let eye = DMatrix::<f64>::identity(d, d) * jitter;
        let (a, b) = (&c1 + &eye, &c2 + &eye);
        if let Some(tr) = trace_sqrt_product(&a, &b) {
            let fid = mean_term + a.trace() + b.trace() - 2.0 * tr;
            return Ok(fid.max(0.0));
        }
    }
    Err(Error::Numerical("matrix square root did not converge after jitter".into()))
}

/// Maps an image batch to its translated healthy counterpart.
pub trait HealthyTranslator {
    fn translate(&self, x: &ImageBatch) -> Result<ImageBatch>;
}

impl HealthyTranslator for GeneratorParams<f32> {
    fn translate(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let out = self.forward(x)?;
        compose_healthy(x, &out.intermediate, &out.mask)
    }
}

/// A translator to rank, or the error that prevented building it.
pub struct Candidate<'a> {
    pub path: PathBuf,
    pub iteration: u64,
    pub translator: Result<Box<dyn HealthyTranslator + 'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntry {
    pub path: PathBuf,
    pub iteration: u64,
    pub fid: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub entries: Vec<SelectionEntry>,
    pub chosen: usize,
}

impl Selection {
    pub fn best(&self) -> &SelectionEntry {
        &self.entries[self.chosen]
    }
}

/// FID of one translator's outputs on `inputs` against `reference`.
pub fn translated_fid(
    translator: &dyn HealthyTranslator,
    inputs: &ImageSet,
    reference: &FeatureStats,
    extractor: &dyn FeatureExtractor,
    batch_size: usize,
) -> Result<f64> {
    let stats = extract_features(
        inputs.chunks(batch_size).map(|b| b.and_then(|b| translator.translate(&b))),
        extractor,
    )?;
    frechet_distance(&stats, reference)
}

/// Ranks candidates by FID; a single candidate is returned without scoring.
/// Failing candidates are skipped with a warning, ties go to the later
/// iteration.
pub fn select_best(
    candidates: Vec<Candidate<'_>>,
    inputs: &ImageSet,
    reference: &FeatureStats,
    extractor: &dyn FeatureExtractor,
    batch_size: usize,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("no checkpoints to select from".into()));
    }
    let single = candidates.len() == 1;
    let mut entries = Vec::with_capacity(candidates.len());
    for c in candidates {
        let result = c
            .translator
            .and_then(|t| translated_fid(t.as_ref(), inputs, reference, extractor, batch_size));
        let (fid, error) = match result {
            Ok(f) => (Some(f), None),
            Err(e) => {
                warn!("skipping {}: {e}", c.path.display());
                (None, Some(e.to_string()))
            }
        };
        entries.push(SelectionEntry {
            path: c.path,
            iteration: c.iteration,
            fid,
            error,
        });
    }
    let mut chosen: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        let Some(f) = e.fid else { continue };
        chosen = match chosen {
            None => Some(i),
            Some(j) => {
                let (g, it) = (entries[j].fid.unwrap(), entries[j].iteration);
                if f < g || (f == g && e.iteration > it) {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    if single {
        // the only candidate is chosen even when it cannot be scored
        chosen = Some(0);
    }
    let chosen = chosen.ok_or_else(|| Error::Numerical("every checkpoint failed to score".into()))?;
    Ok(Selection { entries, chosen })
}

/// Loads each checkpoint's generator and ranks them.
pub fn select_best_checkpoint(
    checkpoints: &[PathBuf],
    inputs: &ImageSet,
    reference: &ImageSet,
    extractor: &dyn FeatureExtractor,
    batch_size: usize,
) -> Result<Selection> {
    let reference = extract_features(reference.chunks(batch_size), extractor)?;
    let candidates = checkpoints
        .iter()
        .map(|p| {
            let loaded = load_generator(p);
            let iteration = loaded.as_ref().map_or(0, |(_, m)| m.iteration);
            Candidate {
                path: p.clone(),
                iteration,
                translator: loaded.map(|(g, _)| Box::new(g) as Box<dyn HealthyTranslator>),
            }
        })
        .collect();
    select_best(candidates, inputs, &reference, extractor, batch_size)
}

/// Writes `path,iteration,fid,selected` rows.
pub fn write_selection_csv(sel: &Selection, path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["path", "iteration", "fid", "selected"]).map_err(err)?;
    for (i, e) in sel.entries.iter().enumerate() {
        w.write_record([
            e.path.display().to_string(),
            e.iteration.to_string(),
            e.fid.map(|f| f.to_string()).unwrap_or_default(),
            (i == sel.chosen).to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
