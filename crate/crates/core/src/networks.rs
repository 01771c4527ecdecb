//! Generator (encoder, residual bottleneck, decoder emitting image + mask) and
//! the patch critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tapegrad::{ConvGeom, Real, Tape, Tensor, Var};

use crate::batch::{ImageBatch, MaskBatch};
use crate::error::{Error, Result};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.02;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const CRITIC_SLOPE: f64 = 0.01;
/// Number of residual blocks in the generator bottleneck.
pub const RESIDUAL_BLOCKS: usize = 6;
/// Number of stride-2 convolutions in the critic.
pub const CRITIC_STRIDED_LAYERS: usize = 6;
/// Spatial reduction of the critic per side.
pub const CRITIC_DOWNSAMPLE: usize = 1 << CRITIC_STRIDED_LAYERS;

/// Channel count for a base width under a width-scale factor (at least one).
pub fn scaled_width(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(1)
}

/// Ordered, named trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces every tensor, keeping names; shapes must match.
    pub fn replace_all(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("parameter set layout mismatch".into()));
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var<T>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.var(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn conv<T: Real>(&mut self, shape: [usize; 4]) -> Tensor<T> {
        Tensor::from_fn(&shape, |_| T::from_f64_lossy(self.normal.sample(&mut self.rng)))
    }
}

/// Instance normalisation over each sample's channel planes, with learned
/// per-channel scale and shift of shape `(1, C, 1, 1)`.
pub fn instance_norm<T: Real>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
    let s = x.shape();
    let stats = [s[0], s[1], 1, 1];
    let inv_hw = T::one() / T::from_usize(s[2] * s[3]).unwrap();
    let mean = x.sum_to(&stats).scale(inv_hw);
    let centered = x.sub_b(&mean);
    let var = centered.square().sum_to(&stats).scale(inv_hw);
    let inv_std = var
        .add_scalar(T::from_f64_lossy(INSTANCE_NORM_EPS))
        .sqrt()
        .recip();
    centered.mul_b(&inv_std).mul_b(gamma).add_b(beta)
}

/// Generator layer widths `(encoder1, encoder2, bottleneck)`.
fn generator_widths(width_scale: f64) -> (usize, usize, usize) {
    (
        scaled_width(64, width_scale),
        scaled_width(128, width_scale),
        scaled_width(256, width_scale),
    )
}

/// Critic layer widths, `64 .. 2048` scaled.
fn critic_widths(width_scale: f64) -> Vec<usize> {
    (0..CRITIC_STRIDED_LAYERS)
        .map(|i| scaled_width(64 << i, width_scale))
        .collect()
}

/// Trainable generator parameters.
///
/// Encoder: 7×7 conv (64), two 4×4 stride-2 convs (128, 256), each followed by
/// instance norm and ReLU. Bottleneck: six residual blocks at 256 channels.
/// Decoder: two 4×4 stride-2 transposed convs (128, 64) with instance norm and
/// ReLU, then a 7×7 transposed conv to `C + 1` channels under tanh. Convolutions
/// feeding an instance norm carry no bias, nor does the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams<T> {
    channels: usize,
    width_scale: f64,
    params: ParamSet<T>,
}

fn push_norm<T: Real>(p: &mut ParamSet<T>, name: &str, width: usize) {
    p.push(format!("{name}.gamma"), Tensor::ones(&[1, width, 1, 1]));
    p.push(format!("{name}.beta"), Tensor::zeros(&[1, width, 1, 1]));
}

fn check_vars<T: Real>(params: &ParamSet<T>, vars: &[Var<T>]) -> Result<()> {
    if vars.len() != params.len() {
        return Err(Error::Shape(format!("{} variables for {} parameters", vars.len(), params.len())));
    }
    for ((n, t), v) in params.names().iter().zip(params.tensors()).zip(vars) {
        if v.shape() != t.shape() {
            return Err(Error::Shape(format!("{n}: variable {:?} vs parameter {:?}", v.shape(), t.shape())));
        }
    }
    Ok(())
}

/// Builds generator parameters, normal(0, 0.02) weights drawn deterministically from `seed`.
pub fn init_generator<T: Real>(channels: usize, width_scale: f64, seed: u64) -> Result<GeneratorParams<T>> {
    if channels == 0 {
        return Err(Error::Config("generator needs at least one channel".into()));
    }
    if !(width_scale > 0.0) {
        return Err(Error::Config(format!("width_scale {width_scale} must be positive")));
    }
    let (w1, w2, w3) = generator_widths(width_scale);
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    p.push("enc1.weight".into(), init.conv([w1, channels, 7, 7]));
    push_norm(&mut p, "enc1.norm", w1);
    p.push("enc2.weight".into(), init.conv([w2, w1, 4, 4]));
    push_norm(&mut p, "enc2.norm", w2);
    p.push("enc3.weight".into(), init.conv([w3, w2, 4, 4]));
    push_norm(&mut p, "enc3.norm", w3);
    for b in 0..RESIDUAL_BLOCKS {
        p.push(format!("res{b}.conv1.weight"), init.conv([w3, w3, 3, 3]));
        push_norm(&mut p, &format!("res{b}.norm1"), w3);
        p.push(format!("res{b}.conv2.weight"), init.conv([w3, w3, 3, 3]));
        push_norm(&mut p, &format!("res{b}.norm2"), w3);
    }
    // transposed-conv weights are (in, out, k, k)
    p.push("dec1.weight".into(), init.conv([w3, w2, 4, 4]));
    push_norm(&mut p, "dec1.norm", w2);
    p.push("dec2.weight".into(), init.conv([w2, w1, 4, 4]));
    push_norm(&mut p, "dec2.norm", w1);
    p.push("out.weight".into(), init.conv([w1, channels + 1, 7, 7]));
    Ok(GeneratorParams {
        channels,
        width_scale,
        params: p,
    })
}

impl<T: Real> GeneratorParams<T> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width_scale(&self) -> f64 {
        self.width_scale
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Rebuilds from stored tensors after checking they match this layout.
    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        out.params.replace_all(tensors)?;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> GeneratorParams<U> {
        GeneratorParams {
            channels: self.channels,
            width_scale: self.width_scale,
            params: self.params.cast(),
        }
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundGenerator<T> {
        BoundGenerator {
            channels: self.channels,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Uses caller-owned variables, in parameter order, as the weights.
    pub fn bind_vars(&self, vars: Vec<Var<T>>) -> Result<BoundGenerator<T>> {
        check_vars(&self.params, &vars)?;
        Ok(BoundGenerator {
            channels: self.channels,
            vars,
        })
    }

    /// Inference pass outside any training graph.
    pub fn forward(&self, x: &ImageBatch<T>) -> Result<GeneratorOutput<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(&tape.constant(x.tensor().clone()))?;
        Ok(GeneratorOutput {
            intermediate: ImageBatch::new(out.intermediate.value().clone())?,
            mask: MaskBatch::new(out.mask.value().clone())?,
        })
    }
}

/// Generator output as tape variables.
#[derive(Clone, Debug)]
pub struct GeneratorVars<T> {
    /// `B_int`: `C` channels in `[-1, 1]`.
    pub intermediate: Var<T>,
    /// `M`: one channel in `[0, 1]`.
    pub mask: Var<T>,
}

/// Materialised generator output.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput<T = f32> {
    pub intermediate: ImageBatch<T>,
    pub mask: MaskBatch<T>,
}

/// Generator parameters placed on a tape.
pub struct BoundGenerator<T> {
    channels: usize,
    vars: Vec<Var<T>>,
}

/// Something that maps an image batch to an intermediate image and a mask.
pub trait Translator<T: Real> {
    fn translate(&self, x: &Var<T>) -> Result<GeneratorVars<T>>;
}

impl<T: Real> BoundGenerator<T> {
    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    pub fn forward(&self, x: &Var<T>) -> Result<GeneratorVars<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape(format!(
                "generator expects (N, {}, H, W), got {:?}",
                self.channels, s
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "generator input {h}x{w} must be divisible by 4"
            )));
        }
        let mut p = self.vars.iter();
        let mut next = || p.next().expect("generator parameter layout");
        let down = ConvGeom::new(2, 1);

        let y = x.conv2d(next(), ConvGeom::new(1, 3));
        let y = instance_norm(&y, next(), next()).relu();
        let y = y.conv2d(next(), down);
        let y = instance_norm(&y, next(), next()).relu();
        let y = y.conv2d(next(), down);
        let mut y = instance_norm(&y, next(), next()).relu();
        for _ in 0..RESIDUAL_BLOCKS {
            let r = y.conv2d(next(), ConvGeom::new(1, 1));
            let r = instance_norm(&r, next(), next()).relu();
            let r = r.conv2d(next(), ConvGeom::new(1, 1));
            let r = instance_norm(&r, next(), next());
            y = y.add(&r);
        }
        let y = y.conv_transpose2d(next(), down, (h / 2, w / 2));
        let y = instance_norm(&y, next(), next()).relu();
        let y = y.conv_transpose2d(next(), down, (h, w));
        let y = instance_norm(&y, next(), next()).relu();
        let y = y.conv_transpose2d(next(), ConvGeom::new(1, 3), (h, w)).tanh();

        let c = self.channels;
        let half = T::from_f64_lossy(0.5);
        Ok(GeneratorVars {
            intermediate: y.narrow(1, 0, c),
            mask: y.narrow(1, c, 1).add_scalar(T::one()).scale(half),
        })
    }
}

impl<T: Real> Translator<T> for BoundGenerator<T> {
    fn translate(&self, x: &Var<T>) -> Result<GeneratorVars<T>> {
        self.forward(x)
    }
}

/// Trainable critic parameters: six 4×4 stride-2 convolutions with bias and
/// leaky ReLU (slope 0.01), widths 64..2048, then a bias-free 3×3 convolution
/// to one channel. No normalisation and no output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams<T> {
    channels: usize,
    image_size: usize,
    width_scale: f64,
    params: ParamSet<T>,
}

/// Builds critic parameters for square inputs of `image_size` pixels.
pub fn init_critic<T: Real>(
    channels: usize,
    image_size: usize,
    width_scale: f64,
    seed: u64,
) -> Result<CriticParams<T>> {
    if channels == 0 {
        return Err(Error::Config("critic needs at least one channel".into()));
    }
    if image_size == 0 || image_size % CRITIC_DOWNSAMPLE != 0 {
        return Err(Error::Shape(format!(
            "critic image size {image_size} must be a positive multiple of {CRITIC_DOWNSAMPLE}"
        )));
    }
    if !(width_scale > 0.0) {
        return Err(Error::Config(format!("width_scale {width_scale} must be positive")));
    }
    let widths = critic_widths(width_scale);
    let mut init = Init::new(seed);
    let mut p = ParamSet::new();
    let mut prev = channels;
    for (i, &w) in widths.iter().enumerate() {
        p.push(format!("conv{i}.weight"), init.conv([w, prev, 4, 4]));
        p.push(format!("conv{i}.bias"), Tensor::zeros(&[1, w, 1, 1]));
        prev = w;
    }
    p.push("out.weight".into(), init.conv([1, prev, 3, 3]));
    Ok(CriticParams {
        channels,
        image_size,
        width_scale,
        params: p,
    })
}

/// A scalar-per-patch scorer of image batches.
pub trait Critic<T: Real> {
    /// Score map `(N, 1, h, w)`.
    fn score(&self, x: &Var<T>) -> Result<Var<T>>;
}

impl<T: Real> CriticParams<T> {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn width_scale(&self) -> f64 {
        self.width_scale
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut out = self.clone();
        out.params.replace_all(tensors)?;
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> CriticParams<U> {
        CriticParams {
            channels: self.channels,
            image_size: self.image_size,
            width_scale: self.width_scale,
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> BoundCritic<T> {
        BoundCritic {
            channels: self.channels,
            image_size: self.image_size,
            vars: self.params.bind(tape, trainable),
        }
    }

    /// Uses caller-owned variables, in parameter order, as the weights.
    pub fn bind_vars(&self, vars: Vec<Var<T>>) -> Result<BoundCritic<T>> {
        check_vars(&self.params, &vars)?;
        Ok(BoundCritic {
            channels: self.channels,
            image_size: self.image_size,
            vars,
        })
    }

    /// Inference pass: score map `(N, 1, H/64, W/64)`.
    pub fn forward(&self, x: &ImageBatch<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).score(&tape.constant(x.tensor().clone()))?;
        Ok(out.value().clone())
    }

    /// Forward pass on an unvalidated tensor (used for perturbation studies).
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.bind(&tape, false).score(&tape.constant(x.clone()))?;
        Ok(out.value().clone())
    }
}

/// Critic parameters placed on a tape.
pub struct BoundCritic<T> {
    channels: usize,
    image_size: usize,
    vars: Vec<Var<T>>,
}

impl<T: Real> BoundCritic<T> {
    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }
}

impl<T: Real> Critic<T> for BoundCritic<T> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Shape(format!(
                "critic expects (N, {c}, {n}, {n}), got {s:?}",
                c = self.channels,
                n = self.image_size
            )));
        }
        let slope = T::from_f64_lossy(CRITIC_SLOPE);
        let mut y = x.clone();
        let mut p = self.vars.iter();
        for _ in 0..CRITIC_STRIDED_LAYERS {
            let w = p.next().expect("critic layout");
            let b = p.next().expect("critic layout");
            y = y.conv2d(w, ConvGeom::new(2, 1)).add_b(b).leaky_relu(slope);
        }
        let out = p.next().expect("critic layout");
        Ok(y.conv2d(out, ConvGeom::new(1, 1)))
    }
}
