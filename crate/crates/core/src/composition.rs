//! Mask compositing: the translated healthy image `B' = B_int·M + A·(1 − M)`
//! and the reconstruction `A' = A·M + B_int·(1 − M)`.

use std::path::Path;

use image::{GrayImage, Luma};
use tapegrad::{Real, Tensor, Var};

use crate::batch::{ImageBatch, MaskBatch};
use crate::error::{Error, IoContext, Result};

/// `B'` and `A'` for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositePair<T = f32> {
    pub healthy_out: ImageBatch<T>,
    pub reconstruction: ImageBatch<T>,
}

fn check_operands<T: Real>(a: &Tensor<T>, b_int: &Tensor<T>, m: &Tensor<T>) -> Result<()> {
    let (sa, sb, sm) = (a.shape(), b_int.shape(), m.shape());
    if sa != sb {
        return Err(Error::Shape(format!("input {sa:?} vs intermediate {sb:?}")));
    }
    if sm.len() != 4 || sm[0] != sa[0] || sm[1] != 1 || sm[2..] != sa[2..] {
        return Err(Error::Shape(format!("mask {sm:?} does not match images {sa:?}")));
    }
    Ok(())
}

/// `x·m + y·(1 − m)` with `m` broadcast over channels.
fn blend<T: Real>(x: &Tensor<T>, y: &Tensor<T>, m: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let c = s[1];
    let mut out = Vec::with_capacity(x.numel());
    for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
        let n = i / (c * plane);
        let mv = m.data()[n * plane + i % plane];
        out.push(xv * mv + yv * (T::one() - mv));
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

/// `B' = B_int·M + A·(1 − M)`.
pub fn compose_healthy<T: Real>(a: &ImageBatch<T>, b_int: &ImageBatch<T>, m: &MaskBatch<T>) -> Result<ImageBatch<T>> {
    check_operands(a.tensor(), b_int.tensor(), m.tensor())?;
    ImageBatch::new(blend(b_int.tensor(), a.tensor(), m.tensor()))
}

/// `A' = A·M + B_int·(1 − M)`.
pub fn compose_reconstruction<T: Real>(
    a: &ImageBatch<T>,
    b_int: &ImageBatch<T>,
    m: &MaskBatch<T>,
) -> Result<ImageBatch<T>> {
    check_operands(a.tensor(), b_int.tensor(), m.tensor())?;
    ImageBatch::new(blend(a.tensor(), b_int.tensor(), m.tensor()))
}

pub fn compose_pair<T: Real>(a: &ImageBatch<T>, b_int: &ImageBatch<T>, m: &MaskBatch<T>) -> Result<CompositePair<T>> {
    Ok(CompositePair {
        healthy_out: compose_healthy(a, b_int, m)?,
        reconstruction: compose_reconstruction(a, b_int, m)?,
    })
}

fn check_vars<T: Real>(a: &Var<T>, b_int: &Var<T>, m: &Var<T>) -> Result<()> {
    check_operands(a.value(), b_int.value(), m.value())
}

/// Differentiable `B'`.
pub fn compose_healthy_var<T: Real>(a: &Var<T>, b_int: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    check_vars(a, b_int, m)?;
    Ok(b_int.mul_b(m).add(&a.mul_b(&m.rsub_scalar(T::one()))))
}

/// Differentiable `A'`.
pub fn compose_reconstruction_var<T: Real>(a: &Var<T>, b_int: &Var<T>, m: &Var<T>) -> Result<Var<T>> {
    check_vars(a, b_int, m)?;
    Ok(a.mul_b(m).add(&b_int.mul_b(&m.rsub_scalar(T::one()))))
}

/// Elementwise `|x − y|`.
pub fn difference_map<T: Real>(x: &ImageBatch<T>, y: &ImageBatch<T>) -> Result<Tensor<T>> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(Error::Shape(format!(
            "difference of {:?} and {:?}",
            x.tensor().shape(),
            y.tensor().shape()
        )));
    }
    Ok(x.tensor().zip_map(y.tensor(), |a, b| (a - b).abs()))
}

/// Writes one `(H, W)` plane (or the channel mean of a `(C, H, W)` map) as an
/// 8-bit PNG, mapping `[0, 2]` linearly onto `[0, 255]`.
pub fn write_heatmap<T: Real>(map: &Tensor<T>, path: &Path) -> Result<()> {
    let s = map.shape();
    let (c, h, w) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::Shape(format!("heatmap expects one map, got {s:?}"))),
    };
    let plane = h * w;
    let d = map.data();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let v: f64 = (0..c).map(|k| d[k * plane + i].to_f64().unwrap()).sum::<f64>() / c as f64;
        Luma([heat_level(v)])
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Gray level of a difference value under the `[0, 2] → [0, 255]` scaling.
pub fn heat_level(v: f64) -> u8 {
    (v.clamp(0.0, 2.0) * 127.5).round() as u8
}
