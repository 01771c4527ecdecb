use std::fmt;

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// True when `from` can be broadcast to `to` under numpy rules.
pub fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let pad = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == to[pad + i] || d == 1)
}

/// Strides of `from` expressed in the index space of `to`, zero on broadcast axes.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let pad = to.len() - from.len();
    let own = strides(from);
    (0..to.len())
        .map(|i| {
            if i < pad || from[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits `big` in row-major order one innermost run at a time, reporting the
/// contiguous offset into `big`, the matching offset into the smaller operand,
/// and the smaller operand's stride along the innermost axis.
fn for_each_run(big: &[usize], small_strides: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = big.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    if numel(big) == 0 {
        return;
    }
    let inner = big[rank - 1];
    let inner_stride = small_strides[rank - 1];
    let outer_dims = &big[..rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut big_off = 0usize;
    loop {
        let small_off: usize = idx
            .iter()
            .zip(small_strides.iter())
            .map(|(i, s)| i * s)
            .sum();
        f(big_off, small_off, inner_stride);
        big_off += inner;
        // odometer increment
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < outer_dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panicking constructor for internal use where the length is known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes"
        );
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_usize(self.numel()).unwrap()
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another real type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    /// Repeats the tensor along axes of size one (and new leading axes).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if !broadcastable(&self.shape, shape) {
            return Err(TensorError::Shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, shape
            )));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let st = broadcast_strides(&self.shape, shape);
        let mut out = vec![T::zero(); numel(shape)];
        let inner = shape.last().copied().unwrap_or(1);
        let src = &self.data;
        for_each_run(shape, &st, |dst, s, is| {
            let run = &mut out[dst..dst + inner];
            if is == 0 {
                run.fill(src[s]);
            } else {
                run.copy_from_slice(&src[s..s + inner]);
            }
        });
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    /// Sums over the axes that `shape` broadcasts along; the adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        if !broadcastable(shape, &self.shape) {
            return Err(TensorError::Shape(format!(
                "cannot reduce {:?} to {:?}",
                self.shape, shape
            )));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let st = broadcast_strides(shape, &self.shape);
        let mut out = vec![T::zero(); numel(shape)];
        let inner = self.shape.last().copied().unwrap_or(1);
        let src = &self.data;
        for_each_run(&self.shape, &st, |s, dst, is| {
            let run = &src[s..s + inner];
            if is == 0 {
                let mut acc = T::zero();
                for &v in run {
                    acc += v;
                }
                out[dst] += acc;
            } else {
                for (o, &v) in out[dst..dst + inner].iter_mut().zip(run) {
                    *o += v;
                }
            }
        });
        Ok(Self::from_parts(shape.to_vec(), out))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(TensorError::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Embeds the tensor at `start` along `axis` in a zero tensor of extent `full`;
    /// the adjoint of `narrow`.
    pub fn unnarrow(&self, axis: usize, start: usize, full: usize) -> Result<Self> {
        let len = *self.shape.get(axis).ok_or_else(|| {
            TensorError::Shape(format!("axis {axis} out of range for {:?}", self.shape))
        })?;
        if start + len > full {
            return Err(TensorError::Shape(format!(
                "unnarrow: {start}+{len} exceeds {full}"
            )));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut data = vec![T::zero(); numel(&shape)];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Concatenates tensors along axis 0.
    pub fn cat0(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("cat0 of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(TensorError::Shape(format!(
                    "cat0: {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}
