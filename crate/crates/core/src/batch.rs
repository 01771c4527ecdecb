//! Validated image and mask batches.

use tapegrad::{Real, Tensor};

use crate::error::{Error, Result};

fn check_rank4(t: &Tensor<impl Real>, what: &str) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::Shape(format!(
            "{what} must be (batch, channels, height, width), got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_range<T: Real>(t: &Tensor<T>, lo: f64, hi: f64, what: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("{what} contains non-finite values")));
    }
    let (min, max) = t.min_max();
    let (min, max) = (min.to_f64().unwrap(), max.to_f64().unwrap());
    if t.numel() > 0 && (min < lo || max > hi) {
        return Err(Error::Range(format!(
            "{what} spans [{min}, {max}], expected within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Images in model range `[-1, 1]`, laid out `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        check_rank4(&data, "image batch")?;
        check_range(&data, -1.0, 1.0, "image batch")?;
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// `(height, width)`
    pub fn spatial(&self) -> (usize, usize) {
        (self.data.shape()[2], self.data.shape()[3])
    }

    /// Sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Self {
        Self {
            data: self.data.narrow(0, i, 1).expect("sample index in range"),
        }
    }
}

/// Single-channel masks with values in `[0, 1]`, laid out `(N, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBatch<T = f32> {
    data: Tensor<T>,
}

impl<T: Real> MaskBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        check_rank4(&data, "mask batch")?;
        if data.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "mask batch must have one channel, got {:?}",
                data.shape()
            )));
        }
        check_range(&data, 0.0, 1.0, "mask")?;
        Ok(Self { data })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_batch_rejects_out_of_range_and_nan() {
        assert!(ImageBatch::new(Tensor::<f32>::full(&[1, 1, 2, 2], 1.0)).is_ok());
        assert!(matches!(
            ImageBatch::new(Tensor::<f32>::full(&[1, 1, 2, 2], 1.01)),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            ImageBatch::new(Tensor::<f32>::full(&[1, 1, 2, 2], f32::NAN)),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            ImageBatch::new(Tensor::<f32>::zeros(&[2, 2])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mask_batch_requires_one_channel_in_unit_range() {
        assert!(MaskBatch::new(Tensor::<f64>::full(&[2, 1, 3, 3], 0.5)).is_ok());
        assert!(MaskBatch::new(Tensor::<f64>::full(&[2, 2, 3, 3], 0.5)).is_err());
        assert!(MaskBatch::new(Tensor::<f64>::full(&[2, 1, 3, 3], -0.1)).is_err());
    }
}
