use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// A `channels x height x width` image with every element in `[-1, 1]`.
///
/// Values are stored channel-major (`c * h * w + y * w + x`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < -1.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { channels, height, width, values })
    }

    /// Builds an image by clamping arbitrary finite values into `[-1, 1]`.
    pub fn from_clamped(channels: usize, height: usize, width: usize, mut values: Vec<f64>) -> Result<Self> {
        for v in values.iter_mut() {
            if !v.is_finite() {
                return Err(Error::Invalid(format!("non-finite pixel value {v}")));
            }
            *v = v.clamp(-1.0, 1.0);
        }
        Self::new(channels, height, width, values)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    /// All pixels at the darkest value (-1).
    pub fn black(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![-1.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-pixel mean absolute difference.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let total: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| libm::fabs(a - b))
            .sum();
        Ok(total / self.values.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(ImageTensor::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn mean_abs_diff_of_constants() {
        let a = ImageTensor::constant(3, 4, 4, 0.0).unwrap();
        let b = ImageTensor::constant(3, 4, 4, 1.0).unwrap();
        assert_eq!(a.mean_abs_diff(&b).unwrap(), 1.0);
        assert_eq!(a.mean_abs_diff(&a).unwrap(), 0.0);
    }

    #[test]
    fn clamped_constructor() {
        let t = ImageTensor::from_clamped(1, 1, 3, vec![-3.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.values(), &[-1.0, 0.5, 1.0]);
    }
}
