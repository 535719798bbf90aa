//! Single-channel H×W image container shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// Row-major single-channel image. Pixel values live in `[-1, 1]` for data
/// images; the same container also carries noise fields, precisions and maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                found: vec![data.len()],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds an image from a function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                found: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f64, f64) -> f64) -> Result<ImageTensor> {
        self.ensure_same_shape(other)?;
        Ok(ImageTensor {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standardizes to zero mean, unit population variance. A constant image
    /// is centred only.
    pub fn standardize(&mut self) {
        let m = self.mean();
        let sd = self.variance().sqrt();
        let scale = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        for v in &mut self.data {
            *v = (*v - m) * scale;
        }
    }

    /// Lag-1 spatial autocorrelation, averaged over horizontal and vertical
    /// neighbour pairs.
    pub fn lag1_autocorrelation(&self) -> f64 {
        let m = self.mean();
        let var = self.variance();
        if var == 0.0 {
            return 0.0;
        }
        let (h, w) = self.shape();
        let mut acc = 0.0;
        let mut n = 0usize;
        for r in 0..h {
            for c in 0..w {
                let a = self.get(r, c) - m;
                if c + 1 < w {
                    acc += a * (self.get(r, c + 1) - m);
                    n += 1;
                }
                if r + 1 < h {
                    acc += a * (self.get(r + 1, c) - m);
                    n += 1;
                }
            }
        }
        acc / n as f64 / var
    }

    /// Separable Gaussian blur truncated at `ceil(3 sigma)` pixels. Pixels
    /// outside the image count as zero.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageTensor {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma, (3.0 * sigma).ceil() as usize);
        let radius = kernel.len() / 2;
        let (h, w) = self.shape();
        let mut rows = ImageTensor::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let cc = c as isize + k as isize - radius as isize;
                    if cc >= 0 && (cc as usize) < w {
                        acc += kv * self.get(r, cc as usize);
                    }
                }
                rows.set(r, c, acc);
            }
        }
        let mut out = ImageTensor::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let rr = r as isize + k as isize - radius as isize;
                    if rr >= 0 && (rr as usize) < h {
                        acc += kv * rows.get(rr as usize, c);
                    }
                }
                out.set(r, c, acc);
            }
        }
        out
    }
}

/// Normalized 1-D Gaussian weights on `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Maps a `[-1, 1]` intensity to the nonnegative `[0, 1]` uptake scale.
#[inline]
pub fn to_uptake(x: f64) -> f64 {
    (x + 1.0) * 0.5
}

/// Inverse of [`to_uptake`].
#[inline]
pub fn from_uptake(u: f64) -> f64 {
    2.0 * u - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length() {
        assert!(ImageTensor::new(2, 3, vec![0.0; 5]).is_err());
    }

    #[test]
    fn zip_map_checks_shape() {
        let a = ImageTensor::zeros(2, 2);
        let b = ImageTensor::zeros(2, 3);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn standardize_moments() {
        let mut img = ImageTensor::from_fn(8, 8, |r, c| (r * 3 + c * c) as f64);
        img.standardize();
        assert!(img.mean().abs() < 1e-12);
        assert!((img.variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_preserves_mass_and_support() {
        let mut img = ImageTensor::zeros(21, 21);
        img.set(10, 10, 1.0);
        let b = img.gaussian_blur(1.5);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        // truncated at 5 pixels
        assert_eq!(b.get(10, 15).min(b.get(10, 16)), 0.0);
        assert!(b.get(10, 15) > 0.0);
        assert!((b.get(9, 10) - b.get(11, 10)).abs() < 1e-15);
        let k = gaussian_kernel(1.5, 5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uptake_round_trip() {
        for x in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert!((from_uptake(to_uptake(x)) - x).abs() < 1e-15);
        }
    }
}
