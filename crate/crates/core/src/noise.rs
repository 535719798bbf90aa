//! Structured (simplex) and white (Gaussian) perturbation fields.
//!
//! Simplex fields are a persistence-weighted sum of 2D simplex-noise octaves
//! with doubling frequency. Gradients come from an integer hash of the lattice
//! coordinates and the seed, so a field depends only on `(seed, stream)` and
//! is bit-reproducible across platforms.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Simplex,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub octaves: u32,
    /// Cycles per image side of the lowest octave.
    pub base_frequency: f64,
    pub persistence: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Simplex,
            octaves: 4,
            base_frequency: 4.0,
            persistence: 0.5,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves < 1 {
            return Err(Error::config("noise.octaves must be >= 1"));
        }
        if !(self.base_frequency > 0.0 && self.base_frequency.is_finite()) {
            return Err(Error::config("noise.base_frequency must be positive"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(Error::config("noise.persistence must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A standardized perturbation field.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub values: ImageTensor,
    pub kind: NoiseKind,
    pub seed: u64,
}

pub const MIN_FIELD_SIDE: usize = 8;

pub fn sample_field(h: usize, w: usize, cfg: &NoiseConfig, stream_index: u64) -> Result<NoiseField> {
    if h < MIN_FIELD_SIDE || w < MIN_FIELD_SIDE {
        return Err(Error::domain(format!(
            "noise field {h}x{w} is smaller than {MIN_FIELD_SIDE}x{MIN_FIELD_SIDE}"
        )));
    }
    cfg.validate()?;
    let mut values = match cfg.kind {
        NoiseKind::Simplex => fractal_simplex(h, w, cfg, stream_index),
        NoiseKind::Gaussian => {
            let mut rng = seed::rng(&[cfg.seed, stream_index, seed::label("gaussian")]);
            ImageTensor::from_fn(h, w, |_, _| rng.sample::<f64, _>(StandardNormal))
        }
    };
    values.standardize();
    Ok(NoiseField {
        values,
        kind: cfg.kind,
        seed: cfg.seed,
    })
}

/// Unnormalized fractal simplex sum, exposed for callers that want raw
/// amplitudes (phantom texture).
pub fn fractal_simplex(h: usize, w: usize, cfg: &NoiseConfig, stream_index: u64) -> ImageTensor {
    let side = h.max(w) as f64;
    let mut out = ImageTensor::zeros(h, w);
    let mut amplitude = 1.0;
    let mut frequency = cfg.base_frequency;
    for octave in 0..cfg.octaves {
        let key = seed::mix(&[cfg.seed, stream_index, octave as u64]);
        // Random lattice offset so octaves and streams do not share an origin.
        let ox = (key >> 40) as f64 / (1u64 << 24) as f64 * 256.0;
        let oy = ((key >> 16) & 0xFF_FFFF) as f64 / (1u64 << 24) as f64 * 256.0;
        let scale = frequency / side;
        let data = out.as_mut_slice();
        for r in 0..h {
            for c in 0..w {
                let x = c as f64 * scale + ox;
                let y = r as f64 * scale + oy;
                data[r * w + c] += amplitude * simplex2(x, y, key);
            }
        }
        amplitude *= cfg.persistence;
        frequency *= 2.0;
    }
    out
}

const GRADIENTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2),
    (std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
    (-std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2),
];

#[inline]
fn lattice_gradient(i: i64, j: i64, key: u64) -> (f64, f64) {
    let h = seed::splitmix64(
        key ^ (i as u64).wrapping_mul(0x9E37_79B1_85EB_CA87) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
    );
    GRADIENTS[(h >> 61) as usize]
}

/// Single-octave 2D simplex noise on a skewed triangular lattice, roughly in
/// `[-1, 1]`.
pub fn simplex2(x: f64, y: f64, key: u64) -> f64 {
    let f2 = 0.5 * (3f64.sqrt() - 1.0);
    let g2 = (3.0 - 3f64.sqrt()) / 6.0;

    let s = (x + y) * f2;
    let i = (x + s).floor();
    let j = (y + s).floor();
    let t = (i + j) * g2;
    let x0 = x - (i - t);
    let y0 = y - (j - t);
    let (i1, j1) = if x0 > y0 { (1.0, 0.0) } else { (0.0, 1.0) };
    let corners = [
        (x0, y0, 0.0, 0.0),
        (x0 - i1 + g2, y0 - j1 + g2, i1, j1),
        (x0 - 1.0 + 2.0 * g2, y0 - 1.0 + 2.0 * g2, 1.0, 1.0),
    ];
    let (ii, jj) = (i as i64, j as i64);
    let mut total = 0.0;
    for (dx, dy, ci, cj) in corners {
        let falloff = 0.5 - dx * dx - dy * dy;
        if falloff > 0.0 {
            let (gx, gy) = lattice_gradient(ii + ci as i64, jj + cj as i64, key);
            let f2 = falloff * falloff;
            total += f2 * f2 * (gx * dx + gy * dy);
        }
    }
    70.0 * total
}

/// Radially binned power spectrum of a square image, DC excluded.
///
/// Power is `|F(k)|^2 / n^2`, so a unit-variance white field has a flat
/// spectrum near 1. Bins split radial frequency `(0, n/2]` evenly; corner
/// frequencies beyond `n/2` are ignored.
pub fn radial_power_spectrum(image: &ImageTensor, n_bins: usize) -> Result<Vec<f64>> {
    let (h, w) = image.shape();
    if h != w {
        return Err(Error::domain(format!(
            "power spectrum needs a square field, got {h}x{w}"
        )));
    }
    if n_bins < 4 {
        return Err(Error::domain("power spectrum needs at least 4 bins"));
    }
    let n = h;
    let mut buf: Vec<Complex<f64>> = image.as_slice().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for row in buf.chunks_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            column[r] = buf[r * n + c];
        }
        fft.process(&mut column);
        for r in 0..n {
            buf[r * n + c] = column[r];
        }
    }

    let half = n as f64 / 2.0;
    let norm = (n * n) as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in 0..n {
        let ky = if r <= n / 2 { r as f64 } else { r as f64 - n as f64 };
        for c in 0..n {
            let kx = if c <= n / 2 { c as f64 } else { c as f64 - n as f64 };
            let radius = (kx * kx + ky * ky).sqrt();
            if radius == 0.0 || radius > half {
                continue;
            }
            let bin = ((radius / half * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
            sums[bin] += buf[r * n + c].norm_sqr() / norm;
            counts[bin] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, k)| if k == 0 { 0.0 } else { s / k as f64 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_cfg(seed: u64) -> NoiseConfig {
        NoiseConfig {
            kind: NoiseKind::Gaussian,
            seed,
            ..NoiseConfig::default()
        }
    }

    #[test]
    fn deterministic_per_stream() {
        for kind in [NoiseKind::Simplex, NoiseKind::Gaussian] {
            let cfg = NoiseConfig {
                kind,
                seed: 99,
                ..NoiseConfig::default()
            };
            let a = sample_field(32, 48, &cfg, 3).unwrap();
            let b = sample_field(32, 48, &cfg, 3).unwrap();
            let c = sample_field(32, 48, &cfg, 4).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.values, c.values);
        }
    }

    #[test]
    fn rejects_tiny_fields() {
        assert!(sample_field(7, 32, &NoiseConfig::default(), 0).is_err());
        assert!(sample_field(32, 4, &NoiseConfig::default(), 0).is_err());
    }

    #[test]
    fn normalized_moments() {
        for seed in 0..10 {
            for kind in [NoiseKind::Simplex, NoiseKind::Gaussian] {
                let cfg = NoiseConfig {
                    kind,
                    seed,
                    ..NoiseConfig::default()
                };
                let f = sample_field(64, 64, &cfg, seed * 7).unwrap();
                assert!(f.values.mean().abs() <= 0.02);
                assert!((f.values.variance() - 1.0).abs() <= 0.05);
            }
        }
    }

    #[test]
    fn simplex_is_bounded_and_continuous() {
        let mut prev = simplex2(0.0, 0.37, 5);
        for k in 1..2000 {
            let x = k as f64 * 1e-3;
            let v = simplex2(x, 0.37, 5);
            assert!(v.abs() <= 1.0 + 1e-9);
            assert!((v - prev).abs() < 0.05);
            prev = v;
        }
    }

    #[test]
    fn spectrum_of_zero_field_is_zero() {
        let zero = ImageTensor::zeros(32, 32);
        let spectrum = radial_power_spectrum(&zero, 8).unwrap();
        assert!(spectrum.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn spectrum_rejects_bad_inputs() {
        assert!(radial_power_spectrum(&ImageTensor::zeros(16, 32), 8).is_err());
        assert!(radial_power_spectrum(&ImageTensor::zeros(16, 16), 3).is_err());
    }

    #[test]
    fn single_frequency_lands_in_one_bin() {
        let n = 32;
        let img = ImageTensor::from_fn(n, n, |_, c| {
            (2.0 * std::f64::consts::PI * 4.0 * c as f64 / n as f64).cos()
        });
        let spectrum = radial_power_spectrum(&img, 16).unwrap();
        // radius 4 of 16 -> bin 3 of 16
        let peak = spectrum
            .iter()
            .cloned()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 3);
    }

    #[test]
    fn gaussian_spectrum_near_one() {
        let f = sample_field(64, 64, &gaussian_cfg(1), 0).unwrap();
        let spectrum = radial_power_spectrum(&f.values, 8).unwrap();
        let mean = spectrum.iter().sum::<f64>() / 8.0;
        assert!((mean - 1.0).abs() < 0.2, "{mean}");
    }
}
