//! Bayesian-flow machinery for continuous data: sender and receiver sampling,
//! the conjugate Gaussian update, the input-conditioned update, and the
//! discrete-time training loss.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::noise::NoiseField;

/// Precision of the input distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Precision {
    /// One precision shared by every pixel.
    Uniform(f64),
    /// Per-pixel precisions.
    PerPixel(ImageTensor),
}

impl Precision {
    #[inline]
    fn at(&self, idx: usize) -> f64 {
        match self {
            Precision::Uniform(r) => *r,
            Precision::PerPixel(field) => field.as_slice()[idx],
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Precision::Uniform(r) => *r,
            Precision::PerPixel(field) => field.mean(),
        }
    }

    pub fn min(&self) -> f64 {
        match self {
            Precision::Uniform(r) => *r,
            Precision::PerPixel(field) => field.min(),
        }
    }

    pub fn to_field(&self, h: usize, w: usize) -> ImageTensor {
        match self {
            Precision::Uniform(r) => ImageTensor::filled(h, w, *r),
            Precision::PerPixel(field) => field.clone(),
        }
    }
}

/// Parameters `{mu, rho}` of the per-pixel Gaussian input distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaState {
    pub mu: ImageTensor,
    pub rho: Precision,
}

impl ThetaState {
    pub fn new(mu: ImageTensor, rho: Precision) -> Result<Self> {
        if let Precision::PerPixel(field) = &rho {
            mu.ensure_same_shape(field)?;
        }
        let state = Self { mu, rho };
        state.validate()?;
        Ok(state)
    }

    /// The zero-mean, unit-precision prior.
    pub fn prior(h: usize, w: usize) -> Self {
        Self {
            mu: ImageTensor::zeros(h, w),
            rho: Precision::Uniform(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.min() > 0.0) {
            return Err(Error::domain("precision must be positive"));
        }
        if !self.mu.all_finite() {
            return Err(Error::domain("mean contains non-finite values"));
        }
        Ok(())
    }
}

/// Nonnegative per-pixel accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyField {
    values: ImageTensor,
}

impl AccuracyField {
    pub fn new(values: ImageTensor) -> Result<Self> {
        if values.as_slice().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::domain("accuracies must be nonnegative"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &ImageTensor {
        &self.values
    }

    pub fn into_inner(self) -> ImageTensor {
        self.values
    }
}

/// Accuracy of one observation, uniform or per-pixel.
#[derive(Debug, Clone, Copy)]
pub enum Accuracy<'a> {
    Uniform(f64),
    PerPixel(&'a AccuracyField),
}

impl From<f64> for Accuracy<'_> {
    fn from(a: f64) -> Self {
        Accuracy::Uniform(a)
    }
}

impl<'a> From<&'a AccuracyField> for Accuracy<'a> {
    fn from(a: &'a AccuracyField) -> Self {
        Accuracy::PerPixel(a)
    }
}

/// Draws from the sender distribution `N(x0, 1/alpha)` using the supplied
/// standardized perturbation.
pub fn sample_sender(x0: &ImageTensor, alpha: f64, eps: &NoiseField) -> Result<ImageTensor> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("sender accuracy must be positive, got {alpha}")));
    }
    let scale = alpha.sqrt().recip();
    x0.zip_map(&eps.values, |x, e| x + scale * e)
}

/// Draws from the receiver distribution `N(psi_out, 1/alpha)`. `eps = None`
/// returns the receiver mean.
pub fn sample_receiver(psi_out: &ImageTensor, alpha: f64, eps: Option<&NoiseField>) -> Result<ImageTensor> {
    match eps {
        Some(eps) => sample_sender(psi_out, alpha, eps),
        None => Ok(psi_out.clone()),
    }
}

/// Draws `mu = mean + std * eps` from a flow distribution.
pub fn sample_flow(mean: &ImageTensor, std: f64, eps: Option<&NoiseField>) -> Result<ImageTensor> {
    match eps {
        Some(eps) => mean.zip_map(&eps.values, |m, e| m + std * e),
        None => Ok(mean.clone()),
    }
}

/// Conjugate Gaussian update of `theta_next` after observing `x` with
/// accuracy `alpha`.
pub fn bayes_update<'a>(
    theta_next: &ThetaState,
    x: &ImageTensor,
    alpha: impl Into<Accuracy<'a>>,
) -> Result<ThetaState> {
    theta_next.mu.ensure_same_shape(x)?;
    let (h, w) = x.shape();
    match alpha.into() {
        Accuracy::Uniform(a) => {
            if !(a >= 0.0) {
                return Err(Error::domain("accuracy must be nonnegative"));
            }
            match &theta_next.rho {
                Precision::Uniform(rho) => {
                    let rho_new = rho + a;
                    let mu = theta_next.mu.zip_map(x, |m, xv| m + a * (xv - m) / rho_new)?;
                    Ok(ThetaState {
                        mu,
                        rho: Precision::Uniform(rho_new),
                    })
                }
                Precision::PerPixel(rho) => {
                    let mut mu = theta_next.mu.clone();
                    let mut rho_out = rho.clone();
                    for (idx, (m, r)) in mu.as_mut_slice().iter_mut().zip(rho_out.as_mut_slice()).enumerate() {
                        let rho_new = *r + a;
                        *m += a * (x.as_slice()[idx] - *m) / rho_new;
                        *r = rho_new;
                    }
                    Ok(ThetaState {
                        mu,
                        rho: Precision::PerPixel(rho_out),
                    })
                }
            }
        }
        Accuracy::PerPixel(field) => {
            x.ensure_same_shape(field.values())?;
            let mut mu = ImageTensor::zeros(h, w);
            let mut rho_out = ImageTensor::zeros(h, w);
            for idx in 0..x.len() {
                let rho = theta_next.rho.at(idx);
                let a = field.values().as_slice()[idx];
                let rho_new = rho + a;
                let m = theta_next.mu.as_slice()[idx];
                mu.as_mut_slice()[idx] = m + a * (x.as_slice()[idx] - m) / rho_new;
                rho_out.as_mut_slice()[idx] = rho_new;
            }
            Ok(ThetaState {
                mu,
                rho: Precision::PerPixel(rho_out),
            })
        }
    }
}

/// Update that fuses the receiver sample `x_hat` (accuracy `alpha_t`) with
/// the original input `x0` (per-pixel accuracy `alpha_input`). The resulting
/// precision is always per-pixel.
pub fn bayes_update_conditioned(
    theta_next: &ThetaState,
    x_hat: &ImageTensor,
    alpha_t: f64,
    x0: &ImageTensor,
    alpha_input: &AccuracyField,
) -> Result<ThetaState> {
    theta_next.mu.ensure_same_shape(x_hat)?;
    theta_next.mu.ensure_same_shape(x0)?;
    theta_next.mu.ensure_same_shape(alpha_input.values())?;
    if !(alpha_t >= 0.0) {
        return Err(Error::domain("accuracy must be nonnegative"));
    }
    let (h, w) = x0.shape();
    let mut mu = ImageTensor::zeros(h, w);
    let mut rho_out = ImageTensor::zeros(h, w);
    let a_in = alpha_input.values().as_slice();
    #[allow(clippy::needless_range_loop)]
    for idx in 0..x0.len() {
        let rho = theta_next.rho.at(idx);
        let rho_new = rho + alpha_t + a_in[idx];
        let m = theta_next.mu.as_slice()[idx];
        mu.as_mut_slice()[idx] =
            m + (alpha_t * (x_hat.as_slice()[idx] - m) + a_in[idx] * (x0.as_slice()[idx] - m)) / rho_new;
        rho_out.as_mut_slice()[idx] = rho_new;
    }
    Ok(ThetaState {
        mu,
        rho: Precision::PerPixel(rho_out),
    })
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-pixel accuracy given to the input image:
/// `alpha_t * exp(-(psi_out - x0)^2) * sigmoid(k (t/T - t_c))`.
pub fn compute_alpha_input(
    psi_out: &ImageTensor,
    x0: &ImageTensor,
    alpha_t: f64,
    t: f64,
    horizon: f64,
    k: f64,
    t_c: f64,
) -> Result<AccuracyField> {
    if !(k > 0.0) {
        return Err(Error::domain("logistic growth rate must be positive"));
    }
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, {horizon}]")));
    }
    let time_factor = logistic(k * (t / horizon - t_c));
    let values = psi_out.zip_map(x0, |p, x| {
        let d = p - x;
        alpha_t * (-d * d).exp() * time_factor
    })?;
    AccuracyField::new(values)
}

/// Discrete-time loss `N * alpha/2 * ||x0 - psi_out||^2` (sum over pixels),
/// equal to `N` times the KL divergence between sender and receiver
/// distributions that share variance `1/alpha`.
pub fn discrete_loss(x0: &ImageTensor, psi_out: &ImageTensor, alpha: f64, n_steps: usize) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::domain("loss accuracy must be positive"));
    }
    x0.ensure_same_shape(psi_out)?;
    let sq: f64 = x0
        .as_slice()
        .iter()
        .zip(psi_out.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(n_steps as f64 * 0.5 * alpha * sq)
}
