//! Accuracy schedule for conditional generation.
//!
//! The variance of the probability-flow distribution under the prior
//! `{mu: 0, rho: 1}` is `f(t) = beta(t) / (1 + beta(t))^2`. We fix `f` to a
//! cosine-quartic curve that starts at its maximum `1/4` (so the prior keeps
//! roughly half of the input) and decays to zero, then invert it to get the
//! accuracy schedule `beta(t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Number of generation steps N.
    pub n_steps: usize,
    /// Time horizon T.
    pub horizon: f64,
    /// Offset `s` of the cosine curve.
    pub offset: f64,
    /// Floor applied to `f(t)` so that `beta` stays finite at `t = 0`.
    pub f_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            horizon: 1.0,
            offset: 0.01,
            f_min: 1e-6,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 2 {
            return Err(Error::config("schedule.n_steps must be >= 2"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::config("schedule.horizon must be positive"));
        }
        if !(self.offset > 0.0 && self.offset < 1.0) {
            return Err(Error::config("schedule.offset must lie in (0, 1)"));
        }
        if !(self.f_min > 0.0 && self.f_min < 0.25) {
            return Err(Error::config("schedule.f_min must lie in (0, 1/4)"));
        }
        Ok(())
    }
}

/// Flow variance `f(t) = 1/4 cos^4(((T - t) + s) / (T (1 + s)) * pi/2)`,
/// floored at `f_min`.
pub fn f_of_t(t: f64, cfg: &ScheduleConfig) -> Result<f64> {
    let horizon = cfg.horizon;
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, {horizon}]")));
    }
    let angle = ((horizon - t) + cfg.offset) / (horizon * (1.0 + cfg.offset)) * std::f64::consts::FRAC_PI_2;
    let raw = 0.25 * angle.cos().powi(4);
    Ok(raw.max(cfg.f_min))
}

/// Inverts `f = beta / (1 + beta)^2` on the branch `beta >= 1`.
pub fn beta_of_f(f: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 0.25) {
        return Err(Error::domain(format!("f = {f} outside (0, 1/4]")));
    }
    // Larger root of f b^2 + (2f - 1) b + f = 0. The discriminant 1 - 4f can
    // round slightly negative for f within an ulp of 1/4.
    let disc = (1.0 - 4.0 * f).max(0.0);
    Ok((1.0 - 2.0 * f + disc.sqrt()) / (2.0 * f))
}

/// Discretized schedule over a descending time grid `T = t_0 > ... > t_N = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    config: ScheduleConfig,
    times: Vec<f64>,
    f: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<f64>,
}

impl ScheduleTable {
    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn n_steps(&self) -> usize {
        self.config.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }

    /// Grid times, length N + 1, descending.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    /// Cumulative accuracies, length N + 1, increasing.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Per-step accuracies, length N; `alpha[i]` is added on the step
    /// `t_i -> t_{i+1}`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Accuracy at the start of generation, `beta(T)`.
    pub fn beta_start(&self) -> f64 {
        self.beta[0]
    }

    /// Time normalized to `[0, 1]`, as fed to the denoiser.
    pub fn normalized_time(&self, i: usize) -> f64 {
        self.times[i] / self.config.horizon
    }
}

pub fn build_schedule(cfg: &ScheduleConfig) -> Result<ScheduleTable> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let mut times = Vec::with_capacity(n + 1);
    let mut f = Vec::with_capacity(n + 1);
    let mut beta = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = if i == n {
            0.0
        } else {
            cfg.horizon * (1.0 - i as f64 / n as f64)
        };
        let fi = f_of_t(t, cfg)?;
        times.push(t);
        f.push(fi);
        beta.push(beta_of_f(fi)?);
    }
    let alpha = beta.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect();
    Ok(ScheduleTable {
        config: cfg.clone(),
        times,
        f,
        beta,
        alpha,
    })
}

/// Mean and standard deviation of the probability-flow distribution of `mu`
/// after an accuracy-`beta` observation of `x0`, starting from the prior
/// `{prior_mu, prior_rho}`.
pub fn flow_params(x0: &ImageTensor, beta: f64, prior_mu: &ImageTensor, prior_rho: f64) -> Result<(ImageTensor, f64)> {
    if !(beta > 0.0) || !(prior_rho > 0.0) {
        return Err(Error::domain(format!(
            "flow_params needs beta > 0 and prior_rho > 0 (got {beta}, {prior_rho})"
        )));
    }
    let denom = prior_rho + beta;
    let mean = x0.zip_map(prior_mu, |x, m| (beta * x + prior_rho * m) / denom)?;
    Ok((mean, beta.sqrt() / denom))
}
