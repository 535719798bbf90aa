//! Pseudo-healthy reconstruction by running the Bayesian flow backwards from
//! `t = T` to `t = 0`, in three modes:
//!
//! - `bfn_vanilla`: unconditional generation from the `{mu = 0, rho = 1}` prior.
//! - `anobfn_no_c2`: starts from a flow sample of the input at `beta(T)`.
//! - `anobfn`: additionally feeds the input back at every update with
//!   per-pixel accuracy `alpha_A`.

use serde::{Deserialize, Serialize};

use crate::bfn::{
    bayes_update, bayes_update_conditioned, compute_alpha_input, sample_flow, sample_receiver, AccuracyField,
    Precision, ThetaState,
};
use crate::denoiser::{Checkpoint, UNet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::ParamStore;
use crate::noise::{sample_field, NoiseConfig, NoiseField, NoiseKind};
use crate::schedule::{flow_params, ScheduleTable};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    BfnVanilla,
    AnobfnNoC2,
    Anobfn,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [
        InferenceMode::BfnVanilla,
        InferenceMode::AnobfnNoC2,
        InferenceMode::Anobfn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::BfnVanilla => "bfn_vanilla",
            InferenceMode::AnobfnNoC2 => "anobfn_no_c2",
            InferenceMode::Anobfn => "anobfn",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown mode `{s}` (expected bfn_vanilla, anobfn_no_c2 or anobfn)"
            ))
        })
    }
}

/// Noise used for receiver samples and for the conditioned initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverNoise {
    Simplex,
    Gaussian,
    /// No sampling noise: use distribution means.
    MeanOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub receiver_noise: ReceiverNoise,
    /// Logistic growth rate of the input-feedback time factor.
    pub k: f64,
    /// Normalized time at which input feedback switches off.
    pub t_c: f64,
    #[serde(skip)]
    pub seed: u64,
    /// Test hook: run `anobfn` with `alpha_A` forced to zero.
    #[serde(skip)]
    pub suppress_input_feedback: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: InferenceMode::Anobfn,
            receiver_noise: ReceiverNoise::Simplex,
            k: 30.0,
            t_c: 0.5,
            seed: 0,
            suppress_input_feedback: false,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config("inference.k must be positive"));
        }
        if !(self.t_c > 0.0 && self.t_c < 1.0) {
            return Err(Error::config("inference.t_c must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    /// Normalized time of the state the prediction was made from.
    pub t: f64,
    pub alpha: f64,
    /// Mean precision after the update.
    pub mean_rho: f64,
    /// Mean squared gap between prediction and current mean.
    pub loss_proxy: f64,
    /// Mean input-feedback accuracy (zero outside `anobfn`).
    pub mean_alpha_input: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub pseudo_healthy: ImageTensor,
    /// Signed `(pseudo_healthy - x0)` on the uptake scale.
    pub anomaly_map: ImageTensor,
    pub final_state: ThetaState,
    pub trajectory: Vec<StepStats>,
}

/// Signed anomaly map `pseudo_healthy - x0`, converted from `[-1, 1]`
/// differences to uptake units (a factor of 1/2).
pub fn anomaly_map(x0: &ImageTensor, pseudo_healthy: &ImageTensor) -> Result<ImageTensor> {
    pseudo_healthy.zip_map(x0, |p, x| 0.5 * (p - x))
}

/// A trained denoiser bound to its schedule and noise settings.
pub struct Reconstructor<'a> {
    net: &'a UNet,
    params: &'a ParamStore<f32>,
    schedule: &'a ScheduleTable,
    noise: NoiseConfig,
    cfg: InferenceConfig,
}

impl<'a> Reconstructor<'a> {
    /// `noise` supplies the simplex octave settings; its kind and seed are
    /// replaced by the inference config.
    pub fn new(
        net: &'a UNet,
        params: &'a ParamStore<f32>,
        schedule: &'a ScheduleTable,
        noise: &NoiseConfig,
        cfg: &InferenceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if schedule.n_steps() < 2 {
            return Err(Error::config("inference needs at least 2 steps"));
        }
        let kind = match cfg.receiver_noise {
            ReceiverNoise::Gaussian => NoiseKind::Gaussian,
            _ => NoiseKind::Simplex,
        };
        Ok(Self {
            net,
            params,
            schedule,
            noise: NoiseConfig {
                kind,
                seed: cfg.seed,
                ..noise.clone()
            },
            cfg: cfg.clone(),
        })
    }

    /// Uses the averaged weights of a checkpoint, after checking that it was
    /// trained with the same schedule.
    pub fn from_checkpoint(ckpt: &'a Checkpoint, schedule: &'a ScheduleTable, cfg: &InferenceConfig) -> Result<Self> {
        if ckpt.manifest.schedule != *schedule.config() {
            return Err(Error::config("checkpoint was trained with a different schedule"));
        }
        Self::new(&ckpt.net, &ckpt.state.ema, schedule, &ckpt.noise_config(), cfg)
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    /// Noise field for `step` of the image with stream id `stream`; step
    /// `N` is the initialization. `None` for mean-only sampling.
    pub fn step_noise(&self, h: usize, w: usize, stream: u64, step: usize) -> Result<Option<NoiseField>> {
        if self.cfg.receiver_noise == ReceiverNoise::MeanOnly {
            return Ok(None);
        }
        let index = seed::mix(&[stream, seed::label("inference"), step as u64]);
        sample_field(h, w, &self.noise, index).map(Some)
    }

    fn initial_state(&self, x0: &ImageTensor, stream: u64) -> Result<ThetaState> {
        let (h, w) = x0.shape();
        match self.cfg.mode {
            InferenceMode::BfnVanilla => Ok(ThetaState::prior(h, w)),
            InferenceMode::AnobfnNoC2 | InferenceMode::Anobfn => {
                let beta = self.schedule.beta_start();
                let (mean, std) = flow_params(x0, beta, &ImageTensor::zeros(h, w), 1.0)?;
                let eps = self.step_noise(h, w, stream, self.schedule.n_steps())?;
                ThetaState::new(sample_flow(&mean, std, eps.as_ref())?, Precision::Uniform(1.0 + beta))
            }
        }
    }

    fn check_finite(theta: &ThetaState, step: usize) -> Result<()> {
        let rho_ok = match &theta.rho {
            Precision::Uniform(r) => r.is_finite(),
            Precision::PerPixel(f) => f.all_finite(),
        };
        if theta.mu.all_finite() && rho_ok {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what: "inference state".into(),
                step: step as u64,
            })
        }
    }

    /// Reconstructs `x0`. `stream` distinguishes the noise of different
    /// images under one seed.
    pub fn reconstruct(&self, x0: &ImageTensor, stream: u64) -> Result<ReconstructionResult> {
        let (h, w) = x0.shape();
        self.net.config().check_image_size(h, w)?;
        let horizon = self.schedule.horizon();
        let sched_cfg = self.schedule.config();
        let mut theta = self.initial_state(x0, stream)?;
        let mut trajectory = Vec::with_capacity(self.schedule.n_steps());

        for i in 0..self.schedule.n_steps() {
            let alpha = self.schedule.alpha()[i];
            let t = self.schedule.normalized_time(i);
            if alpha <= 0.0 {
                continue;
            }
            let x_hat = self.net.psi(self.params, &theta.mu, t, sched_cfg)?;
            let loss_proxy = x_hat
                .as_slice()
                .iter()
                .zip(theta.mu.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / x0.len() as f64;
            let eps = self.step_noise(h, w, stream, i)?;
            let sample = sample_receiver(&x_hat, alpha, eps.as_ref())?;
            let mut mean_alpha_input = 0.0;
            theta = match self.cfg.mode {
                InferenceMode::Anobfn => {
                    let a_in = if self.cfg.suppress_input_feedback {
                        AccuracyField::new(ImageTensor::zeros(h, w))?
                    } else {
                        // time factor at the time of the state being produced
                        let t_next = self.schedule.times()[i + 1];
                        compute_alpha_input(&x_hat, x0, alpha, t_next, horizon, self.cfg.k, self.cfg.t_c)?
                    };
                    mean_alpha_input = a_in.values().mean();
                    bayes_update_conditioned(&theta, &sample, alpha, x0, &a_in)?
                }
                _ => bayes_update(&theta, &sample, alpha)?,
            };
            Self::check_finite(&theta, i)?;
            trajectory.push(StepStats {
                step: i,
                t,
                alpha,
                mean_rho: theta.rho.mean(),
                loss_proxy,
                mean_alpha_input,
            });
        }

        let t_end = self.schedule.normalized_time(self.schedule.n_steps());
        let pseudo_healthy = self.net.psi(self.params, &theta.mu, t_end, sched_cfg)?;
        let anomaly = anomaly_map(x0, &pseudo_healthy)?;
        Ok(ReconstructionResult {
            pseudo_healthy,
            anomaly_map: anomaly,
            final_state: theta,
            trajectory,
        })
    }
}

/// Reconstructs one image with the averaged weights of `checkpoint`.
pub fn reconstruct(
    x0: &ImageTensor,
    checkpoint: &Checkpoint,
    schedule: &ScheduleTable,
    cfg: &InferenceConfig,
    stream: u64,
) -> Result<ReconstructionResult> {
    Reconstructor::from_checkpoint(checkpoint, schedule, cfg)?.reconstruct(x0, stream)
}
