use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{images_to_tensor, UNet};
use crate::bfn::{discrete_loss, sample_flow};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{clip_grad_norm, ema_update, AdamState, AdamWParams, Element, Graph, ParamStore, Tensor};
use crate::noise::{sample_field, NoiseConfig};
use crate::schedule::{flow_params, ScheduleConfig, ScheduleTable};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Use `min(ema_decay, (1 + n) / (10 + n))` at update `n`, so short runs
    /// still get a meaningful average.
    pub ema_warmup: bool,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps, overriding `epochs` when smaller.
    pub max_steps: Option<u64>,
    pub checkpoint_every: u64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            adam_betas: [0.9, 0.98],
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            ema_warmup: true,
            grad_clip_norm: 1.0,
            batch_size: 16,
            epochs: 50,
            max_steps: None,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be nonnegative"));
        }
        if !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.adam_betas must lie in [0, 1)"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("train.ema_decay must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every must be >= 1"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            learning_rate: self.learning_rate,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            weight_decay: self.weight_decay,
            eps: self.adam_eps,
        }
    }

    pub fn ema_decay_at(&self, update: u64) -> f64 {
        if self.ema_warmup {
            self.ema_decay.min((1.0 + update as f64) / (10.0 + update as f64))
        } else {
            self.ema_decay
        }
    }
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>) -> Self {
        Self {
            step: 0,
            ema: params.clone(),
            adam: AdamState::new(&params),
            params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Draws the training inputs for one image: a step index with positive
/// accuracy, and `mu` sampled from the flow distribution at that step.
pub(crate) fn sample_training_input(
    x0: &ImageTensor,
    schedule: &ScheduleTable,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
    stream: u64,
) -> Result<(usize, ImageTensor)> {
    // Steps whose accuracy vanished under the f_min floor carry no loss.
    let valid: Vec<usize> = (0..schedule.n_steps()).filter(|&i| schedule.alpha()[i] > 0.0).collect();
    if valid.is_empty() {
        return Err(Error::domain("schedule has no step with positive accuracy"));
    }
    let index = valid[rng.random_range(0..valid.len())];
    let (h, w) = x0.shape();
    let prior = ImageTensor::zeros(h, w);
    let (mean, std) = flow_params(x0, schedule.beta()[index], &prior, 1.0)?;
    let eps = sample_field(h, w, noise, stream)?;
    Ok((index, sample_flow(&mean, std, Some(&eps))?))
}

/// Batch-mean discrete loss of the denoiser and its gradient with respect to
/// every parameter. `alphas[j]` is the accuracy of the step image `j` was
/// drawn from.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients<T: Element>(
    net: &UNet,
    params: &ParamStore<T>,
    x0s: &[&ImageTensor],
    mus: &[&ImageTensor],
    ts: &[f64],
    alphas: &[f64],
    schedule: &ScheduleConfig,
    n_steps: usize,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if x0s.len() != mus.len() || x0s.len() != alphas.len() {
        return Err(Error::domain("batch components differ in length"));
    }
    let mut graph = Graph::new(params);
    let out = net.forward(&mut graph, images_to_tensor::<T>(mus), ts, schedule)?;
    let pred = graph.value(out);
    let (h, w) = mus[0].shape();
    let inv_batch = 1.0 / x0s.len() as f64;

    let mut loss = 0.0;
    let mut seed_grad = Tensor::<T>::zeros(pred.shape());
    for (j, x0) in x0s.iter().enumerate() {
        x0.ensure_same_shape(mus[j])?;
        let psi = &pred.data()[j * h * w..(j + 1) * h * w];
        let psi_img = ImageTensor::new(h, w, psi.iter().map(|v| v.as_f64()).collect())?;
        loss += discrete_loss(x0, &psi_img, alphas[j], n_steps)? * inv_batch;
        let scale = n_steps as f64 * alphas[j] * inv_batch;
        let g = &mut seed_grad.data_mut()[j * h * w..(j + 1) * h * w];
        for ((gv, p), &x) in g.iter_mut().zip(psi).zip(x0.as_slice()) {
            *gv = T::from_f64_lossy(scale * (p.as_f64() - x));
        }
    }
    let grads = graph.backward(out, seed_grad);
    Ok((loss, grads))
}

/// One optimizer step on a batch of healthy images: sample flow states,
/// evaluate the discrete loss, back-propagate, clip, apply AdamW and update
/// the parameter average.
pub fn train_step(
    net: &UNet,
    state: &mut TrainState,
    batch: &[&ImageTensor],
    schedule: &ScheduleTable,
    noise: &NoiseConfig,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::domain("empty training batch"));
    }
    let step = state.step + 1;
    let mut rng = seed::rng(&[cfg.seed, step, seed::label("train-step")]);
    let mut mus = Vec::with_capacity(batch.len());
    let mut indices = Vec::with_capacity(batch.len());
    for (j, x0) in batch.iter().enumerate() {
        let stream = seed::mix(&[cfg.seed, step, j as u64]);
        let (index, mu) = sample_training_input(x0, schedule, noise, &mut rng, stream)?;
        indices.push(index);
        mus.push(mu);
    }
    let ts: Vec<f64> = indices.iter().map(|&i| schedule.normalized_time(i)).collect();
    let alphas: Vec<f64> = indices.iter().map(|&i| schedule.alpha()[i]).collect();
    let mu_refs: Vec<&ImageTensor> = mus.iter().collect();
    let (loss, mut grads) = loss_and_gradients(
        net,
        &state.params,
        batch,
        &mu_refs,
        &ts,
        &alphas,
        schedule.config(),
        schedule.n_steps(),
    )?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            step,
        });
    }

    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient norm".into(),
            step,
        });
    }
    state.adam.step(&mut state.params, &grads, &cfg.adamw());
    ema_update(&state.params, &mut state.ema, cfg.ema_decay_at(state.step));
    state.step = step;
    Ok(StepStats { step, loss, grad_norm })
}
