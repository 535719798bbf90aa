//! The denoiser network: a time-conditioned UNet mapping the mean field `mu`
//! at time `t` to an estimate of the clean image.
//!
//! Layout for `n_stages = 3` and base width `C`:
//!
//! ```text
//! conv_in(1 -> C)
//! encoder  res(C) @1   down   res(C) @1/2   down   res(2C) @1/4
//! middle   res(2C) @1/4
//! decoder  res(2C+2C -> 2C) @1/4  up  res(2C+C -> C) @1/2  up  res(C+C -> C) @1
//! norm, silu, conv_out(C -> 1)  (zero-initialized)
//! output = mu + c(t) * conv_out(...),   c(t) = 2 sqrt(f(t))
//! ```
//!
//! With [`Prediction::Direct`] the output is `conv_out(...)` alone.
//!
//! Every residual block receives the time embedding as a per-channel bias.
//! `f(t)` is the flow variance of the schedule, so `c(t)` tracks the size of
//! the residual `x0 - mu` and the raw network output stays near unit scale
//! at every step.

mod checkpoint;
mod train;

pub use checkpoint::{
    checkpoint_dir_name, latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest,
    ParamEntry, RngState, CHECKPOINT_FORMAT,
};
pub use train::{loss_and_gradients, train_step, StepStats, TrainConfig, TrainState};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Element, Graph, ParamStore, Tensor, Var};
use crate::schedule::{f_of_t, ScheduleConfig};
use crate::seed;

/// Scale `c(t) = 2 sqrt(f(t))` applied to the network correction, with `t`
/// normalized to `[0, 1]`.
pub fn output_scale(t: f64, schedule: &ScheduleConfig) -> Result<f64> {
    Ok(2.0 * f_of_t(t * schedule.horizon, schedule)?.sqrt())
}

/// How the network output becomes the clean-image estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// `mu + c(t) * net`, with a zero-initialized head so training starts
    /// from the identity.
    Residual,
    /// `net` alone, conventionally initialized.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Width `C` of the first stage; stage widths are `[C, ..., C, 2C]`.
    pub base_width: usize,
    pub n_stages: usize,
    pub time_embed_dim: usize,
    /// Self-attention blocks. Not available in this implementation.
    pub use_attention: bool,
    pub prediction: Prediction,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            n_stages: 3,
            time_embed_dim: 64,
            use_attention: false,
            prediction: Prediction::Residual,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 4 {
            return Err(Error::config("denoiser.base_width must be >= 4"));
        }
        if self.n_stages < 1 {
            return Err(Error::config("denoiser.n_stages must be >= 1"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("denoiser.time_embed_dim must be a positive even number"));
        }
        if self.use_attention {
            return Err(Error::config("denoiser.use_attention is not supported"));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.n_stages)
            .map(|s| {
                if s + 1 == self.n_stages && self.n_stages > 1 {
                    2 * self.base_width
                } else {
                    self.base_width
                }
            })
            .collect()
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.n_stages - 1)
    }

    pub fn check_image_size(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::config(format!(
                "image {h}x{w} is not divisible by {m} (required by {} stages)",
                self.n_stages
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: NormIds,
    conv1: ConvIds,
    time: ConvIds,
    norm2: NormIds,
    conv2: ConvIds,
    skip: Option<ConvIds>,
}

/// Parameter layout of the UNet. Values live in a separate [`ParamStore`] so
/// the raw and averaged weights share one layout.
#[derive(Debug, Clone)]
pub struct UNet {
    config: DenoiserConfig,
    time1: ConvIds,
    time2: ConvIds,
    conv_in: ConvIds,
    encoder: Vec<ResBlock>,
    downsample: Vec<ConvIds>,
    middle: ResBlock,
    decoder: Vec<ResBlock>,
    upsample: Vec<ConvIds>,
    norm_out: NormIds,
    conv_out: ConvIds,
}

fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

struct Builder<'a, T: Element, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Element, R: Rng> Builder<'_, T, R> {
    /// Uniform `±1/sqrt(fan_in)` weights, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> ConvIds {
        let fan_in = (cin * k * k) as f64;
        let bound = fan_in.sqrt().recip();
        let data = (0..cout * cin * k * k)
            .map(|_| {
                if zero {
                    T::zero()
                } else {
                    T::from_f64_lossy(self.rng.random_range(-bound..bound))
                }
            })
            .collect();
        ConvIds {
            w: self
                .store
                .register(format!("{name}.weight"), Tensor::from_vec([cout, cin, k, k], data)),
            b: self
                .store
                .register(format!("{name}.bias"), Tensor::zeros([cout, 1, 1, 1])),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ConvIds {
        self.conv(name, fan_in, fan_out, 1, false)
    }

    fn norm(&mut self, name: &str, channels: usize) -> NormIds {
        NormIds {
            gamma: self.store.register(
                format!("{name}.gamma"),
                Tensor::from_vec([channels, 1, 1, 1], vec![T::one(); channels]),
            ),
            beta: self
                .store
                .register(format!("{name}.beta"), Tensor::zeros([channels, 1, 1, 1])),
            groups: norm_groups(channels),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, false),
            time: self.linear(&format!("{name}.time"), temb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, false)),
        }
    }
}

impl UNet {
    /// Builds the layout and freshly initialized parameters.
    pub fn new<T: Element>(config: &DenoiserConfig, init_seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(&[init_seed, seed::label("unet-init")]);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let widths = config.stage_widths();
        let temb = config.time_embed_dim;
        let time1 = b.linear("time.fc1", temb, temb);
        let time2 = b.linear("time.fc2", temb, temb);
        let conv_in = b.conv("conv_in", 1, widths[0], 3, false);

        let mut encoder = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            encoder.push(b.res_block(&format!("enc{s}"), ch, w, temb));
            ch = w;
            if s + 1 < widths.len() {
                downsample.push(b.conv(&format!("down{s}"), ch, ch, 3, false));
            }
        }
        let middle = b.res_block("mid", ch, ch, temb);
        let mut decoder = Vec::new();
        let mut upsample = Vec::new();
        for (s, &w) in widths.iter().enumerate().rev() {
            decoder.push(b.res_block(&format!("dec{s}"), ch + w, w, temb));
            ch = w;
            if s > 0 {
                upsample.push(b.conv(&format!("up{s}"), ch, ch, 3, false));
            }
        }
        let norm_out = b.norm("norm_out", ch);
        let conv_out = b.conv("conv_out", ch, 1, 3, config.prediction == Prediction::Residual);

        Ok((
            Self {
                config: config.clone(),
                time1,
                time2,
                conv_in,
                encoder,
                downsample,
                middle,
                decoder,
                upsample,
                norm_out,
                conv_out,
            },
            store,
        ))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    fn conv<T: Element>(g: &mut Graph<T>, x: Var, ids: ConvIds, stride: usize, pad: usize) -> Var {
        let w = g.param(ids.w);
        let b = g.param(ids.b);
        g.conv2d(x, w, b, stride, pad)
    }

    fn linear<T: Element>(g: &mut Graph<T>, x: Var, ids: ConvIds) -> Var {
        let w = g.param(ids.w);
        let b = g.param(ids.b);
        g.linear(x, w, b)
    }

    fn norm<T: Element>(g: &mut Graph<T>, x: Var, ids: NormIds) -> Var {
        let gamma = g.param(ids.gamma);
        let beta = g.param(ids.beta);
        g.group_norm(x, gamma, beta, ids.groups)
    }

    fn res_block<T: Element>(g: &mut Graph<T>, x: Var, block: &ResBlock, temb: Var) -> Var {
        let h = Self::norm(g, x, block.norm1);
        let h = g.silu(h);
        let h = Self::conv(g, h, block.conv1, 1, 1);
        let t = Self::linear(g, temb, block.time);
        let h = g.channel_bias(h, t);
        let h = Self::norm(g, h, block.norm2);
        let h = g.silu(h);
        let h = Self::conv(g, h, block.conv2, 1, 1);
        let skip = match block.skip {
            Some(ids) => Self::conv(g, x, ids, 1, 0),
            None => x,
        };
        g.add(h, skip)
    }

    /// Sinusoidal embedding of `t` (scaled by 1000), `[B, D, 1, 1]`.
    pub fn time_embedding<T: Element>(&self, ts: &[f64]) -> Tensor<T> {
        let dim = self.config.time_embed_dim;
        let half = dim / 2;
        let mut data = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            let scaled = 1000.0 * t;
            let freqs = (0..half).map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|f| scaled * f).collect();
            data.extend(args.iter().map(|a| T::from_f64_lossy(a.sin())));
            data.extend(args.iter().map(|a| T::from_f64_lossy(a.cos())));
        }
        Tensor::from_vec([ts.len(), dim, 1, 1], data)
    }

    /// Records the forward pass for a batch `mu: [B, 1, H, W]` at normalized
    /// times `ts` and returns the prediction node.
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        mu: Tensor<T>,
        ts: &[f64],
        schedule: &ScheduleConfig,
    ) -> Result<Var> {
        let [batch, ch, h, w] = mu.shape();
        if ch != 1 {
            return Err(Error::ShapeMismatch {
                expected: vec![batch, 1, h, w],
                found: mu.shape().to_vec(),
            });
        }
        if ts.len() != batch {
            return Err(Error::domain(format!("{} times for a batch of {batch}", ts.len())));
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::domain(format!("denoiser time {t} outside [0, 1]")));
        }
        self.config.check_image_size(h, w)?;

        let temb = g.input(self.time_embedding(ts));
        let temb = Self::linear(g, temb, self.time1);
        let temb = g.silu(temb);
        let temb = Self::linear(g, temb, self.time2);
        let temb = g.silu(temb);

        let mu = g.input(mu);
        let mut h = Self::conv(g, mu, self.conv_in, 1, 1);
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (s, block) in self.encoder.iter().enumerate() {
            h = Self::res_block(g, h, block, temb);
            skips.push(h);
            if let Some(&down) = self.downsample.get(s) {
                h = Self::conv(g, h, down, 2, 1);
            }
        }
        h = Self::res_block(g, h, &self.middle, temb);
        for (i, block) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            h = g.concat(h, skip);
            h = Self::res_block(g, h, block, temb);
            if let Some(&up) = self.upsample.get(i) {
                h = g.upsample2(h);
                h = Self::conv(g, h, up, 1, 1);
            }
        }
        h = Self::norm(g, h, self.norm_out);
        h = g.silu(h);
        let correction = Self::conv(g, h, self.conv_out, 1, 1);
        if self.config.prediction == Prediction::Direct {
            return Ok(correction);
        }
        let scales = ts
            .iter()
            .map(|&t| output_scale(t, schedule).map(T::from_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        let correction = g.scale_items(correction, scales);
        Ok(g.add(mu, correction))
    }

    /// Evaluates the denoiser on a batch of mean fields.
    pub fn predict<T: Element>(
        &self,
        params: &ParamStore<T>,
        mus: &[&ImageTensor],
        ts: &[f64],
        schedule: &ScheduleConfig,
    ) -> Result<Vec<ImageTensor>> {
        let Some(first) = mus.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.shape();
        for m in mus {
            first.ensure_same_shape(m)?;
        }
        let batch = images_to_tensor::<T>(mus);
        let mut g = Graph::new(params);
        let out = self.forward(&mut g, batch, ts, schedule)?;
        let values = g.value(out);
        Ok(values
            .data()
            .chunks(h * w)
            .map(|chunk| ImageTensor::new(h, w, chunk.iter().map(|v| v.as_f64()).collect()).expect("shape"))
            .collect())
    }

    /// `Psi(mu, t)` for a single image.
    pub fn psi<T: Element>(
        &self,
        params: &ParamStore<T>,
        mu: &ImageTensor,
        t: f64,
        schedule: &ScheduleConfig,
    ) -> Result<ImageTensor> {
        Ok(self.predict(params, &[mu], &[t], schedule)?.remove(0))
    }
}

pub(crate) fn images_to_tensor<T: Element>(images: &[&ImageTensor]) -> Tensor<T> {
    let (h, w) = images[0].shape();
    let data = images
        .iter()
        .flat_map(|img| img.as_slice().iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    Tensor::from_vec([images.len(), 1, h, w], data)
}
