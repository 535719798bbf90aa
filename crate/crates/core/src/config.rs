//! The run configuration: one strict JSON document with a section per module
//! and a master seed from which every module seed is derived.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::metrics::MetricsConfig;
use crate::noise::NoiseConfig;
use crate::phantom::PhantomConfig;
use crate::schedule::ScheduleConfig;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub noise: NoiseConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.cascade_seeds();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Replaces the master seed and re-derives the module seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cascade_seeds();
        self
    }

    /// Sets every module seed from the master seed.
    pub fn cascade_seeds(&mut self) {
        self.noise.seed = seed::derive(self.seed, "noise");
        self.train.seed = seed::derive(self.seed, "train");
        self.phantom.seed = seed::derive(self.seed, "phantom");
        self.inference.seed = seed::derive(self.seed, "inference");
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.noise.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        self.inference.validate()?;
        self.metrics.validate()?;
        self.denoiser.check_image_size(self.phantom.size, self.phantom.size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceMode;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default().with_seed(0));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"inference": {"mode": "bogus"}}"#).is_err());
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = r#"{"seed": 42, "schedule": {"n_steps": 20}, "train": {"learning_rate": 0.0003, "max_steps": 10},
            "inference": {"mode": "anobfn_no_c2", "receiver_noise": "mean_only"}, "metrics": {"iou_threshold": 0.1}}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.schedule.n_steps, 20);
        assert_eq!(cfg.inference.mode, InferenceMode::AnobfnNoC2);
        let once = cfg.to_json();
        let again = RunConfig::from_json(&once).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_json(), once);
    }

    #[test]
    fn master_seed_cascades() {
        let a = RunConfig::from_json(r#"{"seed": 1}"#).unwrap();
        let b = RunConfig::from_json(r#"{"seed": 2}"#).unwrap();
        let seeds = |c: &RunConfig| [c.noise.seed, c.train.seed, c.phantom.seed, c.inference.seed];
        let sa = seeds(&a);
        assert_ne!(sa, seeds(&b));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(sa[i], sa[j]);
            }
        }
        assert_eq!(a.clone().with_seed(2), b);
        assert_eq!(seeds(&RunConfig::from_json(r#"{"seed": 1}"#).unwrap()), sa);
    }

    #[test]
    fn validation_checks_cross_section_sizes() {
        let cfg = RunConfig::from_json(r#"{"phantom": {"size": 30}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }
}
