use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::diffusion::{SamplerConfig, ScheduleParams};
use crate::error::{ensure, Result};
use crate::latent::AutoencoderConfig;
use crate::numerics::AdamConfig;
use crate::unet::UnetConfig;

/// Depth threshold (cm) defining a flooded pixel at reference scale.
pub const REFERENCE_THRESHOLD_CM: f64 = 30.0;
/// Maximum depth (cm) of the reference catchment the threshold belongs to.
pub const REFERENCE_MAX_DEPTH_CM: f64 = 814.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Flood threshold in cm. When absent, the reference 30 cm is rescaled by
    /// the ratio of this dataset's maximum depth to 814 cm.
    pub threshold_cm: Option<f64>,
    pub sample_n: usize,
    pub seed: u64,
    /// Images denoised together.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold_cm: None,
            sample_n: 1000,
            seed: 0,
            batch: 8,
        }
    }
}

impl EvalConfig {
    pub fn threshold_for(&self, max_depth_cm: f64) -> f64 {
        self.threshold_cm
            .unwrap_or(REFERENCE_THRESHOLD_CM * max_depth_cm / REFERENCE_MAX_DEPTH_CM)
    }
}

/// Everything a training or evaluation run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: PathBuf,
    pub unet: UnetConfig,
    pub autoencoder: AutoencoderConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    /// Replace the DEM channel by zeros (ablation).
    pub zero_dem: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = ScheduleParams::default();
        ExperimentConfig {
            mode: Mode::Pixel,
            dataset: PathBuf::from("data"),
            unet: UnetConfig::default(),
            autoencoder: AutoencoderConfig::default(),
            schedule,
            train: TrainConfig::default(),
            sampler: SamplerConfig::full(schedule.timesteps, 0),
            eval: EvalConfig::default(),
            zero_dem: false,
        }
    }
}

impl ExperimentConfig {
    /// Latent-mode defaults: 12 input and 4 output channels.
    pub fn latent_default() -> Self {
        let mut c = ExperimentConfig {
            mode: Mode::Latent,
            ..Default::default()
        };
        let lc = c.autoencoder.latent_channels;
        c.unet.in_channels = 3 * lc;
        c.unet.out_channels = lc;
        c.unet.depth = 3;
        c.unet.attn_levels = vec![1, 2];
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        let (cin, cout) = match self.mode {
            Mode::Pixel => (3, 1),
            Mode::Latent => {
                self.autoencoder.validate()?;
                let lc = self.autoencoder.latent_channels;
                (3 * lc, lc)
            }
        };
        ensure!(
            self.unet.in_channels == cin && self.unet.out_channels == cout,
            config,
            "{:?} mode needs unet in_channels {} and out_channels {}, got {} and {}",
            self.mode,
            cin,
            cout,
            self.unet.in_channels,
            self.unet.out_channels
        );
        crate::diffusion::NoiseSchedule::new(self.schedule)?;
        self.sampler.validate(self.schedule.timesteps)?;
        ensure!(self.train.batch_size >= 1, config, "batch_size must be >= 1");
        ensure!(self.train.adam.lr > 0.0, config, "learning rate must be > 0");
        ensure!(self.eval.batch >= 1, config, "eval batch must be >= 1");
        if let Some(t) = self.eval.threshold_cm {
            ensure!(t >= 0.0, config, "threshold must be >= 0");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for c in [ExperimentConfig::default(), ExperimentConfig::latent_default()] {
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"train": {"steps": 5}}"#).unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!(c.train.batch_size, 16);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut c = ExperimentConfig::default();
        c.mode = Mode::Latent;
        assert!(matches!(c.validate(), Err(crate::Error::Config(_))));
    }

    #[test]
    fn threshold_scales_with_max_depth() {
        let e = EvalConfig::default();
        assert_eq!(e.threshold_for(814.0), 30.0);
        assert!((e.threshold_for(407.0) - 15.0).abs() < 1e-12);
        let fixed = EvalConfig {
            threshold_cm: Some(12.0),
            ..e
        };
        assert_eq!(fixed.threshold_for(814.0), 12.0);
    }
}
