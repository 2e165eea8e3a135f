//! Whole-pipeline configuration, read from one JSON file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adc::{RampConfig, TriggerConfig};
use crate::eval::Overheads;
use crate::frontend::{decimation, FrontEndConfig};
use crate::pipeline::{Mode, RecorderSetup};
use crate::synth::SynthConfig;
use crate::train::SearchSpace;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: PathBuf,
    /// Base name for generated recordings.
    pub name: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            name: "rec".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub rng_seed: u64,
    pub mode: Mode,
    pub synth: SynthConfig,
    pub frontend: FrontEndConfig,
    pub ramp: RampConfig,
    pub trigger: TriggerConfig,
    pub search: SearchSpace,
    /// Bits added to each detected-window and compressed event for ratios.
    pub overheads: Overheads,
    /// Spike matching tolerance in seconds.
    pub match_window: f64,
    /// Leading fraction of the recording used for calibration and for the
    /// sorter's centroids; the rest is scored.
    pub train_fraction: f64,
    /// Disabled channels, by address.
    pub disabled_channels: Vec<u16>,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            mode: Mode::Compressed,
            synth: SynthConfig::default(),
            frontend: FrontEndConfig::default(),
            ramp: RampConfig::default(),
            trigger: TriggerConfig::default(),
            search: SearchSpace::default(),
            overheads: Overheads {
                detected_bits: 40,
                compressed_bits: 0,
            },
            match_window: 1e-3,
            train_fraction: 0.5,
            disabled_channels: Vec::new(),
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copy of the synth config with the global seed applied.
    pub fn seeded_synth(&self) -> SynthConfig {
        SynthConfig {
            rng_seed: self.rng_seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.frontend.validate(self.synth.sample_rate)?;
        self.ramp.validate()?;
        self.trigger.validate()?;
        decimation(self.synth.sample_rate, self.ramp.sample_rate as f64)?;
        if !(self.match_window > 0.0 && self.match_window.is_finite()) {
            return Err(Error::Config("match_window must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must be within (0, 1)".into()));
        }
        if let Some(&c) = self.disabled_channels.iter().find(|&&c| c as usize >= self.synth.channel_count) {
            return Err(Error::Config(format!("disabled channel {c} out of range")));
        }
        if self.synth.channel_count > 64 {
            return Err(Error::Config("at most 64 channels fit the channel field".into()));
        }
        Ok(())
    }

    /// Matching window in sampling periods.
    pub fn match_samples(&self) -> u64 {
        crate::eval::window_samples(self.match_window, self.ramp.sample_rate as f64)
    }

    /// First scored sampling period for a recording of `periods` periods.
    pub fn split_period(&self, periods: usize) -> u64 {
        (periods as f64 * self.train_fraction).round() as u64
    }

    pub fn pixel_enable(&self) -> Vec<bool> {
        (0..self.synth.channel_count)
            .map(|c| !self.disabled_channels.contains(&(c as u16)))
            .collect()
    }

    /// Recorder settings with `trigger` in place of the configured one.
    pub fn setup(&self, trigger: TriggerConfig) -> RecorderSetup {
        RecorderSetup {
            frontend: self.frontend.clone(),
            ramp: self.ramp.clone(),
            trigger,
            pixel_enable: self.pixel_enable(),
            // Distinct from the synth streams, which draw from the same seed.
            noise_seed: self.rng_seed ^ 0x5eed_f00d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"synth": {"bogus": 1}}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"trigger": {"threshold1": 120}}"#).is_ok());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad_trigger = r#"{"trigger": {"pretrigger_n": 10, "posttrigger_m": 19}}"#;
        assert!(PipelineConfig::from_json(bad_trigger).is_err());
        assert!(PipelineConfig::from_json(r#"{"disabled_channels": [49]}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"match_window": 0}"#).is_err());
    }
}
