use std::path::{Path, PathBuf};

use fedho::dataset::DatasetSpec;
use fedho::handover::DEFAULT_TTT_S;
use fedho::{ChannelParams, FlConfig, MobilityConfig, TopologyConfig, WindowConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_scenario")]
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_scenario() -> String {
    "default".to_string()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunSection {
    fn default() -> Self {
        Self { scenario: default_scenario(), seed: 0, output_dir: default_output_dir() }
    }
}

/// Centralized baseline training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 2000, learning_rate: 0.05, batch_size: 1 }
    }
}

/// Online refinement after the mobility shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub speed_range_mps: [f64; 2],
    pub test_size: usize,
    /// Also run the same schedule from a fresh initialization.
    pub compare_scratch: bool,
    pub fl: FlConfig,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            speed_range_mps: [20.0, 25.0],
            test_size: 24_000,
            compare_scratch: false,
            fl: FlConfig { rounds: 60, ..FlConfig::default() },
        }
    }
}

/// Handover evaluation and the signalling-cost comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub ttt_s: f64,
    pub traces_per_scenario: usize,
    pub speed_ranges_mps: Vec<[f64; 2]>,
    pub sojourn_s: f64,
    pub quantization_bits: u32,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            ttt_s: DEFAULT_TTT_S,
            traces_per_scenario: 1000,
            speed_ranges_mps: vec![[15.0, 20.0], [20.0, 25.0]],
            sojourn_s: 40.0,
            quantization_bits: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub mobility: MobilityConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fl: FlConfig,
    #[serde(default)]
    pub online: OnlineSection,
    #[serde(default)]
    pub policy: PolicySection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        // Checked by hand so the message names the section.
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if !table.contains_key("run") {
            return Err(CliError::Config("missing required section [run]".into()));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::MissingInput(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.topology.validate()?;
        self.channel.validate()?;
        self.mobility.validate()?;
        self.window.validate()?;
        self.fl.validate()?;
        self.online.fl.validate()?;
        self.mobility.with_speed_range(self.online.speed_range_mps).validate()?;
        for &range in &self.policy.speed_ranges_mps {
            self.mobility.with_speed_range(range).validate()?;
        }
        if self.dataset.test_size == 0 || self.dataset.train_size == 0 {
            return Err(CliError::Config("[dataset] sizes must be positive".into()));
        }
        if self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return Err(CliError::Config("[train] learning_rate and batch_size must be positive".into()));
        }
        if self.policy.traces_per_scenario == 0 || self.policy.speed_ranges_mps.is_empty() {
            return Err(CliError::Config("[policy] needs at least one scenario and one trace".into()));
        }
        if !(self.policy.ttt_s > 0.0) {
            return Err(CliError::Config("[policy] ttt_s must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that influences results. The output directory is
    /// left out so identical runs into different directories agree.
    pub fn hash(&self) -> String {
        let mut clone = self.clone();
        clone.run.output_dir = PathBuf::new();
        let json = serde_json::to_string(&clone).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("[run]\nseed = 3\n").unwrap();
        assert_eq!(cfg.run.seed, 3);
        assert_eq!(cfg.dataset.test_size, 24_000);
        assert_eq!(cfg.train.epochs, 2000);
        assert_eq!(cfg.window.n_obs, 3);
        assert_eq!(cfg.window.n_pred, 5);
        assert_eq!(cfg.channel.snr_threshold_db, 22.0);
    }

    #[test]
    fn missing_run_section_is_named() {
        let err = RunConfig::parse("[fl]\nrounds = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("[run]"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[run]\nsed = 3\n").is_err());
        assert!(RunConfig::parse("[run]\n[fl]\nround = 3\n").is_err());
        assert!(RunConfig::parse("[run]\n[extra]\n").is_err());
    }

    #[test]
    fn storage_policy_is_tagged() {
        let cfg = RunConfig::parse("[run]\n[fl]\nstorage = { kind = \"traditional\", trajectories = 2 }\n").unwrap();
        assert_eq!(cfg.fl.storage, fedho::StoragePolicy::Traditional { trajectories: 2 });
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::parse("[run]\n[fl]\nparticipation = 1.5\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::parse("[run]\noutput_dir = \"a\"\n").unwrap();
        let b = RunConfig::parse("[run]\noutput_dir = \"b\"\n").unwrap();
        let c = RunConfig::parse("[run]\nseed = 1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
