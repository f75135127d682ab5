//! Run configuration: one TOML file binding every module's knobs.
//!
//! Seed fields inside sections are derived from the top-level `seed` during
//! resolution, so a single number fixes all randomness of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{GeneratorConfig, MiningConfig};
use crate::eval::EvalConfig;
use crate::flow::EditorConfig;
use crate::grammar::hex_digest;
use crate::grpo::GrpoConfig;
use crate::reward::{RemoteOracleConfig, RewardWeights};
use crate::rng::derive_seed;
use crate::sft::SftConfig;
use crate::world::{Lexicon, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub remote: RemoteOracleConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Mock,
            remote: RemoteOracleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySettings {
    pub temperature: f64,
    pub bucket_width: usize,
    pub max_len: usize,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            bucket_width: 4,
            max_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub lexicon: Lexicon,
    pub world: WorldConfig,
    pub generator: GeneratorConfig,
    pub mining: MiningConfig,
    pub policy: PolicySettings,
    pub sft: SftConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardWeights,
    pub oracle: OracleConfig,
    pub editor: EditorConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2026,
            out_dir: PathBuf::from("runs/default"),
            lexicon: Lexicon::default(),
            world: WorldConfig::default(),
            generator: GeneratorConfig::default(),
            mining: MiningConfig::default(),
            policy: PolicySettings::default(),
            sft: SftConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardWeights::default(),
            oracle: OracleConfig::default(),
            editor: EditorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Derives every section seed from the run seed.
    pub fn resolve_seeds(&mut self) {
        let s = self.seed;
        self.world.seed = derive_seed(s, "cfg/world", 0);
        self.generator.seed = derive_seed(s, "cfg/generator", 0);
        self.mining.seed = derive_seed(s, "cfg/mining", 0);
        self.sft.seed = derive_seed(s, "cfg/sft", 0);
        self.grpo.seed = derive_seed(s, "cfg/grpo", 0);
        self.editor.seed = derive_seed(s, "cfg/editor", 0);
        self.editor.net.seed = derive_seed(s, "cfg/editor-init", 0);
        self.editor.encoder.seed = derive_seed(s, "cfg/encoder", 0);
        self.eval.seed = derive_seed(s, "cfg/eval", 0);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !self.reward.is_valid() || (self.reward.total() - 1.0).abs() > 1e-9 {
            return bad("reward weights must be non-negative and sum to 1".into());
        }
        if let Err(e) = self.grpo.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.editor.validate() {
            return bad(e.to_string());
        }
        if self.editor.net.latent_dim != self.world.latent_dim {
            return bad(format!(
                "editor latent_dim {} differs from world latent_dim {}",
                self.editor.net.latent_dim, self.world.latent_dim
            ));
        }
        if !(self.policy.temperature > 0.0 && self.policy.temperature.is_finite()) {
            return bad("policy temperature must be positive".into());
        }
        if self.policy.bucket_width == 0 || self.policy.max_len == 0 {
            return bad("policy bucket_width and max_len must be positive".into());
        }
        if !(self.sft.lr >= 0.0 && self.sft.lr_growth >= 1.0 && self.sft.min_lr > 0.0) {
            return bad("sft needs lr >= 0, lr_growth >= 1 and min_lr > 0".into());
        }
        if self.world.num_profiles == 0 || self.world.latent_dim == 0 {
            return bad("world needs at least one profile and a positive latent_dim".into());
        }
        let t = self.mining.thresholds;
        if !(t.quality.is_finite() && t.aesthetic.is_finite()) {
            return bad("mining thresholds must be finite".into());
        }
        if self.mining.max_retries == 0 || self.mining.tutorial_attempts == 0 {
            return bad("mining retry limits must be at least 1".into());
        }
        if self.oracle.kind == OracleKind::Remote && self.oracle.remote.endpoint.is_empty() {
            return bad("remote oracle needs an endpoint".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the resolved TOML with `out_dir` cleared, so the same
    /// experiment hashes identically wherever it is written.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        Ok(hex_digest(&Sha256::digest(c.to_toml()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let mut c = RunConfig::default();
        c.resolve_seeds();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        let partial = RunConfig::from_toml("seed = 7\n[grpo]\nbeta = 0.1\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.grpo.beta, 0.1);
        assert_eq!(partial.grpo.group_size, 8);
        assert_eq!(partial.reward, RewardWeights::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("nonsense = 1").is_err());
        let mut c = RunConfig::default();
        c.reward.format = 0.5;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let mut c = RunConfig::default();
        c.grpo.group_size = 1;
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn hash_depends_on_content() {
        let mut a = RunConfig::default();
        a.resolve_seeds();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        b.resolve_seeds();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        let mut moved = a.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_eq!(moved.hash().unwrap(), a.hash().unwrap());
    }
}
