//! Run configuration: one TOML file, overridable from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::grpo::TrainConfig;
use crate::judge::EndpointConfig;
use crate::policy::{PolicyParams, FEATURE_DIM};
use crate::reward::RewardConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub notes: Option<PathBuf>,
    pub base_notes: Option<PathBuf>,
    pub grpo_notes: Option<PathBuf>,
    pub verdicts: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub scale: f64,
    pub epsilon: f64,
    /// Gate threshold, or absent for no gating.
    pub gate: Option<f64>,
}

impl Default for RewardSection {
    fn default() -> Self {
        let r = RewardConfig::default();
        Self {
            scale: r.scale,
            epsilon: r.epsilon,
            gate: r.gate_tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub k: usize,
    pub learning_rate: f64,
    /// Defaults to 3, or 2 when gating is enabled.
    pub epochs: Option<usize>,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub max_updates: Option<usize>,
    pub eval_every: Option<usize>,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            k: t.k,
            learning_rate: t.learning_rate,
            epochs: None,
            grad_accumulation: t.grad_accumulation,
            seed: t.seed,
            max_updates: None,
            eval_every: None,
            init_scale: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub reward: RewardSection,
    pub train: TrainSection,
    pub endpoint: EndpointConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            scale: self.reward.scale,
            epsilon: self.reward.epsilon,
            gate_tau: self.reward.gate,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let reward = self.reward_config();
        let default_epochs = if reward.gate_tau.is_some() {
            TrainConfig::GATED_EPOCHS
        } else {
            TrainConfig::default().epochs
        };
        TrainConfig {
            k: self.train.k,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs.unwrap_or(default_epochs),
            grad_accumulation: self.train.grad_accumulation,
            seed: self.train.seed,
            reward,
            max_updates: self.train.max_updates,
            eval_every: self.train.eval_every,
        }
    }

    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams::random(FEATURE_DIM, self.train.init_scale, self.train.seed)
    }
}

/// Returns the path or a usage error naming the config key and flag.
pub fn require<'a>(path: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        Error::Usage(format!(
            "`paths.{key}` must be set in the config or passed as `{flag}`"
        ))
    })
}

/// Parses `--gate <τ|off>`.
pub fn parse_gate(s: &str) -> std::result::Result<Option<f64>, String> {
    if s.eq_ignore_ascii_case("off") {
        return Ok(None);
    }
    let tau: f64 = s
        .parse()
        .map_err(|_| format!("gate must be a number in [0, 1] or `off`, got `{s}`"))?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(format!("gate {tau} outside [0, 1]"));
    }
    Ok(Some(tau))
}
