//! JSON run configuration shared by all CLI subcommands.
//!
//! Every section and field is optional; missing values take the defaults
//! below. Unknown keys are rejected and the error names the key.

use std::path::Path;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::data::{DataSpec, OodKind, OodSpec};
use crate::error::{Error, Result};
use crate::evaluation::VarianceStudyConfig;
use crate::io;
use crate::model::ModelSpec;
use crate::objectives::RegularizerConfig;
use crate::training::{FamilyKind, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    /// Missing keys fall back to `default_finetune`, not to `TrainConfig::default`.
    #[serde(deserialize_with = "finetune_section")]
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub variance_study: VarianceStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            pretrain: TrainConfig::default(),
            finetune: default_finetune(),
            eval: EvalConfig::default(),
            variance_study: VarianceStudyConfig::default(),
        }
    }
}

/// MFG fine-tuning with the margin regularizer at its default strength.
pub fn default_finetune() -> TrainConfig {
    TrainConfig {
        variational_family: FamilyKind::Mfg,
        regularizer: Some(RegularizerConfig::default()),
        ..TrainConfig::default()
    }
}

fn finetune_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    let given = serde_json::Map::<String, Value>::deserialize(d)?;
    let mut base = match serde_json::to_value(default_finetune()).map_err(D::Error::custom)? {
        Value::Object(m) => m,
        _ => return Err(D::Error::custom("finetune defaults are not an object")),
    };
    base.extend(given);
    serde_json::from_value(Value::Object(base)).map_err(D::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: DataSpec,
    pub train_seed: u64,
    /// Size of the held-out split drawn from the same generator.
    pub test_n: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            generator: DataSpec::TwoMoons { n: 512, noise_std: 0.15 },
            train_seed: 1,
            test_n: 1000,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Monte Carlo samples for the posterior predictive.
    pub samples: usize,
    pub seed: u64,
    /// OOD sets scored against the test split.
    pub ood: Vec<OodSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 20,
            seed: 0,
            ood: vec![
                OodSpec {
                    kind: OodKind::UniformNoise,
                    seed: 3,
                    ..OodSpec::default()
                },
                OodSpec {
                    kind: OodKind::OutOfSupport,
                    seed: 4,
                    ..OodSpec::default()
                },
            ],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        let section = |name: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{name}: {m}")),
                other => Error::Config(format!("{name}: {other}")),
            })
        };
        section("data", self.data.generator.validate())?;
        if self.data.test_n < self.data.generator.classes() {
            return Err(Error::Config("data: test_n must be at least the class count".into()));
        }
        section("pretrain", self.pretrain.validate())?;
        if self.pretrain.variational_family != FamilyKind::None {
            return Err(Error::Config("pretrain: variational_family must be none".into()));
        }
        section("finetune", self.finetune.validate())?;
        if self.finetune.variational_family == FamilyKind::None {
            return Err(Error::Config("finetune: variational_family must be mfg or pse".into()));
        }
        if self.eval.samples == 0 {
            return Err(Error::Config("eval: samples must be at least 1".into()));
        }
        for o in &self.eval.ood {
            section("eval", o.validate())?;
        }
        section("variance_study", self.variance_study.validate())
    }

    /// Applies a command-line seed to every stochastic stage except data generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.eval.seed = seed;
        self.variance_study.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn finetune_keys_merge_onto_defaults() {
        let cfg = RunConfig::from_json(r#"{"finetune": {"lr": 0.5}}"#).unwrap();
        assert_eq!(cfg.finetune.lr, 0.5);
        assert_eq!(cfg.finetune.regularizer, default_finetune().regularizer);
    }

    #[test]
    fn seed_override_leaves_data_seeds() {
        let cfg = RunConfig::default().with_seed(77);
        assert_eq!((cfg.pretrain.seed, cfg.finetune.seed, cfg.eval.seed, cfg.variance_study.seed), (77, 77, 77, 77));
        assert_eq!(cfg.data, DataConfig::default());
    }
}
