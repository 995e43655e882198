//! The run configuration: every knob of a command in one JSON document.

use std::path::{Path, PathBuf};

use m2a_core::adapters::{BankConfig, CompositionMode};
use m2a_core::data::SyntheticConfig;
use m2a_core::model::{BackboneConfig, LmMode, PretrainConfig};
use m2a_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::io::{read_text, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Where the backbone's pretraining text comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PretrainCorpus {
    /// Text from the synthetic generator with every domain skew set to zero
    /// and a seed of its own: the language without any writer's idiolect.
    #[default]
    Generic,
    /// The task's own training and unlabeled text.
    Task,
}

/// Backbone, data, bank, pretraining and training settings plus the
/// evaluation strategy. `seed` is the single source of randomness: it
/// overrides the seeds of the nested sections when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_corpus: PretrainCorpus,
    pub bank: BankConfig,
    pub train: TrainConfig,
    pub strategy: CompositionMode,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut synthetic = SyntheticConfig {
            train_per_domain: 12,
            unlabeled_per_domain: 100,
            test_per_domain: 200,
            sentiment_density: 0.5,
            sentiment_noise: 0.1,
            ..SyntheticConfig::default()
        };
        for a in &mut synthetic.attributes {
            a.skew = 0.6;
        }
        let mut backbone = BackboneConfig::toy(LmMode::Mlm, synthetic.vocab_size, synthetic.num_classes);
        backbone.num_layers = 1;
        backbone.d_model = 32;
        backbone.d_ff = 64;
        backbone.max_seq_len = synthetic.seq_len + 1;
        let pretrain = PretrainConfig {
            steps: 1500,
            ..PretrainConfig::default()
        };
        let mut train = TrainConfig {
            max_epochs: 30,
            patience: 4,
            unlabeled_mix: true,
            ..TrainConfig::default()
        };
        train.optimizer.lr = 3e-3;
        RunConfig {
            seed: 0,
            synthetic,
            backbone,
            pretrain,
            pretrain_corpus: PretrainCorpus::Generic,
            bank: BankConfig::decomposed(4, 0),
            train,
            strategy: CompositionMode::Fine,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Reads a possibly partial config: keys absent from the file keep their
    /// defaults, unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        let user: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_value(user)
    }

    pub fn from_value(user: Value) -> Result<Self, CliError> {
        let mut base = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        merge(&mut base, user, "")?;
        serde_json::from_value(base).map_err(|e| CliError::config(e.to_string()))
    }

    /// Propagates `seed` and checks every section.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.synthetic.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.bank.seed = self.seed;
        self.train.seed = self.seed;
        self.synthetic.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.backbone.vocab_size < self.synthetic.vocab_size {
            return Err(CliError::config("backbone vocabulary smaller than the data vocabulary"));
        }
        if self.backbone.num_classes != self.synthetic.num_classes {
            return Err(CliError::config("backbone and data disagree on the class count"));
        }
        Ok(self)
    }

    /// SHA-256 over the canonical JSON of the config, paths excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the resolved config next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("config.resolved.json"), self)
    }
}

fn merge(base: &mut Value, user: Value, path: &str) -> Result<(), CliError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            // Externally tagged enum switching variant: take the user's value.
            if b.len() == 1 && u.len() == 1 && b.keys().next() != u.keys().next() {
                let only = u.keys().next().cloned().unwrap_or_default();
                if !b.contains_key(&only) {
                    *b = u;
                    return Ok(());
                }
            }
            for (k, v) in u {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &sub)?,
                    None => return Err(CliError::config(format!("unknown config key `{sub}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
