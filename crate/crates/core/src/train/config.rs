//! Run configuration, dotted-key overrides and hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::optim::AdamW;
use crate::assign::{AtssConfig, LossWeights};
use crate::error::{Error, Result};
use crate::infer::InferenceConfig;
use crate::net::DetectorConfig;
use crate::selftrain::SelfTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Pooled caption logits are soft-capped to `±logit_cap` with a scaled
    /// tanh. Without a cap the loss keeps falling as the feature scale grows.
    pub logit_cap: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            base_lr: 2e-3,
            batch_size: 8,
            logit_cap: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    /// Fractions of total steps at which the rate drops tenfold.
    pub lr_drops: [f64; 2],
    pub base_lr: f64,
    /// Multiplier on the learning rate of `backbone.*` in detector training.
    pub backbone_lr_scale: f64,
    pub weight_decay: f64,
    /// Adaptive clipping threshold on `|g| / max(|w|, 1e-3)`.
    pub clip: f64,
    pub batch_size: usize,
    pub pseudo_batch_size: usize,
    /// Embedding variants per query (K).
    pub variants: usize,
    pub dropout_rate: f64,
    pub pseudo_negatives: usize,
    pub model: DetectorConfig,
    pub atss: AtssConfig,
    pub loss: LossWeights,
    pub inference: InferenceConfig,
    pub pretrain: PretrainConfig,
    pub selftrain: SelfTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 32,
            warmup_epochs: 0.25,
            lr_drops: [0.67, 0.89],
            base_lr: 1e-3,
            backbone_lr_scale: 1.0,
            weight_decay: 1e-4,
            clip: 0.04,
            batch_size: 8,
            pseudo_batch_size: 32,
            variants: 64,
            dropout_rate: 0.1,
            pseudo_negatives: 50,
            model: DetectorConfig::default(),
            atss: AtssConfig::default(),
            loss: LossWeights::default(),
            inference: InferenceConfig::default(),
            pretrain: PretrainConfig::default(),
            selftrain: SelfTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn warmup_fraction(&self) -> f64 {
        self.warmup_epochs / self.epochs as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.selftrain.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.variants == 0 {
            return Err(Error::Config(
                "epochs, batch_size and variants must be positive".into(),
            ));
        }
        let w = self.warmup_fraction();
        let [d1, d2] = self.lr_drops;
        if !(0.0 < w && w < d1 && d1 < d2 && d2 < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup ({w}) < first drop ({d1}) < second drop ({d2}) < 1"
            )));
        }
        if !(self.backbone_lr_scale >= 0.0) {
            return Err(Error::Config(format!(
                "backbone_lr_scale {} must be >= 0",
                self.backbone_lr_scale
            )));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config(
                "base_lr and clip must be positive, weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.pretrain.logit_cap > 0.0) {
            return Err(Error::Config("pretrain.logit_cap must be positive".into()));
        }
        if self.pretrain.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer for detector training.
    pub fn optimizer(&self) -> AdamW {
        AdamW::new(self.weight_decay, self.clip).with_lr_scale("backbone.", self.backbone_lr_scale)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling
    /// back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for s in sets {
            apply_override(&mut v, s.as_ref())?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex digest of the configuration with the seed zeroed, so runs that
    /// differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        let d = Sha256::digest(text.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

pub fn apply_override(root: &mut Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{set}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config(format!("empty config key in `{set}`")))
}

/// Content hash of the library sources this binary was built from.
pub fn code_hash() -> &'static str {
    env!("OVA_CODE_HASH")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert!((c.warmup_fraction() - 0.0078125).abs() < 1e-12);
        assert_eq!(TrainConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = TrainConfig::default()
            .with_overrides(&[
                "model.apa.enabled=false",
                "seed=7",
                "selftrain.method=detic_dagger",
            ])
            .unwrap();
        assert!(!c.model.apa.enabled);
        assert_eq!(c.seed, 7);
        assert!(TrainConfig::default()
            .with_overrides(&["model.nope=1"])
            .is_err());
        assert!(TrainConfig::default().with_overrides(&["seed"]).is_err());
        assert!(TrainConfig::default()
            .with_overrides(&["seed.x=1"])
            .is_err());
        assert!(TrainConfig::from_json("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            seed: 9,
            ..a.clone()
        };
        let c = TrainConfig {
            epochs: 3,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(code_hash().len(), 20);
    }

    #[test]
    fn schedule_order_is_checked() {
        let c = TrainConfig {
            lr_drops: [0.9, 0.5],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
