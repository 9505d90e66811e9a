//! Training configuration: one JSON document, with `key.path=value`
//! overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::FeatureOptions;
use crate::error::{Error, Result};
use crate::losses::{DcKind, Loss, LossKind, DEFAULT_ALPHA};
use crate::models::{ModelConfig, ModelKind};

pub const DEFAULT_CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub clip: [f64; 2],
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            clip: [-1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Weight of the clustering term in chimera losses.
    pub alpha: f64,
    /// Clustering term used inside chimera losses.
    pub chimera_dc: DcKind,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            chimera_dc: DcKind::Classic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub feature_options: FeatureOptions,
    pub model_key: ModelKind,
    #[serde(default)]
    pub model: ModelConfig,
    pub loss_key: LossKind,
    #[serde(default)]
    pub loss_options: LossOptions,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_max_epochs() -> usize {
    100
}

fn default_patience() -> usize {
    6
}

impl TrainConfig {
    pub fn new(feature_options: FeatureOptions, model_key: ModelKind, loss_key: LossKind) -> Self {
        Self {
            feature_options,
            model_key,
            model: ModelConfig::default(),
            loss_key,
            loss_options: LossOptions::default(),
            optimizer: OptimizerConfig::default(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            seed: 0,
            checkpoint_dir: None,
        }
    }

    pub fn loss(&self) -> Loss {
        Loss {
            kind: self.loss_key,
            alpha: self.loss_options.alpha,
            chimera_dc: self.loss_options.chimera_dc,
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT_DIR))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| {
            Err(Error::Config {
                path: path.into(),
                reason,
            })
        };
        if !self.model_key.is_compatible(self.loss_key) {
            return bad(
                "loss_key",
                format!(
                    "loss `{}` is not compatible with model `{}`",
                    self.loss_key.key(),
                    self.model_key.key()
                ),
            );
        }
        if self.patience >= self.max_epochs {
            return bad(
                "patience",
                format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs),
            );
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return bad("optimizer.lr", format!("{} is not a positive learning rate", self.optimizer.lr));
        }
        let [lo, hi] = self.optimizer.clip;
        if !(lo <= hi) {
            return bad("optimizer.clip", format!("[{lo}, {hi}] is not a range"));
        }
        let a = self.loss_options.alpha;
        if !(0.0..=1.0).contains(&a) {
            return bad("loss_options.alpha", format!("{a} is outside [0, 1]"));
        }
        if let Err(e) = self.feature_options.validate() {
            return bad("feature_options", e.to_string());
        }
        let bins = self.feature_options.window_size / 2 + 1;
        if self.model.input_dim != bins {
            return bad(
                "model.input_dim",
                format!("{} does not match {bins} STFT bins", self.model.input_dim),
            );
        }
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        Ok(())
    }

    /// Parse from JSON text, apply overrides, then validate.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config {
            path: format!("line {} column {}", e.line(), e.column()),
            reason: e.to_string(),
        })?;
        let cfg: TrainConfig = from_value_with_path(value)?;
        let cfg = if overrides.is_empty() {
            cfg
        } else {
            let mut full = serde_json::to_value(&cfg).expect("config serializes");
            for o in overrides {
                apply_override(&mut full, o)?;
            }
            from_value_with_path(full)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, overrides)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn from_value_with_path<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| Error::Config {
        path: e.path().to_string(),
        reason: e.inner().to_string(),
    })
}

/// Apply one `dotted.path=value` override. The path must already exist in
/// the fully defaulted document, and the new value must have the same JSON
/// type as the old one. Values that do not parse as JSON are taken as strings.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        path: spec.into(),
        reason: "override must look like key.path=value".into(),
    })?;
    let path = path.trim();
    let mut cur = doc;
    for seg in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| Error::Config {
            path: path.into(),
            reason: format!("unknown key `{seg}`"),
        })?;
    }
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let same_type = matches!(
        (&*cur, &new),
        (Value::Null, _)
            | (Value::Bool(_), Value::Bool(_))
            | (Value::Number(_), Value::Number(_))
            | (Value::String(_), Value::String(_))
            | (Value::Array(_), Value::Array(_))
            | (Value::Object(_), Value::Object(_))
    );
    if !same_type {
        return Err(Error::Config {
            path: path.into(),
            reason: format!("expected a value like {cur}, got {new}"),
        });
    }
    *cur = new;
    Ok(())
}
