//! Flat `key = value` run configuration covering model, training and
//! ablation settings in a single file.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::Dataset;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub caption_noise: f64,
    pub extended_factor: usize,
    /// Keys given explicitly in the file or by overrides.
    #[serde(skip)]
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            caption_noise: 0.5,
            extended_factor: 2,
            explicit: BTreeSet::new(),
        }
    }
}

fn keys_of<S: Serialize>(value: &S) -> BTreeSet<String> {
    toml::Table::try_from(value)
        .expect("flat config serializes")
        .keys()
        .cloned()
        .collect()
}

/// Integers written for float-valued keys become floats.
fn coerce(current: Option<&toml::Value>, v: toml::Value) -> toml::Value {
    match (current, &v) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => v,
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_owned()))?;
        cfg.apply(table)?;
        Ok(cfg)
    }

    /// Merges `pairs` over the current values; unknown keys are errors.
    pub fn apply(&mut self, table: toml::Table) -> Result<()> {
        let model_keys = keys_of(&self.model);
        let train_keys = keys_of(&self.train);
        let mut model = toml::Table::try_from(&self.model).map_err(config_err)?;
        let mut train = toml::Table::try_from(&self.train).map_err(config_err)?;
        let mut bad = Vec::new();
        for (k, v) in table {
            if let Some(i) = v.as_integer() {
                if i < 0 {
                    bad.push(format!("`{k}` must be non-negative, got {i}"));
                    continue;
                }
            }
            if model_keys.contains(&k) {
                let v = coerce(model.get(&k), v);
                model.insert(k.clone(), v);
            } else if train_keys.contains(&k) {
                let v = coerce(train.get(&k), v);
                train.insert(k.clone(), v);
            } else if k == "caption_noise" {
                self.caption_noise = v
                    .as_float()
                    .or_else(|| v.as_integer().map(|i| i as f64))
                    .ok_or_else(|| Error::Config("`caption_noise` must be a number".into()))?;
            } else if k == "extended_factor" {
                self.extended_factor = v
                    .as_integer()
                    .ok_or_else(|| Error::Config("`extended_factor` must be an integer".into()))?
                    as usize;
            } else {
                bad.push(format!("unknown key `{k}`"));
                continue;
            }
            self.explicit.insert(k);
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad.join("; ")));
        }
        self.model = model
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        self.train = train
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        self.train.validate()
    }

    /// Sets one key from its textual value, as a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v: toml::Value = match value.parse::<i64>() {
            Ok(i) => toml::Value::Integer(i),
            Err(_) => match value.parse::<f64>() {
                Ok(f) => toml::Value::Float(f),
                Err(_) => toml::Value::String(value.to_owned()),
            },
        };
        let mut t = toml::Table::new();
        t.insert(key.to_owned(), v);
        self.apply(t)
    }

    /// Fills image, voxel and vocabulary dimensions from `dataset` unless
    /// they were set explicitly, in which case they must agree.
    pub fn fit_dataset(&mut self, dataset: &Dataset) -> Result<()> {
        let [c, h, w] = dataset.image_shape;
        let derived: [(&'static str, usize, &mut usize); 4] = [
            ("image_channels", c, &mut self.model.image_channels),
            ("image_height", h, &mut self.model.image_height),
            ("image_width", w, &mut self.model.image_width),
            ("voxel_count", dataset.voxel_count(), &mut self.model.voxel_count),
        ];
        for (key, actual, slot) in derived {
            if self.explicit.contains(key) {
                if *slot != actual {
                    return Err(Error::DimMismatch {
                        what: key,
                        expected: *slot,
                        found: actual,
                    });
                }
            } else {
                *slot = actual;
            }
        }
        let vocab = dataset.vocab.len();
        if self.explicit.contains("vocab_size") {
            if self.model.vocab_size < vocab {
                return Err(Error::DimMismatch {
                    what: "vocab_size",
                    expected: self.model.vocab_size,
                    found: vocab,
                });
            }
        } else {
            self.model.vocab_size = vocab;
        }
        self.model.validate()
    }

    /// Flat `key = value` rendering of every setting.
    pub fn to_toml_string(&self) -> String {
        let mut t = toml::Table::try_from(&self.model).expect("serializes");
        t.extend(toml::Table::try_from(&self.train).expect("serializes"));
        t.insert("caption_noise".into(), toml::Value::Float(self.caption_noise));
        t.insert(
            "extended_factor".into(),
            toml::Value::Integer(self.extended_factor as i64),
        );
        toml::to_string(&t).expect("serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Modality;

    #[test]
    fn defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.train.base_lr, 1e-4);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.train.decay_factor, 0.8);
        assert_eq!(c.train.decay_interval_epochs, 5);
        assert_eq!(c.train.folds, 5);
        assert_eq!(c.model, ModelConfig::desk());
    }

    #[test]
    fn mixed_keys_and_overrides() {
        let mut c = RunConfig::from_toml_str("epochs = 3\nhidden_size = 32\nmode = \"image-only\"\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.hidden_size, 32);
        assert_eq!(c.model.mode, Modality::ImageOnly);
        c.set("base_lr", "0.001").unwrap();
        c.set("mode", "multimodal").unwrap();
        c.set("weight_decay", "0").unwrap();
        assert_eq!(c.train.weight_decay, 0.0);
        assert_eq!(c.train.base_lr, 1e-3);
        assert_eq!(c.model.mode, Modality::Multimodal);
        assert!(c.explicit.contains("hidden_size"));
    }

    #[test]
    fn rejects_unknown_and_negative() {
        let e = RunConfig::from_toml_str("bogus = 1\nepochs = -2\n").unwrap_err().to_string();
        assert!(e.contains("bogus") && e.contains("epochs"), "{e}");
        assert!(RunConfig::from_toml_str("batch_size = 1").is_err());
    }

    #[test]
    fn renders_back() {
        let mut c = RunConfig::default();
        c.train.epochs = 11;
        let back = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
    }
}
