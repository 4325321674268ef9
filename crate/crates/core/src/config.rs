//! The run configuration file: one JSON document covering data, encoder,
//! training, augmentation and analysis settings.
//!
//! Precedence is command-line flags, then the file, then built-in defaults.
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::error::{Result, SwepError};
use crate::model::{EncoderConfig, QaModel};
use crate::qa_data::{load_squad_json, synthesize_toy_dataset, ToyDatasetSpec, Vocabulary};
use crate::trainer::{QaSet, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from `spec`. A dev set of `dev_examples` is drawn
    /// with `dev_seed` when both are given.
    Synthetic {
        #[serde(default)]
        spec: ToyDatasetSpec,
        #[serde(default)]
        dev_examples: usize,
        #[serde(default)]
        dev_seed: Option<u64>,
    },
    /// SQuAD-format JSON files. Without `vocab` the vocabulary is built from
    /// the training file.
    Squad {
        train: PathBuf,
        #[serde(default)]
        dev: Option<PathBuf>,
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            spec: ToyDatasetSpec::default(),
            dev_examples: 0,
            dev_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; per-component streams are derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            run_dir: None,
        }
    }
}

/// Loaded training and dev data with the vocabulary.
pub struct LoadedData {
    pub train: QaSet,
    pub dev: Option<QaSet>,
    pub vocab: Vocabulary,
}

fn load_squad(path: &Path) -> Result<Vec<crate::qa_data::RawExample>> {
    let loaded = load_squad_json(path)?;
    for e in &loaded.errors {
        log::warn!("{}: skipped {e}", path.display());
    }
    if loaded.examples.is_empty() {
        return Err(SwepError::Empty(format!("no usable examples in {}", path.display())));
    }
    Ok(loaded.examples)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SwepError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SwepError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| SwepError::io(path, e))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SwepError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SwepError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.analysis.validate()?;
        match &self.data {
            DataConfig::Synthetic {
                spec,
                dev_examples,
                dev_seed,
            } => {
                spec.validate()?;
                if (*dev_examples > 0) != dev_seed.is_some() {
                    return Err(SwepError::Config(
                        "set both dev_examples and dev_seed, or neither".into(),
                    ));
                }
            }
            DataConfig::Squad { .. } => {}
        }
        Ok(())
    }

    /// Reads or generates the datasets named by `data`.
    pub fn load_data(&self) -> Result<LoadedData> {
        match &self.data {
            DataConfig::Synthetic {
                spec,
                dev_examples,
                dev_seed,
            } => {
                let (raw, vocab) = synthesize_toy_dataset(spec)?;
                let dev = match dev_seed {
                    Some(seed) if *dev_examples > 0 => {
                        let (dev_raw, _) = synthesize_toy_dataset(&ToyDatasetSpec {
                            n_examples: *dev_examples,
                            seed: *seed,
                            ..spec.clone()
                        })?;
                        Some(QaSet::build(dev_raw, &vocab)?)
                    }
                    _ => None,
                };
                Ok(LoadedData {
                    train: QaSet::build(raw, &vocab)?,
                    dev,
                    vocab,
                })
            }
            DataConfig::Squad { train, dev, vocab } => {
                let train_raw = load_squad(train)?;
                let vocab = match vocab {
                    Some(p) => read_vocab(p)?,
                    None => Vocabulary::build(&train_raw),
                };
                let dev = dev.as_deref().map(load_squad).transpose()?;
                Ok(LoadedData {
                    train: QaSet::build(train_raw, &vocab)?,
                    dev: dev.map(|d| QaSet::build(d, &vocab)).transpose()?,
                    vocab,
                })
            }
        }
    }

    pub fn model(&self, vocab: &Vocabulary) -> Result<QaModel> {
        QaModel::new(self.encoder.clone(), vocab.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 3, "train": {"epochs": 2, "ablation": "no_mle"}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"sed": 3}"#,
            r#"{"train": {"epoch": 2}}"#,
            r#"{"train": {"swep": {"alpha": 0.1, "gamma": 1}}}"#,
            r#"{"data": {"kind": "synthetic", "extra": 1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn synthetic_dev_set_shares_the_vocabulary() {
        let c = RunConfig {
            data: DataConfig::Synthetic {
                spec: ToyDatasetSpec {
                    n_examples: 20,
                    ..Default::default()
                },
                dev_examples: 5,
                dev_seed: Some(99),
            },
            ..Default::default()
        };
        c.validate().unwrap();
        let d = c.load_data().unwrap();
        assert_eq!((d.train.len(), d.dev.as_ref().unwrap().len()), (20, 5));
        let half = RunConfig {
            data: DataConfig::Synthetic {
                spec: ToyDatasetSpec::default(),
                dev_examples: 5,
                dev_seed: None,
            },
            ..Default::default()
        };
        assert!(half.validate().is_err());
    }
}
