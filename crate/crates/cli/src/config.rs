//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]` and
//! `[output]` sections. Relative paths are taken relative to the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use embgate_core::experiment::{synth_model_config, synth_train_config};
use embgate_core::model::{InjectionMode, ModelConfig};
use embgate_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
    pub injection_mode: String,
    pub injection_layer: usize,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        ModelSection {
            layers: c.layers,
            hidden: c.hidden,
            heads: c.heads,
            ffn: c.ffn,
            max_seq_len: c.max_seq_len,
            injection_mode: c.injection_mode.to_string(),
            injection_layer: c.injection_layer,
            init_std: c.init_std,
            layer_norm_eps: c.layer_norm_eps,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        (&ModelConfig::desk(1, 1)).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_every: usize,
    pub patience: usize,
    /// Debug switch: pins the gate at zero.
    pub freeze_gate: bool,
    pub seeds: Vec<u64>,
}

impl TrainSection {
    fn from_config(c: &TrainConfig, seeds: Vec<u64>) -> Self {
        TrainSection {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            eval_every: c.eval_every,
            patience: c.patience,
            freeze_gate: c.freeze_gate,
            seeds,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: 0,
            eval_every: self.eval_every,
            patience: self.patience,
            freeze_gate: self.freeze_gate,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default(), vec![0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    /// `zero` or `mean`.
    #[serde(default = "default_oov")]
    pub oov: String,
}

fn default_oov() -> String {
    "zero".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.vocab, &mut d.train, &mut d.dev] {
            fix(p);
        }
        for p in [&mut d.test, &mut d.embeddings, &mut d.lexicon].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    /// Config for the files `embgate synth` writes, with paths relative to
    /// the output directory.
    pub fn for_synth(ext_dim: usize, seeds: Vec<u64>) -> Self {
        let model = synth_model_config(1, ext_dim, InjectionMode::Gated);
        RunConfig {
            model: (&model).into(),
            train: TrainSection::from_config(&synth_train_config(), seeds),
            data: DataSection {
                vocab: embgate_core::synth::VOCAB_FILE.into(),
                train: embgate_core::synth::TRAIN_FILE.into(),
                dev: embgate_core::synth::DEV_FILE.into(),
                test: Some(embgate_core::synth::TEST_FILE.into()),
                embeddings: Some(embgate_core::synth::ORACLE_FILE.into()),
                lexicon: Some(embgate_core::synth::LEXICON_FILE.into()),
                oov: default_oov(),
            },
            output: OutputSection { dir: "runs".into() },
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn mode(&self) -> Result<InjectionMode> {
        Ok(self.model.injection_mode.parse::<InjectionMode>()?)
    }

    /// Checks everything that can be checked before any file is read.
    pub fn validate(&self) -> Result<()> {
        if self.train.seeds.is_empty() {
            return Err(UsageError("train.seeds must list at least one seed".into()).into());
        }
        let mode = self.mode()?;
        if mode.uses_injection() && self.data.embeddings.is_none() {
            return Err(UsageError(format!("injection mode {mode} needs data.embeddings")).into());
        }
        if mode != InjectionMode::Gated && self.train.freeze_gate {
            return Err(UsageError(format!("freeze_gate only applies to gated mode, not {mode}")).into());
        }
        self.model_config(1, 1)?.validate()?;
        self.train.train_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, ext_dim: usize) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            layers: m.layers,
            hidden: m.hidden,
            ext_dim,
            heads: m.heads,
            ffn: m.ffn,
            max_seq_len: m.max_seq_len,
            vocab_size,
            num_classes: 2,
            injection_mode: self.mode()?,
            injection_layer: m.injection_layer,
            layer_norm_eps: m.layer_norm_eps,
            init_std: m.init_std,
        })
    }

    /// Every file the run will read.
    pub fn input_files(&self) -> Vec<&Path> {
        let d = &self.data;
        let mut files = vec![d.vocab.as_path(), d.train.as_path(), d.dev.as_path()];
        files.extend(
            [&d.test, &d.embeddings, &d.lexicon]
                .into_iter()
                .flatten()
                .map(PathBuf::as_path),
        );
        files
    }
}
