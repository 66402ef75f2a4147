//! Declarative run configuration.
//!
//! One JSON document with a section per stage. Every field has a default,
//! unknown keys are rejected, and `section.field=value` overrides are
//! applied on the JSON form before validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AlignConfig;
use crate::concept::ProviderConfig;
use crate::dlm::{DecodeOptions, ModelConfig};
use crate::orderperturb::{GenOptions, PerturbMode};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub modes: Vec<PerturbMode>,
    /// Presentation order used for training.
    pub train_mode: PerturbMode,
    /// Mask sidecar; `<dir>/masks_<mode>_<convention>.jsonl` when unset.
    pub masks: Option<PathBuf>,
    /// Annotation file supplying graphs for mask building; the DAG oracle
    /// when unset.
    pub graphs: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = GenOptions::default();
        Self {
            dir: PathBuf::from("data"),
            seed: g.seed,
            n_train: g.n_train,
            n_test: g.n_test,
            modes: g.modes,
            train_mode: PerturbMode::Normal,
            masks: None,
            graphs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub reweight_by_inv_t: bool,
    pub seed: u64,
    /// Response region length in tokens; `eval.gen_len` when unset.
    pub response_len: Option<usize>,
    /// Use only the first `limit` training samples.
    pub limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            reweight_by_inv_t: false,
            seed: 42,
            response_len: None,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gen_len: usize,
    pub block_len: usize,
    /// `block_len` when unset.
    pub steps_per_block: Option<usize>,
    /// Evaluate only the first `limit` test samples.
    pub limit: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gen_len: 512,
            block_len: 32,
            steps_per_block: None,
            limit: None,
        }
    }
}

impl EvalConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            gen_len: self.gen_len,
            block_len: self.block_len,
            steps_per_block: self.steps_per_block.unwrap_or(self.block_len),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub seeds: Vec<u64>,
    /// Accuracy target for epochs-to-threshold; the SFT arm's final
    /// accuracy (per seed) when unset.
    pub threshold: Option<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            seeds: vec![42, 43, 44],
            threshold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_root: PathBuf,
    pub run_id: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub align: AlignConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub provider: ProviderConfig,
    pub compare: CompareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_root: PathBuf::from("runs"),
            run_id: "run".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            align: AlignConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            provider: ProviderConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let body = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
                serde_json::from_str(&body).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies `key=value` pairs such as `align.enabled=false`. Values are
    /// read as JSON, falling back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.align.validate()?;
        self.provider.validate()?;
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(Error::Config("train.epochs and train.batch must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        self.eval
            .decode_options()
            .validate()
            .map_err(|e| Error::Config(format!("eval: {e}")))?;
        if self.compare.seeds.is_empty() {
            return Err(Error::Config("compare.seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn gen_options(&self) -> GenOptions {
        GenOptions {
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            modes: self.data.modes.clone(),
            seed: self.data.seed,
        }
    }

    pub fn response_len(&self) -> usize {
        self.train.response_len.unwrap_or(self.eval.gen_len)
    }

    pub fn mask_path(&self) -> PathBuf {
        self.data.masks.clone().unwrap_or_else(|| {
            self.data.dir.join(format!(
                "masks_{}_{}.jsonl",
                self.data.train_mode.as_str(),
                self.align.convention.as_str()
            ))
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root.join(&self.run_id)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not inside a section")))?;
        if !obj.contains_key(part) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(part).expect("checked");
    }
    Err(Error::Config("empty override key".into()))
}
