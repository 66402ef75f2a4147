use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, ModelParams};
use crate::mask::Vocab;
use crate::numerics::AdamW;
use crate::{Error, Result};

/// Everything needed to resume training or to decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub step: u64,
    pub epoch: usize,
    pub vocab: Vocab,
    pub tokenizer_hash: String,
    /// Fixed response length used when tokenizing training pairs.
    pub response_len: Option<usize>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    /// Loads and checks that the stored hash matches the stored vocabulary
    /// and the parameter shapes match the config.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.vocab.hash() != ckpt.tokenizer_hash {
            return Err(Error::Stale(format!(
                "{}: tokenizer hash does not match the stored vocabulary",
                path.display()
            )));
        }
        ckpt.params.check_shapes(&ckpt.config)?;
        Ok(ckpt)
    }

    pub fn expect_tokenizer(&self, hash: &str) -> Result<()> {
        if self.tokenizer_hash != hash {
            return Err(Error::Stale(format!(
                "checkpoint tokenizer {} differs from data tokenizer {}",
                &self.tokenizer_hash[..12.min(self.tokenizer_hash.len())],
                &hash[..12.min(hash.len())]
            )));
        }
        Ok(())
    }
}
