use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::mask::{MASK, PAD};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Anything that maps a full token sequence to per-position logits.
pub trait Denoiser {
    fn logits(&self, ids: &[usize]) -> Result<Tensor>;
}

impl Denoiser for Model {
    fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        Model::logits(self, ids)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub gen_len: usize,
    pub block_len: usize,
    pub steps_per_block: usize,
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.gen_len == 0 || !self.gen_len.is_multiple_of(self.block_len) {
            return Err(Error::Contract(format!(
                "gen_len {} must be a positive multiple of block_len {}",
                self.gen_len, self.block_len
            )));
        }
        if self.steps_per_block == 0 || self.steps_per_block > self.block_len {
            return Err(Error::Contract(format!(
                "steps_per_block {} outside 1..={}",
                self.steps_per_block, self.block_len
            )));
        }
        Ok(())
    }
}

/// Generated response plus the response-relative positions committed at
/// each step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeTrace {
    pub response: Vec<usize>,
    pub steps: Vec<Vec<usize>>,
}

pub fn decode(model: &dyn Denoiser, prompt: &[usize], opts: &DecodeOptions) -> Result<Vec<usize>> {
    Ok(decode_trace(model, prompt, opts)?.response)
}

/// Greedy confidence-ordered block decoding.
///
/// Blocks are filled left to right. Each step commits the
/// `⌈remaining / steps_left⌉` masked positions of the current block whose
/// best non-special token is most probable; ties go to the lower position.
pub fn decode_trace(model: &dyn Denoiser, prompt: &[usize], opts: &DecodeOptions) -> Result<DecodeTrace> {
    opts.validate()?;
    let p = prompt.len();
    let mut seq: Vec<usize> = prompt.iter().copied().chain(std::iter::repeat_n(MASK, opts.gen_len)).collect();
    let mut steps = Vec::new();
    for block in 0..opts.gen_len / opts.block_len {
        let lo = p + block * opts.block_len;
        let hi = lo + opts.block_len;
        for step in 0..opts.steps_per_block {
            let masked: Vec<usize> = (lo..hi).filter(|&i| seq[i] == MASK).collect();
            if masked.is_empty() {
                break;
            }
            let steps_left = opts.steps_per_block - step;
            let k = masked.len().div_ceil(steps_left);
            let logits = model.logits(&seq)?;
            let (_, vocab) = logits.dims2()?;
            if vocab <= MASK {
                return Err(Error::Contract("vocabulary has no emittable tokens".into()));
            }
            let mut scored: Vec<(f64, usize, usize)> = masked
                .iter()
                .map(|&i| {
                    let (conf, tok) = best_token(logits.row(i));
                    (conf, i, tok)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut committed = Vec::with_capacity(k);
            for &(_, i, tok) in scored.iter().take(k) {
                seq[i] = tok;
                committed.push(i - p);
            }
            committed.sort_unstable();
            steps.push(committed);
        }
    }
    Ok(DecodeTrace {
        response: seq[p..].to_vec(),
        steps,
    })
}

/// Probability and id of the most likely token other than MASK and PAD.
fn best_token(row: &[f64]) -> (f64, usize) {
    let allowed = |id: usize| id != MASK && id != PAD;
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (id, &l) in row.iter().enumerate() {
        if allowed(id) && l > best.0 {
            best = (l, id);
        }
    }
    let z: f64 = row
        .iter()
        .enumerate()
        .filter(|&(id, _)| allowed(id))
        .map(|(_, &l)| (l - best.0).exp())
        .sum();
    (1.0 / z, best.1)
}
