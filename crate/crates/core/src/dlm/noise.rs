use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::{Tokenization, MASK};
use crate::numerics::{Tape, Var};
use crate::{Error, Result};

/// A prompt-plus-response sequence with part of the response replaced by
/// MASK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisedSequence {
    pub original: Vec<usize>,
    pub noised: Vec<usize>,
    pub prompt_len: usize,
    /// Masking level in (0, 1].
    pub t: f64,
    /// Ascending positions where `noised` holds MASK.
    pub masked_positions: Vec<usize>,
}

/// Draws `t ~ U(0, 1]`, then masks each response token with probability `t`.
/// `t` is redrawn until at least one position is masked.
pub fn apply_forward_masking(tok: &Tokenization, rng: &mut impl Rng) -> Result<NoisedSequence> {
    check_response(tok)?;
    loop {
        let t = 1.0 - rng.gen::<f64>();
        if let Some(n) = try_mask(tok, t, rng) {
            return Ok(n);
        }
    }
}

/// Masking at a fixed level `t ∈ (0, 1]`. Bernoulli draws repeat until at
/// least one position is masked.
pub fn mask_at_level(tok: &Tokenization, t: f64, rng: &mut impl Rng) -> Result<NoisedSequence> {
    check_response(tok)?;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("masking level {t} outside (0, 1]")));
    }
    loop {
        if let Some(n) = try_mask(tok, t, rng) {
            return Ok(n);
        }
    }
}

fn check_response(tok: &Tokenization) -> Result<()> {
    if tok.prompt_len >= tok.ids.len() {
        return Err(Error::Contract("sequence has an empty response".into()));
    }
    Ok(())
}

fn try_mask(tok: &Tokenization, t: f64, rng: &mut impl Rng) -> Option<NoisedSequence> {
    let mut noised = tok.ids.clone();
    let mut masked = Vec::new();
    for (pos, id) in noised.iter_mut().enumerate().skip(tok.prompt_len) {
        if rng.gen::<f64>() < t {
            *id = MASK;
            masked.push(pos);
        }
    }
    (!masked.is_empty()).then(|| NoisedSequence {
        original: tok.ids.clone(),
        noised,
        prompt_len: tok.prompt_len,
        t,
        masked_positions: masked,
    })
}

/// `Σ_{masked i} −log p(original_i)`, optionally scaled by `1/t`.
pub fn dlm_sft_loss(tape: &mut Tape, logits: Var, noised: &NoisedSequence, reweight_by_inv_t: bool) -> Result<Var> {
    let loss = tape.cross_entropy_at_positions(logits, &noised.original, &noised.masked_positions)?;
    Ok(if reweight_by_inv_t {
        tape.scale(loss, 1.0 / noised.t)
    } else {
        loss
    })
}
