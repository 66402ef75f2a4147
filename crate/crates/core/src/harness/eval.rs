use std::collections::BTreeMap;
use std::sync::OnceLock;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::sample_tokens;
use crate::align::{alignment_loss, AlignConfig};
use crate::dlm::{apply_forward_masking, decode, dlm_sft_loss, forward, Checkpoint, DecodeOptions};
use crate::mask::{tokenize_prompt, SupervisionMask};
use crate::numerics::Tape;
use crate::orderperturb::ReasoningSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub gold: i64,
    pub extracted: Option<i64>,
    pub correct: bool,
    pub generated: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_mode: BTreeMap<String, f64>,
    pub decode: DecodeOptions,
    pub records: Vec<EvalRecord>,
}

fn answer_patterns() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"final answer is\s*(-\s?)?(\d+)").expect("static regex"),
            Regex::new(r"(?:^|[^\w.])(-\s?)?(\d+)(?:[^\w.]|\.(?:\D|$)|$)").expect("static regex"),
        )
    })
}

/// The integer after the last "final answer is", else the last standalone
/// integer, else `None`.
pub fn extract_answer(text: &str) -> Option<i64> {
    let (after_phrase, standalone) = answer_patterns();
    let to_int = |c: regex::Captures<'_>| -> Option<i64> {
        let v: i64 = c.get(2)?.as_str().parse().ok()?;
        Some(if c.get(1).is_some() { -v } else { v })
    };
    if let Some(c) = after_phrase.captures_iter(text).last() {
        return to_int(c);
    }
    // Overlapping scan so adjacent numbers are not skipped.
    let mut last = None;
    let mut at = 0;
    while let Some(c) = standalone.captures_at(text, at) {
        let digits = c.get(2).expect("group");
        at = digits.end();
        last = to_int(c);
    }
    last
}

/// Decodes every sample's question and exact-matches the extracted answer.
pub fn evaluate(ckpt: &Checkpoint, samples: &[ReasoningSample], opts: &DecodeOptions) -> Result<EvalReport> {
    opts.validate()?;
    let model = ckpt.model();
    let records = samples
        .par_iter()
        .map(|s| {
            let prompt = tokenize_prompt(&s.question, &ckpt.vocab);
            if prompt.len() + opts.gen_len > ckpt.config.max_len {
                return Err(Error::Config(format!(
                    "{}: prompt {} + gen_len {} exceeds max_len {}",
                    s.id,
                    prompt.len(),
                    opts.gen_len,
                    ckpt.config.max_len
                )));
            }
            let response = decode(&model, &prompt.ids, opts)?;
            let generated = ckpt.vocab.detokenize(&response);
            let extracted = extract_answer(&generated);
            Ok(EvalRecord {
                id: s.id.clone(),
                gold: s.answer,
                correct: extracted == Some(s.answer),
                extracted,
                generated,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_mode: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (s, r) in samples.iter().zip(&records) {
        let e = by_mode.entry(s.mode.as_str().to_string()).or_default();
        e.0 += r.correct as usize;
        e.1 += 1;
    }
    let correct = records.iter().filter(|r| r.correct).count();
    let total = records.len();
    Ok(EvalReport {
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        per_mode: by_mode.into_iter().map(|(m, (c, n))| (m, c as f64 / n as f64)).collect(),
        decode: *opts,
        records,
    })
}

/// Masked-token loss and alignment ratios of a checkpoint on a fixed,
/// seeded noising of `samples`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub loss_dlm: f64,
    pub median_ratio: Option<f64>,
    pub rows: usize,
}

pub fn probe(
    ckpt: &Checkpoint,
    samples: &[ReasoningSample],
    masks: Option<&IndexMap<String, SupervisionMask>>,
    align: &AlignConfig,
    seed: u64,
) -> Result<ProbeStats> {
    let response_len = ckpt
        .response_len
        .ok_or_else(|| Error::Contract("checkpoint has no response length".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut loss, mut ratios) = (0.0, Vec::new());
    for s in samples {
        let tok = sample_tokens(s, &ckpt.vocab, response_len)?;
        let noised = apply_forward_masking(&tok, &mut rng)?;
        let mut tape = Tape::new();
        let p = ckpt.params.bind(&mut tape, false);
        let mask = masks.and_then(|m| m.get(&s.id));
        let fo = forward(&mut tape, &p, &ckpt.config, &noised.noised, mask.is_some())?;
        let l = dlm_sft_loss(&mut tape, fo.logits, &noised, false)?;
        loss += tape.value(l).item()?;
        if let Some(mask) = mask {
            if let Some((_, bds)) = alignment_loss(&mut tape, &fo.capture, mask, align)? {
                ratios.extend(bds.iter().flat_map(|b| b.rows.iter().filter_map(|r| r.ratio)));
            }
        }
    }
    ratios.sort_by(f64::total_cmp);
    let median_ratio = match ratios.len() {
        0 => None,
        n if n % 2 == 1 => Some(ratios[n / 2]),
        n => Some(0.5 * (ratios[n / 2 - 1] + ratios[n / 2])),
    };
    Ok(ProbeStats {
        loss_dlm: loss / samples.len().max(1) as f64,
        median_ratio,
        rows: ratios.len(),
    })
}
