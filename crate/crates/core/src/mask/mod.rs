//! Token-level prior supervision.
//!
//! A concept graph is projected onto a tokenized sample: each concept is
//! located as a unique contiguous token span, and every (query, key) token
//! pair between two concept spans receives +1 (encouraged), −1
//! (discouraged) or nothing (neutral, stored implicitly).

mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use vocab::{
    normalize, split_words, tokenize, tokenize_pair, tokenize_prompt, Tokenization, Vocab, BOS,
    EOS, MASK, PAD, SPECIALS, UNK,
};

use crate::concept::ConceptGraph;
use crate::{Error, Result};

/// Which index of `M` is the attention query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Row = effect token, column = cause token.
    #[default]
    EffectRows,
    /// Row = cause token, column = effect token.
    CauseRows,
}

impl Convention {
    pub fn as_str(self) -> &'static str {
        match self {
            Convention::EffectRows => "effect_rows",
            Convention::CauseRows => "cause_rows",
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effect_rows" => Ok(Convention::EffectRows),
            "cause_rows" => Ok(Convention::CauseRows),
            _ => Err(Error::Contract(format!("unknown mask convention {s:?}"))),
        }
    }
}

/// Half-open token range `[start, end)` covering one concept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub concept: String,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpanFailure {
    Absent { concept: String },
    Ambiguous { concept: String, matches: usize },
}

/// Spans found for a graph, plus the concepts that could not be placed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpanMap {
    pub spans: IndexMap<String, TokenSpan>,
    pub failures: Vec<SpanFailure>,
}

impl SpanMap {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Exact token-sequence match of every concept. Zero or multiple matches are
/// collected as failures.
pub fn locate_spans(graph: &ConceptGraph, tok: &Tokenization) -> SpanMap {
    let mut out = SpanMap::default();
    for concept in &graph.concepts {
        let needle = split_words(concept);
        let starts: Vec<usize> = if needle.is_empty() || needle.len() > tok.tokens.len() {
            Vec::new()
        } else {
            (0..=tok.tokens.len() - needle.len())
                .filter(|&s| tok.tokens[s..s + needle.len()].iter().zip(&needle).all(|(a, b)| a == b))
                .collect()
        };
        match starts.as_slice() {
            [s] => {
                out.spans.insert(
                    concept.clone(),
                    TokenSpan {
                        concept: concept.clone(),
                        start: *s,
                        end: s + needle.len(),
                    },
                );
            }
            [] => out.failures.push(SpanFailure::Absent {
                concept: concept.clone(),
            }),
            many => out.failures.push(SpanFailure::Ambiguous {
                concept: concept.clone(),
                matches: many.len(),
            }),
        }
    }
    out
}

/// One stored pair `(row, column, value)` with value ±1.
pub type Entry = (u32, u32, i8);

/// Sparse `{−1, +1}` token-pair labels; absent pairs are 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupervisionMask {
    pub id: String,
    pub seq_len: usize,
    pub tokenizer_hash: String,
    entries: Vec<Entry>,
}

impl SupervisionMask {
    /// Sorts and validates the entries: values ±1, indices in range, no
    /// duplicate pair.
    pub fn new(id: String, seq_len: usize, tokenizer_hash: String, mut entries: Vec<Entry>) -> Result<Self> {
        entries.sort_unstable();
        for w in entries.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(Error::Contract(format!(
                    "{id}: duplicate mask entry ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        for &(i, j, v) in &entries {
            if v != 1 && v != -1 {
                return Err(Error::Contract(format!("{id}: mask value {v} at ({i}, {j})")));
            }
            if i as usize >= seq_len || j as usize >= seq_len {
                return Err(Error::Index(format!(
                    "{id}: mask entry ({i}, {j}) outside sequence of length {seq_len}"
                )));
            }
        }
        Ok(Self {
            id,
            seq_len,
            tokenizer_hash,
            entries,
        })
    }

    pub fn empty(id: String, seq_len: usize, tokenizer_hash: String) -> Self {
        Self {
            id,
            seq_len,
            tokenizer_hash,
            entries: Vec::new(),
        }
    }

    /// Entries sorted by `(row, column)`.
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries
            .binary_search_by(|&(a, b, _)| (a as usize, b as usize).cmp(&(i, j)))
            .map_or(0, |k| self.entries[k].2)
    }

    /// Rows with at least one nonzero entry, ascending.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.rows().map(|(i, _)| i).collect()
    }

    /// Nonzero entries grouped by row.
    pub fn rows(&self) -> impl Iterator<Item = (usize, &[Entry])> {
        self.entries
            .chunk_by(|a, b| a.0 == b.0)
            .map(|chunk| (chunk[0].0 as usize, chunk))
    }

    pub fn transpose(&self) -> Self {
        let mut entries: Vec<Entry> = self.entries.iter().map(|&(i, j, v)| (j, i, v)).collect();
        entries.sort_unstable();
        Self {
            entries,
            ..self.clone()
        }
    }

    pub fn to_record(&self) -> MaskRecord {
        MaskRecord {
            id: self.id.clone(),
            seq_len: self.seq_len,
            tokenizer_hash: self.tokenizer_hash.clone(),
            entries: self.entries.clone(),
        }
    }
}

/// One line of a mask sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub id: String,
    pub seq_len: usize,
    pub tokenizer_hash: String,
    pub entries: Vec<Entry>,
}

/// Expands concept-pair relations to token pairs.
///
/// Under [`Convention::EffectRows`], a query token in an effect span gets
/// +1 towards every token of its cause spans, −1 for the reverse pair, and −1
/// towards concept tokens from a strictly later step when no edge label is
/// already present. [`Convention::CauseRows`] is the transpose.
pub fn build_mask(
    id: &str,
    graph: &ConceptGraph,
    spans: &SpanMap,
    tok: &Tokenization,
    tokenizer_hash: &str,
    convention: Convention,
) -> Result<SupervisionMask> {
    let span = |c: &str| {
        spans
            .spans
            .get(c)
            .map(TokenSpan::range)
            .ok_or_else(|| Error::Contract(format!("{id}: concept {c:?} has no span")))
    };
    let mut cells: BTreeMap<(u32, u32), i8> = BTreeMap::new();
    let cross = |cells: &mut BTreeMap<(u32, u32), i8>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, v: i8, force: bool| {
        for q in rows {
            for k in cols.clone() {
                let key = (q as u32, k as u32);
                if force {
                    cells.insert(key, v);
                } else {
                    cells.entry(key).or_insert(v);
                }
            }
        }
    };

    for (effect, causes) in &graph.edges {
        let e = span(effect)?;
        for c in causes {
            cross(&mut cells, e.clone(), span(c)?, 1, true);
        }
    }
    for (effect, causes) in &graph.edges {
        let e = span(effect)?;
        for c in causes {
            cross(&mut cells, span(c)?, e.clone(), -1, false);
        }
    }
    if let Some(step_of) = &graph.step_of {
        for a in &graph.concepts {
            for b in &graph.concepts {
                let (Some(sa), Some(sb)) = (step_of.get(a), step_of.get(b)) else { continue };
                if a != b && sb > sa {
                    cross(&mut cells, span(a)?, span(b)?, -1, false);
                }
            }
        }
    }

    let entries = cells
        .into_iter()
        .map(|((q, k), v)| match convention {
            Convention::EffectRows => (q, k, v),
            Convention::CauseRows => (k, q, v),
        })
        .collect();
    SupervisionMask::new(id.to_string(), tok.len(), tokenizer_hash.to_string(), entries)
}

/// Span location followed by mask construction. A sample with any span
/// failure gets an empty mask and stays SFT-only.
pub fn mask_for_sample(
    id: &str,
    graph: &ConceptGraph,
    tok: &Tokenization,
    tokenizer_hash: &str,
    convention: Convention,
) -> Result<(SupervisionMask, Vec<SpanFailure>)> {
    let spans = locate_spans(graph, tok);
    if !spans.is_complete() {
        let empty = SupervisionMask::empty(id.to_string(), tok.len(), tokenizer_hash.to_string());
        return Ok((empty, spans.failures));
    }
    Ok((build_mask(id, graph, &spans, tok, tokenizer_hash, convention)?, Vec::new()))
}

pub fn save_masks(path: &Path, masks: &[SupervisionMask]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for m in masks {
        serde_json::to_writer(&mut w, &m.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a sidecar, keyed by sample id. Every record must carry
/// `expected_hash`, otherwise the file is stale.
pub fn load_masks(path: &Path, expected_hash: &str) -> Result<IndexMap<String, SupervisionMask>> {
    let body = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let lines: Vec<&str> = body.lines().filter(|l| !l.trim().is_empty()).collect();
    let records = lines
        .par_iter()
        .map(|l| Ok(serde_json::from_str::<MaskRecord>(l)?))
        .collect::<Result<Vec<_>>>()?;
    let mut out = IndexMap::with_capacity(records.len());
    for r in records {
        if r.tokenizer_hash != expected_hash {
            return Err(Error::Stale(format!(
                "{}: mask {} was built for tokenizer {}, current tokenizer is {}",
                path.display(),
                r.id,
                short(&r.tokenizer_hash),
                short(expected_hash)
            )));
        }
        let mask = SupervisionMask::new(r.id, r.seq_len, r.tokenizer_hash, r.entries)?;
        out.insert(mask.id.clone(), mask);
    }
    Ok(out)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_tok(n: usize) -> Tokenization {
        let tokens: Vec<String> = (0..n).map(|i| char::from(b'a' + i as u8).to_string()).collect();
        Tokenization {
            ids: (0..n).collect(),
            tokens,
            prompt_len: 0,
        }
    }

    #[test]
    fn two_concept_hand_expansion() {
        let tok = toy_tok(10);
        let graph = ConceptGraph {
            concepts: vec!["d".into(), "h".into()],
            edges: [("h".to_string(), vec!["d".to_string()])].into_iter().collect(),
            ..ConceptGraph::default()
        };
        let spans = locate_spans(&graph, &tok);
        let m = build_mask("s", &graph, &spans, &tok, "h", Convention::EffectRows).unwrap();
        assert_eq!(m.entries(), &[(3, 7, -1), (7, 3, 1)]);
        assert_eq!(m.valid_rows(), vec![3, 7]);
        let lit = build_mask("s", &graph, &spans, &tok, "h", Convention::CauseRows).unwrap();
        assert_eq!(lit, m.transpose());
    }

    #[test]
    fn empty_graph_gives_empty_mask() {
        let tok = toy_tok(4);
        let graph = ConceptGraph::default();
        let m = build_mask("s", &graph, &locate_spans(&graph, &tok), &tok, "h", Convention::EffectRows).unwrap();
        assert!(m.is_empty());
        assert!(m.valid_rows().is_empty());
    }

    #[test]
    fn absent_and_ambiguous_spans() {
        let mut tok = toy_tok(4);
        tok.tokens[3] = "b".into();
        let graph = ConceptGraph {
            concepts: vec!["b".into(), "zz".into(), "c".into()],
            ..ConceptGraph::default()
        };
        let spans = locate_spans(&graph, &tok);
        assert_eq!(spans.spans.len(), 1);
        assert_eq!(
            spans.failures,
            vec![
                SpanFailure::Ambiguous { concept: "b".into(), matches: 2 },
                SpanFailure::Absent { concept: "zz".into() },
            ]
        );
    }

    #[test]
    fn invalid_entries_rejected() {
        assert!(SupervisionMask::new("a".into(), 3, "h".into(), vec![(0, 1, 1), (0, 1, -1)]).is_err());
        assert!(SupervisionMask::new("a".into(), 3, "h".into(), vec![(0, 3, 1)]).is_err());
        assert!(SupervisionMask::new("a".into(), 3, "h".into(), vec![(0, 1, 0)]).is_err());
    }

    #[test]
    fn unknown_convention() {
        assert!("row_major".parse::<Convention>().is_err());
        assert_eq!("cause_rows".parse::<Convention>().unwrap(), Convention::CauseRows);
    }
}
