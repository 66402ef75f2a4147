use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

fn word_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?|[A-Za-z_]+|\S").expect("static regex"))
}

/// Word-level split: numbers (with an optional decimal part), alphabetic
/// runs, and every other non-space character on its own.
pub fn split_words(text: &str) -> Vec<&str> {
    word_pattern().find_iter(text).map(|m| m.as_str()).collect()
}

/// The form a text takes after a tokenize/detokenize round trip.
pub fn normalize(text: &str) -> String {
    split_words(text).join(" ")
}

/// Token table. Ids 0..5 are the special tokens; the rest are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(split_words).collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(words.into_iter().filter(|w| !SPECIALS.contains(w)))
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens).expect("specials present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Contract("vocab must start with the special tokens".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Contract("vocab has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token table.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.tokens.join("\n").as_bytes()))
    }

    /// Joins the ids' tokens with single spaces, stopping at the first EOS and
    /// skipping BOS/PAD.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// A tokenized sequence: `[BOS] question | response [EOS] [EOS …]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenization {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// First response position; everything before it is prompt.
    pub prompt_len: usize,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn response_len(&self) -> usize {
        self.ids.len() - self.prompt_len
    }
}

/// Plain text without specials; `prompt_len` is 0.
pub fn tokenize(text: &str, vocab: &Vocab) -> Tokenization {
    let tokens: Vec<String> = split_words(text).into_iter().map(str::to_string).collect();
    let ids = tokens.iter().map(|t| vocab.id(t)).collect();
    Tokenization {
        tokens,
        ids,
        prompt_len: 0,
    }
}

/// Prompt tokens only: `[BOS] question`.
pub fn tokenize_prompt(question: &str, vocab: &Vocab) -> Tokenization {
    let mut tokens = vec![SPECIALS[BOS].to_string()];
    tokens.extend(split_words(question).into_iter().map(str::to_string));
    let ids: Vec<usize> = std::iter::once(BOS)
        .chain(tokens[1..].iter().map(|t| vocab.id(t)))
        .collect();
    Tokenization {
        prompt_len: ids.len(),
        tokens,
        ids,
    }
}

/// Prompt plus response terminated by EOS. With `response_len`, the response
/// region (including the terminating EOS) is padded with EOS to that length.
pub fn tokenize_pair(
    question: &str,
    response: &str,
    vocab: &Vocab,
    response_len: Option<usize>,
) -> Result<Tokenization> {
    let mut tok = tokenize_prompt(question, vocab);
    for w in split_words(response) {
        tok.ids.push(vocab.id(w));
        tok.tokens.push(w.to_string());
    }
    tok.ids.push(EOS);
    tok.tokens.push(SPECIALS[EOS].to_string());
    if let Some(target) = response_len {
        let have = tok.response_len();
        if have > target {
            return Err(Error::Contract(format!(
                "response needs {have} tokens, response length is {target}"
            )));
        }
        for _ in have..target {
            tok.ids.push(EOS);
            tok.tokens.push(SPECIALS[EOS].to_string());
        }
    }
    Ok(tok)
}
