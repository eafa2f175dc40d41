use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Dialog;
use crate::error::{LstnError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token/id bijection with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_count: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        Vocabulary::from_tokens(f.tokens, f.min_count)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_count: v.min_count,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            min_count,
        }
    }

    /// Vocabulary holding the reserved tokens followed by `words` in order.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !tokens.iter().any(|t| t == w.as_ref()) {
                tokens.push(w.as_ref().to_string());
            }
        }
        Self::from_tokens(tokens, 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(LstnError::Range {
                what: "token id",
                index: id as usize,
                len: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids; unknown tokens become [`UNK`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Like [`encode`](Self::encode) with a trailing [`EOS`].
    pub fn encode_response<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        let mut ids = self.encode(tokens);
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// Decodes a generated response, dropping a trailing end marker.
    pub fn decode_response(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        let body = match ids.last() {
            Some(&EOS) => &ids[..ids.len() - 1],
            _ => ids,
        };
        self.decode(body)
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Builds a vocabulary from every user and agent token of `corpus`.
///
/// Ids after the reserved block follow descending frequency, ties broken
/// alphabetically.
pub fn build_vocab(corpus: &[Dialog], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(LstnError::Argument("min_count must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(LstnError::EmptyCorpus("vocabulary input".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in corpus {
        for t in &d.turns {
            for tok in t.user.iter().chain(&t.agent) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(tok, c)| *c >= min_count && !RESERVED.contains(tok))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens, min_count))
}
