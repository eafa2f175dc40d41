//! Dialog transcripts: tokenization, entity anonymization, vocabulary and
//! corpus files.

mod anonymize;
pub mod convert;
mod io;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{LstnError, Result};

pub use anonymize::{anonymize, EntityLexicon};
pub use io::{corpus_to_jsonl, load_corpus, load_lexicon, parse_corpus, write_corpus, CorpusFormat};
pub use vocab::{build_vocab, TokenId, Vocabulary, BOS, EOS, PAD, UNK};

pub type TokenSeq = Vec<String>;
pub type IdSeq = Vec<TokenId>;

/// Lowercases, separates punctuation from words and splits on whitespace.
///
/// Underscores, apostrophes and hyphens stay inside words so placeholders
/// like `cuisine_0` and contractions like `let's` survive as single tokens.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_punctuation() && !matches!(c, '_' | '\'' | '-') {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: TokenSeq,
    pub agent: TokenSeq,
}

impl Turn {
    pub fn new(user: TokenSeq, agent: TokenSeq) -> Result<Self> {
        if user.is_empty() || agent.is_empty() {
            return Err(LstnError::Argument(
                "turn needs a non-empty user utterance and agent response".into(),
            ));
        }
        Ok(Self { user, agent })
    }

    pub fn from_text(user: &str, agent: &str) -> Result<Self> {
        Self::new(tokenize(user), tokenize(agent))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialog {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let id = id.into();
        if turns.is_empty() {
            return Err(LstnError::Argument(format!("dialog `{id}` has no turns")));
        }
        Ok(Self { id, turns })
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = LstnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" | "valid" | "validation" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(LstnError::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

impl CorpusSplit {
    pub fn split(&self, name: SplitName) -> &[Dialog] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<Dialog> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Dev => &mut self.dev,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (SplitName, &Dialog)> {
        [SplitName::Train, SplitName::Dev, SplitName::Test]
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |d| (s, d)))
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps only dialogs satisfying `keep`, in every split.
    pub fn filter<F: Fn(&Dialog) -> bool>(&self, keep: F) -> CorpusSplit {
        let f = |v: &[Dialog]| v.iter().filter(|d| keep(d)).cloned().collect();
        CorpusSplit {
            train: f(&self.train),
            dev: f(&self.dev),
            test: f(&self.test),
        }
    }

    pub fn map_dialogs<F: Fn(&Dialog) -> Dialog>(&self, f: F) -> CorpusSplit {
        let m = |v: &[Dialog]| v.iter().map(&f).collect();
        CorpusSplit {
            train: m(&self.train),
            dev: m(&self.dev),
            test: m(&self.test),
        }
    }
}

/// A turn with ids; the agent side always ends with [`EOS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTurn {
    pub user: IdSeq,
    pub agent: IdSeq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDialog {
    pub id: String,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedDialog {
    pub fn new(dialog: &Dialog, vocab: &Vocabulary) -> Self {
        Self {
            id: dialog.id.clone(),
            turns: dialog
                .turns
                .iter()
                .map(|t| EncodedTurn {
                    user: vocab.encode(&t.user),
                    agent: vocab.encode_response(&t.agent),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Number of scored response tokens, end markers included.
    pub fn response_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.agent.len()).sum()
    }
}

pub fn encode_dialogs(dialogs: &[Dialog], vocab: &Vocabulary) -> Vec<EncodedDialog> {
    dialogs.iter().map(|d| EncodedDialog::new(d, vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_keeps_placeholders() {
        assert_eq!(
            tokenize("Let's go with cuisine_0 food, I will keep KOREAN for next time."),
            vec![
                "let's", "go", "with", "cuisine_0", "food", ",", "i", "will", "keep", "korean",
                "for", "next", "time", "."
            ]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn empty_turn_rejected() {
        assert!(Turn::from_text("hello", "  ").is_err());
        assert!(Dialog::new("d", vec![]).is_err());
    }

    #[test]
    fn filter_keeps_matching_dialogs() {
        let d = |id: &str, u: &str| Dialog::new(id, vec![Turn::from_text(u, "ok").unwrap()]).unwrap();
        let c = CorpusSplit {
            train: vec![d("a", "book a table"), d("b", "hello")],
            dev: vec![d("c", "book it")],
            test: vec![],
        };
        let kept = c.filter(|d| d.turns.iter().any(|t| t.user.contains(&"book".to_string())));
        assert_eq!(kept.train.len(), 1);
        assert_eq!(kept.dev.len(), 1);
    }
}
