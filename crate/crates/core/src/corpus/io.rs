//! Corpus and lexicon files.
//!
//! The native format is JSON lines, one dialog per line:
//!
//! ```text
//! {"id":"d1","split":"train","turns":[{"user":"hi","agent":"hello , how can i help ?"}]}
//! ```
//!
//! `split` is optional and defaults to `train`. The plain format is a
//! line-oriented transcript where dialogs are separated by blank lines:
//!
//! ```text
//! # d1 train
//! U: hi
//! A: hello , how can i help ?
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{tokenize, CorpusSplit, Dialog, EntityLexicon, SplitName, Turn};
use crate::error::{LstnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Plain,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = LstnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(LstnError::Argument(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    user: Option<String>,
    agent: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<SplitName>,
    turns: Vec<TurnRecord>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusSplit> {
    let text = std::fs::read_to_string(path).map_err(|e| LstnError::io(path, e))?;
    parse_corpus(&text, format, &path.display().to_string())
}

/// Parses corpus text; `source` names the input in error messages.
pub fn parse_corpus(text: &str, format: CorpusFormat, source: &str) -> Result<CorpusSplit> {
    let dialogs = match format {
        CorpusFormat::Jsonl => parse_jsonl(text, source)?,
        CorpusFormat::Plain => parse_plain(text, source)?,
    };
    if dialogs.is_empty() {
        return Err(LstnError::EmptyCorpus(source.to_string()));
    }
    let mut split = CorpusSplit::default();
    let mut seen = HashSet::new();
    for (line, name, dialog) in dialogs {
        if !seen.insert(dialog.id.clone()) {
            return Err(parse_err(source, line, format!("duplicate dialog id `{}`", dialog.id)));
        }
        split.split_mut(name).push(dialog);
    }
    Ok(split)
}

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> LstnError {
    LstnError::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_jsonl(text: &str, source: &str) -> Result<Vec<(usize, SplitName, Dialog)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(source, line, e.to_string()))?;
        let mut turns = Vec::with_capacity(rec.turns.len());
        for (t, tr) in rec.turns.iter().enumerate() {
            let user = tr.user.as_deref().map(tokenize).unwrap_or_default();
            let agent = tr.agent.as_deref().map(tokenize).unwrap_or_default();
            if user.is_empty() {
                return Err(parse_err(source, line, format!("turn {} has no user utterance", t + 1)));
            }
            if agent.is_empty() {
                return Err(parse_err(source, line, format!("turn {} has no agent reply", t + 1)));
            }
            turns.push(Turn { user, agent });
        }
        let dialog = Dialog::new(rec.id, turns).map_err(|e| parse_err(source, line, e.to_string()))?;
        out.push((line, rec.split.unwrap_or(SplitName::Train), dialog));
    }
    Ok(out)
}

fn parse_plain(text: &str, source: &str) -> Result<Vec<(usize, SplitName, Dialog)>> {
    struct Pending {
        start: usize,
        id: Option<String>,
        split: SplitName,
        turns: Vec<Turn>,
        user: Option<(usize, Vec<String>)>,
    }
    impl Pending {
        fn new(start: usize) -> Self {
            Self {
                start,
                id: None,
                split: SplitName::Train,
                turns: Vec::new(),
                user: None,
            }
        }
    }

    let mut out = Vec::new();
    let mut cur: Option<Pending> = None;
    let finish = |p: Pending, out: &mut Vec<(usize, SplitName, Dialog)>| -> Result<()> {
        if let Some((line, _)) = p.user {
            return Err(parse_err(source, line, "user utterance has no agent reply"));
        }
        if p.turns.is_empty() {
            return Err(parse_err(source, p.start, "dialog has no turns"));
        }
        let id = p.id.unwrap_or_else(|| format!("dialog-{}", out.len()));
        out.push((p.start, p.split, Dialog { id, turns: p.turns }));
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            if let Some(p) = cur.take() {
                finish(p, &mut out)?;
            }
            continue;
        }
        let p = cur.get_or_insert_with(|| Pending::new(line));
        if let Some(header) = trimmed.strip_prefix('#') {
            if !p.turns.is_empty() || p.user.is_some() {
                return Err(parse_err(source, line, "header inside a dialog"));
            }
            let mut parts = header.split_whitespace();
            p.id = parts.next().map(str::to_string);
            if let Some(s) = parts.next() {
                p.split = s.parse().map_err(|e: LstnError| parse_err(source, line, e.to_string()))?;
            }
        } else if let Some(u) = trimmed.strip_prefix("U:") {
            if p.user.is_some() {
                return Err(parse_err(source, line, "two user utterances in a row"));
            }
            let toks = tokenize(u);
            if toks.is_empty() {
                return Err(parse_err(source, line, "empty user utterance"));
            }
            p.user = Some((line, toks));
        } else if let Some(a) = trimmed.strip_prefix("A:") {
            let Some((_, user)) = p.user.take() else {
                return Err(parse_err(source, line, "agent reply without a user utterance"));
            };
            let agent = tokenize(a);
            if agent.is_empty() {
                return Err(parse_err(source, line, "empty agent reply"));
            }
            p.turns.push(Turn { user, agent });
        } else {
            return Err(parse_err(source, line, "expected `U:`, `A:` or `#` line"));
        }
    }
    if let Some(p) = cur.take() {
        finish(p, &mut out)?;
    }
    Ok(out)
}

/// Serializes a corpus in the native format, train then dev then test.
pub fn corpus_to_jsonl(corpus: &CorpusSplit) -> String {
    let mut out = String::new();
    for (split, d) in corpus.iter() {
        let rec = DialogRecord {
            id: d.id.clone(),
            split: Some(split),
            turns: d
                .turns
                .iter()
                .map(|t| TurnRecord {
                    user: Some(t.user.join(" ")),
                    agent: Some(t.agent.join(" ")),
                })
                .collect(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"));
    }
    out
}

pub fn write_corpus(corpus: &CorpusSplit, path: &Path) -> Result<()> {
    std::fs::write(path, corpus_to_jsonl(corpus)).map_err(|e| LstnError::io(path, e))
}

#[derive(Deserialize)]
struct LexiconRecord {
    #[serde(rename = "type")]
    entity_type: String,
    values: Vec<String>,
}

/// Reads a lexicon file: JSON lines of `{"type": "...", "values": [...]}`.
pub fn load_lexicon(path: &Path) -> Result<EntityLexicon> {
    let text = std::fs::read_to_string(path).map_err(|e| LstnError::io(path, e))?;
    let mut types = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let rec: LexiconRecord = serde_json::from_str(raw)
            .map_err(|e| parse_err(&path.display().to_string(), i + 1, e.to_string()))?;
        types.push((rec.entity_type, rec.values));
    }
    EntityLexicon::new(&types)
}
