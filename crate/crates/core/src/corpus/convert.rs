//! Best-effort adapters from public dialog dataset layouts to [`Dialog`]s.
//!
//! Consecutive utterances by the same speaker are merged, leading agent
//! utterances are dropped, and a trailing user utterance without a reply is
//! discarded.

use serde_json::Value;

use super::{tokenize, Dialog, TokenSeq, Turn};
use crate::error::{LstnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Speaker {
    User,
    Agent,
}

fn pair_up(id: String, utterances: Vec<(Speaker, String)>) -> Option<Dialog> {
    let mut merged: Vec<(Speaker, TokenSeq)> = Vec::new();
    for (sp, text) in utterances {
        let toks = tokenize(&text);
        if toks.is_empty() {
            continue;
        }
        match merged.last_mut() {
            Some((last, acc)) if *last == sp => acc.extend(toks),
            _ => merged.push((sp, toks)),
        }
    }
    let start = merged.iter().position(|(sp, _)| *sp == Speaker::User)?;
    let mut turns = Vec::new();
    let mut it = merged.into_iter().skip(start);
    while let (Some((Speaker::User, user)), Some((Speaker::Agent, agent))) = (it.next(), it.next()) {
        turns.push(Turn { user, agent });
    }
    (!turns.is_empty()).then_some(Dialog { id, turns })
}

fn as_array<'a>(v: &'a Value, what: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| LstnError::Argument(format!("{what}: expected a JSON array")))
}

/// Stanford multi-domain (in-car assistant) layout: an array of
/// `{"dialogue": [{"turn": "driver"|"assistant", "data": {"utterance": ...}}]}`.
pub fn convert_smd(json: &str, id_prefix: &str) -> Result<Vec<Dialog>> {
    let root: Value = serde_json::from_str(json)?;
    let mut out = Vec::new();
    for (i, d) in as_array(&root, "smd")?.iter().enumerate() {
        let turns = as_array(&d["dialogue"], "smd dialogue")?;
        let utts = turns
            .iter()
            .filter_map(|t| {
                let sp = match t["turn"].as_str()? {
                    "driver" => Speaker::User,
                    "assistant" => Speaker::Agent,
                    _ => return None,
                };
                Some((sp, t["data"]["utterance"].as_str()?.to_string()))
            })
            .collect();
        if let Some(d) = pair_up(format!("{id_prefix}{i}"), utts) {
            out.push(d);
        }
    }
    Ok(out)
}

/// CamRest676 layout: an array of
/// `{"dialogue_id": n, "dial": [{"usr": {"transcript": ...}, "sys": {"sent": ...}}]}`.
pub fn convert_camrest(json: &str, id_prefix: &str) -> Result<Vec<Dialog>> {
    let root: Value = serde_json::from_str(json)?;
    let mut out = Vec::new();
    for (i, d) in as_array(&root, "camrest")?.iter().enumerate() {
        let id = match &d["dialogue_id"] {
            Value::Number(n) => format!("{id_prefix}{n}"),
            Value::String(s) => format!("{id_prefix}{s}"),
            _ => format!("{id_prefix}{i}"),
        };
        let mut utts = Vec::new();
        for t in as_array(&d["dial"], "camrest dial")? {
            if let Some(u) = t["usr"]["transcript"].as_str() {
                utts.push((Speaker::User, u.to_string()));
            }
            if let Some(s) = t["sys"]["sent"].as_str() {
                utts.push((Speaker::Agent, s.to_string()));
            }
        }
        if let Some(d) = pair_up(id, utts) {
            out.push(d);
        }
    }
    Ok(out)
}
