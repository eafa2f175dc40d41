use std::collections::HashMap;

use super::{tokenize, Dialog, TokenSeq};
use crate::error::{LstnError, Result};

/// Knowledge-base entity surface forms grouped by entity type.
///
/// A surface form listed under several types belongs to the first type that
/// declares it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EntityLexicon {
    types: Vec<String>,
    // first token -> (surface tokens, type index), longest first
    by_first: HashMap<String, Vec<(TokenSeq, usize)>>,
    entries: Vec<(usize, TokenSeq)>,
}

impl EntityLexicon {
    pub fn new<S: AsRef<str>>(types: &[(S, Vec<S>)]) -> Result<Self> {
        let mut lex = Self::default();
        for (name, forms) in types {
            let ty = lex.types.len();
            lex.types.push(name.as_ref().to_lowercase());
            for form in forms {
                let toks = tokenize(form.as_ref());
                if toks.is_empty() || lex.entries.iter().any(|(_, t)| *t == toks) {
                    continue;
                }
                lex.entries.push((ty, toks.clone()));
                lex.by_first
                    .entry(toks[0].clone())
                    .or_default()
                    .push((toks, ty));
            }
        }
        if lex.entries.is_empty() {
            return Err(LstnError::Argument("entity lexicon is empty".into()));
        }
        for cands in lex.by_first.values_mut() {
            // stable: equal lengths keep declaration order
            cands.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        }
        Ok(lex)
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn longest_match(&self, tokens: &[String]) -> Option<(usize, usize)> {
        let cands = self.by_first.get(tokens.first()?)?;
        cands
            .iter()
            .find(|(surface, _)| tokens.len() >= surface.len() && tokens[..surface.len()] == surface[..])
            .map(|(surface, ty)| (surface.len(), *ty))
    }
}

/// Replaces entity mentions with `<type>_<k>` placeholders, where `k` counts
/// distinct surface forms of that type in order of first appearance within
/// the dialog (user side before agent side in each turn).
pub fn anonymize(dialog: &Dialog, lexicon: &EntityLexicon) -> Dialog {
    let mut assigned: HashMap<(usize, TokenSeq), usize> = HashMap::new();
    let mut next_index = vec![0usize; lexicon.types.len()];
    let mut rewrite = |tokens: &TokenSeq| -> TokenSeq {
        let mut out = Vec::with_capacity(tokens.len());
        let mut pos = 0;
        while pos < tokens.len() {
            match lexicon.longest_match(&tokens[pos..]) {
                Some((len, ty)) => {
                    let key = (ty, tokens[pos..pos + len].to_vec());
                    let k = *assigned.entry(key).or_insert_with(|| {
                        let k = next_index[ty];
                        next_index[ty] += 1;
                        k
                    });
                    out.push(format!("{}_{}", lexicon.types[ty], k));
                    pos += len;
                }
                None => {
                    out.push(tokens[pos].clone());
                    pos += 1;
                }
            }
        }
        out
    };
    let mut result = dialog.clone();
    for turn in &mut result.turns {
        turn.user = rewrite(&turn.user);
        turn.agent = rewrite(&turn.agent);
    }
    result
}
