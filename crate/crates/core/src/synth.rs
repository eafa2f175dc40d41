//! A ground-truth finite-state dialog generator.
//!
//! States emit templated agent responses; user intents, each with a few
//! paraphrases, drive deterministic transitions. Generated corpora carry the
//! gold state of every turn so learned states can be scored against them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, Dialog, Turn};
use crate::error::{LstnError, Result};
use crate::model::StateRef;

pub const START: &str = "START";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleState {
    pub name: String,
    pub responses: Vec<String>,
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    pub utterances: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTransition {
    /// A state name or `START`.
    pub from: String,
    pub intent: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleMachine {
    pub states: Vec<OracleState>,
    pub intents: Vec<Intent>,
    pub transitions: Vec<OracleTransition>,
}

/// Name-resolved machine: `moves[from]` lists `(intent, to)` with `from = S` for START.
struct Resolved {
    moves: Vec<Vec<(usize, usize)>>,
}

impl OracleMachine {
    /// Four states: greet, request, inform, thank.
    pub fn weather() -> Self {
        let state = |name: &str, response: &str, terminal: bool| OracleState {
            name: name.into(),
            responses: vec![response.into()],
            terminal,
        };
        let intent = |name: &str, utts: &[&str]| Intent {
            name: name.into(),
            utterances: utts.iter().map(|s| s.to_string()).collect(),
        };
        let tr = |from: &str, intent: &str, to: &str| OracleTransition {
            from: from.into(),
            intent: intent.into(),
            to: to.into(),
        };
        Self {
            states: vec![
                state("greet", "hello , how can i help you today ?", false),
                state("request", "which city would you like the weather for ?", false),
                state("inform", "the weather in city_0 is sunny with a high of temp_0 .", false),
                state("thank", "you are welcome , have a nice day !", true),
            ],
            intents: vec![
                intent("greeting", &["hi there", "hello", "good morning"]),
                intent(
                    "ask_weather",
                    &["what is the weather like ?", "can you tell me the forecast ?", "i want to know the weather"],
                ),
                intent(
                    "ask_weather_city",
                    &[
                        "what is the weather in city_0 ?",
                        "forecast for city_0 please",
                        "how is the weather in city_0 today ?",
                    ],
                ),
                intent("give_city", &["city_0", "i am in city_0", "the city is city_0"]),
                intent("thanks", &["thanks", "thank you very much", "that is all , thanks"]),
            ],
            transitions: vec![
                tr(START, "greeting", "greet"),
                tr(START, "ask_weather", "request"),
                tr(START, "ask_weather_city", "inform"),
                tr("greet", "ask_weather", "request"),
                tr("greet", "ask_weather_city", "inform"),
                tr("request", "give_city", "inform"),
                tr("inform", "thanks", "thank"),
                tr("inform", "ask_weather", "request"),
                tr("inform", "ask_weather_city", "inform"),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| LstnError::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("machine serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LstnError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    fn resolve(&self) -> Result<Resolved> {
        let err = |m: String| LstnError::Generation(m);
        let s = self.states.len();
        if s == 0 {
            return Err(err("machine has no states".into()));
        }
        let mut state_ix = HashMap::new();
        for (i, st) in self.states.iter().enumerate() {
            if st.name == START || state_ix.insert(st.name.as_str(), i).is_some() {
                return Err(err(format!("bad or duplicate state name `{}`", st.name)));
            }
            if st.responses.is_empty() || st.responses.iter().any(|r| r.trim().is_empty()) {
                return Err(err(format!("state `{}` needs non-empty response templates", st.name)));
            }
        }
        let mut intent_ix = HashMap::new();
        for (i, it) in self.intents.iter().enumerate() {
            if intent_ix.insert(it.name.as_str(), i).is_some() {
                return Err(err(format!("duplicate intent `{}`", it.name)));
            }
            if it.utterances.is_empty() || it.utterances.iter().any(|u| u.trim().is_empty()) {
                return Err(err(format!("intent `{}` needs non-empty utterances", it.name)));
            }
        }
        let mut moves = vec![Vec::new(); s + 1];
        let mut seen = HashSet::new();
        for t in &self.transitions {
            let from = if t.from == START {
                s
            } else {
                *state_ix
                    .get(t.from.as_str())
                    .ok_or_else(|| err(format!("unknown state `{}`", t.from)))?
            };
            let to = *state_ix
                .get(t.to.as_str())
                .ok_or_else(|| err(format!("unknown state `{}`", t.to)))?;
            let intent = *intent_ix
                .get(t.intent.as_str())
                .ok_or_else(|| err(format!("unknown intent `{}`", t.intent)))?;
            if from < s && self.states[from].terminal {
                return Err(err(format!("terminal state `{}` has outgoing transitions", t.from)));
            }
            if !seen.insert((from, intent)) {
                return Err(err(format!("transition ({}, {}) is not deterministic", t.from, t.intent)));
            }
            moves[from].push((intent, to));
        }
        if moves[s].is_empty() {
            return Err(err("no transitions leave START".into()));
        }
        for (i, st) in self.states.iter().enumerate() {
            if !st.terminal && moves[i].is_empty() {
                return Err(err(format!("non-terminal state `{}` has no way out", st.name)));
            }
        }
        let mut reached = vec![false; s + 1];
        let mut stack = vec![s];
        reached[s] = true;
        while let Some(u) = stack.pop() {
            for &(_, v) in &moves[u] {
                if !reached[v] {
                    reached[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(i) = (0..s).find(|&i| !reached[i]) {
            return Err(err(format!("state `{}` is unreachable from START", self.states[i].name)));
        }
        Ok(Resolved { moves })
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// The machine's state-to-state transitions (intents dropped).
    pub fn edge_set(&self) -> Result<BTreeSet<(StateRef, usize)>> {
        let r = self.resolve()?;
        let s = self.states.len();
        Ok(r.moves
            .iter()
            .enumerate()
            .flat_map(|(from, mv)| {
                let f = if from == s { StateRef::Start } else { StateRef::State(from) };
                mv.iter().map(move |&(_, to)| (f, to))
            })
            .collect())
    }
}

/// A generated corpus with the gold state of every turn, keyed by dialog id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub corpus: CorpusSplit,
    pub gold: BTreeMap<String, Vec<usize>>,
}

impl SynthCorpus {
    pub fn gold_jsonl(&self) -> String {
        self.gold
            .iter()
            .map(|(id, states)| serde_json::json!({"id": id, "states": states}).to_string() + "\n")
            .collect()
    }

    pub fn parse_gold_jsonl(text: &str) -> Result<BTreeMap<String, Vec<usize>>> {
        #[derive(Deserialize)]
        struct Rec {
            id: String,
            states: Vec<usize>,
        }
        let mut out = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: Rec = serde_json::from_str(line)?;
            out.insert(r.id, r.states);
        }
        Ok(out)
    }
}

/// Samples dialogs by random intent walks from START until a terminal state
/// or `max_turns`, then splits 80/10/10 in generation order.
pub fn generate_corpus(machine: &OracleMachine, n_dialogs: usize, max_turns: usize, seed: u64) -> Result<SynthCorpus> {
    if n_dialogs == 0 || max_turns == 0 {
        return Err(LstnError::Generation("need at least one dialog and one turn".into()));
    }
    let r = machine.resolve()?;
    let s = machine.states.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogs = Vec::with_capacity(n_dialogs);
    let mut gold = BTreeMap::new();
    let width = n_dialogs.to_string().len();
    for i in 0..n_dialogs {
        let mut at = s;
        let mut turns = Vec::new();
        let mut states = Vec::new();
        while turns.len() < max_turns {
            let &(intent, to) = r.moves[at].choose(&mut rng).expect("validated: every live state has moves");
            let user = machine.intents[intent].utterances.choose(&mut rng).expect("non-empty");
            let agent = machine.states[to].responses.choose(&mut rng).expect("non-empty");
            turns.push(Turn::from_text(user, agent)?);
            states.push(to);
            at = to;
            if machine.states[to].terminal {
                break;
            }
        }
        let id = format!("synth-{i:0width$}");
        gold.insert(id.clone(), states);
        dialogs.push(Dialog::new(id, turns)?);
    }
    let n_train = n_dialogs * 8 / 10;
    let n_dev = n_dialogs / 10;
    let test = dialogs.split_off(n_train + n_dev);
    let dev = dialogs.split_off(n_train);
    Ok(SynthCorpus {
        corpus: CorpusSplit {
            train: dialogs,
            dev,
            test,
        },
        gold,
    })
}

/// Purity of learned labels against gold labels: the fraction of turns
/// whose learned state's majority gold state matches their own.
pub fn state_recovery(learned: &[usize], gold: &[usize]) -> Result<f64> {
    if learned.len() != gold.len() {
        return Err(LstnError::Argument(format!(
            "{} learned labels for {} gold labels",
            learned.len(),
            gold.len()
        )));
    }
    if learned.is_empty() {
        return Ok(0.0);
    }
    let counts = overlap_counts(learned, gold);
    let hits: usize = counts.values().map(|row| row.values().max().copied().unwrap_or(0)).sum();
    Ok(hits as f64 / learned.len() as f64)
}

fn overlap_counts(learned: &[usize], gold: &[usize]) -> BTreeMap<usize, BTreeMap<usize, usize>> {
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&l, &g) in learned.iter().zip(gold) {
        *counts.entry(l).or_default().entry(g).or_insert(0) += 1;
    }
    counts
}

/// Maps each learned state to the gold state it overlaps most (ties to
/// the lowest gold id).
pub fn align_states(learned: &[usize], gold: &[usize]) -> BTreeMap<usize, usize> {
    overlap_counts(learned, gold)
        .into_iter()
        .map(|(l, row)| {
            let best = row
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(g, _)| *g)
                .expect("non-empty row");
            (l, best)
        })
        .collect()
}
