//! Interpretable artifacts of a trained model: intent classes mined from
//! state transitions, duplicate-state diagnostics, and the dialog-flow
//! graph.
//!
//! The flow graph has two serializations. The record file holds one JSON
//! object per line: a `graph` header with the thresholds, then one `node`
//! line per node, then one `edge` line per edge. The Graphviz text looks
//! like this:
//!
//! ```text
//! digraph dialog_flow {
//!   // min_edge_count=1 top_r=2
//!   start [label="START"];
//!   s0 [label="0\n1. hello , how can i help you today ?"];
//!   start -> s0 [label="12\n\"hi\"\n\"hello there\""];
//! }
//! ```
//!
//! Edge labels carry the count followed by up to three sample utterances.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_dialogs, Dialog, Vocabulary};
use crate::em::e_step;
use crate::error::{LstnError, Result};
use crate::inference::{argmax, track_state, ResponseCache};
use crate::model::{Lstn, StateRef};

pub const DEFAULT_DUPLICATE_THRESHOLD: f64 = 0.8;
pub const MAX_EDGE_SAMPLES: usize = 3;

/// User utterances that moved the tracked state from `from` to `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentClass {
    pub from: StateRef,
    pub to: usize,
    /// Distinct utterances in first-seen order.
    pub utterances: Vec<String>,
    /// Number of turns, repeats included.
    pub count: usize,
}

/// Argmax state trajectory of each dialog, tracked from user turns only.
pub fn tracked_states(model: &Lstn, dialogs: &[Dialog], vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    dialogs
        .par_iter()
        .map(|d| {
            let mut marginal = None;
            let mut out = Vec::with_capacity(d.len());
            for t in &d.turns {
                let m = track_state(model, marginal.as_ref(), &vocab.encode(&t.user))?;
                out.push(m.argmax());
                marginal = Some(m);
            }
            Ok(out)
        })
        .collect()
}

/// Per-turn argmax of the exact posterior marginal given the full dialog,
/// responses included.
pub fn posterior_states(model: &Lstn, dialogs: &[Dialog], vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    encode_dialogs(dialogs, vocab)
        .par_iter()
        .map(|d| Ok(e_step(model, d)?.state_marginals().iter().map(|m| argmax(m)).collect()))
        .collect()
}

/// Replays dialogs and groups turns by their argmax transition. Classes are
/// ordered by `(from, to)` with START first.
pub fn mine_intents(model: &Lstn, dialogs: &[Dialog], vocab: &Vocabulary) -> Result<Vec<IntentClass>> {
    let paths = tracked_states(model, dialogs, vocab)?;
    let mut classes: BTreeMap<(StateRef, usize), IntentClass> = BTreeMap::new();
    for (d, path) in dialogs.iter().zip(&paths) {
        let mut prev = StateRef::Start;
        for (t, &z) in d.turns.iter().zip(path) {
            let c = classes.entry((prev, z)).or_insert_with(|| IntentClass {
                from: prev,
                to: z,
                utterances: Vec::new(),
                count: 0,
            });
            let text = t.user.join(" ");
            if !c.utterances.contains(&text) {
                c.utterances.push(text);
            }
            c.count += 1;
            prev = StateRef::State(z);
        }
    }
    Ok(classes.into_values().collect())
}

/// Jaccard similarity of two token sets; two empty sets are identical.
pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut x = x;
    while parent[x] != r {
        let next = parent[x];
        parent[x] = r;
        x = next;
    }
    r
}

/// Groups of states whose rank-1 responses are at least `threshold`
/// similar, closed transitively. Only groups of two or more are returned,
/// each sorted, ordered by smallest member.
pub fn detect_duplicates(cache: &ResponseCache, threshold: f64) -> Result<Vec<Vec<usize>>> {
    let k = cache.num_states();
    let tops: Vec<&[u32]> = (0..k).map(|z| cache.top(z).map(|r| r.tokens.as_slice())).collect::<Result<_>>()?;
    let mut parent: Vec<usize> = (0..k).collect();
    for a in 0..k {
        for b in a + 1..k {
            if jaccard(tops[a], tops[b]) >= threshold {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for z in 0..k {
        let r = find(&mut parent, z);
        groups.entry(r).or_default().push(z);
    }
    Ok(groups.into_values().filter(|g| g.len() >= 2).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: StateRef,
    pub responses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from: StateRef,
    pub to: usize,
    pub count: usize,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogFlowGraph {
    pub min_edge_count: usize,
    pub top_r: usize,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<FlowEdge>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum GraphRecord {
    Graph { min_edge_count: usize, top_r: usize },
    Node(FlowNode),
    Edge(FlowEdge),
}

/// Builds the flow graph: START plus every state with its top `top_r`
/// cached responses, and the intent classes seen at least `min_edge_count`
/// times as edges.
pub fn export_flow_graph(
    intents: &[IntentClass],
    cache: &ResponseCache,
    vocab: &Vocabulary,
    min_edge_count: usize,
    top_r: usize,
) -> Result<DialogFlowGraph> {
    let k = cache.num_states();
    let mut nodes = vec![FlowNode {
        id: StateRef::Start,
        responses: Vec::new(),
    }];
    for z in 0..k {
        let responses = cache.states[z]
            .iter()
            .take(top_r)
            .map(|r| Ok(vocab.decode(&r.tokens)?.join(" ")))
            .collect::<Result<_>>()?;
        nodes.push(FlowNode {
            id: StateRef::State(z),
            responses,
        });
    }
    let mut edges = Vec::new();
    for c in intents {
        if c.to >= k {
            return Err(LstnError::Range {
                what: "intent target state",
                index: c.to,
                len: k,
            });
        }
        if c.count >= min_edge_count {
            edges.push(FlowEdge {
                from: c.from,
                to: c.to,
                count: c.count,
                samples: c.utterances.iter().take(MAX_EDGE_SAMPLES).cloned().collect(),
            });
        }
    }
    Ok(DialogFlowGraph {
        min_edge_count,
        top_r,
        nodes,
        edges,
    })
}

fn dot_id(s: StateRef) -> String {
    match s {
        StateRef::Start => "start".into(),
        StateRef::State(z) => format!("s{z}"),
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl DialogFlowGraph {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &GraphRecord| {
            out.push_str(&serde_json::to_string(r).expect("graph records serialize"));
            out.push('\n');
        };
        push(&GraphRecord::Graph {
            min_edge_count: self.min_edge_count,
            top_r: self.top_r,
        });
        for n in &self.nodes {
            push(&GraphRecord::Node(n.clone()));
        }
        for e in &self.edges {
            push(&GraphRecord::Edge(e.clone()));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                GraphRecord::Graph { min_edge_count, top_r } => {
                    if header.replace((min_edge_count, top_r)).is_some() {
                        return Err(LstnError::Argument("graph file has two headers".into()));
                    }
                }
                GraphRecord::Node(n) => nodes.push(n),
                GraphRecord::Edge(e) => edges.push(e),
            }
        }
        let (min_edge_count, top_r) = header.ok_or_else(|| LstnError::Argument("graph file lacks a header".into()))?;
        Ok(Self {
            min_edge_count,
            top_r,
            nodes,
            edges,
        })
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph dialog_flow {\n");
        let _ = writeln!(out, "  // min_edge_count={} top_r={}", self.min_edge_count, self.top_r);
        for n in &self.nodes {
            let mut label = match n.id {
                StateRef::Start => "START".to_string(),
                StateRef::State(z) => z.to_string(),
            };
            for (i, r) in n.responses.iter().enumerate() {
                let _ = write!(label, "\\n{}. {}", i + 1, dot_escape(r));
            }
            let _ = writeln!(out, "  {} [label=\"{label}\"];", dot_id(n.id));
        }
        for e in &self.edges {
            let mut label = e.count.to_string();
            for s in &e.samples {
                let _ = write!(label, "\\n\\\"{}\\\"", dot_escape(s));
            }
            let _ = writeln!(
                out,
                "  {} -> {} [label=\"{label}\"];",
                dot_id(e.from),
                dot_id(StateRef::State(e.to))
            );
        }
        out.push_str("}\n");
        out
    }

    /// Edge set with learned states renamed through `alignment`; edges
    /// touching an unaligned state are dropped.
    pub fn mapped_edges(&self, alignment: &BTreeMap<usize, usize>) -> BTreeSet<(StateRef, usize)> {
        let map = |s: StateRef| match s {
            StateRef::Start => Some(StateRef::Start),
            StateRef::State(z) => alignment.get(&z).map(|&g| StateRef::State(g)),
        };
        self.edges
            .iter()
            .filter_map(|e| Some((map(e.from)?, *alignment.get(&e.to)?)))
            .collect()
    }
}

/// Learned-to-gold alignment over turns of dialogs that have gold labels.
pub fn alignment_from_paths(
    dialogs: &[Dialog],
    learned: &[Vec<usize>],
    gold: &HashMap<&str, &[usize]>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut l = Vec::new();
    let mut g = Vec::new();
    for (d, path) in dialogs.iter().zip(learned) {
        let gs = gold
            .get(d.id.as_str())
            .ok_or_else(|| LstnError::Argument(format!("no gold labels for dialog `{}`", d.id)))?;
        if gs.len() != path.len() {
            return Err(LstnError::Argument(format!("gold labels for `{}` have the wrong length", d.id)));
        }
        l.extend_from_slice(path);
        g.extend_from_slice(gs);
    }
    Ok((l, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{BeamConfig, CachedResponse};

    fn cache(tops: &[&[u32]]) -> ResponseCache {
        ResponseCache {
            beam: BeamConfig::default(),
            states: tops
                .iter()
                .map(|t| {
                    vec![CachedResponse {
                        tokens: t.to_vec(),
                        logprob: -1.0,
                        terminated: true,
                    }]
                })
                .collect(),
        }
    }

    #[test]
    fn duplicates() {
        let c = cache(&[&[5, 6, 7], &[8, 9], &[5, 6, 7], &[10]]);
        assert_eq!(detect_duplicates(&c, 0.8).unwrap(), vec![vec![0, 2]]);
        let distinct = cache(&[&[5], &[6], &[7]]);
        assert!(detect_duplicates(&distinct, 0.8).unwrap().is_empty());
        assert_eq!(detect_duplicates(&distinct, 0.0).unwrap(), vec![vec![0, 1, 2]]);
        // transitive closure through a bridging state
        let chain = cache(&[&[1, 2, 3, 4], &[1, 2, 3, 5], &[1, 2, 5, 6]]);
        assert_eq!(detect_duplicates(&chain, 0.6).unwrap(), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(jaccard(&[1, 1, 2], &[2, 1]), 1.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
    }

    fn sample_graph() -> DialogFlowGraph {
        DialogFlowGraph {
            min_edge_count: 1,
            top_r: 1,
            nodes: vec![
                FlowNode {
                    id: StateRef::Start,
                    responses: vec![],
                },
                FlowNode {
                    id: StateRef::State(0),
                    responses: vec!["say \"hi\"".into()],
                },
            ],
            edges: vec![FlowEdge {
                from: StateRef::Start,
                to: 0,
                count: 4,
                samples: vec!["hello".into(), "a\\b".into()],
            }],
        }
    }

    #[test]
    fn graph_round_trip_and_dot() {
        let g = sample_graph();
        assert_eq!(DialogFlowGraph::from_jsonl(&g.to_jsonl()).unwrap(), g);
        let expect = "digraph dialog_flow {\n  // min_edge_count=1 top_r=1\n  start [label=\"START\"];\n  s0 [label=\"0\\n1. say \\\"hi\\\"\"];\n  start -> s0 [label=\"4\\n\\\"hello\\\"\\n\\\"a\\\\b\\\"\"];\n}\n";
        assert_eq!(g.to_dot(), expect);
        assert!(DialogFlowGraph::from_jsonl("").is_err());
    }

    #[test]
    fn mapped_edges_rename_states() {
        let mut g = sample_graph();
        g.edges.push(FlowEdge {
            from: StateRef::State(0),
            to: 1,
            count: 1,
            samples: vec![],
        });
        let align = BTreeMap::from([(0, 2), (1, 2)]);
        let e = g.mapped_edges(&align);
        assert_eq!(e, BTreeSet::from([(StateRef::Start, 2), (StateRef::State(2), 2)]));
    }
}
