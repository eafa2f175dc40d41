//! Running a trained model: state tracking from user utterances alone,
//! per-state response catalogs, and response selection.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{anonymize, detokenize, tokenize, Dialog, EntityLexicon, TokenId, Turn, Vocabulary};
use crate::error::{LstnError, Result};
use crate::model::Lstn;

/// `p(z_i | x_{1:i})`, kept in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMarginal {
    pub log_p: Vec<f64>,
}

impl StateMarginal {
    /// Normalizes arbitrary log-weights.
    pub fn from_log_weights(w: &[f64]) -> Result<Self> {
        let z = diffcore::log_sum_exp(w);
        if !z.is_finite() {
            return Err(LstnError::Inference("state weights do not normalize".into()));
        }
        Ok(Self {
            log_p: w.iter().map(|v| v - z).collect(),
        })
    }

    pub fn num_states(&self) -> usize {
        self.log_p.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_p.iter().map(|v| v.exp()).collect()
    }

    /// Most probable state; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax(&self.log_p)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One tracking step. `prev = None` means the conversation start.
pub fn track_state(model: &Lstn, prev: Option<&StateMarginal>, x: &[TokenId]) -> Result<StateMarginal> {
    let k = model.num_states();
    let table = model.transition_table(x)?;
    let w: Vec<f64> = match prev {
        None => table.row(k).to_vec(),
        Some(p) => {
            if p.num_states() != k {
                return Err(LstnError::Inference(format!(
                    "marginal over {} states for a {k}-state model",
                    p.num_states()
                )));
            }
            (0..k)
                .map(|z| {
                    let terms: Vec<f64> = (0..k).map(|zp| p.log_p[zp] + table[[zp, z]]).collect();
                    diffcore::log_sum_exp(&terms)
                })
                .collect()
        }
    };
    StateMarginal::from_log_weights(&w)
}

/// Marginals after each user utterance of a conversation.
pub fn track_dialog(model: &Lstn, utterances: &[Vec<TokenId>]) -> Result<Vec<StateMarginal>> {
    let mut out: Vec<StateMarginal> = Vec::with_capacity(utterances.len());
    for x in utterances {
        let next = track_state(model, out.last(), x)?;
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank by mean per-token log-probability instead of the total.
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 10,
            max_len: 40,
            length_normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    /// Response tokens without the end marker.
    pub tokens: Vec<TokenId>,
    /// Total log-probability, end marker included when terminated.
    pub logprob: f64,
    /// False for beams cut off at the length limit.
    pub terminated: bool,
}

/// Per-state ranked responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCache {
    pub beam: BeamConfig,
    pub states: Vec<Vec<CachedResponse>>,
}

impl ResponseCache {
    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn top(&self, z: usize) -> Result<&CachedResponse> {
        self.states
            .get(z)
            .ok_or(LstnError::Range {
                what: "state",
                index: z,
                len: self.states.len(),
            })?
            .first()
            .ok_or_else(|| LstnError::Inference(format!("state {z} has no cached responses")))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| LstnError::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LstnError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    logprob: f64,
}

fn rank_key(h: &Hyp, cfg: &BeamConfig) -> f64 {
    if cfg.length_normalize {
        h.logprob / h.tokens.len().max(1) as f64
    } else {
        h.logprob
    }
}

fn sort_hyps(v: &mut [Hyp], cfg: &BeamConfig) {
    v.sort_by(|a, b| {
        rank_key(b, cfg)
            .total_cmp(&rank_key(a, cfg))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Length-bounded beam search over the decoder for one state.
pub fn beam_search(model: &Lstn, z: usize, cfg: &BeamConfig) -> Result<Vec<CachedResponse>> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(LstnError::Argument("beam size and max length must be positive".into()));
    }
    let layout = &model.layout;
    let eos = model.config().eos_id;
    let emit = layout.emit_ids();
    let mut state = layout.decoder_init(&model.store, &[z])?;
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_len {
        let inputs: Vec<TokenId> = live
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(model.config().bos_id))
            .collect();
        let (next, lp) = layout.decoder_step(&model.store, &state, &inputs)?;
        let mut cands: Vec<(Hyp, usize)> = Vec::with_capacity(live.len() * emit.len());
        for (r, h) in live.iter().enumerate() {
            for (c, &tok) in emit.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push((
                    Hyp {
                        tokens,
                        logprob: h.logprob + lp[[r, c]],
                    },
                    r,
                ));
            }
        }
        cands.sort_by(|(a, _), (b, _)| {
            rank_key(b, cfg)
                .total_cmp(&rank_key(a, cfg))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        cands.truncate(cfg.beam_size);
        let mut new_live = Vec::new();
        let mut rows = Vec::new();
        for (h, r) in cands {
            if *h.tokens.last().expect("non-empty") == eos {
                done.push(h);
            } else {
                new_live.push(h);
                rows.push(r);
            }
        }
        live = new_live;
        if live.is_empty() {
            break;
        }
        state = crate::model::DecoderState {
            hidden: next.hidden.select(ndarray::Axis(0), &rows),
            cell: next.cell.select(ndarray::Axis(0), &rows),
        };
        if done.len() >= cfg.beam_size && !cfg.length_normalize {
            sort_hyps(&mut done, cfg);
            let worst = done[cfg.beam_size - 1].logprob;
            if live.iter().all(|h| h.logprob <= worst) {
                break;
            }
        }
    }
    sort_hyps(&mut done, cfg);
    done.truncate(cfg.beam_size);
    let mut out: Vec<CachedResponse> = done
        .into_iter()
        .map(|mut h| {
            h.tokens.pop();
            CachedResponse {
                tokens: h.tokens,
                logprob: h.logprob,
                terminated: true,
            }
        })
        .collect();
    if out.len() < cfg.beam_size {
        sort_hyps(&mut live, cfg);
        out.extend(live.into_iter().take(cfg.beam_size - out.len()).map(|h| CachedResponse {
            tokens: h.tokens,
            logprob: h.logprob,
            terminated: false,
        }));
    }
    Ok(out)
}

/// Runs the beam search once per state.
pub fn build_response_cache(model: &Lstn, cfg: &BeamConfig) -> Result<ResponseCache> {
    let states: Vec<Result<Vec<CachedResponse>>> = (0..model.num_states())
        .into_par_iter()
        .map(|z| beam_search(model, z, cfg))
        .collect();
    Ok(ResponseCache {
        beam: *cfg,
        states: states.into_iter().collect::<Result<_>>()?,
    })
}

/// Most probable state and its top cached response.
pub fn respond<'c>(marginal: &StateMarginal, cache: &'c ResponseCache) -> Result<(usize, &'c CachedResponse)> {
    if marginal.num_states() != cache.num_states() {
        return Err(LstnError::Inference(format!(
            "marginal over {} states, cache over {}",
            marginal.num_states(),
            cache.num_states()
        )));
    }
    let z = marginal.argmax();
    Ok((z, cache.top(z)?))
}

/// Like [`respond`], but draws the response from the state's cached list in
/// proportion to the cached probabilities.
pub fn respond_sampled<'c, R: Rng + ?Sized>(
    marginal: &StateMarginal,
    cache: &'c ResponseCache,
    rng: &mut R,
) -> Result<(usize, &'c CachedResponse)> {
    let (z, _) = respond(marginal, cache)?;
    let list = &cache.states[z];
    let top = list[0].logprob;
    let weights: Vec<f64> = list.iter().map(|r| (r.logprob - top).exp()).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (r, w) in list.iter().zip(&weights) {
        if u < *w {
            return Ok((z, r));
        }
        u -= w;
    }
    Ok((z, list.last().expect("non-empty")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn: usize,
    pub user: String,
    pub marginal: Vec<f64>,
    pub state: usize,
    pub response: String,
}

/// A live conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    marginal: Option<StateMarginal>,
    history: Vec<Turn>,
    pub transcript: Vec<TranscriptEntry>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            marginal: None,
            history: Vec::new(),
            transcript: Vec::new(),
        }
    }

    pub fn marginal(&self) -> Option<&StateMarginal> {
        self.marginal.as_ref()
    }

    pub fn transcript_jsonl(&self) -> String {
        self.transcript
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

/// Everything a session step needs besides the session.
#[derive(Clone, Copy)]
pub struct Responder<'a> {
    pub model: &'a Lstn,
    pub cache: &'a ResponseCache,
    pub vocab: &'a Vocabulary,
    pub lexicon: Option<&'a EntityLexicon>,
}

impl Responder<'_> {
    /// Tokenizes (and anonymizes) the utterance, tracks the state, answers,
    /// and appends to the transcript.
    pub fn step<'s>(&self, session: &'s mut Session, utterance: &str) -> Result<&'s TranscriptEntry> {
        let mut tokens = tokenize(utterance);
        if tokens.is_empty() {
            return Err(LstnError::Argument("empty utterance".into()));
        }
        if let Some(lex) = self.lexicon {
            // anonymize in the context of the whole session so placeholder
            // indices stay consistent across turns
            let mut turns = session.history.clone();
            turns.push(Turn {
                user: tokens.clone(),
                agent: Vec::new(),
            });
            let d = anonymize(
                &Dialog {
                    id: session.id.clone(),
                    turns,
                },
                lex,
            );
            tokens = d.turns.last().expect("just pushed").user.clone();
        }
        let ids = self.vocab.encode(&tokens);
        let marginal = track_state(self.model, session.marginal.as_ref(), &ids)?;
        let (z, resp) = respond(&marginal, self.cache)?;
        let words = self.vocab.decode(&resp.tokens)?;
        session.history.push(Turn {
            user: tokenize(utterance),
            agent: words.clone(),
        });
        session.transcript.push(TranscriptEntry {
            turn: session.transcript.len() + 1,
            user: utterance.to_string(),
            marginal: marginal.probs(),
            state: z,
            response: detokenize(&words),
        });
        session.marginal = Some(marginal);
        Ok(session.transcript.last().expect("just pushed"))
    }
}
