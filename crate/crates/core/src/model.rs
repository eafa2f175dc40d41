//! The latent state tracking network.
//!
//! Each turn carries one discrete state `z_i` in `0..K`. The transition
//! factor is a softmax classifier over the next state given the previous
//! state's embedding and an LSTM encoding of the user utterance; the
//! emission factor is an LSTM decoder whose initial hidden state is the
//! current state's embedding. A reserved START row in the transition
//! embedding table conditions the first turn.
//!
//! Graph-building lives on [`ModelLayout`], which only holds parameter
//! handles, so the same code runs against any store with a compatible layout
//! (training snapshots, gradient checks, loaded checkpoints).

use std::fmt;
use std::path::Path;

use diffcore::{recurrent_step, Checkpoint, Graph, LstmCell, LstmState, Matrix, Node, ParamId, ParamStore, INIT_SCALE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{EncodedDialog, TokenId, Vocabulary, BOS, EOS, PAD};
use crate::error::{LstnError, Result};

/// A predecessor state: a real state or the conversation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "StateRefRepr", try_from = "StateRefRepr")]
pub enum StateRef {
    Start,
    State(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StateRefRepr {
    Index(usize),
    Name(String),
}

impl From<StateRef> for StateRefRepr {
    fn from(s: StateRef) -> Self {
        match s {
            StateRef::Start => StateRefRepr::Name("START".into()),
            StateRef::State(z) => StateRefRepr::Index(z),
        }
    }
}

impl TryFrom<StateRefRepr> for StateRef {
    type Error = String;

    fn try_from(r: StateRefRepr) -> std::result::Result<Self, String> {
        match r {
            StateRefRepr::Index(z) => Ok(StateRef::State(z)),
            StateRefRepr::Name(n) if n == "START" => Ok(StateRef::Start),
            StateRefRepr::Name(n) => Err(format!("unknown state `{n}`")),
        }
    }
}

impl fmt::Display for StateRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateRef::Start => f.write_str("START"),
            StateRef::State(z) => write!(f, "{z}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of latent states K.
    pub num_states: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    /// Dimension of the state embeddings, which is also the decoder hidden size.
    pub state_dim: usize,
    pub shared_state_embeddings: bool,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    /// Ids the decoder never emits (padding, start marker).
    pub non_emittable: Vec<TokenId>,
    pub max_response_len: usize,
    pub vocab_hash: String,
}

impl ModelConfig {
    pub fn for_vocab(
        vocab: &Vocabulary,
        num_states: usize,
        embed_dim: usize,
        hidden: usize,
        shared_state_embeddings: bool,
    ) -> Self {
        Self {
            num_states,
            vocab_size: vocab.len(),
            embed_dim,
            encoder_hidden: hidden,
            state_dim: hidden,
            shared_state_embeddings,
            bos_id: BOS,
            eos_id: EOS,
            non_emittable: vec![PAD, BOS],
            max_response_len: 40,
            vocab_hash: vocab.hash(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LstnError::Config(m.to_string()));
        if self.num_states == 0 {
            return bad("num_states must be positive");
        }
        if self.embed_dim == 0 || self.encoder_hidden == 0 || self.state_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.bos_id as usize >= self.vocab_size || self.eos_id as usize >= self.vocab_size {
            return bad("special ids outside the vocabulary");
        }
        if self.non_emittable.contains(&self.eos_id) {
            return bad("the end marker must be emittable");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Transition and emission log-probabilities for every turn of one dialog.
///
/// `transitions[i]` is `(K+1) x K`: row `z'` holds `ln p(z | z', x_i)` with
/// row `K` standing for START. `emissions[i][z]` is `ln p(y_i | z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogFactors {
    pub transitions: Vec<Matrix>,
    pub emissions: Vec<Vec<f64>>,
}

impl DialogFactors {
    pub fn num_states(&self) -> usize {
        self.emissions.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.emissions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emissions.is_empty()
    }

    /// Log transition row for predecessor `prev` at turn `i` (0-based).
    pub fn transition_row(&self, i: usize, prev: StateRef) -> Vec<f64> {
        let k = self.num_states();
        let r = match prev {
            StateRef::Start => k,
            StateRef::State(z) => z,
        };
        self.transitions[i].row(r).to_vec()
    }

    /// Builds factors from probabilities: `start_rows[i]` and
    /// `state_rows[i]` give the START and per-state transition rows.
    pub fn from_probs(start: &[Vec<f64>], rows: &[Vec<Vec<f64>>], emissions: &[Vec<f64>]) -> Self {
        let k = emissions[0].len();
        let transitions = start
            .iter()
            .zip(rows)
            .map(|(s, r)| {
                Matrix::from_shape_fn((k + 1, k), |(a, b)| {
                    if a == k {
                        s[b].ln()
                    } else {
                        r[a][b].ln()
                    }
                })
            })
            .collect();
        let emissions = emissions
            .iter()
            .map(|e| e.iter().map(|p| p.ln()).collect())
            .collect();
        Self {
            transitions,
            emissions,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, (t, e)) in self.transitions.iter().zip(&self.emissions).enumerate() {
            if t.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || e.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(LstnError::Numerical {
                    turn: i + 1,
                    detail: "factor table".into(),
                });
            }
        }
        Ok(())
    }
}

/// Differentiable counterparts of [`DialogFactors`]; emissions are `K x 1`.
#[derive(Debug, Clone)]
pub struct FactorNodes {
    pub transitions: Vec<Node>,
    pub emissions: Vec<Node>,
}

impl FactorNodes {
    /// Wraps fixed factor values as constants.
    pub fn constant(g: &mut Graph<'_>, f: &DialogFactors) -> Self {
        let transitions = f.transitions.iter().map(|t| g.constant(t.clone())).collect();
        let emissions = f
            .emissions
            .iter()
            .map(|e| g.constant(Matrix::from_shape_vec((e.len(), 1), e.clone()).expect("column")))
            .collect();
        Self {
            transitions,
            emissions,
        }
    }

    pub fn values(&self, g: &Graph<'_>) -> DialogFactors {
        DialogFactors {
            transitions: self.transitions.iter().map(|&n| g.value(n).clone()).collect(),
            emissions: self
                .emissions
                .iter()
                .map(|&n| g.value(n).iter().copied().collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ParamIds {
    word_emb: ParamId,
    encoder: LstmCell,
    trans_w: ParamId,
    trans_b: ParamId,
    state_v: ParamId,
    state_r: Option<ParamId>,
    decoder: LstmCell,
    out_w: ParamId,
    out_b: ParamId,
}

pub mod names {
    pub const WORD_EMB: &str = "word_emb";
    pub const ENCODER: &str = "encoder";
    pub const TRANS_W: &str = "transition.w";
    pub const TRANS_B: &str = "transition.b";
    pub const STATE_V: &str = "state_v";
    pub const STATE_R: &str = "state_r";
    pub const DECODER: &str = "decoder";
    pub const OUT_W: &str = "output.w";
    pub const OUT_B: &str = "output.b";
}

/// Decoder hidden/cell values for a batch of partial responses.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Matrix,
    pub cell: Matrix,
}

/// Model configuration plus resolved parameter handles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    config: ModelConfig,
    ids: ParamIds,
    emit_ids: Vec<TokenId>,
    emit_index: Vec<Option<usize>>,
}

impl ModelLayout {
    /// Registers freshly initialized parameters in `store`.
    pub fn register(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let emittable = c.vocab_size - c.non_emittable.iter().filter(|&&t| (t as usize) < c.vocab_size).count();
        store.add_uniform(names::WORD_EMB, c.vocab_size, c.embed_dim, INIT_SCALE, &mut rng)?;
        LstmCell::register(store, names::ENCODER, c.embed_dim, c.encoder_hidden, INIT_SCALE, &mut rng)?;
        store.add_uniform(names::TRANS_W, c.num_states, c.encoder_hidden + c.state_dim, INIT_SCALE, &mut rng)?;
        store.add_uniform(names::TRANS_B, 1, c.num_states, INIT_SCALE, &mut rng)?;
        store.add_uniform(names::STATE_V, c.num_states + 1, c.state_dim, INIT_SCALE, &mut rng)?;
        if !c.shared_state_embeddings {
            store.add_uniform(names::STATE_R, c.num_states, c.state_dim, INIT_SCALE, &mut rng)?;
        }
        LstmCell::register(store, names::DECODER, c.embed_dim, c.state_dim, INIT_SCALE, &mut rng)?;
        store.add_uniform(names::OUT_W, emittable, c.state_dim, INIT_SCALE, &mut rng)?;
        store.add_uniform(names::OUT_B, 1, emittable, INIT_SCALE, &mut rng)?;
        Self::resolve(config, store)
    }

    /// Resolves handles for an existing store, checking every shape.
    pub fn resolve(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let emit_ids: Vec<TokenId> = (0..c.vocab_size as TokenId)
            .filter(|t| !c.non_emittable.contains(t))
            .collect();
        let mut emit_index = vec![None; c.vocab_size];
        for (row, &t) in emit_ids.iter().enumerate() {
            emit_index[t as usize] = Some(row);
        }
        let expect = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = store.id(name)?;
            let got = store.value(id).dim();
            if got != shape {
                return Err(LstnError::Config(format!(
                    "parameter `{name}` has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        let ids = ParamIds {
            word_emb: expect(names::WORD_EMB, (c.vocab_size, c.embed_dim))?,
            encoder: LstmCell::from_store(store, names::ENCODER)?,
            trans_w: expect(names::TRANS_W, (c.num_states, c.encoder_hidden + c.state_dim))?,
            trans_b: expect(names::TRANS_B, (1, c.num_states))?,
            state_v: expect(names::STATE_V, (c.num_states + 1, c.state_dim))?,
            state_r: if c.shared_state_embeddings {
                None
            } else {
                Some(expect(names::STATE_R, (c.num_states, c.state_dim))?)
            },
            decoder: LstmCell::from_store(store, names::DECODER)?,
            out_w: expect(names::OUT_W, (emit_ids.len(), c.state_dim))?,
            out_b: expect(names::OUT_B, (1, emit_ids.len()))?,
        };
        if ids.encoder.input_dim != c.embed_dim || ids.encoder.hidden_dim != c.encoder_hidden {
            return Err(LstnError::Config("encoder cell shape mismatch".into()));
        }
        if ids.decoder.input_dim != c.embed_dim || ids.decoder.hidden_dim != c.state_dim {
            return Err(LstnError::Config("decoder cell shape mismatch".into()));
        }
        Ok(Self {
            config,
            ids,
            emit_ids,
            emit_index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_states(&self) -> usize {
        self.config.num_states
    }

    /// Parameters of the transition side (encoder, classifier, state embeddings).
    pub fn transition_params(&self) -> Vec<ParamId> {
        let e = &self.ids.encoder;
        vec![e.weight, e.bias, self.ids.trans_w, self.ids.trans_b, self.ids.state_v]
    }

    /// Parameters used only by the emission side.
    pub fn emission_params(&self) -> Vec<ParamId> {
        let d = &self.ids.decoder;
        let mut v = vec![d.weight, d.bias, self.ids.out_w, self.ids.out_b];
        v.extend(self.ids.state_r);
        v
    }

    pub fn word_embedding_param(&self) -> ParamId {
        self.ids.word_emb
    }

    pub fn encoder_cell(&self) -> &LstmCell {
        &self.ids.encoder
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LstnError::Range {
                what: "token id",
                index: bad as usize,
                len: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn check_state(&self, z: usize) -> Result<()> {
        if z >= self.config.num_states {
            return Err(LstnError::Range {
                what: "state",
                index: z,
                len: self.config.num_states,
            });
        }
        Ok(())
    }

    /// Final LSTM hidden state over the word embeddings of `tokens` (`1 x H`).
    pub fn encode_node(&self, g: &mut Graph<'_>, tokens: &[TokenId]) -> Result<Node> {
        if tokens.is_empty() {
            return Err(LstnError::Argument("cannot encode an empty utterance".into()));
        }
        self.check_tokens(tokens)?;
        let emb = g.param(self.ids.word_emb);
        let cell = self.ids.encoder;
        let mut state = cell.zero_state(g, 1);
        for &t in tokens {
            let x = g.embedding_lookup(emb, t as usize)?;
            state = recurrent_step(g, &cell, state, x)?;
        }
        Ok(state.hidden)
    }

    /// `(K+1) x K` table of `ln p(z | z', x)`; row `K` is START.
    pub fn transition_node(&self, g: &mut Graph<'_>, encoded: Node) -> Result<Node> {
        let k = self.config.num_states;
        let v = g.param(self.ids.state_v);
        let h = g.repeat_rows(encoded, k + 1)?;
        let joined = g.concat_cols(&[h, v])?;
        let (w, b) = (g.param(self.ids.trans_w), g.param(self.ids.trans_b));
        let logits = g.affine(joined, w, b)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Emission state embeddings `r_z` as a `K x S` node.
    pub fn emission_states(&self, g: &mut Graph<'_>) -> Result<Node> {
        match self.ids.state_r {
            Some(id) => Ok(g.param(id)),
            None => {
                let v = g.param(self.ids.state_v);
                let rows: Vec<usize> = (0..self.config.num_states).collect();
                Ok(g.gather_rows(v, &rows)?)
            }
        }
    }

    /// Teacher-forced `ln p(y | z)` for every state, as a `K x 1` column.
    pub fn emission_node(&self, g: &mut Graph<'_>, response: &[TokenId]) -> Result<Node> {
        let k = self.config.num_states;
        let init = self.emission_states(g)?;
        self.score_from(g, init, k, response)
    }

    fn score_from(&self, g: &mut Graph<'_>, init: Node, rows: usize, response: &[TokenId]) -> Result<Node> {
        self.check_tokens(response)?;
        let cols: Vec<usize> = response
            .iter()
            .map(|&t| {
                self.emit_index[t as usize].ok_or(LstnError::Range {
                    what: "emittable token",
                    index: t as usize,
                    len: self.config.vocab_size,
                })
            })
            .collect::<Result<_>>()?;
        let zeros = g.constant(Matrix::zeros((rows, self.config.state_dim)));
        let mut state = LstmState {
            hidden: init,
            cell: zeros,
        };
        let emb = g.param(self.ids.word_emb);
        let (w, b) = (g.param(self.ids.out_w), g.param(self.ids.out_b));
        let mut prev = self.config.bos_id;
        let mut total: Option<Node> = None;
        for (&tok, &col) in response.iter().zip(&cols) {
            let e = g.embedding_lookup(emb, prev as usize)?;
            let x = g.repeat_rows(e, rows)?;
            state = recurrent_step(g, &self.ids.decoder, state, x)?;
            let logits = g.affine(state.hidden, w, b)?;
            let lp = g.log_softmax(logits)?;
            let picked = g.pick(lp, &vec![col; rows])?;
            total = Some(match total {
                Some(t) => g.add(t, picked)?,
                None => picked,
            });
            prev = tok;
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(g.constant(Matrix::zeros((rows, 1)))),
        }
    }

    /// Transition and emission nodes for every turn of a dialog.
    pub fn factor_nodes(&self, g: &mut Graph<'_>, dialog: &EncodedDialog) -> Result<FactorNodes> {
        if dialog.is_empty() {
            return Err(LstnError::Argument(format!("dialog `{}` has no turns", dialog.id)));
        }
        let mut transitions = Vec::with_capacity(dialog.len());
        let mut emissions = Vec::with_capacity(dialog.len());
        for turn in &dialog.turns {
            let h = self.encode_node(g, &turn.user)?;
            transitions.push(self.transition_node(g, h)?);
            emissions.push(self.emission_node(g, &turn.agent)?);
        }
        Ok(FactorNodes {
            transitions,
            emissions,
        })
    }

    pub fn emit_ids(&self) -> &[TokenId] {
        &self.emit_ids
    }

    /// Initial decoder state for the given states.
    pub fn decoder_init(&self, store: &ParamStore, states: &[usize]) -> Result<DecoderState> {
        for &z in states {
            self.check_state(z)?;
        }
        let table = match self.ids.state_r {
            Some(id) => store.value(id),
            None => store.value(self.ids.state_v),
        };
        Ok(DecoderState {
            hidden: table.select(ndarray::Axis(0), states),
            cell: Matrix::zeros((states.len(), self.config.state_dim)),
        })
    }

    /// Feeds one input token per row; returns the new state and the
    /// log-probabilities over emittable outputs (`rows x |emit_ids|`).
    pub fn decoder_step(
        &self,
        store: &ParamStore,
        state: &DecoderState,
        inputs: &[TokenId],
    ) -> Result<(DecoderState, Matrix)> {
        self.check_tokens(inputs)?;
        let mut g = Graph::new(store);
        let emb = g.param(self.ids.word_emb);
        let rows: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let x = g.gather_rows(emb, &rows)?;
        let prev = LstmState {
            hidden: g.constant(state.hidden.clone()),
            cell: g.constant(state.cell.clone()),
        };
        let next = recurrent_step(&mut g, &self.ids.decoder, prev, x)?;
        let (w, b) = (g.param(self.ids.out_w), g.param(self.ids.out_b));
        let logits = g.affine(next.hidden, w, b)?;
        let lp = g.log_softmax(logits)?;
        Ok((
            DecoderState {
                hidden: g.value(next.hidden).clone(),
                cell: g.value(next.cell).clone(),
            },
            g.value(lp).clone(),
        ))
    }

    /// Expands emittable-output log-probabilities to the full vocabulary,
    /// with negative infinity for ids the decoder never emits.
    pub fn to_vocab_logprobs(&self, emit_row: &[f64]) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.config.vocab_size];
        for (&t, &lp) in self.emit_ids.iter().zip(emit_row) {
            out[t as usize] = lp;
        }
        out
    }
}

/// A model: layout plus its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstn {
    pub layout: ModelLayout,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model: ModelConfig,
    #[serde(default)]
    tag: Option<String>,
    params: Checkpoint,
}

impl Lstn {
    /// Fresh model with uniform `[-0.08, 0.08]` initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let layout = ModelLayout::register(config, &mut store, seed)?;
        Ok(Self { layout, store })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let layout = ModelLayout::resolve(config, &store)?;
        Ok(Self { layout, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.layout.config()
    }

    pub fn num_states(&self) -> usize {
        self.layout.num_states()
    }

    pub fn encode_utterance(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let h = self.layout.encode_node(&mut g, tokens)?;
        Ok(g.value(h).iter().copied().collect())
    }

    /// Full `(K+1) x K` log transition table for one utterance.
    pub fn transition_table(&self, tokens: &[TokenId]) -> Result<Matrix> {
        let mut g = Graph::new(&self.store);
        let h = self.layout.encode_node(&mut g, tokens)?;
        let t = self.layout.transition_node(&mut g, h)?;
        Ok(g.value(t).clone())
    }

    /// `ln p(z | prev, x)` for every `z`.
    pub fn transition_logprobs(&self, prev: StateRef, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let k = self.num_states();
        let row = match prev {
            StateRef::Start => k,
            StateRef::State(z) => {
                self.layout.check_state(z)?;
                z
            }
        };
        Ok(self.transition_table(tokens)?.row(row).to_vec())
    }

    /// `ln p(y | z)` for every state.
    pub fn emission_logprobs(&self, response: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let e = self.layout.emission_node(&mut g, response)?;
        Ok(g.value(e).iter().copied().collect())
    }

    pub fn emission_logprob(&self, response: &[TokenId], z: usize) -> Result<f64> {
        self.layout.check_state(z)?;
        let mut g = Graph::new(&self.store);
        let init = self.layout.emission_states(&mut g)?;
        let row = g.gather_rows(init, &[z])?;
        let e = self.layout.score_from(&mut g, row, 1, response)?;
        Ok(g.scalar(e))
    }

    /// Next-token log-probabilities over the whole vocabulary after `prefix`.
    pub fn emission_next_token(&self, prefix: &[TokenId], z: usize) -> Result<Vec<f64>> {
        let mut state = self.layout.decoder_init(&self.store, &[z])?;
        let mut input = self.config().bos_id;
        let mut last = None;
        for &t in prefix.iter().chain(std::iter::once(&u32::MAX)) {
            let (next, lp) = self.layout.decoder_step(&self.store, &state, &[input])?;
            if t == u32::MAX {
                last = Some(lp);
                break;
            }
            state = next;
            input = t;
        }
        let lp = last.expect("at least one step");
        Ok(self.layout.to_vocab_logprobs(&lp.row(0).to_vec()))
    }

    pub fn dialog_factors(&self, dialog: &EncodedDialog) -> Result<DialogFactors> {
        let mut g = Graph::new(&self.store);
        let nodes = self.layout.factor_nodes(&mut g, dialog)?;
        let f = nodes.values(&g);
        f.check_finite()?;
        Ok(f)
    }

    /// `ln p(z, y | x)` for one state sequence.
    pub fn joint_logprob(&self, dialog: &EncodedDialog, states: &[usize]) -> Result<f64> {
        if states.len() != dialog.len() {
            return Err(LstnError::Argument(format!(
                "{} states for {} turns",
                states.len(),
                dialog.len()
            )));
        }
        let f = self.dialog_factors(dialog)?;
        joint_from_factors(&f, states)
    }

    pub fn save(&self, path: &Path, tag: Option<&str>) -> Result<()> {
        let file = ModelFile {
            model: self.config().clone(),
            tag: tag.map(str::to_string),
            params: Checkpoint::from_store(&self.store, self.config().hash()),
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| LstnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LstnError::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.params.config_hash != file.model.hash() {
            return Err(LstnError::Config(format!(
                "{}: checkpoint hash does not match its model config",
                path.display()
            )));
        }
        Self::from_store(file.model, file.params.to_store()?)
    }
}

/// `Σ_i ln p(z_i | z_{i-1}, x_i) + ln p(y_i | z_i)` from precomputed factors.
pub fn joint_from_factors(f: &DialogFactors, states: &[usize]) -> Result<f64> {
    if states.len() != f.len() {
        return Err(LstnError::Argument(format!(
            "{} states for {} turns",
            states.len(),
            f.len()
        )));
    }
    let k = f.num_states();
    let mut prev = k;
    let mut total = 0.0;
    for (i, &z) in states.iter().enumerate() {
        if z >= k {
            return Err(LstnError::Range {
                what: "state",
                index: z,
                len: k,
            });
        }
        total += f.transitions[i][[prev, z]] + f.emissions[i][z];
        prev = z;
    }
    Ok(total)
}
