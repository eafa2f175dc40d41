//! Split-LSTN: a pipelined baseline.
//!
//! Phase 1 fits `p(z_i | x_{1:i}) p(y_i | z_i)` per turn with EM, where the
//! context classifier reads the concatenated user utterances so far.
//! Phase 2 fixes hard labels `argmax_z p(y_i | z)` and trains the LSTN
//! transition classifier on them with the emission side frozen. The result
//! is an ordinary [`Lstn`], so inference runs unchanged.

use std::collections::HashMap;

use diffcore::{log_sum_exp, Graph, Matrix, Node, ParamId, ParamStore, INIT_SCALE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_dialogs, CorpusSplit, EncodedDialog, TokenId, Vocabulary};
use crate::em::{fit, FitConfig, FitOutcome, LogRecord, Objective, TrainConfig, TrainFailure};
use crate::error::{LstnError, Result};
use crate::inference::argmax;
use crate::model::{Lstn, ModelConfig, ModelLayout, StateRef};

pub const CONTEXT_W: &str = "context.w";
pub const CONTEXT_B: &str = "context.b";
pub const PHASE1: &str = "phase1";
pub const PHASE2: &str = "phase2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Feed earlier agent responses into the phase-1 context as well.
    pub include_agent_context: bool,
    /// Phase-2 epochs; `None` reuses the shared epoch count.
    pub phase2_epochs: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            include_agent_context: false,
            phase2_epochs: None,
        }
    }
}

/// Tokens the phase-1 context encoder reads at turn `i`.
pub fn context_tokens(dialog: &EncodedDialog, i: usize, include_agent: bool, eos: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (j, turn) in dialog.turns[..=i].iter().enumerate() {
        out.extend_from_slice(&turn.user);
        if include_agent && j < i {
            out.extend(turn.agent.iter().copied().filter(|&t| t != eos));
        }
    }
    out
}

/// LSTN parameters plus the phase-1 context classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub layout: ModelLayout,
    pub store: ParamStore,
    pub include_agent_context: bool,
    context_w: ParamId,
    context_b: ParamId,
}

impl SplitModel {
    /// Fresh model; state embeddings are always kept separate.
    pub fn new(mut config: ModelConfig, seed: u64, include_agent_context: bool) -> Result<Self> {
        config.shared_state_embeddings = false;
        let mut store = ParamStore::new();
        let layout = ModelLayout::register(config, &mut store, seed)?;
        let c = layout.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        let context_w = store.add_uniform(CONTEXT_W, c.num_states, c.encoder_hidden, INIT_SCALE, &mut rng)?;
        let context_b = store.add_uniform(CONTEXT_B, 1, c.num_states, INIT_SCALE, &mut rng)?;
        Ok(Self {
            layout,
            store,
            include_agent_context,
            context_w,
            context_b,
        })
    }

    fn with_store(&self, store: ParamStore) -> Self {
        Self { store, ..self.clone() }
    }

    pub fn num_states(&self) -> usize {
        self.layout.num_states()
    }

    /// `ln p(z | x_{1:i})` as a `1 x K` node.
    fn prior_node(&self, g: &mut Graph<'_>, dialog: &EncodedDialog, i: usize) -> Result<Node> {
        let ctx = context_tokens(dialog, i, self.include_agent_context, self.layout.config().eos_id);
        let h = self.layout.encode_node(g, &ctx)?;
        let (w, b) = (g.param(self.context_w), g.param(self.context_b));
        let logits = g.affine(h, w, b)?;
        Ok(g.log_softmax(logits)?)
    }

    /// Per-turn `ln p(z_i, y_i | x_{1:i})` rows.
    fn joint_nodes(&self, g: &mut Graph<'_>, dialog: &EncodedDialog) -> Result<Vec<Node>> {
        if dialog.is_empty() {
            return Err(LstnError::Argument(format!("dialog `{}` has no turns", dialog.id)));
        }
        (0..dialog.len())
            .map(|i| {
                let prior = self.prior_node(g, dialog, i)?;
                let e = self.layout.emission_node(g, &dialog.turns[i].agent)?;
                let e = g.transpose(e);
                Ok(g.add(prior, e)?)
            })
            .collect()
    }

    /// Context prior `ln p(z | x_{1:i})`.
    pub fn context_logprior(&self, dialog: &EncodedDialog, i: usize) -> Result<Vec<f64>> {
        if i >= dialog.len() {
            return Err(LstnError::Range {
                what: "turn",
                index: i,
                len: dialog.len(),
            });
        }
        let mut g = Graph::new(&self.store);
        let n = self.prior_node(&mut g, dialog, i)?;
        Ok(g.value(n).iter().copied().collect())
    }

    /// Phase-1 E-step: per-turn `ln q(z_i) = ln p(z_i | x_{1:i}, y_i)`.
    pub fn posterior(&self, dialog: &EncodedDialog) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let joints = self.joint_nodes(&mut g, dialog)?;
        joints.iter().map(|&n| normalize(g.value(n).iter().copied().collect())).collect()
    }

    pub fn emission_logprobs(&self, response: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let n = self.layout.emission_node(&mut g, response)?;
        Ok(g.value(n).iter().copied().collect())
    }

    /// Drops the context classifier, leaving a plain LSTN.
    pub fn to_lstn(&self) -> Result<Lstn> {
        let mut store = ParamStore::new();
        for p in self.store.params() {
            if p.name != CONTEXT_W && p.name != CONTEXT_B {
                store.add(p.name.clone(), p.value.clone())?;
            }
        }
        Lstn::from_store(self.layout.config().clone(), store)
    }
}

fn normalize(row: Vec<f64>) -> Result<Vec<f64>> {
    let z = log_sum_exp(&row);
    if !z.is_finite() {
        return Err(LstnError::Numerical {
            turn: 0,
            detail: "phase-1 posterior normalizer".into(),
        });
    }
    Ok(row.into_iter().map(|v| v - z).collect())
}

struct Phase1Objective<'a> {
    model: &'a SplitModel,
}

impl Phase1Objective<'_> {
    fn dialog_loglik(&self, store: &ParamStore, d: &EncodedDialog) -> Result<f64> {
        let m = self.model.with_store(store.clone());
        let mut g = Graph::new(&m.store);
        let joints = m.joint_nodes(&mut g, d)?;
        Ok(joints.iter().map(|&n| log_sum_exp(&g.value(n).iter().copied().collect::<Vec<_>>())).sum())
    }
}

impl Objective for Phase1Objective<'_> {
    type Aux = Vec<Matrix>;

    fn build(&self, g: &mut Graph<'_>, dialog: &EncodedDialog, aux: Option<&Vec<Matrix>>) -> Result<(Node, f64, Option<Vec<Matrix>>)> {
        let joints = self.model.joint_nodes(g, dialog)?;
        let fresh = match aux {
            Some(_) => None,
            None => Some(
                joints
                    .iter()
                    .map(|&n| {
                        let lq = normalize(g.value(n).iter().copied().collect())?;
                        Ok(Matrix::from_shape_vec((1, lq.len()), lq.iter().map(|v| v.exp()).collect()).expect("row"))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let q = aux.or(fresh.as_ref()).expect("posterior available");
        let mut total: Option<Node> = None;
        let mut stat = 0.0;
        for (&j, qi) in joints.iter().zip(q) {
            stat += log_sum_exp(&g.value(j).iter().copied().collect::<Vec<_>>());
            let weighted = g.mul_const(j, qi.clone())?;
            let s = g.sum_all(weighted);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok((total.expect("non-empty dialog"), stat, fresh))
    }

    fn dev_loglik(&self, store: &ParamStore, dev: &[EncodedDialog]) -> Result<(f64, usize)> {
        let lls: Vec<Result<f64>> = dev.par_iter().map(|d| self.dialog_loglik(store, d)).collect();
        let mut total = 0.0;
        for ll in lls {
            total += ll?;
        }
        Ok((total, dev.iter().map(EncodedDialog::response_tokens).sum()))
    }
}

/// Per-turn labels `argmax_z p(y_i | z)`; ties go to the lowest state.
pub fn hard_assign(model: &SplitModel, dialogs: &[EncodedDialog]) -> Result<Vec<Vec<usize>>> {
    dialogs
        .par_iter()
        .map(|d| {
            d.turns
                .iter()
                .map(|t| Ok(argmax(&model.emission_logprobs(&t.agent)?)))
                .collect()
        })
        .collect()
}

struct Phase2Objective<'a> {
    layout: &'a ModelLayout,
    labels: HashMap<&'a str, &'a [usize]>,
}

impl<'a> Phase2Objective<'a> {
    fn new(layout: &'a ModelLayout, sets: &[(&'a [EncodedDialog], &'a [Vec<usize>])]) -> Result<Self> {
        let mut labels = HashMap::new();
        for (dialogs, ls) in sets {
            if dialogs.len() != ls.len() {
                return Err(LstnError::Argument(format!(
                    "{} label sequences for {} dialogs",
                    ls.len(),
                    dialogs.len()
                )));
            }
            for (d, l) in dialogs.iter().zip(ls.iter()) {
                if l.len() != d.len() {
                    return Err(LstnError::Argument(format!("labels for dialog `{}` do not cover every turn", d.id)));
                }
                if let Some(&bad) = l.iter().find(|&&z| z >= layout.num_states()) {
                    return Err(LstnError::Range {
                        what: "state label",
                        index: bad,
                        len: layout.num_states(),
                    });
                }
                if labels.insert(d.id.as_str(), l.as_slice()).is_some_and(|old| old != l.as_slice()) {
                    return Err(LstnError::Argument(format!("duplicate dialog id `{}`", d.id)));
                }
            }
        }
        Ok(Self { layout, labels })
    }

    fn labels_of(&self, d: &EncodedDialog) -> Result<&[usize]> {
        self.labels
            .get(d.id.as_str())
            .copied()
            .ok_or_else(|| LstnError::Argument(format!("no labels for dialog `{}`", d.id)))
    }

    fn node(&self, g: &mut Graph<'_>, d: &EncodedDialog) -> Result<Node> {
        let labels = self.labels_of(d)?;
        let k = self.layout.num_states();
        let mut total: Option<Node> = None;
        for (i, turn) in d.turns.iter().enumerate() {
            let h = self.layout.encode_node(g, &turn.user)?;
            let table = self.layout.transition_node(g, h)?;
            let prev = if i == 0 { k } else { labels[i - 1] };
            let row = g.gather_rows(table, &[prev])?;
            let lp = g.pick(row, &[labels[i]])?;
            total = Some(match total {
                Some(t) => g.add(t, lp)?,
                None => lp,
            });
        }
        total.ok_or_else(|| LstnError::Argument(format!("dialog `{}` has no turns", d.id)))
    }
}

impl Objective for Phase2Objective<'_> {
    type Aux = ();

    fn build(&self, g: &mut Graph<'_>, dialog: &EncodedDialog, _aux: Option<&()>) -> Result<(Node, f64, Option<()>)> {
        let out = self.node(g, dialog)?;
        Ok((out, g.scalar(out), Some(())))
    }

    fn dev_loglik(&self, store: &ParamStore, dev: &[EncodedDialog]) -> Result<(f64, usize)> {
        let lls: Vec<Result<f64>> = dev
            .par_iter()
            .map(|d| {
                let mut g = Graph::new(store);
                let n = self.node(&mut g, d)?;
                Ok(g.scalar(n))
            })
            .collect();
        let mut total = 0.0;
        for ll in lls {
            total += ll?;
        }
        Ok((total, dev.iter().map(EncodedDialog::len).sum()))
    }
}

/// Result of one phase: the best-on-dev model and its log.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub model: SplitModel,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
}

fn phase_result(
    base: &SplitModel,
    r: std::result::Result<FitOutcome, crate::em::FitFailure>,
) -> std::result::Result<PhaseOutcome, TrainFailure> {
    match r {
        Ok(out) => Ok(PhaseOutcome {
            model: base.with_store(out.store),
            log: out.log,
            best_epoch: out.best_epoch,
        }),
        Err(f) => Err(TrainFailure {
            error: f.error,
            last_good: f
                .last_good
                .and_then(|s| base.with_store(s).to_lstn().ok())
                .map(Box::new),
            log: f.log,
        }),
    }
}

/// Phase 1: EM over the single latent state of each turn.
pub fn train_phase1(
    model: SplitModel,
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    config: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> std::result::Result<PhaseOutcome, TrainFailure> {
    config.validate()?;
    let obj = Phase1Objective { model: &model };
    let r = fit(&obj, model.store.clone(), train, dev, config.into(), Some(PHASE1), on_record);
    phase_result(&model, r)
}

/// Phase 2: supervised transitions on fixed labels; the emission side and
/// word embeddings stay frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_phase2(
    model: SplitModel,
    train: &[EncodedDialog],
    train_labels: &[Vec<usize>],
    dev: &[EncodedDialog],
    dev_labels: &[Vec<usize>],
    config: &TrainConfig,
    epochs: usize,
    on_record: &mut dyn FnMut(&LogRecord),
) -> std::result::Result<PhaseOutcome, TrainFailure> {
    config.validate()?;
    let obj = Phase2Objective::new(&model.layout, &[(train, train_labels), (dev, dev_labels)])?;
    let mut store = model.store.clone();
    let mut frozen = model.layout.emission_params();
    frozen.extend([model.layout.word_embedding_param(), model.context_w, model.context_b]);
    for id in frozen {
        store.set_frozen(id, true);
    }
    let cfg = FitConfig {
        epochs,
        m_steps: 1,
        ..FitConfig::from(config)
    };
    let r = fit(&obj, store, train, dev, cfg, Some(PHASE2), on_record);
    let mut out = phase_result(&model, r)?;
    for p in out.model.store.ids().collect::<Vec<_>>() {
        out.model.store.set_frozen(p, false);
    }
    Ok(out)
}

/// Fraction of turns whose label is the argmax transition from the
/// previous gold label.
pub fn transition_accuracy(model: &Lstn, dialogs: &[EncodedDialog], labels: &[Vec<usize>]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (d, l) in dialogs.iter().zip(labels) {
        for (i, turn) in d.turns.iter().enumerate() {
            let prev = if i == 0 { StateRef::Start } else { StateRef::State(l[i - 1]) };
            if argmax(&model.transition_logprobs(prev, &turn.user)?) == l[i] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Both phases end to end.
#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub model: Lstn,
    pub log: Vec<LogRecord>,
    pub train_labels: Vec<Vec<usize>>,
}

pub fn train_split_model(
    model: SplitModel,
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    config: &TrainConfig,
    split: &SplitConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> std::result::Result<SplitOutcome, TrainFailure> {
    let p1 = train_phase1(model, train, dev, config, on_record)?;
    let train_labels = hard_assign(&p1.model, train)?;
    let dev_labels = hard_assign(&p1.model, dev)?;
    let epochs = split.phase2_epochs.unwrap_or(config.epochs);
    let mut p2 = train_phase2(p1.model, train, &train_labels, dev, &dev_labels, config, epochs, on_record)
        .map_err(|mut f| {
            f.log.splice(0..0, p1.log.iter().cloned());
            f
        })?;
    let mut log = p1.log;
    log.append(&mut p2.log);
    Ok(SplitOutcome {
        model: p2.model.to_lstn()?,
        log,
        train_labels,
    })
}

pub fn train_split(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    config: &TrainConfig,
    split: &SplitConfig,
) -> std::result::Result<SplitOutcome, TrainFailure> {
    config.validate()?;
    let train = encode_dialogs(&corpus.train, vocab);
    let dev = encode_dialogs(&corpus.dev, vocab);
    let model = SplitModel::new(config.model_config(vocab), config.seed, split.include_agent_context)?;
    train_split_model(model, &train, &dev, config, split, &mut |_| {})
}
