//! Exact-posterior EM.
//!
//! The posterior over a dialog's state chain factorizes into per-turn
//! conditionals `q_i(z_i | z_{i-1})`, which a backward recursion over the
//! factor tables computes exactly. The M-step objective `f_1` is the
//! expected complete log-likelihood under that fixed posterior, built as a
//! differentiable graph by the matching backward recursion.

use std::time::Instant;

use diffcore::{adam_update, log_sum_exp, AdamConfig, DiffError, Gradients, Graph, Matrix, Node, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_dialogs, CorpusSplit, EncodedDialog, Vocabulary};
use crate::error::{LstnError, Result};
use crate::model::{DialogFactors, FactorNodes, Lstn, ModelConfig, ModelLayout, StateRef};

/// Per-turn log posterior conditionals.
///
/// Turn 0 holds a single `1 x K` row conditioned on START; later turns hold
/// a `K x K` table whose row `z'` is `ln q_i(. | z')`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub log_q: Vec<Matrix>,
}

impl PosteriorTable {
    pub fn len(&self) -> usize {
        self.log_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_q.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.log_q.first().map_or(0, |m| m.ncols())
    }

    /// `ln q_i(. | prev)`; START is only valid at turn 0 and real states only after it.
    pub fn log_row(&self, i: usize, prev: StateRef) -> Result<Vec<f64>> {
        let table = self.log_q.get(i).ok_or(LstnError::Range {
            what: "turn",
            index: i,
            len: self.len(),
        })?;
        let row = match (i, prev) {
            (0, StateRef::Start) => 0,
            (0, StateRef::State(_)) | (_, StateRef::Start) => {
                return Err(LstnError::Argument(format!("predecessor {prev} is impossible at turn {i}")))
            }
            (_, StateRef::State(z)) if z < table.nrows() => z,
            (_, StateRef::State(z)) => {
                return Err(LstnError::Range {
                    what: "state",
                    index: z,
                    len: table.nrows(),
                })
            }
        };
        Ok(table.row(row).to_vec())
    }

    /// Probabilities laid out like a `(K+1) x K` transition table: row `K`
    /// is START at turn 0, and all unused rows are zero.
    fn expanded_probs(&self, i: usize) -> Matrix {
        let k = self.num_states();
        let mut out = Matrix::zeros((k + 1, k));
        if i == 0 {
            out.row_mut(k).assign(&self.log_q[0].row(0).mapv(f64::exp));
        } else {
            out.slice_mut(ndarray::s![..k, ..]).assign(&self.log_q[i].mapv(f64::exp));
        }
        out
    }

    /// Posterior marginals `p(z_i | x, y)` for every turn.
    pub fn state_marginals(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        for (i, t) in self.log_q.iter().enumerate() {
            let probs = t.mapv(f64::exp);
            let mu = if i == 0 {
                probs.row(0).to_vec()
            } else {
                let prev = &out[i - 1];
                (0..probs.ncols())
                    .map(|z| prev.iter().enumerate().map(|(zp, m)| m * probs[[zp, z]]).sum())
                    .collect()
            };
            out.push(mu);
        }
        out
    }
}

/// `ln b_i(z', z) = ln p(z_i = z, y_{i:N} | z_{i-1} = z', x)` per turn, with
/// the same row layout as [`PosteriorTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardTable {
    pub log_b: Vec<Matrix>,
}

/// `f_i(z')` per turn: a single value at turn 0, one per predecessor after it.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepTable {
    pub f: Vec<Vec<f64>>,
}

impl MStepTable {
    pub fn f1(&self) -> f64 {
        self.f[0][0]
    }
}

fn numerical(turn: usize, detail: impl Into<String>) -> LstnError {
    LstnError::Numerical {
        turn,
        detail: detail.into(),
    }
}

/// Backward recursion over the factor tables.
pub fn backward_table(f: &DialogFactors) -> Result<BackwardTable> {
    if f.is_empty() {
        return Err(LstnError::Argument("dialog has no turns".into()));
    }
    let k = f.num_states();
    let n = f.len();
    let mut log_b = vec![Matrix::zeros((0, 0)); n];
    let mut beta = vec![0.0; k];
    for i in (0..n).rev() {
        let rows: Vec<usize> = if i == 0 { vec![k] } else { (0..k).collect() };
        let mut b = Matrix::zeros((rows.len(), k));
        for (r, &zp) in rows.iter().enumerate() {
            for z in 0..k {
                b[[r, z]] = f.transitions[i][[zp, z]] + f.emissions[i][z] + beta[z];
            }
        }
        if b.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(numerical(i + 1, "backward message"));
        }
        beta = b.rows().into_iter().map(|r| log_sum_exp(&r.to_vec())).collect();
        if i > 0 && beta.iter().any(|v| !v.is_finite()) {
            return Err(numerical(i + 1, "backward normalizer"));
        }
        log_b[i] = b;
    }
    Ok(BackwardTable { log_b })
}

/// Row-normalizes the backward table into the exact posterior.
pub fn posterior_from_backward(b: &BackwardTable) -> Result<PosteriorTable> {
    let mut log_q = Vec::with_capacity(b.log_b.len());
    for (i, t) in b.log_b.iter().enumerate() {
        let mut q = t.clone();
        for mut row in q.rows_mut() {
            let z = log_sum_exp(&row.to_vec());
            if !z.is_finite() {
                return Err(numerical(i + 1, "posterior row normalizer"));
            }
            row.mapv_inplace(|v| v - z);
        }
        log_q.push(q);
    }
    Ok(PosteriorTable { log_q })
}

pub fn e_step_factors(f: &DialogFactors) -> Result<PosteriorTable> {
    posterior_from_backward(&backward_table(f)?)
}

/// Exact posterior for one dialog under the model's current parameters.
pub fn e_step(model: &Lstn, dialog: &EncodedDialog) -> Result<PosteriorTable> {
    e_step_factors(&model.dialog_factors(dialog)?)
}

/// Forward recursion: `ln p(y_{1:N} | x_{1:N})`.
pub fn forward_loglik(f: &DialogFactors) -> Result<f64> {
    if f.is_empty() {
        return Err(LstnError::Argument("dialog has no turns".into()));
    }
    let k = f.num_states();
    let mut alpha: Vec<f64> = (0..k).map(|z| f.transitions[0][[k, z]] + f.emissions[0][z]).collect();
    for i in 1..f.len() {
        alpha = (0..k)
            .map(|z| {
                let terms: Vec<f64> = (0..k).map(|zp| alpha[zp] + f.transitions[i][[zp, z]]).collect();
                f.emissions[i][z] + log_sum_exp(&terms)
            })
            .collect();
        if alpha.iter().any(|v| v.is_nan()) {
            return Err(numerical(i + 1, "forward message"));
        }
    }
    let ll = log_sum_exp(&alpha);
    if !ll.is_finite() {
        return Err(numerical(f.len(), "marginal likelihood"));
    }
    Ok(ll)
}

pub fn marginal_loglik(model: &Lstn, dialog: &EncodedDialog) -> Result<f64> {
    forward_loglik(&model.dialog_factors(dialog)?)
}

/// `Σ_i E_{μ_{i-1}} H(q_i(. | z_{i-1}))`, the entropy of the chain posterior.
pub fn posterior_entropy(q: &PosteriorTable) -> f64 {
    let row_entropy = |row: ndarray::ArrayView1<f64>| -> f64 {
        row.iter()
            .filter(|lp| lp.is_finite())
            .map(|&lp| -lp.exp() * lp)
            .sum()
    };
    let marginals = q.state_marginals();
    let mut h = 0.0;
    for (i, t) in q.log_q.iter().enumerate() {
        if i == 0 {
            h += row_entropy(t.row(0));
        } else {
            h += marginals[i - 1]
                .iter()
                .zip(t.rows())
                .map(|(m, row)| m * row_entropy(row))
                .sum::<f64>();
        }
    }
    h
}

fn check_lengths(q: &PosteriorTable, turns: usize, k: usize) -> Result<()> {
    if q.len() != turns {
        return Err(LstnError::Argument(format!(
            "posterior covers {} turns, dialog has {turns}",
            q.len()
        )));
    }
    if q.num_states() != k {
        return Err(LstnError::Argument(format!(
            "posterior has {} states, model has {k}",
            q.num_states()
        )));
    }
    Ok(())
}

/// Value-only `f_i` tables from fixed factors.
pub fn m_step_table(f: &DialogFactors, q: &PosteriorTable) -> Result<MStepTable> {
    let k = f.num_states();
    check_lengths(q, f.len(), k)?;
    let mut out = vec![Vec::new(); f.len()];
    let mut next = vec![0.0; k];
    for i in (0..f.len()).rev() {
        let probs = q.log_q[i].mapv(f64::exp);
        let rows: Vec<usize> = if i == 0 { vec![k] } else { (0..k).collect() };
        let fi: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(r, &zp)| {
                (0..k)
                    .filter(|&z| probs[[r, z]] > 0.0)
                    .map(|z| probs[[r, z]] * (next[z] + f.transitions[i][[zp, z]] + f.emissions[i][z]))
                    .sum()
            })
            .collect();
        next = fi.clone();
        out[i] = fi;
    }
    Ok(MStepTable { f: out })
}

/// Differentiable `f_1(START)` over factor nodes; `q` enters as constants.
pub fn m_step_node(g: &mut Graph<'_>, nodes: &FactorNodes, q: &PosteriorTable) -> Result<Node> {
    let n = nodes.transitions.len();
    if n == 0 || nodes.emissions.len() != n {
        return Err(LstnError::Argument("factor nodes do not describe a dialog".into()));
    }
    let k = g.shape(nodes.emissions[0]).0;
    check_lengths(q, n, k)?;
    let mut next: Option<Node> = None;
    for i in (0..n).rev() {
        let e_row = g.transpose(nodes.emissions[i]);
        let s = match next {
            Some(f) => {
                let ft = g.transpose(f);
                g.add(e_row, ft)?
            }
            None => e_row,
        };
        let expanded = q.expanded_probs(i);
        let t_plus = g.add_row(nodes.transitions[i], s)?;
        let weighted = g.mul_const(t_plus, expanded)?;
        let col = g.sum_cols(weighted);
        next = Some(if i == 0 {
            g.gather_rows(col, &[k])?
        } else {
            g.gather_rows(col, &(0..k).collect::<Vec<_>>())?
        });
    }
    Ok(next.expect("at least one turn"))
}

/// Builds the per-dialog M-step objective against the layout's parameters.
pub fn m_step_objective(
    g: &mut Graph<'_>,
    layout: &ModelLayout,
    dialog: &EncodedDialog,
    q: &PosteriorTable,
) -> Result<Node> {
    let nodes = layout.factor_nodes(g, dialog)?;
    m_step_node(g, &nodes, q)
}

/// `f_1` evaluated on fixed factor values.
pub fn m_step_value(f: &DialogFactors, q: &PosteriorTable) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let nodes = FactorNodes::constant(&mut g, f);
    let out = m_step_node(&mut g, &nodes, q)?;
    Ok(g.scalar(out))
}

pub const LEARNING_RATES: [f64; 3] = [0.01, 0.001, 0.0001];
pub const EMBED_DIMS: [usize; 3] = [16, 32, 64];
pub const STATE_COUNTS: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_states: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    /// Encoder and decoder hidden size, also the state embedding size.
    pub hidden_dim: usize,
    pub shared_state_embeddings: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub m_steps_per_e_step: usize,
    /// Accept values outside the standard hyperparameter grids.
    pub allow_off_grid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_states: 8,
            learning_rate: 0.01,
            embed_dim: 32,
            hidden_dim: 32,
            shared_state_embeddings: false,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            m_steps_per_e_step: 3,
            allow_off_grid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LstnError::Config(m));
        if self.num_states == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("num_states, embed_dim and hidden_dim must be positive".into());
        }
        if self.batch_size == 0 || self.m_steps_per_e_step == 0 {
            return bad("batch_size and m_steps_per_e_step must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} is not positive", self.learning_rate));
        }
        if !self.allow_off_grid {
            if !LEARNING_RATES.contains(&self.learning_rate) {
                return bad(format!(
                    "learning_rate {} not in {LEARNING_RATES:?} (set allow_off_grid to override)",
                    self.learning_rate
                ));
            }
            if !EMBED_DIMS.contains(&self.embed_dim) {
                return bad(format!(
                    "embed_dim {} not in {EMBED_DIMS:?} (set allow_off_grid to override)",
                    self.embed_dim
                ));
            }
            if !STATE_COUNTS.contains(&self.num_states) {
                return bad(format!(
                    "num_states {} not in {STATE_COUNTS:?} (set allow_off_grid to override)",
                    self.num_states
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig::for_vocab(
            vocab,
            self.num_states,
            self.embed_dim,
            self.hidden_dim,
            self.shared_state_embeddings,
        )
    }
}

/// One training log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Batches processed so far.
    pub batch: usize,
    /// Mean per-dialog training objective (the bound) over the epoch.
    pub elbo: f64,
    pub dev_loglik: f64,
    pub dev_ppl: f64,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

pub fn log_to_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Lstn,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_dev_ppl: f64,
}

/// A failed run, with the best model seen before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: LstnError,
    pub last_good: Option<Box<Lstn>>,
    pub log: Vec<LogRecord>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainFailure> for LstnError {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

impl From<LstnError> for TrainFailure {
    fn from(error: LstnError) -> Self {
        Self {
            error,
            last_good: None,
            log: Vec::new(),
        }
    }
}

/// A per-dialog training objective to maximize.
pub(crate) trait Objective: Sync {
    /// Per-dialog state that stays fixed across the M-steps of one batch.
    type Aux: Send + Sync;

    /// Returns the objective node, the reported statistic, and newly
    /// computed aux state when `aux` was `None`.
    fn build(
        &self,
        g: &mut Graph<'_>,
        dialog: &EncodedDialog,
        aux: Option<&Self::Aux>,
    ) -> Result<(Node, f64, Option<Self::Aux>)>;

    /// Held-out log-likelihood and the number of scored units.
    fn dev_loglik(&self, store: &ParamStore, dev: &[EncodedDialog]) -> Result<(f64, usize)>;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub m_steps: usize,
}

impl From<&TrainConfig> for FitConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            seed: c.seed,
            m_steps: c.m_steps_per_e_step,
        }
    }
}

pub(crate) struct FitOutcome {
    pub store: ParamStore,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub best_ppl: f64,
}

pub(crate) struct FitFailure {
    pub error: LstnError,
    pub last_good: Option<ParamStore>,
    pub log: Vec<LogRecord>,
}

/// One E-step followed by `m_steps` Adam steps on the batch mean objective.
/// Returns the mean statistic from the first pass.
pub(crate) fn batch_step<O: Objective>(
    obj: &O,
    store: &mut ParamStore,
    batch: &[&EncodedDialog],
    adam: &AdamConfig,
    m_steps: usize,
) -> Result<f64> {
    let scale = -1.0 / batch.len() as f64;
    let mut auxes: Vec<Option<O::Aux>> = batch.iter().map(|_| None).collect();
    let mut first_stat = 0.0;
    for step in 0..m_steps {
        let shared: &ParamStore = store;
        let results: Vec<Result<(Gradients, f64, Option<O::Aux>)>> = batch
            .par_iter()
            .zip(auxes.par_iter())
            .map(|(d, aux)| {
                let mut g = Graph::new(shared);
                let (out, stat, fresh) = obj.build(&mut g, d, aux.as_ref())?;
                if !g.scalar(out).is_finite() {
                    return Err(numerical(0, format!("objective of dialog `{}`", d.id)));
                }
                let grads = g.backward_scaled(out, scale)?;
                Ok((grads, stat, fresh))
            })
            .collect();
        let mut total = Gradients::new(store.len());
        let mut stat_sum = 0.0;
        for (i, r) in results.into_iter().enumerate() {
            let (grads, stat, fresh) = r?;
            total.add_assign(&grads);
            stat_sum += stat;
            if let Some(a) = fresh {
                auxes[i] = Some(a);
            }
        }
        if step == 0 {
            first_stat = stat_sum / batch.len() as f64;
        }
        store.accumulate(&total)?;
        adam_update(store, adam)?;
    }
    Ok(first_stat)
}

fn mean_stat<O: Objective>(obj: &O, store: &ParamStore, data: &[EncodedDialog]) -> Result<f64> {
    let stats: Vec<Result<f64>> = data
        .par_iter()
        .map(|d| {
            let mut g = Graph::new(store);
            Ok(obj.build(&mut g, d, None)?.1)
        })
        .collect();
    let mut sum = 0.0;
    for s in stats {
        sum += s?;
    }
    Ok(sum / data.len().max(1) as f64)
}

fn is_divergence(e: &LstnError) -> bool {
    matches!(
        e,
        LstnError::Numerical { .. } | LstnError::Diff(DiffError::NonFiniteGradient { .. })
    )
}

/// Generic minibatch loop with best-on-dev selection.
pub(crate) fn fit<O: Objective>(
    obj: &O,
    mut store: ParamStore,
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    cfg: FitConfig,
    phase: Option<&str>,
    on_record: &mut dyn FnMut(&LogRecord),
) -> std::result::Result<FitOutcome, FitFailure> {
    let start = Instant::now();
    let adam = AdamConfig::new(cfg.learning_rate);
    let mut log = Vec::new();
    let mut best: Option<(ParamStore, usize, f64)> = None;
    let mut batches_done = 0;

    let fail = |error: LstnError, best: Option<(ParamStore, usize, f64)>, log: Vec<LogRecord>| FitFailure {
        error,
        last_good: best.map(|b| b.0),
        log,
    };

    if train.is_empty() || dev.is_empty() {
        return Err(fail(
            LstnError::Argument("training needs non-empty train and dev splits".into()),
            None,
            log,
        ));
    }
    let dev_tokens_check = |store: &ParamStore| -> Result<(f64, f64)> {
        let (ll, units) = obj.dev_loglik(store, dev)?;
        if !ll.is_finite() {
            return Err(numerical(0, "dev log-likelihood"));
        }
        Ok((ll, (-ll / units.max(1) as f64).exp()))
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..=cfg.epochs {
        let elbo = if epoch == 0 {
            match mean_stat(obj, &store, train) {
                Ok(v) => v,
                Err(e) => return Err(fail(e, best, log)),
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&EncodedDialog> = chunk.iter().map(|&i| &train[i]).collect();
                match batch_step(obj, &mut store, &batch, &adam, cfg.m_steps) {
                    Ok(s) => sum += s * batch.len() as f64,
                    Err(e) => {
                        let e = if is_divergence(&e) {
                            LstnError::Diverged {
                                epoch,
                                batch: batches_done + 1,
                                detail: e.to_string(),
                            }
                        } else {
                            e
                        };
                        return Err(fail(e, best, log));
                    }
                }
                batches_done += 1;
            }
            sum / train.len() as f64
        };
        let (dev_ll, dev_ppl) = match dev_tokens_check(&store) {
            Ok(v) => v,
            Err(e) => {
                let e = LstnError::Diverged {
                    epoch,
                    batch: batches_done,
                    detail: e.to_string(),
                };
                return Err(fail(e, best, log));
            }
        };
        let rec = LogRecord {
            epoch,
            batch: batches_done,
            elbo,
            dev_loglik: dev_ll,
            dev_ppl,
            wall_ms: start.elapsed().as_millis() as u64,
            phase: phase.map(str::to_string),
        };
        log::info!(
            "{}epoch {epoch}: elbo {elbo:.4} dev ll {dev_ll:.4} ppl {dev_ppl:.4}",
            phase.map(|p| format!("[{p}] ")).unwrap_or_default()
        );
        on_record(&rec);
        log.push(rec);
        if best.as_ref().is_none_or(|b| dev_ppl < b.2) {
            best = Some((store.clone(), epoch, dev_ppl));
        }
    }
    let (store, best_epoch, best_ppl) = best.expect("epoch 0 always evaluated");
    Ok(FitOutcome {
        store,
        log,
        best_epoch,
        best_ppl,
    })
}

pub(crate) fn factors_in(layout: &ModelLayout, store: &ParamStore, d: &EncodedDialog) -> Result<DialogFactors> {
    let mut g = Graph::new(store);
    let nodes = layout.factor_nodes(&mut g, d)?;
    let f = nodes.values(&g);
    f.check_finite()?;
    Ok(f)
}

/// Total marginal log-likelihood and response-token count (end markers included).
pub(crate) fn loglik_in(layout: &ModelLayout, store: &ParamStore, data: &[EncodedDialog]) -> Result<(f64, usize)> {
    let lls: Vec<Result<f64>> = data
        .par_iter()
        .map(|d| forward_loglik(&factors_in(layout, store, d)?))
        .collect();
    let mut total = 0.0;
    for ll in lls {
        total += ll?;
    }
    Ok((total, data.iter().map(EncodedDialog::response_tokens).sum()))
}

/// Total marginal log-likelihood and scored token count over `data`.
pub fn dataset_loglik(model: &Lstn, data: &[EncodedDialog]) -> Result<(f64, usize)> {
    loglik_in(&model.layout, &model.store, data)
}

/// Per-token perplexity with states marginalized.
pub fn perplexity(model: &Lstn, data: &[EncodedDialog]) -> Result<f64> {
    let (ll, tokens) = dataset_loglik(model, data)?;
    Ok((-ll / tokens.max(1) as f64).exp())
}

pub(crate) struct EmObjective {
    pub layout: ModelLayout,
}

impl Objective for EmObjective {
    type Aux = PosteriorTable;

    fn build(
        &self,
        g: &mut Graph<'_>,
        dialog: &EncodedDialog,
        aux: Option<&PosteriorTable>,
    ) -> Result<(Node, f64, Option<PosteriorTable>)> {
        let nodes = self.layout.factor_nodes(g, dialog)?;
        let fresh = match aux {
            Some(_) => None,
            None => {
                let values = nodes.values(g);
                values.check_finite()?;
                Some(e_step_factors(&values)?)
            }
        };
        let q = aux.or(fresh.as_ref()).expect("posterior available");
        let out = m_step_node(g, &nodes, q)?;
        let stat = g.scalar(out) + posterior_entropy(q);
        Ok((out, stat, fresh))
    }

    fn dev_loglik(&self, store: &ParamStore, dev: &[EncodedDialog]) -> Result<(f64, usize)> {
        loglik_in(&self.layout, store, dev)
    }
}

/// One generalized-EM round on a batch: exact E-step, then `m_steps`
/// Adam steps on the mean negated M-step objective. Returns the mean bound
/// at the parameters the E-step saw.
pub fn em_round(model: &mut Lstn, batch: &[EncodedDialog], adam: &AdamConfig, m_steps: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(LstnError::Argument("empty batch".into()));
    }
    let obj = EmObjective {
        layout: model.layout.clone(),
    };
    let refs: Vec<&EncodedDialog> = batch.iter().collect();
    batch_step(&obj, &mut model.store, &refs, adam, m_steps)
}

/// Trains an existing model; returns the best-on-dev snapshot.
pub fn train_model(
    model: Lstn,
    train: &[EncodedDialog],
    dev: &[EncodedDialog],
    config: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    let layout = model.layout.clone();
    let obj = EmObjective { layout: layout.clone() };
    let rebuild = |store: ParamStore| Lstn {
        layout: layout.clone(),
        store,
    };
    match fit(&obj, model.store, train, dev, config.into(), None, on_record) {
        Ok(out) => Ok(TrainOutcome {
            model: rebuild(out.store),
            log: out.log,
            best_epoch: out.best_epoch,
            best_dev_ppl: out.best_ppl,
        }),
        Err(f) => Err(TrainFailure {
            error: f.error,
            last_good: f.last_good.map(|s| Box::new(rebuild(s))),
            log: f.log,
        }),
    }
}

/// Builds a fresh model for `vocab` and trains it on the corpus's train
/// split, selecting on the dev split.
pub fn train(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    config.validate()?;
    let train = encode_dialogs(&corpus.train, vocab);
    let dev = encode_dialogs(&corpus.dev, vocab);
    let model = Lstn::new(config.model_config(vocab), config.seed)?;
    train_model(model, &train, &dev, config, &mut |_| {})
}
