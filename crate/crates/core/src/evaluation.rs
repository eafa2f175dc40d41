//! BLEU, recoverability, end-to-end response quality, and the K sweep.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode_dialogs, CorpusSplit, Dialog, Vocabulary};
use crate::em::{self, TrainConfig};
use crate::error::{LstnError, Result};
use crate::inference::{argmax, build_response_cache, respond, track_state, BeamConfig, ResponseCache};
use crate::model::Lstn;

pub const BLEU_VARIANT: &str = "sentence-bleu4-addone-2to4";

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence-level BLEU-4 on a 0..100 scale.
///
/// Unigram precision is unsmoothed; orders 2 to 4 use add-one smoothing.
/// The brevity penalty uses the reference length closest to the hypothesis
/// (shorter wins ties). An empty hypothesis or reference list scores 0.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypothesis: &[S], references: &[Vec<R>]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    let c = hypothesis.len();
    let mut log_p = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, cnt) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(cnt);
            }
        }
        let matched: usize = hyp
            .iter()
            .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = c.saturating_sub(n - 1);
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_p += p.ln() / 4.0;
    }
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

/// Decoded top response of state `z`.
fn top_words(cache: &ResponseCache, vocab: &Vocabulary, z: usize) -> Result<Vec<String>> {
    vocab.decode(&cache.top(z)?.tokens)
}

/// Per-turn recoverability scores: the gold response is assigned its best
/// emitting state and compared with that state's top cached response.
pub fn recoverability_scores(
    dialog: &Dialog,
    model: &Lstn,
    cache: &ResponseCache,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    dialog
        .turns
        .iter()
        .map(|t| {
            let y = vocab.encode_response(&t.agent);
            let z = argmax(&model.emission_logprobs(&y)?);
            Ok(bleu(&top_words(cache, vocab, z)?, &[t.agent.clone()]))
        })
        .collect()
}

/// Per-turn end-to-end scores with the state tracked from the gold user
/// utterances.
pub fn end_to_end_scores(
    dialog: &Dialog,
    model: &Lstn,
    cache: &ResponseCache,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let mut marginal = None;
    let mut out = Vec::with_capacity(dialog.len());
    for t in &dialog.turns {
        let m = track_state(model, marginal.as_ref(), &vocab.encode(&t.user))?;
        let (z, _) = respond(&m, cache)?;
        out.push(bleu(&top_words(cache, vocab, z)?, &[t.agent.clone()]));
        marginal = Some(m);
    }
    Ok(out)
}

fn mean_over_turns(per_dialog: &[Vec<f64>]) -> f64 {
    let n: usize = per_dialog.iter().map(Vec::len).sum();
    if n == 0 {
        return 0.0;
    }
    per_dialog.iter().flatten().sum::<f64>() / n as f64
}

fn per_dialog<F>(dialogs: &[Dialog], f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Dialog) -> Result<Vec<f64>> + Sync + Send,
{
    dialogs.par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

/// Mean recoverability BLEU over every response of `dialogs`.
pub fn recoverability(dialogs: &[Dialog], model: &Lstn, cache: &ResponseCache, vocab: &Vocabulary) -> Result<f64> {
    Ok(mean_over_turns(&per_dialog(dialogs, |d| {
        recoverability_scores(d, model, cache, vocab)
    })?))
}

/// Mean end-to-end BLEU over every response of `dialogs`.
pub fn end_to_end_bleu(dialogs: &[Dialog], model: &Lstn, cache: &ResponseCache, vocab: &Vocabulary) -> Result<f64> {
    Ok(mean_over_turns(&per_dialog(dialogs, |d| {
        end_to_end_scores(d, model, cache, vocab)
    })?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogScore {
    pub id: String,
    pub turns: usize,
    pub recoverability: f64,
    pub end_to_end_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub k: usize,
    pub bleu_variant: String,
    /// End-to-end BLEU.
    pub bleu: f64,
    pub recoverability: f64,
    pub num_responses: usize,
    pub config_hash: String,
    pub per_dialog: Vec<DialogScore>,
}

impl EvalReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {}", "dataset", self.dataset);
        let _ = writeln!(s, "{:<16} {}", "K", self.k);
        let _ = writeln!(s, "{:<16} {}", "responses", self.num_responses);
        let _ = writeln!(s, "{:<16} {:.2}", "recoverability", self.recoverability);
        let _ = writeln!(s, "{:<16} {:.2}", "bleu", self.bleu);
        let _ = writeln!(s, "{:<16} {}", "bleu variant", self.bleu_variant);
        let _ = writeln!(s, "{:<16} {}", "config", self.config_hash);
        s
    }
}

/// Scores `dialogs` for both metrics.
pub fn evaluate(
    dataset: &str,
    dialogs: &[Dialog],
    model: &Lstn,
    cache: &ResponseCache,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let rec = per_dialog(dialogs, |d| recoverability_scores(d, model, cache, vocab))?;
    let e2e = per_dialog(dialogs, |d| end_to_end_scores(d, model, cache, vocab))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let per = dialogs
        .iter()
        .zip(rec.iter().zip(&e2e))
        .map(|(d, (r, e))| DialogScore {
            id: d.id.clone(),
            turns: d.len(),
            recoverability: mean(r),
            end_to_end_bleu: mean(e),
        })
        .collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        k: model.num_states(),
        bleu_variant: BLEU_VARIANT.to_string(),
        bleu: mean_over_turns(&e2e),
        recoverability: mean_over_turns(&rec),
        num_responses: rec.iter().map(Vec::len).sum(),
        config_hash: model.config().hash(),
        per_dialog: per,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub bleu: Option<f64>,
    pub recoverability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains and evaluates one model per K on the test split; a failing K is
/// recorded and the sweep continues. Rows are sorted by K.
pub fn k_sweep(
    corpus: &CorpusSplit,
    vocab: &Vocabulary,
    config: &TrainConfig,
    beam: &BeamConfig,
    k_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(LstnError::Argument("no K values to sweep".into()));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let train = encode_dialogs(&corpus.train, vocab);
    let dev = encode_dialogs(&corpus.dev, vocab);
    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let cfg = TrainConfig {
            num_states: k,
            ..config.clone()
        };
        let run = || -> Result<(f64, f64)> {
            cfg.validate()?;
            let model = Lstn::new(cfg.model_config(vocab), cfg.seed)?;
            let out = em::train_model(model, &train, &dev, &cfg, &mut |_| {})?;
            let cache = build_response_cache(&out.model, beam)?;
            let report = evaluate("sweep", &corpus.test, &out.model, &cache, vocab)?;
            Ok((report.bleu, report.recoverability))
        };
        rows.push(match run() {
            Ok((b, r)) => SweepRow {
                k,
                bleu: Some(b),
                recoverability: Some(r),
                error: None,
            },
            Err(e) => {
                log::warn!("K={k}: {e}");
                SweepRow {
                    k,
                    bleu: None,
                    recoverability: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(rows)
}

/// Two-column `K bleu` text for plotting; failed rows are written as `nan`.
pub fn sweep_plot_data(rows: &[SweepRow]) -> String {
    let mut s = String::from("# k\tbleu\n");
    for r in rows {
        match r.bleu {
            Some(b) => {
                let _ = writeln!(s, "{}\t{:.4}", r.k, b);
            }
            None => {
                let _ = writeln!(s, "{}\tnan", r.k);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identity_and_disjoint() {
        let r = toks("you are welcome , goodbye .");
        assert!((bleu(&r, &[r.clone()]) - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&toks("zebra"), &[r.clone()]), 0.0);
        assert_eq!(bleu::<String, String>(&[], &[r]), 0.0);
    }

    #[test]
    fn repeated_word_hand_count() {
        // p1 = 1/3, p2 = 1/3, p3 = 1/2, p4 = 1/1, no brevity penalty
        let s = bleu(&toks("the the the"), &[toks("the cat")]);
        assert!((s - 100.0 * (1.0f64 / 18.0).powf(0.25)).abs() < 1e-9);
        assert!((s - 48.55).abs() < 0.01);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let h = toks("a b");
        let s = bleu(&h, &[toks("a b c d")]);
        // p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1, bp = exp(1 - 4/2)
        assert!((s - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
        let s2 = bleu(&h, &[toks("a b c d"), toks("a b x")]);
        assert!((s2 - 100.0 * (1.0 - 1.5f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn plot_data_layout() {
        let rows = vec![
            SweepRow {
                k: 1,
                bleu: Some(12.5),
                recoverability: Some(12.5),
                error: None,
            },
            SweepRow {
                k: 8,
                bleu: None,
                recoverability: None,
                error: Some("x".into()),
            },
        ];
        assert_eq!(sweep_plot_data(&rows), "# k\tbleu\n1\t12.5000\n8\tnan\n");
    }
}
