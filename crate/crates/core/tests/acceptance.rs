//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the result lines always reach the terminal.
//! Pass substrings as arguments to run a subset, e.g.
//! `cargo test -p lstn --test acceptance -- sweep`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use diffcore::{grad_check, AdamConfig, GradCheckOptions, Graph};
use lstn::baseline::{train_split, SplitConfig};
use lstn::corpus::{build_vocab, EncodedDialog, Vocabulary};
use lstn::em::{
    self, e_step, e_step_factors, em_round, forward_loglik, m_step_objective, m_step_value, marginal_loglik,
    posterior_entropy, TrainConfig,
};
use lstn::evaluation::{evaluate, k_sweep, EvalReport};
use lstn::inference::{build_response_cache, BeamConfig, ResponseCache};
use lstn::interpret::{alignment_from_paths, export_flow_graph, mine_intents, posterior_states, tracked_states, DialogFlowGraph};
use lstn::model::DialogFactors;
use lstn::synth::{align_states, generate_corpus, state_recovery, OracleMachine, SynthCorpus};
use lstn::{Lstn, LstnError, StateRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SYNTH_DIALOGS: usize = 500;
const SYNTH_TURNS: usize = 5;
const SYNTH_EPOCHS: usize = 4;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// exact-inference criteria

/// The 50 (K, N) instances shared by the E-step and tightness criteria.
fn oracle_instances() -> Vec<(Lstn, EncodedDialog)> {
    (0..50u64)
        .map(|i| {
            let k = 2 + (i % 3) as usize;
            let n = 1 + ((i / 3) % 4) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
            let model = random_model(tiny_config(k, 10, 4, i % 2 == 0), 1000 + i, 0.8);
            (model, random_dialog(&mut rng, 10, n))
        })
        .collect()
}

fn e_step_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (m, d) in oracle_instances() {
        let (k, n) = (m.num_states(), d.len());
        let seqs = all_sequences(k, n);
        let joints: Vec<f64> = seqs.iter().map(|s| m.joint_logprob(&d, s).unwrap()).collect();
        let q = e_step(&m, &d).unwrap();
        for i in 0..n {
            let prevs: Vec<Option<usize>> = if i == 0 { vec![None] } else { (0..k).map(Some).collect() };
            for zp in prevs {
                let keep = |s: &[usize]| zp.is_none_or(|zp| s[i - 1] == zp);
                let denom: Vec<f64> = seqs.iter().zip(&joints).filter(|(s, _)| keep(s)).map(|(_, j)| *j).collect();
                let denom = lse(&denom);
                let prev = zp.map_or(StateRef::Start, StateRef::State);
                let row = q.log_row(i, prev).unwrap();
                for z in 0..k {
                    let num: Vec<f64> = seqs
                        .iter()
                        .zip(&joints)
                        .filter(|(s, _)| keep(s) && s[i] == z)
                        .map(|(_, j)| *j)
                        .collect();
                    let exact = (lse(&num) - denom).exp();
                    worst = worst.max((row[z].exp() - exact).abs());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-8 && secs < 60.0, format!("max abs error {worst:.2e} over 50 instances in {secs:.1}s"))
}

fn elbo_tightness() -> Outcome {
    let mut worst: f64 = 0.0;
    for (m, d) in oracle_instances() {
        let q = e_step(&m, &d).unwrap();
        let mut g = Graph::new(&m.store);
        let out = m_step_objective(&mut g, &m.layout, &d, &q).unwrap();
        let f1 = g.scalar(out);
        let ll = marginal_loglik(&m, &d).unwrap();
        worst = worst.max((f1 + posterior_entropy(&q) - ll).abs());
    }
    // single turn: transitions (0.6, 0.4), emissions (0.5, 0.25)
    let hand = DialogFactors::from_probs(&[vec![0.6, 0.4]], &[vec![vec![0.5, 0.5], vec![0.5, 0.5]]], &[vec![0.5, 0.25]]);
    let q = e_step_factors(&hand).unwrap();
    let f1 = m_step_value(&hand, &q).unwrap();
    let h = posterior_entropy(&q);
    let ll = forward_loglik(&hand).unwrap();
    let hand_ok = (f1 - -1.47863).abs() < 1e-5 && (h - 0.56234).abs() < 1e-5 && (ll - 0.4f64.ln()).abs() < 1e-12;
    outcome(
        worst <= 1e-6 && hand_ok,
        format!("max |f1 + H - LL| {worst:.2e}; hand instance f1 {f1:.5} H {h:.5} LL {ll:.5}"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_model(tiny_config(3, 8, 3, seed % 2 == 1), seed, 0.5);
        let d = random_dialog(&mut rng, 8, 2);
        let q = e_step(&m, &d).unwrap();
        let layout = m.layout.clone();
        let report = grad_check::<_, LstnError>(&mut m.store, GradCheckOptions::default(), |g| {
            m_step_objective(g, &layout, &d, &q)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-3 && secs < 120.0, format!("max relative error {worst:.2e} over 20 seeds in {secs:.1}s"))
}

fn em_ascent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let batch: Vec<EncodedDialog> = (0..8)
        .map(|i| {
            let mut d = random_dialog(&mut rng, 10, 1 + i % 3);
            d.id = format!("b{i}");
            d
        })
        .collect();
    let mut m = random_model(tiny_config(3, 10, 4, false), 51, 0.3);
    let total = |m: &Lstn| -> f64 { batch.iter().map(|d| marginal_loglik(m, d).unwrap()).sum() };
    let adam = AdamConfig::new(1e-4);
    let first = total(&m);
    let mut prev = first;
    let mut worst_drop: f64 = 0.0;
    for _ in 0..20 {
        em_round(&mut m, &batch, &adam, 1).unwrap();
        let now = total(&m);
        worst_drop = worst_drop.max(prev - now);
        prev = now;
    }
    outcome(
        worst_drop <= 1e-6,
        format!("batch log-likelihood {first:.4} -> {prev:.4}, largest drop {worst_drop:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// synthetic-corpus criteria

struct Synth {
    data: SynthCorpus,
    vocab: Vocabulary,
}

fn synth() -> &'static Synth {
    static S: OnceLock<Synth> = OnceLock::new();
    S.get_or_init(|| {
        let data = generate_corpus(&OracleMachine::weather(), SYNTH_DIALOGS, SYNTH_TURNS, 0).unwrap();
        let vocab = build_vocab(&data.corpus.train, 1).unwrap();
        Synth { data, vocab }
    })
}

fn train_config(k: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        num_states: k,
        epochs: SYNTH_EPOCHS,
        seed,
        // K=1 anchors the sweep and lies outside the state-count grid
        allow_off_grid: k == 1,
        ..TrainConfig::default()
    }
}

struct Run {
    model: Lstn,
    cache: ResponseCache,
    report: EvalReport,
    graph: DialogFlowGraph,
    secs: f64,
}

fn pipeline(model: Lstn, secs: f64) -> Run {
    let s = synth();
    let cache = build_response_cache(&model, &BeamConfig::default()).unwrap();
    let report = evaluate("synth", &s.data.corpus.test, &model, &cache, &s.vocab).unwrap();
    let intents = mine_intents(&model, &s.data.corpus.train, &s.vocab).unwrap();
    let graph = export_flow_graph(&intents, &cache, &s.vocab, 1, 3).unwrap();
    Run {
        model,
        cache,
        report,
        graph,
        secs,
    }
}

fn train_lstn(k: usize, seed: u64) -> Run {
    let s = synth();
    let start = Instant::now();
    let out = em::train(&s.data.corpus, &s.vocab, &train_config(k, seed)).unwrap();
    pipeline(out.model, start.elapsed().as_secs_f64())
}

fn lstn_run(seed: u64) -> &'static Run {
    static RUNS: [OnceLock<Run>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| train_lstn(8, seed))
}

fn split_run(seed: u64) -> &'static Run {
    static RUNS: [OnceLock<Run>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    RUNS[seed as usize].get_or_init(|| {
        let s = synth();
        let start = Instant::now();
        let out = train_split(&s.data.corpus, &s.vocab, &train_config(8, seed), &SplitConfig::default()).unwrap();
        pipeline(out.model, start.elapsed().as_secs_f64())
    })
}

fn gold() -> HashMap<&'static str, &'static [usize]> {
    synth().data.gold.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect()
}

fn synthetic_end_to_end() -> Outcome {
    let s = synth();
    let run = lstn_run(0);
    let gold = gold();
    let test = &s.data.corpus.test;
    let learned = posterior_states(&run.model, test, &s.vocab).unwrap();
    let (l, g) = alignment_from_paths(test, &learned, &gold).unwrap();
    let purity = state_recovery(&l, &g).unwrap();

    let train = &s.data.corpus.train;
    let paths = tracked_states(&run.model, train, &s.vocab).unwrap();
    let (lt, gt) = alignment_from_paths(train, &paths, &gold).unwrap();
    let edges = run.graph.mapped_edges(&align_states(&lt, &gt));
    let oracle = OracleMachine::weather().edge_set().unwrap();

    let r = &run.report;
    let pass = r.recoverability >= 95.0 && r.bleu >= 85.0 && purity >= 0.9 && edges == oracle && run.secs < 900.0;
    outcome(
        pass,
        format!(
            "recoverability {:.2}, end-to-end {:.2}, purity {:.3}, edges {}/{} oracle (match {}), trained in {:.0}s",
            r.recoverability,
            r.bleu,
            purity,
            edges.intersection(&oracle).count(),
            oracle.len(),
            edges == oracle,
            run.secs
        ),
    )
}

fn upper_bound() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    let runs = SEEDS
        .iter()
        .map(|&s| (format!("lstn seed {s}"), lstn_run(s)))
        .chain(SEEDS.iter().map(|&s| (format!("split seed {s}"), split_run(s))))
        .chain(sweep_runs().iter().map(|(k, r)| (format!("lstn K={k}"), r)));
    for (name, run) in runs {
        let ok = run.report.bleu <= run.report.recoverability + 1e-6;
        pass &= ok;
        lines.push(format!("{name} {:.2}<={:.2}", run.report.bleu, run.report.recoverability));
    }
    outcome(pass, lines.join(", "))
}

fn baseline_ordering() -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let (a, b) = (lstn_run(seed).report.bleu, split_run(seed).report.bleu);
        if a >= b {
            wins += 1;
        }
        lines.push(format!("seed {seed}: lstn {a:.2} vs split {b:.2}"));
    }
    outcome(wins * 2 > SEEDS.len(), format!("{wins}/3 seeds; {}", lines.join("; ")))
}

/// K=1, 16, 64 from the sweep routine plus the shared K=8 run, which the
/// sweep would reproduce bit for bit under the same config and seed.
fn sweep_runs() -> &'static BTreeMap<usize, Run> {
    static S: OnceLock<BTreeMap<usize, Run>> = OnceLock::new();
    S.get_or_init(|| {
        [1usize, 16, 64]
            .into_iter()
            .map(|k| (k, train_lstn(k, 0)))
            .collect()
    })
}

fn k_sweep_shape() -> Outcome {
    let runs = sweep_runs();
    let mut bleu: BTreeMap<usize, f64> = runs.iter().map(|(k, r)| (*k, r.report.bleu)).collect();
    bleu.insert(8, lstn_run(0).report.bleu);
    let rise = bleu[&8] - bleu[&1];
    let plateau = (bleu[&64] - bleu[&16]).abs();
    let table: Vec<String> = bleu.iter().map(|(k, b)| format!("K={k} {b:.2}")).collect();
    outcome(
        rise > 20.0 && plateau < 5.0,
        format!("{}; rise {rise:.2}, plateau gap {plateau:.2}", table.join(", ")),
    )
}

fn determinism() -> Outcome {
    let first = lstn_run(0);
    let second = train_lstn(8, 0);
    let same_report = first.report.to_json_line() == second.report.to_json_line();
    let same_graph = first.graph.to_jsonl() == second.graph.to_jsonl() && first.graph.to_dot() == second.graph.to_dot();
    let same_cache = first.cache == second.cache;
    outcome(
        same_report && same_graph && same_cache,
        format!("report identical {same_report}, graph identical {same_graph}, cache identical {same_cache}"),
    )
}

/// The sweep entry point itself orders rows and reports per-K failures; a
/// one-epoch smoke run keeps the structural check cheap.
fn sweep_routine_smoke() -> Outcome {
    let s = synth();
    let cfg = TrainConfig {
        epochs: 1,
        embed_dim: 16,
        hidden_dim: 16,
        allow_off_grid: true,
        ..train_config(1, 0)
    };
    let mut small = s.data.corpus.clone();
    small.train.truncate(40);
    let rows = k_sweep(&small, &s.vocab, &cfg, &BeamConfig::default(), &[2, 1]).unwrap();
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    outcome(ks == vec![1, 2] && rows.iter().all(|r| r.bleu.is_some()), format!("rows {ks:?}"))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("e-step oracle equivalence", e_step_oracle),
        ("elbo tightness identity", elbo_tightness),
        ("gradient checks", gradient_checks),
        ("generalized-em ascent", em_ascent),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("upper-bound property", upper_bound),
        ("baseline ordering", baseline_ordering),
        ("k-sweep shape", k_sweep_shape),
        ("determinism", determinism),
        ("k-sweep routine smoke", sweep_routine_smoke),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
