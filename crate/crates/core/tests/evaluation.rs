mod common;

use common::*;
use lstn::corpus::{build_vocab, CorpusSplit, Dialog, Turn};
use lstn::em::TrainConfig;
use lstn::evaluation::*;
use lstn::inference::{build_response_cache, BeamConfig};
use lstn::ModelConfig;

fn dialogs() -> Vec<Dialog> {
    let pairs = [
        ("hello", "hi , how can i help ?"),
        ("weather please", "it is sunny today"),
        ("thanks", "you are welcome"),
        ("weather in paris", "it is rainy today"),
    ];
    (0..6)
        .map(|i| {
            let turns = (0..1 + i % 3)
                .map(|j| {
                    let (u, a) = pairs[(i + j) % pairs.len()];
                    Turn::from_text(u, a).unwrap()
                })
                .collect();
            Dialog::new(format!("d{i}"), turns).unwrap()
        })
        .collect()
}

fn small_beam() -> BeamConfig {
    BeamConfig {
        beam_size: 3,
        max_len: 8,
        length_normalize: false,
    }
}

#[test]
fn single_state_recoverability_scores_the_global_top_response() {
    let ds = dialogs();
    let vocab = build_vocab(&ds, 1).unwrap();
    let model = random_model(ModelConfig::for_vocab(&vocab, 1, 4, 4, false), 1, 1.0);
    let cache = build_response_cache(&model, &small_beam()).unwrap();
    let top = vocab.decode(&cache.top(0).unwrap().tokens).unwrap();
    let turns: Vec<&Turn> = ds.iter().flat_map(|d| &d.turns).collect();
    let expect = turns.iter().map(|t| bleu(&top, &[t.agent.clone()])).sum::<f64>() / turns.len() as f64;
    let report = evaluate("toy", &ds, &model, &cache, &vocab).unwrap();
    assert!((report.recoverability - expect).abs() < 1e-9);
    // with one state, tracking and recovery pick the same response
    assert!((report.bleu - expect).abs() < 1e-9);
    assert_eq!(report.num_responses, turns.len());
    assert_eq!(report.k, 1);
    assert_eq!(report.bleu_variant, BLEU_VARIANT);
}

#[test]
fn duplicating_the_test_set_leaves_scores_unchanged() {
    let ds = dialogs();
    let vocab = build_vocab(&ds, 1).unwrap();
    let model = random_model(ModelConfig::for_vocab(&vocab, 3, 4, 4, false), 2, 2.0);
    let cache = build_response_cache(&model, &small_beam()).unwrap();
    let doubled: Vec<Dialog> = ds.iter().chain(&ds).cloned().collect();
    let a = evaluate("toy", &ds, &model, &cache, &vocab).unwrap();
    let b = evaluate("toy", &doubled, &model, &cache, &vocab).unwrap();
    assert!((a.recoverability - b.recoverability).abs() < 1e-9);
    assert!((a.bleu - b.bleu).abs() < 1e-9);
    assert!((0.0..=100.0).contains(&a.bleu) && (0.0..=100.0).contains(&a.recoverability));
    assert_eq!(
        recoverability(&ds, &model, &cache, &vocab).unwrap(),
        a.recoverability
    );
    assert_eq!(end_to_end_bleu(&ds, &model, &cache, &vocab).unwrap(), a.bleu);
    let line = a.to_json_line();
    assert_eq!(serde_json::from_str::<EvalReport>(line.trim()).unwrap(), a);
    assert!(a.table().contains("recoverability"));
}

#[test]
fn sweep_rows_are_sorted_and_failures_recorded() {
    let ds = dialogs();
    let vocab = build_vocab(&ds, 1).unwrap();
    let corpus = CorpusSplit {
        train: ds[..4].to_vec(),
        dev: ds[4..5].to_vec(),
        test: ds[5..].to_vec(),
    };
    let cfg = TrainConfig {
        embed_dim: 4,
        hidden_dim: 4,
        epochs: 1,
        batch_size: 2,
        allow_off_grid: true,
        ..TrainConfig::default()
    };
    let rows = k_sweep(&corpus, &vocab, &cfg, &small_beam(), &[3, 0, 1, 3]).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![0, 1, 3]);
    assert!(rows[0].error.is_some() && rows[0].bleu.is_none());
    assert!(rows[1..].iter().all(|r| r.bleu.is_some() && r.error.is_none()));
    let plot = sweep_plot_data(&rows);
    assert_eq!(plot.lines().count(), 4);
    assert!(plot.lines().nth(1).unwrap().ends_with("nan"));
    assert!(k_sweep(&corpus, &vocab, &cfg, &small_beam(), &[]).is_err());
}
