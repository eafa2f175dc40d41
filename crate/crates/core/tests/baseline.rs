mod common;

use common::*;
use lstn::baseline::{hard_assign, train_phase2, transition_accuracy, SplitModel, CONTEXT_B, CONTEXT_W, PHASE2};
use lstn::corpus::{EncodedDialog, EncodedTurn, EOS};
use lstn::em::{e_step, TrainConfig};
use lstn::model::names;
use lstn::StateRef;
use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_split(k: usize, vocab: usize, dim: usize, seed: u64, scale: f64) -> SplitModel {
    let mut m = SplitModel::new(tiny_config(k, vocab, dim, false), seed, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbead);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store.value_mut(id).mapv_inplace(|_| rng.random_range(-scale..scale));
    }
    m
}

/// Makes the context classifier reproduce the LSTN START row exactly.
fn align_context_with_start_row(m: &mut SplitModel) {
    let k = m.num_states();
    let hdim = m.layout.config().encoder_hidden;
    let w = m.store.value(m.store.id(names::TRANS_W).unwrap()).clone();
    let b = m.store.value(m.store.id(names::TRANS_B).unwrap()).clone();
    let v = m.store.value(m.store.id(names::STATE_V).unwrap()).clone();
    let start = v.row(k).to_owned();
    let cw = w.slice(s![.., ..hdim]).to_owned();
    let cb = &b + &w.slice(s![.., hdim..]).dot(&start);
    *m.store.value_mut(m.store.id(CONTEXT_W).unwrap()) = cw;
    *m.store.value_mut(m.store.id(CONTEXT_B).unwrap()) = cb;
}

#[test]
fn single_turn_posterior_equals_lstn() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..10 {
        let mut m = random_split(3, 10, 4, seed, 0.7);
        align_context_with_start_row(&mut m);
        let lstn = m.to_lstn().unwrap();
        let d = random_dialog(&mut rng, 10, 1);
        let ours = m.posterior(&d).unwrap();
        let theirs = e_step(&lstn, &d).unwrap().log_row(0, StateRef::Start).unwrap();
        for z in 0..3 {
            assert!((ours[0][z] - theirs[z]).abs() < 1e-8);
        }
    }
}

#[test]
fn two_state_posterior_matches_hand_bayes() {
    let mut m = random_split(2, 9, 4, 11, 0.5);
    let cw = m.store.id(CONTEXT_W).unwrap();
    m.store.value_mut(cw).fill(0.0);
    let cb = m.store.id(CONTEXT_B).unwrap();
    m.store.value_mut(cb)[[0, 0]] = 0.3f64.ln();
    m.store.value_mut(cb)[[0, 1]] = 0.7f64.ln();
    let d = EncodedDialog {
        id: "d".into(),
        turns: vec![
            EncodedTurn {
                user: vec![4],
                agent: vec![5, EOS],
            },
            EncodedTurn {
                user: vec![6, 7],
                agent: vec![8, 6, EOS],
            },
        ],
    };
    let q = m.posterior(&d).unwrap();
    for (i, t) in d.turns.iter().enumerate() {
        let e: Vec<f64> = m.emission_logprobs(&t.agent).unwrap().iter().map(|v| v.exp()).collect();
        let num0 = 0.3 * e[0];
        let num1 = 0.7 * e[1];
        assert!((q[i][0].exp() - num0 / (num0 + num1)).abs() < 1e-12);
        assert!((q[i][1].exp() - num1 / (num0 + num1)).abs() < 1e-12);
    }
}

#[test]
fn hard_assign_ties_and_enumeration() {
    // identical state embeddings give identical emissions everywhere
    let mut m = random_split(4, 9, 4, 21, 0.5);
    let r = m.store.id(names::STATE_R).unwrap();
    m.store.value_mut(r).fill(0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dialogs: Vec<_> = (0..3).map(|_| random_dialog(&mut rng, 9, 3)).collect();
    assert!(hard_assign(&m, &dialogs).unwrap().iter().flatten().all(|&z| z == 0));

    let m = random_split(4, 9, 4, 22, 1.0);
    let labels = hard_assign(&m, &dialogs).unwrap();
    for (d, l) in dialogs.iter().zip(&labels) {
        for (t, &z) in d.turns.iter().zip(l) {
            let scores: Vec<f64> = (0..4)
                .map(|k| m.to_lstn().unwrap().emission_logprob(&t.agent, k).unwrap())
                .collect();
            let best = (0..4).fold(0, |b, k| if scores[k] > scores[b] { k } else { b });
            assert_eq!(z, best);
        }
    }
}

fn degenerate_corpus(n: usize, seed: u64) -> (Vec<EncodedDialog>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogs: Vec<_> = (0..n)
        .map(|i| {
            let mut d = random_dialog(&mut rng, 10, 3);
            d.id = format!("{seed}-{i}");
            d
        })
        .collect();
    let labels = vec![vec![2, 0, 1]; n];
    (dialogs, labels)
}

#[test]
fn phase2_learns_a_single_transition_pattern() {
    let (train, train_labels) = degenerate_corpus(16, 1);
    let (dev, dev_labels) = degenerate_corpus(4, 2);
    let cfg = TrainConfig {
        num_states: 3,
        embed_dim: 4,
        hidden_dim: 4,
        batch_size: 4,
        epochs: 15,
        allow_off_grid: true,
        ..TrainConfig::default()
    };
    let run = || {
        let m = SplitModel::new(tiny_config(3, 10, 4, false), 0, false).unwrap();
        train_phase2(m, &train, &train_labels, &dev, &dev_labels, &cfg, cfg.epochs, &mut |_| {}).unwrap()
    };
    let a = run();
    let lstn = a.model.to_lstn().unwrap();
    assert_eq!(transition_accuracy(&lstn, &train, &train_labels).unwrap(), 1.0);
    assert!(a.log.iter().all(|r| r.phase.as_deref() == Some(PHASE2)));

    // emission side untouched
    let fresh = SplitModel::new(tiny_config(3, 10, 4, false), 0, false).unwrap();
    for name in [names::OUT_W, names::OUT_B, names::STATE_R, names::WORD_EMB, "decoder.w"] {
        let id = fresh.store.id(name).unwrap();
        assert_eq!(a.model.store.value(id), fresh.store.value(id), "{name}");
    }

    let b = run();
    let strip = |log: &[lstn::em::LogRecord]| -> Vec<(u64, u64)> {
        log.iter().map(|r| (r.elbo.to_bits(), r.dev_loglik.to_bits())).collect()
    };
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.model, b.model);
}

#[test]
fn phase2_rejects_incomplete_labels() {
    let (train, mut labels) = degenerate_corpus(2, 3);
    labels[1].pop();
    let cfg = TrainConfig {
        num_states: 3,
        embed_dim: 4,
        hidden_dim: 4,
        allow_off_grid: true,
        ..TrainConfig::default()
    };
    let m = SplitModel::new(tiny_config(3, 10, 4, false), 0, false).unwrap();
    let err = train_phase2(m, &train, &labels, &train, &labels, &cfg, 1, &mut |_| {}).unwrap_err();
    assert!(matches!(err.error, lstn::LstnError::Argument(_)));
}
