mod common;

use common::*;
use lstn::corpus::{EncodedDialog, EncodedTurn, EOS, UNK};
use lstn::em::marginal_loglik;
use lstn::model::names;
use lstn::{Lstn, LstnError, StateRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_classifier_gives_uniform_transitions() {
    let mut m = random_model(tiny_config(5, 9, 4, false), 1, 0.5);
    zero_param(&mut m, names::TRANS_W);
    zero_param(&mut m, names::TRANS_B);
    for prev in [StateRef::Start, StateRef::State(2)] {
        let lp = m.transition_logprobs(prev, &[4, 5, 6]).unwrap();
        assert!(lp.iter().all(|v| (v - (1.0 / 5.0f64).ln()).abs() < 1e-12));
    }
}

#[test]
fn biased_state_dominates() {
    for k in [4, 8, 16, 32] {
        let mut m = random_model(tiny_config(k, 9, 4, false), 2, 0.5);
        zero_param(&mut m, names::TRANS_W);
        let b = m.store.id(names::TRANS_B).unwrap();
        m.store.value_mut(b).fill(0.0);
        m.store.value_mut(b)[[0, 3]] = 10.0;
        let p3 = m.transition_logprobs(StateRef::Start, &[4]).unwrap()[3].exp();
        // e^10 / (e^10 + K - 1)
        let expect = 10f64.exp() / (10f64.exp() + (k - 1) as f64);
        assert!((p3 - expect).abs() < 1e-12);
        assert!(p3 > 0.99);
    }
}

#[test]
fn transition_rows_normalize_and_depend_on_predecessor() {
    let m = random_model(tiny_config(4, 9, 4, false), 3, 0.5);
    let a = m.transition_logprobs(StateRef::State(0), &[4, 7]).unwrap();
    let b = m.transition_logprobs(StateRef::State(1), &[4, 7]).unwrap();
    let s = m.transition_logprobs(StateRef::Start, &[4, 7]).unwrap();
    for row in [&a, &b, &s] {
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
    assert_ne!(a, b);
    assert!(matches!(
        m.transition_logprobs(StateRef::State(4), &[4]),
        Err(LstnError::Range { .. })
    ));
}

#[test]
fn encoder_properties() {
    let m = random_model(tiny_config(2, 9, 4, false), 4, 0.5);
    assert_eq!(m.encode_utterance(&[4, 5, 6]).unwrap(), m.encode_utterance(&[4, 5, 6]).unwrap());
    assert_ne!(m.encode_utterance(&[4, 5, 6]).unwrap(), m.encode_utterance(&[6, 4, 5]).unwrap());
    assert!(matches!(m.encode_utterance(&[]), Err(LstnError::Argument(_))));

    let mut z = m.clone();
    zero_param(&mut z, "encoder.w");
    zero_param(&mut z, "encoder.b");
    assert!(z.encode_utterance(&[4, 8]).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn two_token_vocabulary_splits_evenly() {
    // emittable outputs are UNK (standing in for the single word) and EOS
    let mut m = random_model(tiny_config(2, 4, 3, false), 5, 0.5);
    zero_param(&mut m, names::OUT_W);
    zero_param(&mut m, names::OUT_B);
    let lp = m.emission_logprob(&[UNK, EOS], 1).unwrap();
    assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn emission_chain_rule_and_normalization() {
    let m = random_model(tiny_config(3, 8, 4, false), 6, 0.8);
    let y = [5, 4, 7, EOS];
    for z in 0..3 {
        let mut total = 0.0;
        for j in 0..y.len() {
            let dist = m.emission_next_token(&y[..j], z).unwrap();
            let mass: f64 = dist.iter().map(|v| v.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-9);
            total += dist[y[j] as usize];
        }
        let direct = m.emission_logprob(&y, z).unwrap();
        assert!((total - direct).abs() < 1e-12);
        assert!(direct <= 0.0);
        assert!((m.emission_logprobs(&y).unwrap()[z] - direct).abs() < 1e-12);
    }
    assert_ne!(m.emission_next_token(&[], 0).unwrap(), m.emission_next_token(&[], 1).unwrap());
    assert!(m.emission_logprob(&[99, EOS], 0).is_err());
}

#[test]
fn short_responses_carry_at_most_unit_mass() {
    // emittable: UNK, EOS, and one word
    let m = random_model(tiny_config(2, 5, 3, false), 7, 1.0);
    let words = [1u32, 4];
    let mut seqs: Vec<Vec<u32>> = vec![vec![EOS]];
    for &a in &words {
        seqs.push(vec![a, EOS]);
    }
    for z in 0..2 {
        let mass: f64 = seqs.iter().map(|s| m.emission_logprob(s, z).unwrap().exp()).sum();
        assert!(mass <= 1.0 + 1e-12 && mass > 0.0);
    }
}

#[test]
fn joint_enumeration_equals_forward_marginal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (k, n) in [(2, 2), (2, 3), (3, 3), (4, 2)] {
        let m = random_model(tiny_config(k, 10, 4, false), 9 + k as u64, 0.6);
        let d = random_dialog(&mut rng, 10, n);
        let joints: Vec<f64> = all_sequences(k, n)
            .iter()
            .map(|s| m.joint_logprob(&d, s).unwrap())
            .collect();
        assert!((lse(&joints) - marginal_loglik(&m, &d).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn joint_single_turn_and_symmetry() {
    let mut m = random_model(tiny_config(3, 9, 4, false), 10, 0.5);
    let d = EncodedDialog {
        id: "x".into(),
        turns: vec![EncodedTurn {
            user: vec![4],
            agent: vec![5, EOS],
        }],
    };
    let direct = m.transition_logprobs(StateRef::Start, &[4]).unwrap()[2] + m.emission_logprob(&[5, EOS], 2).unwrap();
    assert!((m.joint_logprob(&d, &[2]).unwrap() - direct).abs() < 1e-12);
    assert!(matches!(m.joint_logprob(&d, &[0, 1]), Err(LstnError::Argument(_))));

    zero_param(&mut m, names::TRANS_W);
    zero_param(&mut m, names::TRANS_B);
    let two = EncodedDialog {
        id: "y".into(),
        turns: vec![d.turns[0].clone(), d.turns[0].clone()],
    };
    // both turns share a response, so [0, 2] and [2, 0] have equal emissions
    let a = m.joint_logprob(&two, &[0, 2]).unwrap();
    let b = m.joint_logprob(&two, &[2, 0]).unwrap();
    assert!((a - b).abs() < 1e-12);
    let e = m.emission_logprobs(&[5, EOS]).unwrap();
    let u = (1.0 / 3.0f64).ln();
    assert!((m.joint_logprob(&two, &[0, 2]).unwrap() - (2.0 * u + e[0] + e[2])).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = random_model(tiny_config(3, 9, 4, true), 11, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    m.save(&path, Some("lstn")).unwrap();
    let back = Lstn::load(&path).unwrap();
    assert_eq!(back, m);
}

#[test]
fn shared_mode_aliases_state_rows() {
    let m = random_model(tiny_config(3, 9, 4, true), 12, 0.5);
    assert!(m.store.id(names::STATE_R).is_err());
    let v = m.store.value(m.store.id(names::STATE_V).unwrap()).clone();
    let mut g = diffcore::Graph::new(&m.store);
    let r = m.layout.emission_states(&mut g).unwrap();
    assert_eq!(g.value(r), &v.slice(ndarray::s![..3, ..]).to_owned());
}
