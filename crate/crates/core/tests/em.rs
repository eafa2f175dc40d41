mod common;

use common::*;
use diffcore::{grad_check, AdamConfig, GradCheckOptions, Graph};
use lstn::corpus::EncodedDialog;
use lstn::em::{self, e_step, em_round, marginal_loglik, m_step_objective, posterior_entropy, TrainConfig};
use lstn::{LstnError, StateRef};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn e_step_on_model_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (k, n) = (3, 3);
    let m = random_model(tiny_config(k, 10, 4, false), 21, 0.7);
    let d = random_dialog(&mut rng, 10, n);
    let seqs = all_sequences(k, n);
    let joints: Vec<f64> = seqs.iter().map(|s| m.joint_logprob(&d, s).unwrap()).collect();
    let ll = lse(&joints);
    let q = e_step(&m, &d).unwrap();
    for i in 1..n {
        for zp in 0..k {
            let row = q.log_row(i, StateRef::State(zp)).unwrap();
            let sel = |z: Option<usize>| -> Vec<f64> {
                seqs.iter()
                    .zip(&joints)
                    .filter(|(s, _)| s[i - 1] == zp && z.is_none_or(|z| s[i] == z))
                    .map(|(_, j)| *j)
                    .collect()
            };
            let denom = lse(&sel(None));
            for z in 0..k {
                assert!((row[z].exp() - (lse(&sel(Some(z))) - denom).exp()).abs() < 1e-8);
            }
        }
    }
    assert!((marginal_loglik(&m, &d).unwrap() - ll).abs() < 1e-9);
}

fn f1_grad_check(shared: bool, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = random_model(tiny_config(3, 8, 3, shared), seed, 0.5);
    let d = random_dialog(&mut rng, 8, 2);
    let q = e_step(&m, &d).unwrap();
    let layout = m.layout.clone();
    let report = grad_check::<_, LstnError>(&mut m.store, GradCheckOptions::default(), |g| {
        m_step_objective(g, &layout, &d, &q)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn m_step_objective_gradients_match_finite_differences() {
    for seed in 0..3 {
        let e = f1_grad_check(false, seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn shared_embeddings_receive_both_gradient_paths() {
    assert!(f1_grad_check(true, 5) < 1e-3);
    // the START row gets transition gradient only; state rows get both
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = random_model(tiny_config(3, 8, 3, true), 6, 0.5);
    let d = random_dialog(&mut rng, 8, 2);
    let q = e_step(&m, &d).unwrap();
    let v = m.store.id("state_v").unwrap();
    let grad_of = |emission_only: bool| {
        let mut g = Graph::new(&m.store);
        let out = if emission_only {
            let e = m.layout.emission_node(&mut g, &d.turns[0].agent).unwrap();
            g.sum_all(e)
        } else {
            m_step_objective(&mut g, &m.layout, &d, &q).unwrap()
        };
        g.backward(out).unwrap().get(v).unwrap().clone()
    };
    let emission = grad_of(true);
    assert!(emission.row(0).iter().any(|x| *x != 0.0));
    assert!(emission.row(3).iter().all(|x| *x == 0.0));
    let full = grad_of(false);
    assert!(full.row(3).iter().any(|x| *x != 0.0));
}

#[test]
fn fisher_identity_at_exact_posterior() {
    // with q computed at the same parameters, grad f_1 = grad log p(y | x)
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut m = random_model(tiny_config(3, 8, 3, false), 31, 0.6);
    let d = random_dialog(&mut rng, 8, 3);
    let q = e_step(&m, &d).unwrap();
    let analytic = {
        let mut g = Graph::new(&m.store);
        let out = m_step_objective(&mut g, &m.layout, &d, &q).unwrap();
        g.backward(out).unwrap()
    };
    let eps = 1e-5;
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let cols = m.store.value(id).ncols();
        for flat in [0usize, 1] {
            let idx = [flat / cols, flat % cols];
            let orig = m.store.value(id)[idx];
            m.store.value_mut(id)[idx] = orig + eps;
            let plus = marginal_loglik(&m, &d).unwrap();
            m.store.value_mut(id)[idx] = orig - eps;
            let minus = marginal_loglik(&m, &d).unwrap();
            m.store.value_mut(id)[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[idx]);
            assert!((a - numeric).abs() < 1e-6 * a.abs().max(1.0), "{}: {a} vs {numeric}", m.store.param(id).name);
        }
    }
}

#[test]
fn stop_gradient_into_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = random_model(tiny_config(3, 8, 3, false), 41, 0.6);
    let d = random_dialog(&mut rng, 8, 2);
    let q = e_step(&m, &d).unwrap();
    let mut q2 = q.clone();
    q2.log_q[0] = ndarray::Array2::from_elem((1, 3), (1.0f64 / 3.0).ln());
    let value = |q: &em::PosteriorTable| {
        let mut g = Graph::new(&m.store);
        let out = m_step_objective(&mut g, &m.layout, &d, q).unwrap();
        (g.scalar(out), g.backward(out).unwrap())
    };
    let (a, ga) = value(&q);
    let (b, gb) = value(&q2);
    assert_ne!(a, b);
    // gradients exist only for model parameters
    assert_eq!(ga.iter().count(), gb.iter().count());
    assert!(ga.iter().count() <= m.store.len());
    let ll = marginal_loglik(&m, &d).unwrap();
    assert!(b + posterior_entropy(&q2) <= ll + 1e-9);
    assert!((a + posterior_entropy(&q) - ll).abs() < 1e-9);
}

fn toy_batch(seed: u64, n: usize) -> Vec<EncodedDialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| {
        let mut d = random_dialog(&mut rng, 10, 1 + i % 3);
        d.id = format!("d{i}");
        d
    }).collect()
}

#[test]
fn generalized_em_ascends_at_small_learning_rate() {
    let batch = toy_batch(51, 6);
    let mut m = random_model(tiny_config(3, 10, 4, false), 51, 0.3);
    let total = |m: &lstn::Lstn| -> f64 { batch.iter().map(|d| marginal_loglik(m, d).unwrap()).sum() };
    let adam = AdamConfig::new(1e-4);
    let mut prev = total(&m);
    for _ in 0..20 {
        em_round(&mut m, &batch, &adam, 1).unwrap();
        let now = total(&m);
        assert!(now >= prev - 1e-6, "{prev} -> {now}");
        prev = now;
    }
}

#[test]
fn training_is_deterministic_and_selects_best_dev() {
    let train = toy_batch(61, 12);
    let dev = toy_batch(62, 4);
    let cfg = TrainConfig {
        num_states: 3,
        embed_dim: 4,
        hidden_dim: 4,
        batch_size: 4,
        epochs: 3,
        allow_off_grid: true,
        ..TrainConfig::default()
    };
    let run = || {
        let m = lstn::Lstn::new(tiny_config(3, 10, 4, false), 0).unwrap();
        em::train_model(m, &train, &dev, &cfg, &mut |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    let strip = |log: &[em::LogRecord]| -> Vec<(usize, usize, u64, u64, u64)> {
        log.iter()
            .map(|r| (r.epoch, r.batch, r.elbo.to_bits(), r.dev_loglik.to_bits(), r.dev_ppl.to_bits()))
            .collect()
    };
    assert_eq!(strip(&a.log), strip(&b.log));
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.log[0].epoch, 0);
    let best = a.log.iter().map(|r| r.dev_ppl).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_dev_ppl, best);
    assert_eq!(a.model, b.model);
    let (ll, tokens) = em::dataset_loglik(&a.model, &dev).unwrap();
    assert!(((-ll / tokens as f64).exp() - best).abs() < 1e-9);
}

#[test]
fn empty_dev_split_is_rejected() {
    let train = toy_batch(71, 2);
    let cfg = TrainConfig {
        num_states: 2,
        embed_dim: 4,
        hidden_dim: 4,
        allow_off_grid: true,
        ..TrainConfig::default()
    };
    let m = lstn::Lstn::new(tiny_config(2, 10, 4, false), 0).unwrap();
    let err = em::train_model(m, &train, &[], &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err.error, LstnError::Argument(_)));
}

#[test]
fn divergence_returns_last_good_model() {
    let train = toy_batch(81, 4);
    let dev = toy_batch(82, 2);
    let cfg = TrainConfig {
        num_states: 2,
        embed_dim: 4,
        hidden_dim: 4,
        epochs: 2,
        batch_size: 2,
        allow_off_grid: true,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    let m = lstn::Lstn::new(tiny_config(2, 10, 4, false), 0).unwrap();
    let err = em::train_model(m, &train, &dev, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err.error, LstnError::Diverged { .. }), "{}", err.error);
    assert!(err.last_good.is_some());
}
