#![allow(dead_code)]

use lstn::corpus::{EncodedDialog, EncodedTurn, TokenId, BOS, EOS, PAD};
use lstn::{Lstn, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small model over a `vocab_size` vocabulary where only PAD and BOS are
/// never emitted.
pub fn tiny_config(k: usize, vocab_size: usize, dim: usize, shared: bool) -> ModelConfig {
    ModelConfig {
        num_states: k,
        vocab_size,
        embed_dim: dim,
        encoder_hidden: dim,
        state_dim: dim,
        shared_state_embeddings: shared,
        bos_id: BOS,
        eos_id: EOS,
        non_emittable: vec![PAD, BOS],
        max_response_len: 10,
        vocab_hash: "test".into(),
    }
}

/// Model with weights drawn uniformly from `[-scale, scale]`.
pub fn random_model(cfg: ModelConfig, seed: u64, scale: f64) -> Lstn {
    let mut m = Lstn::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store
            .value_mut(id)
            .mapv_inplace(|_| rng.random_range(-scale..scale));
    }
    m
}

pub fn zero_param(m: &mut Lstn, name: &str) {
    let id = m.store.id(name).unwrap();
    m.store.value_mut(id).fill(0.0);
}

/// Random dialog: user tokens from the whole vocabulary above the reserved
/// ids, responses from emittable words, each ending in EOS.
pub fn random_dialog(rng: &mut ChaCha8Rng, vocab_size: usize, turns: usize) -> EncodedDialog {
    let word = |rng: &mut ChaCha8Rng| rng.random_range(4..vocab_size as TokenId);
    EncodedDialog {
        id: "r".into(),
        turns: (0..turns)
            .map(|_| {
                let ul = rng.random_range(1..4);
                let al = rng.random_range(1..4);
                let user = (0..ul).map(|_| word(rng)).collect();
                let mut agent: Vec<TokenId> = (0..al).map(|_| word(rng)).collect();
                agent.push(EOS);
                EncodedTurn { user, agent }
            })
            .collect(),
    }
}

pub fn all_sequences(k: usize, n: usize) -> Vec<Vec<usize>> {
    (0..k.pow(n as u32))
        .map(|mut c| {
            (0..n)
                .map(|_| {
                    let z = c % k;
                    c /= k;
                    z
                })
                .collect()
        })
        .collect()
}

pub fn lse(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
