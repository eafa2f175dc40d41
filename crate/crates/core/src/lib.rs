//! Latent state tracking network: a dialog model whose whole conversation
//! context is one discrete latent state per turn.
//!
//! The joint over responses `y`, user utterances `x` and states `z` is
//! `p(y, z | x) = Π_i p(z_i | z_{i-1}, x_i) p(y_i | z_i)`. Training uses EM
//! with the exact posterior over state chains ([`em`]); [`inference`] tracks
//! the state from user utterances alone and answers from a per-state
//! response cache.

pub mod baseline;
pub mod corpus;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod interpret;
pub mod model;
pub mod synth;

pub use error::{LstnError, Result};
pub use model::{Lstn, ModelConfig, StateRef};
