//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations against a read-only [`ParamStore`]. Every
//! value is a 2-D matrix whose rows act as a batch dimension, which lets the
//! model run one recurrent step for many latent states at once. Calling
//! [`Graph::backward`] on a `1 x 1` node yields [`Gradients`] keyed by
//! parameter, which a coordinator accumulates into the store before an
//! [`adam_update`].
//!
//! ```
//! use diffcore::{Graph, ParamStore};
//! use ndarray::array;
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", array![[3.0]]).unwrap();
//! let mut g = Graph::new(&store);
//! let x = g.param(w);
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.scalar(y), 9.0);
//! assert_eq!(grads.get(w).unwrap()[[0, 0]], 6.0);
//! ```

mod adam;
mod checkpoint;
mod error;
mod gradcheck;
mod graph;
mod lstm;
mod numeric;
mod store;

pub use adam::{adam_update, AdamConfig};
pub use checkpoint::{Checkpoint, ParamRecord, CHECKPOINT_FORMAT_VERSION};
pub use error::DiffError;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Node};
pub use lstm::{recurrent_step, LstmCell, LstmState};
pub use numeric::{log_softmax_vec, log_sum_exp};
pub use store::{Gradients, Param, ParamId, ParamStore, INIT_SCALE};

/// Dense row-major matrix used for every value in the graph.
pub type Matrix = ndarray::Array2<f64>;
