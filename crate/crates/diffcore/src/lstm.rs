use rand::Rng;

use crate::error::{shape_err, DiffError};
use crate::graph::{Graph, Node};
use crate::store::{ParamId, ParamStore};

/// Weights of a single-layer LSTM cell stored as `<name>.w` (`4H x (I+H)`)
/// and `<name>.b` (`1 x 4H`). Gate blocks are ordered input, forget,
/// candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// Hidden and cell state for a batch of rows.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Node,
    pub cell: Node,
}

impl LstmCell {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let weight = store.add_uniform(
            format!("{name}.w"),
            4 * hidden_dim,
            input_dim + hidden_dim,
            scale,
            rng,
        )?;
        let bias = store.add_uniform(format!("{name}.b"), 1, 4 * hidden_dim, scale, rng)?;
        Ok(Self {
            weight,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    /// Resolves a cell previously registered under `name`.
    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self, DiffError> {
        let weight = store.id(&format!("{name}.w"))?;
        let bias = store.id(&format!("{name}.b"))?;
        let (rows, cols) = store.value(weight).dim();
        if rows % 4 != 0 || cols < rows / 4 {
            return Err(shape_err("lstm", format!("weight shape {:?}", (rows, cols))));
        }
        let hidden_dim = rows / 4;
        Ok(Self {
            weight,
            bias,
            input_dim: cols - hidden_dim,
            hidden_dim,
        })
    }

    /// Zero hidden and cell state for `rows` sequences.
    pub fn zero_state(&self, g: &mut Graph<'_>, rows: usize) -> LstmState {
        let hidden = g.constant(crate::Matrix::zeros((rows, self.hidden_dim)));
        let cell = g.constant(crate::Matrix::zeros((rows, self.hidden_dim)));
        LstmState { hidden, cell }
    }
}

/// One LSTM step for every row of `input` (`rows x I`) and `prev` (`rows x H`).
pub fn recurrent_step(
    g: &mut Graph<'_>,
    cell: &LstmCell,
    prev: LstmState,
    input: Node,
) -> Result<LstmState, DiffError> {
    let h = cell.hidden_dim;
    let (in_rows, in_cols) = g.shape(input);
    let (h_rows, h_cols) = g.shape(prev.hidden);
    if in_cols != cell.input_dim || h_cols != h || in_rows != h_rows || g.shape(prev.cell) != (h_rows, h) {
        return Err(shape_err(
            "recurrent_step",
            format!(
                "input {:?}, hidden {:?}, cell expects input {} hidden {}",
                (in_rows, in_cols),
                (h_rows, h_cols),
                cell.input_dim,
                h
            ),
        ));
    }
    let joined = g.concat_cols(&[input, prev.hidden])?;
    let (w, b) = (g.param(cell.weight), g.param(cell.bias));
    let pre = g.affine(joined, w, b)?;
    let i_pre = g.slice_cols(pre, 0, h)?;
    let f_pre = g.slice_cols(pre, h, h)?;
    let c_pre = g.slice_cols(pre, 2 * h, h)?;
    let o_pre = g.slice_cols(pre, 3 * h, h)?;
    let input_gate = g.sigmoid(i_pre);
    let forget_gate = g.sigmoid(f_pre);
    let candidate = g.tanh(c_pre);
    let output_gate = g.sigmoid(o_pre);
    let kept = g.mul(forget_gate, prev.cell)?;
    let written = g.mul(input_gate, candidate)?;
    let new_cell = g.add(kept, written)?;
    let squashed = g.tanh(new_cell);
    let new_hidden = g.mul(output_gate, squashed)?;
    Ok(LstmState {
        hidden: new_hidden,
        cell: new_cell,
    })
}
