use std::collections::HashMap;

use ndarray::{s, Axis};

use crate::error::{shape_err, DiffError};
use crate::store::{Gradients, ParamId, ParamStore};
use crate::Matrix;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Node(usize);

enum Op {
    Constant,
    Param(ParamId),
    Affine { x: Node, w: Node, b: Node },
    Add(Node, Node),
    AddRow { x: Node, row: Node },
    Mul(Node, Node),
    MulConst(Node, Matrix),
    Scale(Node, f64),
    Sigmoid(Node),
    Tanh(Node),
    ConcatCols(Vec<Node>),
    SliceCols { x: Node, start: usize },
    RepeatRows(Node),
    GatherRows { table: Node, rows: Vec<usize> },
    LogSoftmax(Node),
    LogSumExp(Node),
    Pick { x: Node, cols: Vec<usize> },
    SumCols(Node),
    SumAll(Node),
    Transpose(Node),
}

struct Entry {
    // Empty for parameter leaves; their value lives in the store.
    value: Matrix,
    op: Op,
}

/// A tape of matrix operations over a borrowed [`ParamStore`].
pub struct Graph<'s> {
    store: &'s ParamStore,
    entries: Vec<Entry>,
    param_nodes: HashMap<ParamId, Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            entries: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Node {
        self.entries.push(Entry { value, op });
        Node(self.entries.len() - 1)
    }

    pub fn value(&self, node: Node) -> &Matrix {
        let e = &self.entries[node.0];
        match e.op {
            Op::Param(id) => self.store.value(id),
            _ => &e.value,
        }
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, node: Node) -> f64 {
        self.value(node)[[0, 0]]
    }

    pub fn shape(&self, node: Node) -> (usize, usize) {
        self.value(node).dim()
    }

    pub fn constant(&mut self, value: Matrix) -> Node {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Node {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Matrix::zeros((0, 0)), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Node, DiffError> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// `x · wᵀ + b` applied to every row of `x`; `w` is `out x in`, `b` is `1 x out`.
    pub fn affine(&mut self, x: Node, w: Node, b: Node) -> Result<Node, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.ncols() != wv.ncols() {
            return Err(shape_err(
                "affine",
                format!("input {:?} vs weight {:?}", xv.dim(), wv.dim()),
            ));
        }
        if bv.dim() != (1, wv.nrows()) {
            return Err(shape_err(
                "affine",
                format!("bias {:?} vs weight {:?}", bv.dim(), wv.dim()),
            ));
        }
        let out = xv.dot(&wv.t()) + bv;
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("add", format!("{:?} vs {:?}", av.dim(), bv.dim())));
        }
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Node, row: Node) -> Result<Node, DiffError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != xv.ncols() {
            return Err(shape_err("add_row", format!("{:?} vs {:?}", xv.dim(), rv.dim())));
        }
        let out = xv + rv;
        Ok(self.push(out, Op::AddRow { x, row }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", av.dim(), bv.dim())));
        }
        let out = av * bv;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant matrix; no gradient reaches the constant.
    pub fn mul_const(&mut self, a: Node, c: Matrix) -> Result<Node, DiffError> {
        let av = self.value(a);
        if av.dim() != c.dim() {
            return Err(shape_err("mul_const", format!("{:?} vs {:?}", av.dim(), c.dim())));
        }
        let out = av * &c;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Node, factor: f64) -> Node {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Node) -> Node {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Node) -> Node {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Node]) -> Result<Node, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Argument {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| shape_err("concat_cols", e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Node, start: usize, len: usize) -> Result<Node, DiffError> {
        let xv = self.value(x);
        if start + len > xv.ncols() {
            return Err(shape_err(
                "slice_cols",
                format!("{}..{} of {} columns", start, start + len, xv.ncols()),
            ));
        }
        let out = xv.slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// Stacks `n` copies of a single-row node.
    pub fn repeat_rows(&mut self, x: Node, n: usize) -> Result<Node, DiffError> {
        let xv = self.value(x);
        if xv.nrows() != 1 {
            return Err(shape_err("repeat_rows", format!("expected one row, got {:?}", xv.dim())));
        }
        let out = xv
            .broadcast((n, xv.ncols()))
            .expect("single row broadcasts")
            .to_owned();
        Ok(self.push(out, Op::RepeatRows(x)))
    }

    /// Selects rows of `table`; backward scatters into the selected rows only.
    pub fn gather_rows(&mut self, table: Node, rows: &[usize]) -> Result<Node, DiffError> {
        let tv = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= tv.nrows()) {
            return Err(DiffError::Range {
                what: "gather_rows",
                index: bad,
                len: tv.nrows(),
            });
        }
        let out = tv.select(Axis(0), rows);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Single-row embedding lookup.
    pub fn embedding_lookup(&mut self, table: Node, index: usize) -> Result<Node, DiffError> {
        self.gather_rows(table, &[index])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Node) -> Result<Node, DiffError> {
        let xv = self.value(x);
        if xv.ncols() == 0 {
            return Err(DiffError::Argument {
                op: "log_softmax",
                detail: "empty logits".into(),
            });
        }
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Row-wise log-sum-exp, producing an `r x 1` column.
    pub fn log_sum_exp(&mut self, x: Node) -> Result<Node, DiffError> {
        let xv = self.value(x);
        if xv.ncols() == 0 {
            return Err(DiffError::Argument {
                op: "log_sum_exp",
                detail: "empty input".into(),
            });
        }
        let col: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| crate::numeric::log_sum_exp(&r.to_vec()))
            .collect();
        let out = Matrix::from_shape_vec((col.len(), 1), col).expect("column shape");
        Ok(self.push(out, Op::LogSumExp(x)))
    }

    /// `out[r] = x[r, cols[r]]`, an `r x 1` column.
    pub fn pick(&mut self, x: Node, cols: &[usize]) -> Result<Node, DiffError> {
        let xv = self.value(x);
        if cols.len() != xv.nrows() {
            return Err(shape_err(
                "pick",
                format!("{} indices for {} rows", cols.len(), xv.nrows()),
            ));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.ncols()) {
            return Err(DiffError::Range {
                what: "pick",
                index: bad,
                len: xv.ncols(),
            });
        }
        let vals: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| xv[[r, c]]).collect();
        let out = Matrix::from_shape_vec((vals.len(), 1), vals).expect("column shape");
        Ok(self.push(
            out,
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Sum over columns of each row, an `r x 1` column.
    pub fn sum_cols(&mut self, x: Node) -> Node {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(x))
    }

    pub fn sum_all(&mut self, x: Node) -> Node {
        let out = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn transpose(&mut self, x: Node) -> Node {
        let out = self.value(x).t().to_owned();
        self.push(out, Op::Transpose(x))
    }

    /// Reverse pass from a `1 x 1` output with unit seed.
    pub fn backward(&self, output: Node) -> Result<Gradients, DiffError> {
        self.backward_scaled(output, 1.0)
    }

    /// Reverse pass from a `1 x 1` output seeded with `seed`.
    pub fn backward_scaled(&self, output: Node, seed: f64) -> Result<Gradients, DiffError> {
        if self.shape(output) != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("output must be 1x1, got {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::from_elem((1, 1), seed));
        let mut params = Gradients::new(self.store.len());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let entry = &self.entries[idx];
            match &entry.op {
                Op::Constant => {}
                Op::Param(id) => {
                    *params.entry(*id, g.dim()) += &g;
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    add_grad(&mut grads, *x, g.dot(wv));
                    add_grad(&mut grads, *w, g.t().dot(xv));
                    add_grad(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::AddRow { x, row } => {
                    add_grad(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    add_grad(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::MulConst(a, c) => add_grad(&mut grads, *a, &g * c),
                Op::Scale(a, f) => add_grad(&mut grads, *a, g * *f),
                Op::Sigmoid(a) => {
                    let y = &entry.value;
                    let d = &g * &y.mapv(|v| v * (1.0 - v));
                    add_grad(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = &entry.value;
                    let d = &g * &y.mapv(|v| 1.0 - v * v);
                    add_grad(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        add_grad(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut d = Matrix::zeros(self.shape(*x));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    add_grad(&mut grads, *x, d);
                }
                Op::RepeatRows(x) => {
                    add_grad(&mut grads, *x, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::GatherRows { table, rows } => {
                    let shape = self.shape(*table);
                    let d = grads[table.0].get_or_insert_with(|| Matrix::zeros(shape));
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(k);
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = &entry.value;
                    let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &g - &(y.mapv(f64::exp) * &row_sums);
                    add_grad(&mut grads, *x, d);
                }
                Op::LogSumExp(x) => {
                    let xv = self.value(*x);
                    let lse = &entry.value;
                    let d = (xv - lse).mapv(f64::exp) * &g;
                    add_grad(&mut grads, *x, d);
                }
                Op::Pick { x, cols } => {
                    let shape = self.shape(*x);
                    let d = grads[x.0].get_or_insert_with(|| Matrix::zeros(shape));
                    for (r, &c) in cols.iter().enumerate() {
                        d[[r, c]] += g[[r, 0]];
                    }
                }
                Op::SumCols(x) => {
                    let shape = self.shape(*x);
                    let d = g.broadcast(shape).expect("column broadcast").to_owned();
                    add_grad(&mut grads, *x, d);
                }
                Op::SumAll(x) => {
                    let d = Matrix::from_elem(self.shape(*x), g[[0, 0]]);
                    add_grad(&mut grads, *x, d);
                }
                Op::Transpose(x) => add_grad(&mut grads, *x, g.t().to_owned()),
            }
        }
        Ok(params)
    }
}

fn add_grad(grads: &mut [Option<Matrix>], node: Node, delta: Matrix) {
    match &mut grads[node.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
