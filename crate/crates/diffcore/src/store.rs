use std::collections::HashMap;

use rand::Rng;

use crate::error::DiffError;
use crate::Matrix;

/// Half-width of the uniform initializer.
pub const INIT_SCALE: f64 = 0.08;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable matrix with its gradient and Adam moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub m: Matrix,
    pub v: Matrix,
    /// Frozen parameters still receive gradients but are skipped by Adam.
    pub frozen: bool,
}

impl Param {
    fn new(name: String, value: Matrix) -> Self {
        let zeros = Matrix::zeros(value.raw_dim());
        Self {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            frozen: false,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Registry of named parameters plus the optimizer step counter.
///
/// Single-writer: graphs borrow the store immutably while they are alive, and
/// gradient accumulation and updates happen afterwards on the owner.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    names: HashMap<String, ParamId>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.names.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    /// Registers a parameter drawn uniformly from `[-scale, scale]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<ParamId, DiffError> {
        let value = Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..=scale));
        self.add(name, value)
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Adds a gradient set into the store's gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), DiffError> {
        if grads.grads.len() > self.params.len() {
            return Err(DiffError::Argument {
                op: "accumulate",
                detail: format!(
                    "gradient set covers {} parameters, store has {}",
                    grads.grads.len(),
                    self.params.len()
                ),
            });
        }
        for (param, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                if g.dim() != param.grad.dim() {
                    return Err(crate::error::shape_err(
                        "accumulate",
                        format!("{}: {:?} vs {:?}", param.name, g.dim(), param.grad.dim()),
                    ));
                }
                param.grad += g;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|x| x.is_finite()))
    }
}

/// Sparse-by-parameter gradient set produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn entry(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(shape))
    }

    /// Adds `other` into `self`.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => *a += b,
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0, |acc, x| acc.max(x.abs()))
    }
}
