use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Matrix;
use super::AutodiffError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub(crate) name: String,
    pub(crate) value: Matrix,
    pub(crate) grad: Matrix,
    pub(crate) first_moment: Matrix,
    pub(crate) second_moment: Matrix,
    pub(crate) trainable: bool,
}

/// Named, seeded collection of learnable matrices together with their
/// gradient accumulators and optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    rng: ChaCha8Rng,
    pub(crate) params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            by_name: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of optimizer steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register a parameter with an explicit initial value.
    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<ParamId, AutodiffError> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let dim = value.dim();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(dim),
            first_moment: Matrix::zeros(dim),
            second_moment: Matrix::zeros(dim),
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform in `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
    pub fn glorot(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, AutodiffError> {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        self.uniform(name, rows, cols, bound)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
    ) -> Result<ParamId, AutodiffError> {
        let rng = &mut self.rng;
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.insert(name, value)
    }

    pub fn filled(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> Result<ParamId, AutodiffError> {
        self.insert(name, Matrix::from_elem((rows, cols), fill))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
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

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Parameter ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Matrix) {
        self.params[id.0].grad += g;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Values keyed by name, sorted.
    pub fn snapshot(&self) -> BTreeMap<String, Matrix> {
        self.by_name
            .iter()
            .map(|(name, id)| (name.clone(), self.params[id.0].value.clone()))
            .collect()
    }

    /// Overwrite every parameter from `values`. Names and shapes must match
    /// exactly; optimizer moments are reset.
    pub fn load_values(&mut self, values: &BTreeMap<String, Matrix>) -> Result<(), AutodiffError> {
        for name in values.keys() {
            if !self.by_name.contains_key(name) {
                return Err(AutodiffError::UnknownParam(name.clone()));
            }
        }
        for (name, id) in &self.by_name {
            let value = values
                .get(name)
                .ok_or_else(|| AutodiffError::MissingParam(name.clone()))?;
            let p = &mut self.params[id.0];
            if value.dim() != p.value.dim() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.dim(),
                    rhs: value.dim(),
                });
            }
            p.value.assign(value);
            p.first_moment.fill(0.0);
            p.second_moment.fill(0.0);
            p.grad.fill(0.0);
        }
        self.step = 0;
        Ok(())
    }
}
