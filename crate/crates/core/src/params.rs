//! Named parameter arrays and their gradients.
//!
//! Every learned weight of the model lives in a single [`ParamStore`] as a
//! row-major matrix (vectors are `n x 1`). Submodules hold [`ParamId`]s into
//! the store, so the whole model can be checkpointed, perturbed for gradient
//! checks, or updated by the optimizer as one flat collection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub enum Init {
    Zeros,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, fan-in taken as `cols`
    /// for matrices and `rows` for vectors.
    FanIn,
    Uniform(f64),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn => {
                let fan_in = if cols == 1 { rows } else { cols };
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        };
        self.params.push(Param {
            name,
            rows,
            cols,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// Rebuilds a store from arrays in registration order.
    pub fn from_params(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|x| x.is_finite()))
    }

    /// `name=norm` pairs, used in divergence diagnostics.
    pub fn norm_summary(&self) -> String {
        self.params
            .iter()
            .map(|p| {
                let n = p.data.iter().map(|x| x * x).sum::<f64>().sqrt();
                format!("{}={:.4e}", p.name, n)
            })
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Dense gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn from_buffers(grads: Vec<Vec<f64>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_of(&self, id: ParamId) -> f64 {
        self.grads[id.0].iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }

    pub fn dot(&self, other: &Gradients) -> f64 {
        self.grads
            .iter()
            .flatten()
            .zip(other.grads.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }
}
