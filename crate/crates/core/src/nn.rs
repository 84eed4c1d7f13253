//! Parameter storage and the small set of layers the model is built from.

use std::collections::HashMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Matrix;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|m| g.param(m.clone())).collect())
    }

    /// Places every parameter on `g` as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|m| g.constant(m.clone())).collect())
    }
}

/// Graph handles for every parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Source of initial parameter values.
#[derive(Debug)]
pub enum Init {
    /// All weights and biases zero.
    Zeros,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    Uniform(ChaCha8Rng),
}

impl Init {
    pub fn uniform(seed: u64) -> Self {
        Self::Uniform(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        match self {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Uniform(rng) => {
                let k = 1.0 / (fan_in.max(1) as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.random_range(-k..k)).collect();
                Matrix::from_vec(rows, cols, data)
            }
        }
    }
}

/// `y = x W + b`, with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: &mut Init,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), init.matrix(input, output, input));
        let b = store.insert(format!("{name}.b"), init.matrix(1, output, input));
        Self {
            w,
            b: Some(b),
            input,
            output,
        }
    }

    /// Weight-only map.
    pub fn new_no_bias(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: &mut Init,
    ) -> Self {
        let w = store.insert(format!("{name}.w"), init.matrix(input, output, input));
        Self {
            w,
            b: None,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        match self.b {
            Some(b) => g.add_bias(y, p[b]),
            None => y,
        }
    }
}

/// Three affine layers `in -> hidden -> hidden/2 -> out` with rectifiers between.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        init: &mut Init,
    ) -> Self {
        let h2 = (hidden / 2).max(1);
        Self {
            layers: [
                Linear::new(store, &format!("{name}.l1"), input, hidden, init),
                Linear::new(store, &format!("{name}.l2"), hidden, h2, init),
                Linear::new(store, &format!("{name}.l3"), h2, output, init),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let a = self.layers[0].forward(g, p, x);
        let a = g.relu(a);
        let a = self.layers[1].forward(g, p, a);
        let a = g.relu(a);
        self.layers[2].forward(g, p, a)
    }
}

/// Gated recurrent unit cell; see [`Graph::gru_cell`] for the equations.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wi: ParamId,
    pub wh: ParamId,
    pub bi: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        init: &mut Init,
    ) -> Self {
        Self {
            wi: store.insert(format!("{name}.wi"), init.matrix(input, 3 * hidden, hidden)),
            wh: store.insert(format!("{name}.wh"), init.matrix(hidden, 3 * hidden, hidden)),
            bi: store.insert(format!("{name}.bi"), init.matrix(1, 3 * hidden, hidden)),
            bh: store.insert(format!("{name}.bh"), init.matrix(1, 3 * hidden, hidden)),
            input,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Var {
        g.gru_cell(x, h, p[self.wi], p[self.wh], p[self.bi], p[self.bh])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_lookup_by_name() {
        let mut store = ParamStore::new();
        let mut init = Init::uniform(0);
        let lin = Linear::new(&mut store, "enc", 3, 2, &mut init);
        assert_eq!(store.name(lin.w), "enc.w");
        assert_eq!(store.by_name("enc.b").unwrap().shape(), (1, 2));
        assert_eq!(store.num_scalars(), 8);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Matrix::zeros(1, 1));
        store.insert("a", Matrix::zeros(1, 1));
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp3::new(&mut store, "m", 4, 8, 3, &mut Init::Zeros);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Matrix::filled(2, 4, 1.5));
        let y = mlp.forward(&mut g, &p, x);
        assert_eq!(g.value(y), &Matrix::zeros(2, 3));
    }
}
