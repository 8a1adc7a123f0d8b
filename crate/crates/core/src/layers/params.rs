use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
///
/// Names are derived from the layer layout, so two sets built from the same
/// configuration have identical names in identical order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut dyn RngCore,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))?;
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Flat copy of every value in registration order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Registers every parameter as a gradient-tracking leaf of `graph`; the
    /// returned vector is indexed by [`ParamId::index`].
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t.clone())).collect()
    }

    /// Replaces all values; names and shapes must match exactly.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "parameter shape {:?} does not match {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Everything a layer needs during one forward pass: the graph being
/// recorded, the graph nodes standing in for each parameter, the mode, and
/// the caller-supplied dropout RNG.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    params: &'a [Var],
    train: bool,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Ctx<'a> {
    /// Evaluation mode: dropout is the identity.
    pub fn eval(graph: &'a mut Graph, params: &'a [Var]) -> Self {
        Ctx {
            graph,
            params,
            train: false,
            rng: None,
        }
    }

    pub fn train(graph: &'a mut Graph, params: &'a [Var], rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            graph,
            params,
            train: true,
            rng: Some(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub(crate) fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match &mut self.rng {
            Some(r) => Some(&mut **r),
            None => None,
        }
    }

    /// `[rows, 1]` column of ones, used to broadcast a `[1, n]` row explicitly.
    pub fn ones_col(&mut self, rows: usize) -> Var {
        self.graph
            .constant(Tensor::full(&[rows, 1], 1.0).expect("rows > 0"))
    }

    /// `x + bias` for `x: [m, n]` and a rank-1 `[n]` bias.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = match *self.graph.shape(x) {
            [m, n] => (m, n),
            ref s => return Err(Error::dim(format!("bias add expects rank 2, got {s:?}"))),
        };
        let b = self.graph.reshape(bias, &[1, n])?;
        if m == 1 {
            return self.graph.add(x, b);
        }
        let ones = self.ones_col(m);
        let tiled = self.graph.matmul(ones, b)?;
        self.graph.add(x, tiled)
    }
}
