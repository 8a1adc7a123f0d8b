use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

use super::params::{Ctx, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Sigmoid,
    Tanh,
}

/// Fully connected layer, `y = act(x Wᵀ + b)` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let weight =
            params.add_uniform(format!("{prefix}.weight"), &[out_dim, in_dim], in_dim, rng)?;
        let bias = params.add_zeros(format!("{prefix}.bias"), &[out_dim])?;
        Ok(DenseLayer {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    /// `x: [m, in] -> [m, out]`
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match *cx.graph.shape(x) {
            [_, d] if d == self.in_dim => {}
            ref s => {
                return Err(Error::dim(format!(
                    "dense layer expects [m, {}], got {s:?}",
                    self.in_dim
                )))
            }
        }
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        let wt = cx.graph.transpose(w)?;
        let xw = cx.graph.matmul(x, wt)?;
        let y = cx.add_row_bias(xw, b)?;
        Ok(match self.activation {
            Activation::None => y,
            Activation::Sigmoid => cx.graph.sigmoid(y),
            Activation::Tanh => cx.graph.tanh(y),
        })
    }
}
