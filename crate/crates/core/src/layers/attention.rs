use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::Var;

use super::dropout::dropout;
use super::params::{Ctx, ParamId, ParamSet};

/// Bilinear attention that summarizes a sequence of states against its last
/// state.
///
/// With `h_e` the last row of `hs` and `h_s` each row:
/// `score_s = h_e W_s h_sᵀ`, `alpha = softmax(score)`,
/// `h_c = sum_s alpha_s h_s`, output `tanh(W_c [h_c; h_e])`, followed by
/// dropout in training mode.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub dim: usize,
    /// `[dim, dim]`
    pub w_s: ParamId,
    /// `[dim, 2 * dim]`, maps the concatenated context and query back to `dim`.
    pub w_c: ParamId,
    pub dropout_rate: f64,
}

/// Output row `[1, dim]` plus the attention weights `[1, T]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl AttentionBlock {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        dropout_rate: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::contract(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let w_s = params.add_uniform(format!("{prefix}.w_s"), &[dim, dim], dim, rng)?;
        let w_c = params.add_uniform(format!("{prefix}.w_c"), &[dim, 2 * dim], 2 * dim, rng)?;
        Ok(AttentionBlock {
            dim,
            w_s,
            w_c,
            dropout_rate,
        })
    }

    pub fn attend(&self, cx: &mut Ctx, hs: Var) -> Result<Attended> {
        let steps = match *cx.graph.shape(hs) {
            [t, d] if d == self.dim => t,
            ref s => {
                return Err(Error::dim(format!(
                    "attention expects [T, {}] states, got {s:?}",
                    self.dim
                )))
            }
        };
        let (w_s, w_c) = (cx.p(self.w_s), cx.p(self.w_c));
        let g = &mut *cx.graph;
        let query = g.row(hs, steps - 1)?;
        let qw = g.matmul(query, w_s)?;
        let hs_t = g.transpose(hs)?;
        let scores = g.matmul(qw, hs_t)?;
        let weights = g.softmax(scores)?;
        let context = g.matmul(weights, hs)?;
        let joined = g.concat(&[context, query], 1)?;
        let w_c_t = g.transpose(w_c)?;
        let projected = g.matmul(joined, w_c_t)?;
        let output = g.tanh(projected);
        let output = dropout(cx, output, self.dropout_rate)?;
        Ok(Attended { output, weights })
    }
}
