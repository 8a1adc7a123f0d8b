use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::Var;

use super::params::{Ctx, ParamId, ParamSet};

/// Gated recurrent unit with the reset gate applied inside the candidate.
///
/// Rows are multiplied on the left, so input weights are stored `[in, hidden]`
/// and recurrent weights `[hidden, hidden]`:
///
/// ```text
/// z  = sigmoid(x W_z + b_z + h U_z)
/// r  = sigmoid(x W_r + b_r + h U_r)
/// h~ = tanh(x W_h + b_h + (r * h) U_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruLayer {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let (i, h) = (input_dim, hidden_dim);
        let mut w = |g: &str| params.add_uniform(format!("{prefix}.w_{g}"), &[i, h], i, rng);
        let (w_z, w_r, w_h) = (w("z")?, w("r")?, w("h")?);
        let mut u = |g: &str| params.add_uniform(format!("{prefix}.u_{g}"), &[h, h], h, rng);
        let (u_z, u_r, u_h) = (u("z")?, u("r")?, u("h")?);
        let mut b = |g: &str| params.add_zeros(format!("{prefix}.b_{g}"), &[h]);
        let (b_z, b_r, b_h) = (b("z")?, b("r")?, b("h")?);
        Ok(GruLayer {
            input_dim,
            hidden_dim,
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        })
    }

    /// One recurrence step: `x_t: [1, in]`, `h_prev: [1, hidden]`.
    pub fn step(&self, cx: &mut Ctx, x_t: Var, h_prev: Var) -> Result<Var> {
        self.check_input(cx, x_t, Some(1))?;
        self.check_hidden(cx, h_prev)?;
        let [pz, pr, ph] = self.project(cx, x_t)?;
        self.cell(cx, pz, pr, ph, h_prev)
    }

    /// Runs the whole sequence `xs: [T, in]` from `h0` (zeros if `None`) and
    /// returns every hidden state as `[T, hidden]`.
    pub fn sequence(&self, cx: &mut Ctx, xs: Var, h0: Option<Var>) -> Result<Var> {
        let steps = self.check_input(cx, xs, None)?;
        let mut h = match h0 {
            Some(h) => {
                self.check_hidden(cx, h)?;
                h
            }
            None => cx.graph.constant(crate::Tensor::zeros(&[1, self.hidden_dim])?),
        };
        // Input projections for all timesteps at once.
        let [pz, pr, ph] = self.project(cx, xs)?;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let rz = cx.graph.row(pz, t)?;
            let rr = cx.graph.row(pr, t)?;
            let rh = cx.graph.row(ph, t)?;
            h = self.cell(cx, rz, rr, rh, h)?;
            states.push(h);
        }
        cx.graph.concat(&states, 0)
    }

    fn project(&self, cx: &mut Ctx, xs: Var) -> Result<[Var; 3]> {
        let mut out = [xs; 3];
        for (slot, (w, b)) in out
            .iter_mut()
            .zip([(self.w_z, self.b_z), (self.w_r, self.b_r), (self.w_h, self.b_h)])
        {
            let xw = cx.graph.matmul(xs, cx.p(w))?;
            *slot = cx.add_row_bias(xw, cx.p(b))?;
        }
        Ok(out)
    }

    fn cell(&self, cx: &mut Ctx, pz: Var, pr: Var, ph: Var, h: Var) -> Result<Var> {
        let (u_z, u_r, u_h) = (cx.p(self.u_z), cx.p(self.u_r), cx.p(self.u_h));
        let g = &mut *cx.graph;
        let hz = g.matmul(h, u_z)?;
        let z = g.add(pz, hz)?;
        let z = g.sigmoid(z);
        let hr = g.matmul(h, u_r)?;
        let r = g.add(pr, hr)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let rhu = g.matmul(rh, u_h)?;
        let cand = g.add(ph, rhu)?;
        let cand = g.tanh(cand);
        let one = g.scalar(1.0);
        let keep = g.sub(one, z)?;
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }

    fn check_input(&self, cx: &Ctx, x: Var, rows: Option<usize>) -> Result<usize> {
        match *cx.graph.shape(x) {
            [t, d] if d == self.input_dim && rows.is_none_or(|r| r == t) => Ok(t),
            ref s => Err(Error::dim(format!(
                "GRU expects input rows of width {}, got {s:?}",
                self.input_dim
            ))),
        }
    }

    fn check_hidden(&self, cx: &Ctx, h: Var) -> Result<()> {
        if cx.graph.shape(h) != [1, self.hidden_dim] {
            return Err(Error::dim(format!(
                "GRU hidden state must be [1, {}], got {:?}",
                self.hidden_dim,
                cx.graph.shape(h)
            )));
        }
        Ok(())
    }
}
