use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

use super::params::Ctx;

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
/// evaluation mode returns `x` itself.
pub fn dropout(cx: &mut Ctx, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !cx.is_train() || rate == 0.0 {
        return Ok(x);
    }
    let shape = cx.graph.shape(x).to_vec();
    let keep = 1.0 / (1.0 - rate);
    let rng = cx
        .rng()
        .ok_or_else(|| Error::contract("training-mode dropout needs an RNG"))?;
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })?;
    let mask = cx.graph.constant(mask);
    cx.graph.mul(x, mask)
}
