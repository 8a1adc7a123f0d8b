use crate::error::{Error, Result};
use crate::layers::ParamSet;

use super::Hyperparams;

/// First and second moment estimates for every parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamSet,
    grads: &[&[f64]],
    hp: &Hyperparams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (g, t)) in grads.iter().zip(params.tensors()).enumerate() {
        if g.len() != t.numel() {
            return Err(Error::contract(format!(
                "gradient for {} has {} values, expected {}",
                params.iter().nth(i).map(|p| p.0).unwrap_or("?"),
                g.len(),
                t.numel()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            let name = params.iter().nth(i).map(|p| p.0).unwrap_or("?");
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.adam_eps);
        }
    }
    Ok(())
}
