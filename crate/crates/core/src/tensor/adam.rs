use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam moment estimates with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// First-moment buffer of the `i`-th parameter, if any step has run.
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.second.get(i).map(Vec::as_slice)
    }
}

/// One Adam update of every trainable parameter, then clears the gradients.
///
/// Fails without modifying anything if a trainable parameter has no gradient.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::invalid(format!(
            "adam state tracks {} parameters, store has {}",
            state.first.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad.take() else { continue };
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
