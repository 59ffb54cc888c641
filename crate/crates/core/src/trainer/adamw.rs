use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update. Every parameter needs a gradient of the same shape.
/// Nothing is modified if any gradient is missing, mis-shaped or non-finite.
pub fn adamw_step<'p>(
    params: impl IntoIterator<Item = (String, &'p mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    h: &AdamHyper,
) -> Result<()> {
    let params: Vec<(String, &mut Tensor)> = params.into_iter().collect();
    for (name, p) in &params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::NonFiniteGradient(format!("{name}: no gradient")))?;
        if g.shape() != p.shape() {
            return Err(Error::Tensor(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (name, p) in params {
        let g = &grads[&name];
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *pi -= h.lr * h.weight_decay * *pi;
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}
