//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one tensor per parameter tensor in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
    /// completed updates
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros: Vec<DenseMatrix> = params.tensors().iter().map(|t| t.zeros_like()).collect();
        Self {
            kind,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(DenseMatrix::all_finite)
    }
}

/// One bias-corrected Adam update of a flat slice; `t` is the 1-based step.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    s: &AdamSettings,
) {
    let c1 = 1.0 - s.beta1.powi(t as i32);
    let c2 = 1.0 - s.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + s.eps);
    }
}

pub fn optimizer_step(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    grads: &ModelGrads,
    lr: f64,
    settings: &AdamSettings,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and nonnegative, got {lr}")));
    }
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len() || state.m.len() != p.len() || state.v.len() != p.len() {
        return Err(Error::invalid(format!(
            "{} gradient tensors and {} moment tensors for {} parameters",
            g.len(),
            state.m.len(),
            p.len()
        )));
    }
    for (i, (pt, gt)) in p.iter().zip(&g).enumerate() {
        for other in [gt.shape(), state.m[i].shape(), state.v[i].shape()] {
            if pt.shape() != other {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    left: pt.shape(),
                    right: other,
                });
            }
        }
    }
    state.t += 1;
    for (i, (pt, gt)) in p.iter_mut().zip(&g).enumerate() {
        match state.kind {
            OptimizerKind::Adam => adam_update(
                pt.data_mut(),
                gt.data(),
                state.m[i].data_mut(),
                state.v[i].data_mut(),
                state.t,
                lr,
                settings,
            ),
            OptimizerKind::Sgd => pt.add_scaled(gt, -lr)?,
        }
    }
    Ok(())
}
