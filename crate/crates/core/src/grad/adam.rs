use crate::error::{Error, Result};
use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, shaped like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl AdamMoments {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AdamMoments {
            m: DMatrix::zeros(rows, cols),
            v: DMatrix::zeros(rows, cols),
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`, in place.
pub fn adam_step(
    weights: &mut DMatrix<f64>,
    grads: &DMatrix<f64>,
    moments: &mut AdamMoments,
    params: &AdamParams,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("Adam step index starts at 1".into()));
    }
    let shape = weights.shape();
    if grads.shape() != shape || moments.m.shape() != shape || moments.v.shape() != shape {
        return Err(Error::Dimension("weights, gradients and moments disagree".into()));
    }
    let (b1, b2) = (params.beta1, params.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        moments.m[i] = b1 * moments.m[i] + (1.0 - b1) * g;
        moments.v[i] = b2 * moments.v[i] + (1.0 - b2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        weights[i] -= params.learning_rate * m_hat / (v_hat.sqrt() + params.eps);
    }
    Ok(())
}
