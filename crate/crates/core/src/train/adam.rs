use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor, plus the
/// number of updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// p ← p − lr · m̂ / (√v̂ + ε)  with m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ)
/// ```
///
/// Fails without touching anything if a gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::shape(format!("adam: tensor {i} shapes are not congruent")));
        }
        if !g.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient in parameter tensor {i} at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_b2 = T::from_f64(1.0 - cfg.beta2);
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
