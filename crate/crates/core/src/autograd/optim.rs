use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Per-parameter first and second moment buffers.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Vec<T>> = params
            .into_iter()
            .map(|p| vec![T::zero(); p.numel()])
            .collect();
        AdamState {
            config,
            second: first.clone(),
            first,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn check(&self, index: usize, param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        let slots = self.first.get(index).ok_or_else(|| {
            Error::dim(format!("adam_step: no moment buffers for parameter {index}"))
        })?;
        if param.shape() != grad.shape() || slots.len() != param.numel() {
            return Err(Error::dim(format!(
                "adam_step: parameter {index} has shape {:?}, gradient {:?}, state {} values",
                param.shape(),
                grad.shape(),
                slots.len()
            )));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(format!(
            "adam_step: {} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        state.check(i, p, g)?;
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let correct1 = T::one() / (T::one() - T::of(cfg.beta1.powi(t)));
    let correct2 = T::one() / (T::one() - T::of(cfg.beta2.powi(t)));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let m_hat = *mi * correct1;
            let v_hat = *vi * correct2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
