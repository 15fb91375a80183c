use serde::{Deserialize, Serialize};

use super::{Float, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Float> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::Dim {
            op: "adam_step",
            msg: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = grads[i] {
            if g.shape() != p.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        if state.m[i].shape() != p.shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                expected: p.shape().to_vec(),
                got: state.m[i].shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::from_f(c.beta1), T::from_f(c.beta2));
    let bc1 = T::from_f(1.0 - c.beta1.powi(state.t as i32));
    let bc2 = T::from_f(1.0 - c.beta2.powi(state.t as i32));
    let (lr, eps) = (T::from_f(c.lr), T::from_f(c.eps));
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let g = grads[i].map_or(T::zero(), |g| g.data()[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
