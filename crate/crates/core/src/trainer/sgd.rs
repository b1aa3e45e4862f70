use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyper-parameters of one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers (one per parameter tensor) and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub iteration: u64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Self {
            iteration: 0,
            velocity: params
                .into_iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }
}

/// `v <- m v + g + wd theta; theta <- theta - lr v` (weight decay coupled into
/// the gradient), then the iteration counter advances.
pub fn sgd_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimState<T>,
    cfg: &SgdConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::contract(format!(
            "sgd_step: {} parameters, {} gradients, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                expected: p.shape().to_vec(),
                actual: if p.shape() != g.shape() {
                    g.shape()
                } else {
                    v.shape()
                }
                .to_vec(),
            });
        }
    }
    let (lr, m, wd) = (
        T::of(cfg.learning_rate),
        T::of(cfg.momentum),
        T::of(cfg.weight_decay),
    );
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = m * *vel + grad + wd * *theta;
            *theta -= lr * *vel;
        }
    }
    state.iteration += 1;
    Ok(())
}
