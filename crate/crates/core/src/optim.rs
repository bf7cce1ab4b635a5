//! Momentum SGD with L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyper-parameters and velocity buffers for one parameter group.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Self { learning_rate, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One update over `params`, which must be passed in the same order on every
/// call:
///
/// ```text
/// v ← momentum·v + grad + weight_decay·param
/// param ← param − lr·v
/// ```
///
/// Gradients are cleared afterwards.
pub fn sgd_step(params: &mut [&mut Tensor], state: &mut SgdState) -> Result<()> {
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::MissingGradient(format!("#{i} of shape {:?}", p.shape())));
        }
        if state.velocity[i].len() != p.len() {
            return Err(Error::shape(format!("velocity buffer #{i} does not match its parameter")));
        }
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let grad = p.grad().expect("checked above").to_vec();
        for ((x, vel), g) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vel = mu * *vel + g + wd * *x;
            *x -= lr * *vel;
        }
        p.zero_grad();
    }
    Ok(())
}
