//! AdamW with decoupled weight decay and the step-decay learning-rate
//! schedule applied by the trainer.

use super::tape::GradientMap;
use super::tensor::Tensor;
use super::ParamStore;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Standard defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8, decay 0.01.
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape().to_vec()))
            .collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One decoupled-weight-decay update over every parameter in the store.
/// Parameters absent from `grads` see a zero gradient.
pub fn adamw_step(store: &mut ParamStore, grads: &GradientMap, state: &mut OptimizerState) {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let grad = grads.get_or_zeros(id, &shape);
        let m = &mut state.first_moment[id.0];
        let v = &mut state.second_moment[id.0];
        let params = store.get_mut(id);
        for (((p, g), m), v) in params
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= state.learning_rate * (m_hat / (v_hat.sqrt() + state.epsilon))
                + state.learning_rate * state.weight_decay * *p;
        }
    }
}

/// Learning rate in effect during the given zero-based epoch:
/// `base · factor^⌊epoch / period⌋`.
pub fn scheduled_lr(base: f64, factor: f64, period: u32, epoch: u32) -> f64 {
    base * factor.powi((epoch / period.max(1)) as i32)
}
