use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a [`Params`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over every trainable parameter, then
/// clears the gradients.
pub fn adam_step(params: &mut Params, state: &mut AdamState) -> Result<()> {
    if state.first.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, model has {}",
            state.first.len(),
            params.len()
        )));
    }
    for (name, t) in params.iter() {
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let correct1 = 1.0 - beta1.powi(t);
    let correct2 = 1.0 - beta2.powi(t);

    for (i, (name, tensor)) in params.iter_mut().enumerate() {
        if !tensor.requires_grad() {
            continue;
        }
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correct1;
            let v_hat = *v / correct2;
            *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        tensor.clear_grad();
        // ReLU and max-pooling would hide NaN weights from the loss
        if let Some(j) = tensor.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter `{name}` entry {j} after update")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn single(value: f64, grad: f64) -> Params {
        let mut p = Params::new();
        let mut t = Tensor::vector(vec![value]).with_grad();
        t.set_grad(vec![grad]).unwrap();
        p.insert("w", t);
        p
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let mut p = single(1.0, f64::INFINITY);
        let mut state = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &mut state), Err(Error::NonFinite(_))));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0, 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState::new(cfg, &p);
        adam_step(&mut p, &mut state).unwrap();
        // m_hat = v_hat = 1, update = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = single(0.3, 0.0);
        let mut state = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &mut state).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![1.0]).with_grad());
        let mut state = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &mut state), Err(Error::Contract(_))));
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn repeated_steps_are_bit_identical() {
        let run = || {
            let mut p = single(0.5, 0.25);
            let mut state = AdamState::new(AdamConfig::default(), &p);
            for _ in 0..2 {
                adam_step(&mut p, &mut state).unwrap();
                p.get_mut("w").unwrap().set_grad(vec![0.25]).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
