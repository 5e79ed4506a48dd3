use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("adam_beta1", self.beta1), ("adam_beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam_epsilon must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter name, plus the step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every unfrozen parameter.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| !p.frozen && p.tensor.grad().is_none()) {
        return Err(Error::Contract(format!("no gradient for trainable parameter '{name}'")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let n = p.tensor.numel();
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::Contract(format!("optimizer state for '{name}' has the wrong size")));
        }
        let data = p.tensor.data_mut();
        for i in 0..n {
            let g = grad[i] + cfg.weight_decay * data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![value]));
        s.zero_grads();
        s.get_mut("w").unwrap().tensor.accumulate_grad(&[grad]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(1.5, 0.0);
        adam_step(&mut s, &mut AdamState::default(), &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_closed_form() {
        // after bias correction m_hat = g and v_hat = g^2
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut s = store(1.0, g);
            adam_step(&mut s, &mut AdamState::default(), &cfg, 0.01).unwrap();
            let expect = 1.0 - 0.01 * g / (g.abs() + cfg.eps);
            assert!((s.tensor("w").unwrap().data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut s = store(1.0, 0.5);
        s.get_mut("w").unwrap().frozen = true;
        adam_step(&mut s, &mut AdamState::default(), &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(s.tensor("w").unwrap().data(), &[1.0]);

        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec(vec![1.0]));
        let err = adam_step(&mut s, &mut AdamState::default(), &AdamConfig::default(), 0.1);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
