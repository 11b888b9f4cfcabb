//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it is the no-op control in the ablations.
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate {} must be >= 0",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn for_params(params: &[&Tensor<T>]) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.len())).collect()
    }
}

/// One AdamW update of `param` in place. `t` is the 1-based step index.
///
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β1ᵗ)` and
/// `v̂ = v/(1−β2ᵗ)`.
pub fn adamw_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    t: u32,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() || state.v.len() != param.len()
    {
        return Err(Error::shape(format!(
            "adamw: param {:?}, grad {:?}, state {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    if t == 0 {
        return Err(Error::contract("adamw step index starts at 1"));
    }
    let lr = cfg.learning_rate as f64;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let eps = cfg.epsilon as f64;
    let decay = 1.0 - lr * cfg.weight_decay as f64;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g.as_f64();
        let m_new = b1 * m.as_f64() + (1.0 - b1) * g;
        let v_new = b2 * v.as_f64() + (1.0 - b2) * g * g;
        *m = T::from_f64(m_new);
        *v = T::from_f64(v_new);
        let m_hat = m_new / bc1;
        let v_hat = v_new / bc2;
        let stepped = p.as_f64() * decay - lr * m_hat / (v_hat.sqrt() + eps);
        *p = T::from_f64(stepped);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut p = Tensor::vector(vec![0.3f32, -1.25, 7.0]);
        let orig = p.clone();
        let mut st = AdamState::new(3);
        for t in 1..=5 {
            adamw_step(&mut p, &Tensor::zeros(&[3]), &mut st, &cfg, t).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = Tensor::scalar(0.0f64);
        let mut st = AdamState::new(1);
        adamw_step(&mut p, &Tensor::scalar(1.0), &mut st, &cfg, 1).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −0.1·1/(1 + 1e-8)
        let expected = -(0.1f32 as f64) / (1.0 + 1e-8f32 as f64);
        assert!((p.item().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut p = Tensor::scalar(2.0f64);
        let mut st = AdamState::new(1);
        for t in 1..=3 {
            adamw_step(&mut p, &Tensor::scalar(0.0), &mut st, &cfg, t).unwrap();
        }
        let factor = 1.0 - 0.01f32 as f64 * 0.5f32 as f64;
        assert!((p.item().unwrap() - 2.0 * factor.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::vector(vec![1.0f32]);
        let mut st = AdamState::new(1);
        assert!(adamw_step(&mut p, &Tensor::zeros(&[2]), &mut st, &cfg, 1).is_err());
        assert!(adamw_step(&mut p, &Tensor::zeros(&[1]), &mut st, &cfg, 0).is_err());
        assert!(OptimizerConfig { beta1: 1.0, ..cfg }.validate().is_err());
        assert!(OptimizerConfig {
            epsilon: 0.0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
