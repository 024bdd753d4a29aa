use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Scalar};

/// AdamW hyperparameters. Defaults follow the reference fine-tuning setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.lr >= 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings: {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<P: Scalar>(params: &ParamStore<P>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Ok(OptimState {
            step: 0,
            m: zeros(),
            v: zeros(),
            config,
        })
    }
}

/// One decoupled-weight-decay Adam update with bias correction, at learning
/// rate `lr` (the schedule is applied by the caller).
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid("adamw_step", "optimizer state does not match parameters"));
    }
    for i in 0..params.len() {
        if params.get(i).grad.is_none() {
            return Err(Error::MissingGradient(params.name(i).to_string()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::cast_from(c.beta1), T::cast_from(c.beta2));
    let (one_b1, one_b2) = (T::cast_from(1.0 - c.beta1), T::cast_from(1.0 - c.beta2));
    let (inv_bc1, inv_bc2) = (T::cast_from(1.0 / bc1), T::cast_from(1.0 / bc2));
    let lr_t = T::cast_from(lr);
    let eps = T::cast_from(c.eps);
    for i in 0..params.len() {
        let decay = if params.decays(i) {
            T::cast_from(lr * c.weight_decay)
        } else {
            T::zero()
        };
        let p = params.get_mut(i);
        let grad = p.grad.take().expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, &v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::new(vec![1], vec![v]).unwrap(), true);
        }
        s.zero_grad();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(&[1.5, -2.0]);
        let mut st = OptimState::new(&s, AdamWConfig::default()).unwrap();
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.flat_values(), vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction: update = lr*g/(|g|+eps).
        let mut s = store(&[0.0]);
        s.get_mut(0).grad = Some(vec![1.0]);
        let mut st = OptimState::new(&s, AdamWConfig::default()).unwrap();
        adamw_step(&mut s, &mut st, 0.1).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.flat_values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut s = store(&[0.3, 0.3]);
        let mut st = OptimState::new(&s, AdamWConfig { weight_decay: 0.1, ..Default::default() }).unwrap();
        for k in 0..5 {
            s.get_mut(0).grad = Some(vec![0.1 * k as f64]);
            s.get_mut(1).grad = Some(vec![0.1 * k as f64]);
            adamw_step(&mut s, &mut st, 0.01).unwrap();
        }
        let v = s.flat_values();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store(&[1.0]);
        s.get_mut(0).grad = None;
        let mut st = OptimState::new(&s, AdamWConfig::default()).unwrap();
        match adamw_step(&mut s, &mut st, 0.1) {
            Err(Error::MissingGradient(name)) => assert_eq!(name, "p0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_betas_rejected() {
        let s = store(&[1.0]);
        let cfg = AdamWConfig { beta1: 1.0, ..Default::default() };
        assert!(OptimState::<f64>::new(&s, cfg).is_err());
    }
}
