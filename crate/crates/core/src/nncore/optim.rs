use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with first and second moment state per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies update number `t` (1-based) to every non-frozen parameter
    /// holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore, t: i64) -> Result<()> {
        if t <= 0 {
            return Err(Error::Usage(format!("adam step index must be >= 1, got {t}")));
        }
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        let params = store.params_mut();
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let n = p.value.numel();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            for (k, (w, &gk)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[3], 0.5)).unwrap();
        s.add("f", Tensor::full(&[2], 0.5)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        for p in s.params_mut() {
            p.grad = Some(Tensor::full(p.value.shape(), 1.0));
        }
        let mut adam = Adam::new(OptimizerConfig::default()).unwrap();
        adam.step(&mut s, 1).unwrap();
        for v in s.params()[0].value.data() {
            assert!((v - (0.5 - 1e-3)).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut s = store();
        for p in s.params_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
        let before = s.clone();
        let mut adam = Adam::new(OptimizerConfig::default()).unwrap();
        for t in 1..5 {
            adam.step(&mut s, t).unwrap();
        }
        assert_eq!(s.params(), before.params());
    }

    #[test]
    fn frozen_parameter_with_stale_grad_unchanged() {
        let mut s = store();
        let f = s.id("f").unwrap();
        s.set_frozen(f, true);
        s.get_mut(f).grad = Some(Tensor::full(&[2], 3.0));
        let mut adam = Adam::new(OptimizerConfig::default()).unwrap();
        adam.step(&mut s, 1).unwrap();
        assert_eq!(s.get(f).value.data(), &[0.5, 0.5]);
    }

    #[test]
    fn step_index_must_be_positive() {
        let mut s = store();
        let mut adam = Adam::new(OptimizerConfig::default()).unwrap();
        assert!(matches!(adam.step(&mut s, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            beta1: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(Adam::new(bad).is_err());
    }
}
