//! Adam with bias-corrected moments.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::argument(format!("learning rate {} must be >= 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::argument(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::argument("eps must be positive"));
        }
        Ok(())
    }
}

/// Moment accumulators, one pair per tensor in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_params(config: AdamConfig, params: &ParamSet) -> Result<Self> {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self::new(config, &sizes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let mut tensors: Vec<&mut Tensor> =
            params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        self.step_tensors(&mut tensors)
    }

    /// Updates `tensors` in place from their `grad` fields. Nothing is
    /// touched if any gradient is non-finite.
    pub fn step_tensors(&mut self, tensors: &mut [&mut Tensor]) -> Result<()> {
        if tensors.len() != self.m.len()
            || tensors.iter().zip(&self.m).any(|(t, m)| t.len() != m.len())
        {
            return Err(Error::argument("optimizer state does not match the parameters"));
        }
        for (i, t) in tensors.iter().enumerate() {
            if let Some(j) = t.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::validation(format!(
                    "non-finite gradient in tensor {i} at index {j}"
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in t.value.iter_mut().zip(&t.grad).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
