use serde::{Deserialize, Serialize};

use super::{DenseNet, GradientSet, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer state for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Fresh state for tensors with the given lengths.
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_net(config: AdamConfig, net: &DenseNet<T>) -> Self {
        let shapes: Vec<usize> = net.params().iter().map(|(_, p)| p.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One update of `params` (declaration order, matching `grads`).
    pub fn apply(&mut self, params: Vec<&mut [T]>, grads: &GradientSet<T>) -> Result<()> {
        if !(self.config.learning_rate > 0.0) {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        if params.len() != grads.tensors.len()
            || params.len() != self.m.len()
            || params
                .iter()
                .zip(&grads.tensors)
                .zip(&self.m)
                .any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
        {
            return Err(Error::Shape("optimizer, parameters and gradients disagree in shape".into()));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every parameter of `net` with `grads`.
    pub fn step_net(&mut self, net: &mut DenseNet<T>, grads: &GradientSet<T>) -> Result<()> {
        net.check_grads(grads)?;
        self.apply(net.params_mut(), grads)
    }
}
