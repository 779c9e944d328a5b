//! Adam optimiser.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Parameters are matched to their moment
    /// buffers by position, so the list order must stay fixed across calls.
    /// An entry of `None` in `grads` skips that parameter entirely.
    pub fn step_masked(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidInput(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::InvalidInput(
                "parameter list changed between optimiser steps".into(),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::InvalidInput(format!(
                        "gradient shape {:?} vs {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        let grads: Vec<Option<Tensor>> = grads.iter().cloned().map(Some).collect();
        self.step_masked(params, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computed_recurrence() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(0.1);
        // g1 = 2: m = 0.2, v = 0.004, m_hat = 2, v_hat = 4 -> step 0.1 * 2 / (2 + 1e-8)
        adam.step(&mut [&mut p], &[Tensor::vector(vec![2.0])])
            .unwrap();
        let x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - x1).abs() < 1e-12);
        // g2 = -1: m = 0.18 - 0.1 = 0.08, v = 0.003996 + 0.001 = 0.004996
        adam.step(&mut [&mut p], &[Tensor::vector(vec![-1.0])])
            .unwrap();
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat = 0.004996 / (1.0 - 0.999f64 * 0.999);
        let x2 = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[0] - x2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_untouched() {
        let mut p = Tensor::vector(vec![0.123_456_789, -3.5]);
        let before = p.clone();
        let mut adam = Adam::new(1e-3);
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[2])]).unwrap();
        }
        assert_eq!(p, before);
    }
}
