//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from explicit gradient slices, one per parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first_moment[k].len() != p.len() {
                return Err(Error::Contract(format!(
                    "parameter {k}: shape {:?}, gradient length {}, moment length {}",
                    p.shape(),
                    g.len(),
                    self.first_moment[k].len()
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }

    /// Steps using each tensor's accumulated gradient buffer, then clears it.
    pub fn step_accumulated(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| {
                p.grad()
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Contract(format!("parameter {:?} has no gradient", p.shape())))
            })
            .collect::<Result<_>>()?;
        let views: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.step(params, &views)?;
        params.iter_mut().for_each(|p| p.zero_grad());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]);
        let before = p.clone();
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 at t=1, so Δ = -lr / (1 + eps).
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(1e-2);
        let mut last = 1.0;
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[2.0]]).unwrap();
            assert!(p.data()[0] < last);
            last = p.data()[0];
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(1, 2);
        let mut adam = AdamState::new(1e-3);
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
        adam.step(&mut [&mut p], &[&[1.0, 1.0]]).unwrap();
        let mut q = Tensor::zeros(1, 3);
        assert!(adam.step(&mut [&mut q], &[&[1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn accumulated_step_clears_grads() {
        let mut p = Tensor::scalar(0.0);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut adam = AdamState::new(1e-3);
        adam.step_accumulated(&mut [&mut p]).unwrap();
        assert!(p.grad().is_none());
        assert!(p.data()[0] < 0.0);
        assert!(adam.step_accumulated(&mut [&mut p]).is_err());
    }
}
