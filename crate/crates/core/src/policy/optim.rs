use crate::error::{Error, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grad`, updating `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Precondition("optimizer state size mismatch".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub(crate) fn from_parts(lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64, m: Vec<f64>, v: Vec<f64>) -> Self {
        Self { lr, beta1, beta2, eps, m, v, t }
    }
}
