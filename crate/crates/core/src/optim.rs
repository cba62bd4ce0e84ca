//! Adam with per-parameter state, so a frozen group keeps its moments and
//! bias-correction step count untouched.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied to each parameter so far.
    pub steps: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
        }
    }

    /// Updates parameter `i` in place.
    pub fn update(&mut self, i: usize, value: &mut Tensor, grad: &Tensor) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
        for (j, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.push("g", "w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grad = Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap();
        let mut w = store.get("w").unwrap().value.clone();
        adam.update(0, &mut w, &grad);
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w.data()[1] - (2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(w.data()[2], 3.0);
        assert_eq!(adam.steps, vec![1]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.push("g", "w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(
            &store,
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        );
        let mut w = store.get("w").unwrap().value.clone();
        for _ in 0..2000 {
            let g = w.map(|x| 2.0 * x);
            adam.update(0, &mut w, &g);
        }
        assert!(w.data().iter().all(|x| x.abs() < 1e-2), "{:?}", w.data());
    }
}
