//! Adam with decoupled weight regularization, bias correction on.

use crate::model::Model;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second-moment state, one slot per parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let m = model.params().entries().iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = model.params().entries().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { m, v, step: 0 }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update:
    /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    pub fn update(&mut self, model: &mut Model, grads: &[Vec<f64>], hyper: &AdamHyper) {
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for (idx, g) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let p = model.params_mut().data_mut(idx);
            for i in 0..g.len() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * p[i]);
            }
        }
    }
}
