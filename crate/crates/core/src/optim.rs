use crate::param::{ParamStore, Parameter};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of a single parameter from its
    /// accumulated gradient. The step counter is incremented even when the
    /// gradient is zero.
    pub fn step_param(&self, p: &mut Parameter) {
        p.t += 1;
        let t = p.t as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let Parameter { tensor, m, v, .. } = p;
        let grad: alloc::vec::Vec<f64> = tensor.grad().map(|g| g.to_vec()).unwrap_or_default();
        for (i, value) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad.get(i).copied().unwrap_or(0.0);
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *value -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
        }
    }

    /// Updates every parameter in the store.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.params_mut() {
            self.step_param(p);
        }
    }
}
