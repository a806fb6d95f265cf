use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| if p.trainable { vec![0.0; p.numel()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((param, g), m), v) in store
            .params_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !param.trainable {
                continue;
            }
            for (((p, &g), m), v) in param.value.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let m_new = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                let mut x = *p as f64;
                x -= lr * self.weight_decay * x;
                x -= lr * (m_new / c1) / ((v_new / c2).sqrt() + self.eps);
                *m = m_new as f32;
                *v = v_new as f32;
                *p = x as f32;
            }
        }
    }
}
