use serde::{Deserialize, Serialize};

use super::{Grads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer over a subset of the parameters in a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    trainable: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore, trainable: Vec<ParamId>) -> Self {
        let zeros = |ids: &[ParamId]| -> Vec<Vec<f64>> {
            ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect()
        };
        let (m, v) = match kind {
            OptimizerKind::Adam => (zeros(&trainable), zeros(&trainable)),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            trainable,
            m,
            v,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// First and second moments per trainable tensor (empty for SGD).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for &id in &self.trainable {
                    let g = grads.get(id);
                    for (p, gi) in store.get_mut(id).iter_mut().zip(g) {
                        *p -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (slot, &id) in self.trainable.iter().enumerate() {
                    let g = grads.get(id);
                    let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                    let p = store.get_mut(id);
                    for k in 0..p.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                        // Moments are checkpointed as f32; keep them exactly representable.
                        m[k] = m[k] as f32 as f64;
                        v[k] = v[k] as f32 as f64;
                    }
                }
            }
        }
    }
}
