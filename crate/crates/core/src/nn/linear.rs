use rand::Rng;

use super::{init, matvec, matvec_t_acc, outer_acc, Grads, ParamId, ParamStore};

/// Affine map `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = init::glorot_bound(in_dim, out_dim);
        let weight = store.add(
            format!("{name}.weight"),
            &[out_dim, in_dim],
            init::uniform(rng, out_dim * in_dim, bound),
        );
        let bias = store.add(format!("{name}.bias"), &[out_dim], vec![0.0; out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = vec![0.0; self.out_dim];
        matvec(store.get(self.weight), self.out_dim, self.in_dim, x, &mut y);
        for (yi, bi) in y.iter_mut().zip(store.get(self.bias)) {
            *yi += bi;
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        outer_acc(grads.get_mut(self.weight), self.out_dim, self.in_dim, dy, x);
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let mut dx = vec![0.0; self.in_dim];
        matvec_t_acc(store.get(self.weight), self.out_dim, self.in_dim, dy, &mut dx);
        dx
    }

    /// Parameter gradients only, for inputs that are not themselves trainable.
    pub fn backward_params(&self, x: &[f64], dy: &[f64], grads: &mut Grads) {
        outer_acc(grads.get_mut(self.weight), self.out_dim, self.in_dim, dy, x);
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
    }
}
