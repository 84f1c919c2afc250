//! Normalized closure corners to the layout feature: `relu(W c + b)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Grads, Linear, ParamStore};

pub const COORD_DIM: usize = 8;

/// Slope of the initial ramps; see [`LayoutEncoder::new`].
pub const INIT_SLOPE: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutFeature(pub Vec<f64>);

impl LayoutFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct LayoutEncoder {
    pub proj: Linear,
}

impl LayoutEncoder {
    /// Unit `k` starts as a ramp `relu(±slope * (center - t))` along the x
    /// axis (even `k`) or y axis (odd `k`), with thresholds `t` spaced over
    /// the page. The ramps span quadratic functions of position, so distance
    /// kernels are reachable by the relation matrix alone.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let proj = Linear::new(store, "layout.proj", COORD_DIM, dim, rng);
        let steps = dim.div_ceil(4);
        let (w, b) = (store.get(proj.weight).len(), dim);
        let mut weight = vec![0.0; w];
        let mut bias = vec![0.0; b];
        for k in 0..dim {
            let axis = k % 2;
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let t = -0.1 + 1.2 * ((k / 4) as f64 + 0.5) / steps as f64;
            // Closure corners alternate x, y; the center is their mean.
            for c in (axis..COORD_DIM).step_by(2) {
                weight[k * COORD_DIM + c] = sign * INIT_SLOPE / 4.0;
            }
            bias[k] = -sign * INIT_SLOPE * t;
        }
        store.get_mut(proj.weight).copy_from_slice(&weight);
        store.get_mut(proj.bias).copy_from_slice(&bias);
        Self { proj }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn encode_layout(&self, store: &ParamStore, coords: &[f64]) -> Result<LayoutFeature> {
        if coords.len() != COORD_DIM {
            return Err(Error::Validation(format!(
                "layout input must have {COORD_DIM} coordinates, got {}",
                coords.len()
            )));
        }
        Ok(LayoutFeature(relu(self.forward_pre(store, coords))))
    }

    /// Pre-activation `W c + b`; the caller keeps it for the backward pass.
    pub fn forward_pre(&self, store: &ParamStore, coords: &[f64]) -> Vec<f64> {
        self.proj.forward(store, coords)
    }

    pub fn backward(&self, coords: &[f64], pre: &[f64], d_out: &[f64], grads: &mut Grads) {
        let d_pre: Vec<f64> = pre
            .iter()
            .zip(d_out)
            .map(|(p, d)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        self.proj.backward_params(coords, &d_pre, grads);
    }
}

pub fn relu(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| {
        if !(*x > 0.0) {
            *x = 0.0
        }
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{dot, init};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder(dim: usize, seed: u64) -> (ParamStore, LayoutEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = LayoutEncoder::new(&mut store, dim, &mut rng);
        (store, enc)
    }

    #[test]
    fn zero_weights_give_zero_vector() {
        let (mut store, enc) = encoder(5, 0);
        store.get_mut(enc.proj.weight).fill(0.0);
        store.get_mut(enc.proj.bias).fill(0.0);
        let out = enc.encode_layout(&store, &[0.3; 8]).unwrap();
        assert_eq!(out.0, vec![0.0; 5]);
    }

    #[test]
    fn identity_rows_copy_coordinates() {
        let (mut store, enc) = encoder(12, 0);
        let w = store.get_mut(enc.proj.weight);
        w.fill(0.0);
        for k in 0..8 {
            w[k * 8 + k] = 1.0;
        }
        store.get_mut(enc.proj.bias).fill(0.0);
        let coords = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let out = enc.encode_layout(&store, &coords).unwrap();
        assert_eq!(&out.0[..8], &coords);
        assert_eq!(&out.0[8..], &[0.0; 4]);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let (mut store, enc) = encoder(4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let b = init::normal(&mut rng, 4, 0.5);
        store.get_mut(enc.proj.bias).copy_from_slice(&b);
        let coords: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let w = store.get(enc.proj.weight).to_vec();
        let mut oracle = vec![0.0; 4];
        for r in 0..4 {
            let mut s = b[r];
            for c in 0..8 {
                s += w[r * 8 + c] * coords[c];
            }
            oracle[r] = if s > 0.0 { s } else { 0.0 };
        }
        let out = enc.encode_layout(&store, &coords).unwrap();
        for (a, o) in out.0.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_arity_is_rejected() {
        let (store, enc) = encoder(4, 0);
        assert!(enc.encode_layout(&store, &[0.0; 7]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut store, enc) = encoder(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = init::normal(&mut rng, 6, 0.5);
        store.get_mut(enc.proj.bias).copy_from_slice(&b);
        let coords: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let proj = init::normal(&mut rng, 6, 1.0);
        let pre = enc.forward_pre(&store, &coords);
        let mut grads = store.zero_grads();
        enc.backward(&coords, &pre, &proj, &mut grads);
        let eps = 1e-6;
        for id in [enc.proj.weight, enc.proj.bias] {
            for k in 0..store.get(id).len() {
                let orig = store.get(id)[k];
                store.get_mut(id)[k] = orig + eps;
                let up = dot(&enc.encode_layout(&store, &coords).unwrap().0, &proj);
                store.get_mut(id)[k] = orig - eps;
                let down = dot(&enc.encode_layout(&store, &coords).unwrap().0, &proj);
                store.get_mut(id)[k] = orig;
                let num = (up - down) / (2.0 * eps);
                assert!((num - grads.get(id)[k]).abs() <= 1e-4 * num.abs().max(1e-6));
            }
        }
    }

    proptest! {
        #[test]
        fn output_is_nonnegative(coords in prop::array::uniform8(0.0f64..=1.0), seed in 0u64..50) {
            let (store, enc) = encoder(16, seed);
            let out = enc.encode_layout(&store, &coords).unwrap();
            prop_assert!(out.0.iter().all(|v| *v >= 0.0));
        }
    }
}
