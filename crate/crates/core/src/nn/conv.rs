use rand::Rng;

use super::{axpy, dot, init, Grads, ParamId, ParamStore};

/// 3x3 convolution, stride 1, zero padding 1, on `channels x height x width`
/// feature maps.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

const K: usize = 3;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * K * K;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_channels, in_channels, K, K],
            init::normal(rng, out_channels * fan_in, (2.0 / fan_in as f64).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), &[out_channels], vec![0.0; out_channels]);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, store: &ParamStore, input: &[f64], height: usize, width: usize) -> Vec<f64> {
        let plane = height * width;
        debug_assert_eq!(input.len(), self.in_channels * plane);
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let mut out = vec![0.0; self.out_channels * plane];
        for co in 0..self.out_channels {
            let out_c = &mut out[co * plane..(co + 1) * plane];
            out_c.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..self.in_channels {
                let in_c = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..K {
                    for kx in 0..K {
                        let wv = w[((co * self.in_channels + ci) * K + ky) * K + kx];
                        let (x0, x1) = col_range(kx, width);
                        for y in 0..height {
                            let Some(sy) = shifted(y, ky, height) else { continue };
                            let src = &in_c[sy * width + x0 + kx - 1..sy * width + x1 + kx - 1];
                            axpy(wv, src, &mut out_c[y * width + x0..y * width + x1]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient if requested.
    pub fn backward(
        &self,
        store: &ParamStore,
        input: &[f64],
        height: usize,
        width: usize,
        d_out: &[f64],
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let plane = height * width;
        let w = store.get(self.weight);
        let mut d_in = want_input_grad.then(|| vec![0.0; self.in_channels * plane]);
        {
            let db = grads.get_mut(self.bias);
            for co in 0..self.out_channels {
                db[co] += d_out[co * plane..(co + 1) * plane].iter().sum::<f64>();
            }
        }
        for co in 0..self.out_channels {
            let dout_c = &d_out[co * plane..(co + 1) * plane];
            for ci in 0..self.in_channels {
                let in_c = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..K {
                    for kx in 0..K {
                        let widx = ((co * self.in_channels + ci) * K + ky) * K + kx;
                        let (x0, x1) = col_range(kx, width);
                        let mut acc = 0.0;
                        for y in 0..height {
                            let Some(sy) = shifted(y, ky, height) else { continue };
                            let src = sy * width + x0 + kx - 1;
                            let dst = y * width + x0;
                            acc += dot(&dout_c[dst..dst + x1 - x0], &in_c[src..src + x1 - x0]);
                            if let Some(d_in) = d_in.as_mut() {
                                let d_in_c = &mut d_in[ci * plane..(ci + 1) * plane];
                                axpy(w[widx], &dout_c[dst..dst + x1 - x0], &mut d_in_c[src..src + x1 - x0]);
                            }
                        }
                        grads.get_mut(self.weight)[widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Output columns `x0..x1` whose source column `x + kx - 1` is in bounds.
#[inline]
fn col_range(kx: usize, width: usize) -> (usize, usize) {
    let x0 = 1usize.saturating_sub(kx);
    let x1 = (width + 1).saturating_sub(kx).min(width);
    (x0, x1.max(x0))
}

#[inline]
fn shifted(y: usize, ky: usize, height: usize) -> Option<usize> {
    let sy = (y + ky).checked_sub(1)?;
    (sy < height).then_some(sy)
}

/// Non-overlapping max pooling with floor semantics on the output size.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub pool_h: usize,
    pub pool_w: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_len: usize,
}

impl MaxPool2d {
    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (height / self.pool_h, width / self.pool_w)
    }

    pub fn forward(&self, input: &[f64], channels: usize, height: usize, width: usize) -> (Vec<f64>, PoolCache) {
        let (oh, ow) = self.output_size(height, width);
        let mut out = vec![0.0; channels * oh * ow];
        let mut argmax = vec![0usize; channels * oh * ow];
        for c in 0..channels {
            let base = c * height * width;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..self.pool_h {
                        for dx in 0..self.pool_w {
                            let idx = base + (oy * self.pool_h + dy) * width + ox * self.pool_w + dx;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (c * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            out,
            PoolCache {
                argmax,
                in_len: input.len(),
            },
        )
    }

    pub fn backward(&self, cache: &PoolCache, d_out: &[f64]) -> Vec<f64> {
        let mut d_in = vec![0.0; cache.in_len];
        for (g, &idx) in d_out.iter().zip(&cache.argmax) {
            d_in[idx] += g;
        }
        d_in
    }
}
