use rand::Rng;

use super::{axpy, init, matvec, matvec_t_acc, outer_acc, sigmoid, Grads, ParamId, ParamStore};

/// Single-direction LSTM. Gate order inside the stacked weights is
/// input, forget, cell candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

/// Activations kept from the forward pass; all buffers are time-major.
#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: usize,
    inputs: Vec<f64>,
    gates: Vec<f64>,
    cells: Vec<f64>,
    tanh_cells: Vec<f64>,
    hidden: Vec<f64>,
}

impl LstmCache {
    pub fn hidden_states(&self) -> &[f64] {
        &self.hidden
    }
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add(
            format!("{name}.w_input"),
            &[4 * hidden, in_dim],
            init::uniform(rng, 4 * hidden * in_dim, bound),
        );
        let w_hidden = store.add(
            format!("{name}.w_hidden"),
            &[4 * hidden, hidden],
            init::uniform(rng, 4 * hidden * hidden, bound),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}.bias"), &[4 * hidden], b);
        Self {
            w_input,
            w_hidden,
            bias,
            in_dim,
            hidden,
        }
    }

    /// Runs the recurrence over `steps` inputs laid out as `steps x in_dim`.
    pub fn forward(&self, store: &ParamStore, xs: &[f64], steps: usize) -> LstmCache {
        let (h, d) = (self.hidden, self.in_dim);
        debug_assert_eq!(xs.len(), steps * d);
        let wx = store.get(self.w_input);
        let wh = store.get(self.w_hidden);
        let b = store.get(self.bias);

        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; steps * h];
        let mut tanh_cells = vec![0.0; steps * h];
        let mut hidden = vec![0.0; steps * h];
        let mut z = vec![0.0; 4 * h];
        let mut zh = vec![0.0; 4 * h];
        let mut c_prev = vec![0.0; h];
        let zero = vec![0.0; h];

        for t in 0..steps {
            matvec(wx, 4 * h, d, &xs[t * d..(t + 1) * d], &mut z);
            if t == 0 {
                zh.iter_mut().for_each(|v| *v = 0.0);
                c_prev.copy_from_slice(&zero);
            } else {
                matvec(wh, 4 * h, h, &hidden[(t - 1) * h..t * h], &mut zh);
                c_prev.copy_from_slice(&cells[(t - 1) * h..t * h]);
            }
            let g_t = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            for k in 0..4 * h {
                let pre = z[k] + zh[k] + b[k];
                g_t[k] = if (2 * h..3 * h).contains(&k) {
                    pre.tanh()
                } else {
                    sigmoid(pre)
                };
            }
            for k in 0..h {
                let c = g_t[h + k] * c_prev[k] + g_t[k] * g_t[2 * h + k];
                let tc = c.tanh();
                cells[t * h + k] = c;
                tanh_cells[t * h + k] = tc;
                hidden[t * h + k] = g_t[3 * h + k] * tc;
            }
        }
        LstmCache {
            steps,
            inputs: xs.to_vec(),
            gates,
            cells,
            tanh_cells,
            hidden,
        }
    }

    /// Backpropagation through time. `d_hidden` is `steps x hidden`; returns
    /// the gradient with respect to the inputs when `want_input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LstmCache,
        d_hidden: &[f64],
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (h, d, steps) = (self.hidden, self.in_dim, cache.steps);
        let wx = store.get(self.w_input);
        let wh = store.get(self.w_hidden);
        let mut dxs = want_input_grad.then(|| vec![0.0; steps * d]);
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zero = vec![0.0; h];

        for t in (0..steps).rev() {
            let g_t = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
            let c_prev = if t == 0 {
                &zero[..]
            } else {
                &cache.cells[(t - 1) * h..t * h]
            };
            for k in 0..h {
                let (i, f, g, o) = (g_t[k], g_t[h + k], g_t[2 * h + k], g_t[3 * h + k]);
                let tc = cache.tanh_cells[t * h + k];
                let dh = d_hidden[t * h + k] + dh_next[k];
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * g * i * (1.0 - i);
                dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - g * g);
                dz[3 * h + k] = dh * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let x_t = &cache.inputs[t * d..(t + 1) * d];
            outer_acc(grads.get_mut(self.w_input), 4 * h, d, &dz, x_t);
            if t > 0 {
                let h_prev = &cache.hidden[(t - 1) * h..t * h];
                outer_acc(grads.get_mut(self.w_hidden), 4 * h, h, &dz, h_prev);
            }
            axpy(1.0, &dz, grads.get_mut(self.bias));
            if let Some(dxs) = dxs.as_mut() {
                matvec_t_acc(wx, 4 * h, d, &dz, &mut dxs[t * d..(t + 1) * d]);
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                matvec_t_acc(wh, 4 * h, h, &dz, &mut dh_next);
            }
        }
        dxs
    }
}

/// Bidirectional LSTM whose per-step output is `[forward; backward]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward_dir: Lstm,
    pub backward_dir: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    steps: usize,
    fwd: LstmCache,
    bwd: LstmCache,
    /// `steps x 2*hidden`
    pub output: Vec<f64>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward_dir: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            backward_dir: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward_dir.hidden
    }

    pub fn in_dim(&self) -> usize {
        self.forward_dir.in_dim
    }

    pub fn forward(&self, store: &ParamStore, xs: &[f64], steps: usize) -> BiLstmCache {
        let (h, d) = (self.hidden(), self.in_dim());
        let fwd = self.forward_dir.forward(store, xs, steps);
        let reversed = reverse_steps(xs, steps, d);
        let bwd = self.backward_dir.forward(store, &reversed, steps);
        let mut output = vec![0.0; steps * 2 * h];
        for t in 0..steps {
            let row = &mut output[t * 2 * h..(t + 1) * 2 * h];
            row[..h].copy_from_slice(&fwd.hidden[t * h..(t + 1) * h]);
            let rt = steps - 1 - t;
            row[h..].copy_from_slice(&bwd.hidden[rt * h..(rt + 1) * h]);
        }
        BiLstmCache {
            steps,
            fwd,
            bwd,
            output,
        }
    }

    /// Final state of each direction: `[h_fwd(T-1); h_bwd(0)]`. Zeros for an
    /// empty sequence.
    pub fn final_states(&self, cache: &BiLstmCache) -> Vec<f64> {
        let h = self.hidden();
        let mut out = vec![0.0; 2 * h];
        if cache.steps > 0 {
            let last = cache.steps - 1;
            out[..h].copy_from_slice(&cache.fwd.hidden[last * h..(last + 1) * h]);
            out[h..].copy_from_slice(&cache.bwd.hidden[last * h..(last + 1) * h]);
        }
        out
    }

    /// Gradient of a loss that reads only [`BiLstm::final_states`].
    pub fn backward_final(
        &self,
        store: &ParamStore,
        cache: &BiLstmCache,
        d_final: &[f64],
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (h, steps) = (self.hidden(), cache.steps);
        let mut d_out = vec![0.0; steps * 2 * h];
        if steps > 0 {
            d_out[(steps - 1) * 2 * h..(steps - 1) * 2 * h + h].copy_from_slice(&d_final[..h]);
            // backward direction's last step sits at position 0
            d_out[h..2 * h].copy_from_slice(&d_final[h..]);
        }
        self.backward(store, cache, &d_out, grads, want_input_grad)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BiLstmCache,
        d_output: &[f64],
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (h, d, steps) = (self.hidden(), self.in_dim(), cache.steps);
        let mut d_fwd = vec![0.0; steps * h];
        let mut d_bwd = vec![0.0; steps * h];
        for t in 0..steps {
            let row = &d_output[t * 2 * h..(t + 1) * 2 * h];
            d_fwd[t * h..(t + 1) * h].copy_from_slice(&row[..h]);
            let rt = steps - 1 - t;
            d_bwd[rt * h..(rt + 1) * h].copy_from_slice(&row[h..]);
        }
        let dx_f = self
            .forward_dir
            .backward(store, &cache.fwd, &d_fwd, grads, want_input_grad);
        let dx_b = self
            .backward_dir
            .backward(store, &cache.bwd, &d_bwd, grads, want_input_grad);
        match (dx_f, dx_b) {
            (Some(mut f), Some(b)) => {
                let b = reverse_steps(&b, steps, d);
                axpy(1.0, &b, &mut f);
                Some(f)
            }
            _ => None,
        }
    }
}

fn reverse_steps(xs: &[f64], steps: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    for t in (0..steps).rev() {
        out.extend_from_slice(&xs[t * width..(t + 1) * width]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(store: &ParamStore, lstm: &BiLstm, xs: &[f64], steps: usize, proj: &[f64]) -> f64 {
        dot(&lstm.forward(store, xs, steps).output, proj)
    }

    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "rnn", 3, 4, &mut rng);
        let steps = 5;
        let xs = init::normal(&mut rng, steps * 3, 1.0);
        let proj = init::normal(&mut rng, steps * 8, 1.0);

        let cache = lstm.forward(&store, &xs, steps);
        let mut grads = store.zero_grads();
        let dx = lstm
            .backward(&store, &cache, &proj, &mut grads, true)
            .unwrap();

        let eps = 1e-6;
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id)[k];
                store.get_mut(id)[k] = orig + eps;
                let up = loss(&store, &lstm, &xs, steps, &proj);
                store.get_mut(id)[k] = orig - eps;
                let down = loss(&store, &lstm, &xs, steps, &proj);
                store.get_mut(id)[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.get(id)[k];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{} [{k}]: {numeric} vs {analytic}",
                    store.param(id).name
                );
            }
        }
        for k in 0..xs.len() {
            let mut p = xs.clone();
            p[k] += eps;
            let up = loss(&store, &lstm, &p, steps, &proj);
            p[k] -= 2.0 * eps;
            let down = loss(&store, &lstm, &p, steps, &proj);
            let numeric = (up - down) / (2.0 * eps);
            assert!((numeric - dx[k]).abs() <= 1e-6 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn final_states_of_empty_sequence_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "rnn", 2, 3, &mut rng);
        let cache = lstm.forward(&store, &[], 0);
        assert_eq!(lstm.final_states(&cache), vec![0.0; 6]);
    }
}
