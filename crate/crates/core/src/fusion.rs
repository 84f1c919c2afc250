//! Joint feature construction from the per-modality vectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Grads, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    ConcatShiftGate,
    ConcatShiftNoGate,
    ConcatAll,
}

impl FusionStrategy {
    pub fn is_shift(self) -> bool {
        !matches!(self, FusionStrategy::ConcatAll)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modalities {
    pub semantic: bool,
    pub layout: bool,
    pub visual: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self::ALL
    }
}

impl Modalities {
    pub const ALL: Self = Self::new(true, true, true);
    pub const S: Self = Self::new(true, false, false);
    pub const L: Self = Self::new(false, true, false);
    pub const V: Self = Self::new(false, false, true);
    pub const SL: Self = Self::new(true, true, false);

    pub const fn new(semantic: bool, layout: bool, visual: bool) -> Self {
        Self {
            semantic,
            layout,
            visual,
        }
    }

    pub fn count(self) -> usize {
        self.semantic as usize + self.layout as usize + self.visual as usize
    }

    pub fn label(self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.semantic, 'S'), (self.layout, 'L'), (self.visual, 'V')] {
            if on {
                if !s.is_empty() {
                    s.push(',');
                }
                s.push(c);
            }
        }
        s
    }
}

/// Per-modality vectors of one fragment; absent modalities are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FusionInput<'a> {
    pub semantic: Option<&'a [f64]>,
    pub layout: Option<&'a [f64]>,
    pub visual: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature {
    pub vector: Vec<f64>,
    pub strategy: FusionStrategy,
    /// Gate value; only set when the gated shift was applied.
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    gate_input: Vec<f64>,
    alpha: Option<f64>,
}

impl FusionCache {
    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Passthrough,
    Concat,
    Shift { gated: bool },
}

#[derive(Debug, Clone)]
pub struct Fusion {
    strategy: FusionStrategy,
    modalities: Modalities,
    dims: [usize; 3],
    mode: Mode,
    gate: Option<Linear>,
}

impl Fusion {
    /// `dims` are the semantic, layout and visual lengths; entries for
    /// disabled modalities are ignored.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        strategy: FusionStrategy,
        modalities: Modalities,
        dims: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let dims = [
            if modalities.semantic { dims[0] } else { 0 },
            if modalities.layout { dims[1] } else { 0 },
            if modalities.visual { dims[2] } else { 0 },
        ];
        let mode = match modalities.count() {
            0 => return Err(Error::Config("at least one modality must be enabled".into())),
            1 => Mode::Passthrough,
            _ if !modalities.visual || strategy == FusionStrategy::ConcatAll => Mode::Concat,
            _ => {
                let base = dims[0] + dims[1];
                if dims[2] != base {
                    return Err(Error::Config(format!(
                        "visual feature length {} must equal semantic + layout length {base} under {strategy:?}",
                        dims[2]
                    )));
                }
                Mode::Shift {
                    gated: strategy == FusionStrategy::ConcatShiftGate,
                }
            }
        };
        let gate = match mode {
            Mode::Shift { gated: true } => Some(Linear::new(store, "fusion.gate", dims.iter().sum(), 1, rng)),
            _ => None,
        };
        Ok(Self {
            strategy,
            modalities,
            dims,
            mode,
            gate,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    pub fn modalities(&self) -> Modalities {
        self.modalities
    }

    pub fn gate(&self) -> Option<&Linear> {
        self.gate.as_ref()
    }

    pub fn joint_dim(&self) -> usize {
        match self.mode {
            Mode::Shift { .. } => self.dims[0] + self.dims[1],
            _ => self.dims.iter().sum(),
        }
    }

    fn gather(&self, input: &FusionInput) -> Result<Vec<f64>> {
        let parts = [
            ("semantic", self.modalities.semantic, input.semantic),
            ("layout", self.modalities.layout, input.layout),
            ("visual", self.modalities.visual, input.visual),
        ];
        let mut out = Vec::with_capacity(self.dims.iter().sum());
        for ((name, on, part), &dim) in parts.into_iter().zip(&self.dims) {
            match (on, part) {
                (true, Some(v)) if v.len() == dim => out.extend_from_slice(v),
                (true, Some(v)) => {
                    return Err(Error::Validation(format!(
                        "{name} feature has length {}, expected {dim}",
                        v.len()
                    )))
                }
                (true, None) => return Err(Error::Validation(format!("{name} feature missing"))),
                (false, _) => {}
            }
        }
        Ok(out)
    }

    pub fn fuse(&self, store: &ParamStore, input: &FusionInput) -> Result<JointFeature> {
        let (vector, cache) = self.forward(store, input)?;
        Ok(JointFeature {
            vector,
            strategy: self.strategy,
            alpha: cache.alpha,
        })
    }

    pub fn forward(&self, store: &ParamStore, input: &FusionInput) -> Result<(Vec<f64>, FusionCache)> {
        let all = self.gather(input)?;
        let (out, alpha) = match self.mode {
            Mode::Passthrough | Mode::Concat => (all.clone(), None),
            Mode::Shift { gated } => {
                let base = self.dims[0] + self.dims[1];
                let alpha = if gated {
                    self.alpha_of(store, &all)
                } else {
                    1.0
                };
                let out = fuse_with_alpha(&all[..base], &all[base..], alpha);
                (out, gated.then_some(alpha))
            }
        };
        Ok((
            out,
            FusionCache {
                gate_input: all,
                alpha,
            },
        ))
    }

    fn alpha_of(&self, store: &ParamStore, all: &[f64]) -> f64 {
        let gate = self.gate.as_ref().expect("gated mode has a gate");
        gate_alpha(store.get(gate.weight), store.get(gate.bias)[0], all)
    }

    /// Gate value for the given inputs; errors when the model is not gated.
    pub fn gate_weight(&self, store: &ParamStore, input: &FusionInput) -> Result<f64> {
        if self.gate.is_none() {
            return Err(Error::Config(format!(
                "no gate under {:?} with modalities {}",
                self.strategy,
                self.modalities.label()
            )));
        }
        Ok(self.alpha_of(store, &self.gather(input)?))
    }

    /// Returns the gradients with respect to the semantic, layout and visual
    /// inputs (empty for disabled modalities).
    pub fn backward(&self, store: &ParamStore, cache: &FusionCache, d_out: &[f64], grads: &mut Grads) -> [Vec<f64>; 3] {
        let mut d_all = vec![0.0; cache.gate_input.len()];
        match self.mode {
            Mode::Passthrough | Mode::Concat => d_all.copy_from_slice(d_out),
            Mode::Shift { gated } => {
                let base = self.dims[0] + self.dims[1];
                let alpha = cache.alpha.unwrap_or(1.0);
                d_all[..base].copy_from_slice(d_out);
                for (dv, d) in d_all[base..].iter_mut().zip(d_out) {
                    *dv = alpha * d;
                }
                if gated {
                    let gate = self.gate.as_ref().expect("gated mode has a gate");
                    let v = &cache.gate_input[base..];
                    let d_alpha: f64 = d_out.iter().zip(v).map(|(d, x)| d * x).sum();
                    let dz = [d_alpha * alpha * (1.0 - alpha)];
                    let d_in = gate.backward(store, &cache.gate_input, &dz, grads);
                    for (a, b) in d_all.iter_mut().zip(d_in) {
                        *a += b;
                    }
                }
            }
        }
        let (s, rest) = d_all.split_at(self.dims[0]);
        let (l, v) = rest.split_at(self.dims[1]);
        [s.to_vec(), l.to_vec(), v.to_vec()]
    }
}

/// `sigmoid(w . x + b)`, kept strictly inside (0, 1) even where the float
/// sigmoid would round to an endpoint.
pub fn gate_alpha(weight: &[f64], bias: f64, x: &[f64]) -> f64 {
    let z = crate::nn::dot(weight, x) + bias;
    sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `base + alpha * shift`; `alpha == 0` returns `base` unchanged bit for bit.
pub fn fuse_with_alpha(base: &[f64], shift: &[f64], alpha: f64) -> Vec<f64> {
    assert_eq!(base.len(), shift.len(), "shift length must match base length");
    if alpha == 0.0 {
        return base.to_vec();
    }
    base.iter().zip(shift).map(|(b, v)| b + alpha * v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(strategy: FusionStrategy, mods: Modalities, dims: [usize; 3]) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Fusion::new(&mut store, strategy, mods, dims, &mut rng).unwrap();
        (store, f)
    }

    fn input<'a>(s: &'a [f64], l: &'a [f64], v: &'a [f64]) -> FusionInput<'a> {
        FusionInput {
            semantic: Some(s),
            layout: Some(l),
            visual: Some(v),
        }
    }

    #[test]
    fn zero_gate_gives_half_shift() {
        let (mut store, f) = build(FusionStrategy::ConcatShiftGate, Modalities::ALL, [2, 1, 3]);
        let g = f.gate().unwrap().clone();
        store.get_mut(g.weight).fill(0.0);
        let j = f.fuse(&store, &input(&[1.0, 2.0], &[3.0], &[2.0, 4.0, 6.0])).unwrap();
        assert_eq!(j.alpha, Some(0.5));
        assert_eq!(j.vector, vec![2.0, 4.0, 6.0]);
        assert_eq!(f.gate_weight(&store, &input(&[0.0; 2], &[0.0], &[0.0; 3])).unwrap(), 0.5);
    }

    #[test]
    fn saturated_gate_reduces_to_base() {
        let (mut store, f) = build(FusionStrategy::ConcatShiftGate, Modalities::ALL, [2, 1, 3]);
        let g = f.gate().unwrap().clone();
        store.get_mut(g.weight).fill(0.0);
        store.get_mut(g.bias)[0] = -20.0;
        let j = f.fuse(&store, &input(&[1.0, 2.0], &[3.0], &[5.0, 5.0, 5.0])).unwrap();
        assert!(j.alpha.unwrap() < 1e-8);
        for (a, b) in j.vector.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn concat_all_length() {
        let (store, f) = build(FusionStrategy::ConcatAll, Modalities::ALL, [2, 1, 3]);
        assert_eq!(f.joint_dim(), 6);
        let j = f.fuse(&store, &input(&[1.0, 2.0], &[3.0], &[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(j.vector, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(f.gate().is_none());
    }

    #[test]
    fn shift_requires_matching_visual_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Fusion::new(&mut store, FusionStrategy::ConcatShiftNoGate, Modalities::ALL, [2, 1, 4], &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_modality_passes_through() {
        let (store, f) = build(FusionStrategy::ConcatShiftGate, Modalities::L, [4, 3, 7]);
        let v = [0.5, 0.25, 1.0];
        let j = f
            .fuse(
                &store,
                &FusionInput {
                    layout: Some(&v),
                    ..FusionInput::default()
                },
            )
            .unwrap();
        assert_eq!(j.vector, v.to_vec());
        assert!(store.is_empty());
    }

    #[test]
    fn semantic_layout_is_concatenation() {
        let (_, f) = build(FusionStrategy::ConcatShiftGate, Modalities::SL, [2, 1, 3]);
        assert_eq!(f.joint_dim(), 3);
    }

    #[test]
    fn forced_alpha_endpoints_are_bit_exact() {
        let s = [-0.0, 1.5, f64::MIN_POSITIVE];
        let v = [3.0, -2.0, 1e-300];
        assert_eq!(
            fuse_with_alpha(&s, &v, 0.0).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            s.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        let no_gate: Vec<f64> = s.iter().zip(&v).map(|(a, b)| a + b).collect();
        assert_eq!(fuse_with_alpha(&s, &v, 1.0), no_gate);
    }

    #[test]
    fn gate_matches_scalar_oracle() {
        let (mut store, f) = build(FusionStrategy::ConcatShiftGate, Modalities::ALL, [4, 2, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = f.gate().unwrap().clone();
        store.get_mut(g.bias)[0] = 0.3;
        let x = init::normal(&mut rng, 12, 1.0);
        let w = store.get(g.weight).to_vec();
        let mut z = 0.3;
        for k in 0..12 {
            z += w[k] * x[k];
        }
        let oracle = 1.0 / (1.0 + (-z).exp());
        let alpha = f.gate_weight(&store, &input(&x[..4], &x[4..6], &x[6..])).unwrap();
        assert!((alpha - oracle).abs() < 1e-9);
    }

    fn fd_check(strategy: FusionStrategy) {
        let (mut store, f) = build(strategy, Modalities::ALL, [4, 2, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = init::normal(&mut rng, 12, 1.0);
        let proj = init::normal(&mut rng, f.joint_dim(), 1.0);
        let loss = |store: &ParamStore, x: &[f64]| -> f64 {
            let (out, _) = f.forward(store, &input(&x[..4], &x[4..6], &x[6..])).unwrap();
            crate::nn::dot(&out, &proj)
        };
        let (_, cache) = f.forward(&store, &input(&x[..4], &x[4..6], &x[6..])).unwrap();
        let mut grads = store.zero_grads();
        let [ds, dl, dv] = f.backward(&store, &cache, &proj, &mut grads);
        let analytic_x: Vec<f64> = ds.into_iter().chain(dl).chain(dv).collect();
        let eps = 1e-6;
        let (mut num_sq, mut diff_sq) = (0.0, 0.0);
        for k in 0..12 {
            let orig = x[k];
            x[k] = orig + eps;
            let up = loss(&store, &x);
            x[k] = orig - eps;
            let down = loss(&store, &x);
            x[k] = orig;
            let num = (up - down) / (2.0 * eps);
            num_sq += num * num;
            diff_sq += (num - analytic_x[k]).powi(2);
        }
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id)[k];
                store.get_mut(id)[k] = orig + eps;
                let up = loss(&store, &x);
                store.get_mut(id)[k] = orig - eps;
                let down = loss(&store, &x);
                store.get_mut(id)[k] = orig;
                let num = (up - down) / (2.0 * eps);
                num_sq += num * num;
                diff_sq += (num - grads.get(id)[k]).powi(2);
            }
        }
        let rel = (diff_sq / num_sq).sqrt();
        assert!(rel < 1e-4, "{strategy:?}: relative error {rel}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(FusionStrategy::ConcatShiftGate);
        fd_check(FusionStrategy::ConcatShiftNoGate);
        fd_check(FusionStrategy::ConcatAll);
    }

    proptest! {
        #[test]
        fn alpha_is_strictly_inside_unit_interval(
            x in prop::collection::vec(-1e6f64..1e6, 12),
            seed in 0u64..20,
        ) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Fusion::new(&mut store, FusionStrategy::ConcatShiftGate, Modalities::ALL, [4, 2, 6], &mut rng).unwrap();
            let a = f.gate_weight(&store, &input(&x[..4], &x[4..6], &x[6..])).unwrap();
            prop_assert!(a > 0.0 && a < 1.0);
        }

        #[test]
        fn alpha_is_monotone_in_logit(b1 in -30.0f64..30.0, delta in 1e-3f64..10.0) {
            let w = [0.0; 3];
            prop_assert!(gate_alpha(&w, b1 + delta, &[1.0; 3]) >= gate_alpha(&w, b1, &[1.0; 3]));
        }
    }
}
