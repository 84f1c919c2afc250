//! Text of a fragment to its semantic feature vector.
//!
//! Two encoders sit behind one contract. The builtin encoder hashes each
//! unicode code point into an embedding table, runs a bidirectional LSTM over
//! the characters and projects the two final states to `dim`. The adapter
//! kind delegates to an externally registered sentence encoder and returns
//! its first-position (sentence-level) vector; adapter features are constants
//! from the point of view of training.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{axpy, init, BiLstm, Grads, Linear, ParamId, ParamStore};
use crate::nn::lstm::BiLstmCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    BuiltinRecurrent,
    PretrainedAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderSpec {
    pub kind: TextEncoderKind,
    /// Output dimension of the semantic feature.
    pub dim: usize,
    pub max_tokens: usize,
    /// Hash buckets of the character embedding table (builtin only).
    pub buckets: usize,
    pub embed_dim: usize,
    /// Per-direction LSTM width (builtin only).
    pub hidden: usize,
    /// Registered adapter name (adapter only).
    pub adapter: Option<String>,
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TextEncoderSpec {
    pub fn builtin() -> Self {
        Self {
            kind: TextEncoderKind::BuiltinRecurrent,
            dim: 64,
            max_tokens: 128,
            buckets: 4096,
            embed_dim: 32,
            hidden: 32,
            adapter: None,
        }
    }

    pub fn adapter(name: &str) -> Self {
        Self {
            kind: TextEncoderKind::PretrainedAdapter,
            dim: 768,
            max_tokens: 512,
            adapter: Some(name.to_string()),
            ..Self::builtin()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.max_tokens == 0 {
            return Err(Error::Config("semantic dim and max_tokens must be positive".into()));
        }
        if self.kind == TextEncoderKind::BuiltinRecurrent
            && (self.buckets == 0 || self.embed_dim == 0 || self.hidden == 0)
        {
            return Err(Error::Config(
                "semantic buckets, embed_dim and hidden must be positive".into(),
            ));
        }
        if self.kind == TextEncoderKind::PretrainedAdapter && self.adapter.is_none() {
            return Err(Error::Config("pretrained_adapter needs an adapter name".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFeature(pub Vec<f64>);

impl SemanticFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// External sentence encoder. Implementations register by name with
/// [`register_adapter`].
pub trait TextAdapter: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

fn registry() -> &'static RwLock<HashMap<String, Arc<dyn TextAdapter>>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, Arc<dyn TextAdapter>>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

pub fn register_adapter(name: &str, adapter: Arc<dyn TextAdapter>) {
    registry()
        .write()
        .expect("adapter registry poisoned")
        .insert(name.to_string(), adapter);
}

pub fn lookup_adapter(name: &str) -> Result<Arc<dyn TextAdapter>> {
    registry()
        .read()
        .expect("adapter registry poisoned")
        .get(name)
        .cloned()
        .ok_or_else(|| Error::AdapterUnavailable(name.to_string()))
}

/// Per-code-point bucket ids, truncated to `max_tokens`.
pub fn tokenize(text: &str, buckets: usize, max_tokens: usize) -> (Vec<usize>, bool) {
    let mut ids = Vec::new();
    let mut truncated = false;
    for c in text.chars() {
        if ids.len() == max_tokens {
            truncated = true;
            break;
        }
        ids.push((splitmix64(c as u64) % buckets as u64) as usize);
    }
    (ids, truncated)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Character-level bidirectional recurrent encoder.
#[derive(Debug)]
pub struct BuiltinTextEncoder {
    pub embedding: ParamId,
    pub rnn: BiLstm,
    pub proj: Linear,
    embed_dim: usize,
    buckets: usize,
    max_tokens: usize,
    truncations: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<usize>,
    rnn: BiLstmCache,
    final_states: Vec<f64>,
}

impl BuiltinTextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &TextEncoderSpec, rng: &mut R) -> Self {
        let embedding = store.add(
            "semantic.embedding",
            &[spec.buckets, spec.embed_dim],
            init::normal(rng, spec.buckets * spec.embed_dim, 0.5),
        );
        let rnn = BiLstm::new(store, "semantic.rnn", spec.embed_dim, spec.hidden, rng);
        let proj = Linear::new(store, "semantic.proj", 2 * spec.hidden, spec.dim, rng);
        Self {
            embedding,
            rnn,
            proj,
            embed_dim: spec.embed_dim,
            buckets: spec.buckets,
            max_tokens: spec.max_tokens,
            truncations: AtomicU64::new(0),
        }
    }

    /// Tokenizes and bumps the truncation counter when the text is cut.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let (ids, truncated) = tokenize(text, self.buckets, self.max_tokens);
        if truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
        }
        ids
    }

    pub fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    pub fn forward(&self, store: &ParamStore, tokens: &[usize]) -> (Vec<f64>, TextCache) {
        let e = self.embed_dim;
        let table = store.get(self.embedding);
        let mut xs = Vec::with_capacity(tokens.len() * e);
        for &t in tokens {
            xs.extend_from_slice(&table[t * e..(t + 1) * e]);
        }
        let rnn = self.rnn.forward(store, &xs, tokens.len());
        let final_states = self.rnn.final_states(&rnn);
        let out = self.proj.forward(store, &final_states);
        (
            out,
            TextCache {
                tokens: tokens.to_vec(),
                rnn,
                final_states,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, cache: &TextCache, d_out: &[f64], grads: &mut Grads) {
        let d_final = self.proj.backward(store, &cache.final_states, d_out, grads);
        let Some(dxs) = self.rnn.backward_final(store, &cache.rnn, &d_final, grads, true) else {
            return;
        };
        let e = self.embed_dim;
        let g = grads.get_mut(self.embedding);
        for (k, &t) in cache.tokens.iter().enumerate() {
            axpy(1.0, &dxs[k * e..(k + 1) * e], &mut g[t * e..(t + 1) * e]);
        }
    }
}

/// Either a trainable builtin encoder or a frozen external adapter.
pub enum SemanticEncoder {
    Builtin(BuiltinTextEncoder),
    Adapter {
        name: String,
        adapter: Arc<dyn TextAdapter>,
        max_tokens: usize,
    },
}

impl std::fmt::Debug for SemanticEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SemanticEncoder::Builtin(b) => f.debug_tuple("Builtin").field(b).finish(),
            SemanticEncoder::Adapter { name, .. } => f.debug_struct("Adapter").field("name", name).finish(),
        }
    }
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &TextEncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            TextEncoderKind::BuiltinRecurrent => Ok(Self::Builtin(BuiltinTextEncoder::new(store, spec, rng))),
            TextEncoderKind::PretrainedAdapter => {
                let name = spec.adapter.clone().unwrap_or_default();
                let adapter = lookup_adapter(&name)?;
                if adapter.dim() != spec.dim {
                    return Err(Error::Config(format!(
                        "adapter {name} produces {} dimensions, semantic dim is {}",
                        adapter.dim(),
                        spec.dim
                    )));
                }
                Ok(Self::Adapter {
                    name,
                    adapter,
                    max_tokens: spec.max_tokens,
                })
            }
        }
    }

    /// Semantic feature of `text` under the current parameters.
    pub fn encode_text(&self, store: &ParamStore, text: &str) -> Result<SemanticFeature> {
        match self {
            SemanticEncoder::Builtin(enc) => {
                let tokens = enc.tokenize(text);
                Ok(SemanticFeature(enc.forward(store, &tokens).0))
            }
            SemanticEncoder::Adapter {
                adapter, max_tokens, ..
            } => {
                let clipped: String = text.chars().take(*max_tokens).collect();
                let v = adapter.encode(&clipped)?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation("adapter returned a non-finite value".into()));
                }
                Ok(SemanticFeature(v))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dot;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(dim: usize, seed: u64) -> (ParamStore, SemanticEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = TextEncoderSpec {
            dim,
            ..TextEncoderSpec::builtin()
        };
        let enc = SemanticEncoder::new(&mut store, &spec, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn empty_text_has_a_defined_vector() {
        let (store, enc) = encoder(16, 1);
        let v = enc.encode_text(&store, "").unwrap();
        assert_eq!(v.0.len(), 16);
        assert!(v.0.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn identical_strings_encode_identically() {
        let (store, enc) = encoder(16, 2);
        let a = enc.encode_text(&store, "TOTAL").unwrap();
        let b = enc.encode_text(&store, "TOTAL").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, enc.encode_text(&store, "TOTAL:").unwrap());
    }

    #[test]
    fn long_text_is_truncated_and_counted() {
        let (store, enc) = encoder(8, 3);
        let long: String = "x".repeat(300);
        let v = enc.encode_text(&store, &long).unwrap();
        assert_eq!(v.0.len(), 8);
        let SemanticEncoder::Builtin(b) = &enc else { unreachable!() };
        assert_eq!(b.truncations(), 1);
        let clipped: String = "x".repeat(128);
        assert_eq!(v, enc.encode_text(&store, &clipped).unwrap());
    }

    #[test]
    fn missing_adapter_points_to_builtin() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = SemanticEncoder::new(&mut store, &TextEncoderSpec::adapter("nope"), &mut rng).unwrap_err();
        assert!(err.to_string().contains("builtin_recurrent"), "{err}");
    }

    struct LengthAdapter;
    impl TextAdapter for LengthAdapter {
        fn dim(&self) -> usize {
            2
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>> {
            Ok(vec![text.chars().count() as f64, 1.0])
        }
    }

    #[test]
    fn registered_adapter_is_used_and_clipped() {
        register_adapter("length-test", Arc::new(LengthAdapter));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = TextEncoderSpec {
            dim: 2,
            max_tokens: 4,
            ..TextEncoderSpec::adapter("length-test")
        };
        let enc = SemanticEncoder::new(&mut store, &spec, &mut rng).unwrap();
        assert!(store.is_empty());
        assert_eq!(enc.encode_text(&store, "abcdefgh").unwrap().0, vec![4.0, 1.0]);
    }

    #[test]
    fn builtin_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let spec = TextEncoderSpec {
            dim: 8,
            buckets: 16,
            embed_dim: 4,
            hidden: 3,
            ..TextEncoderSpec::builtin()
        };
        let enc = BuiltinTextEncoder::new(&mut store, &spec, &mut rng);
        let tokens = enc.tokenize("abc");
        let proj = init::normal(&mut rng, 8, 1.0);
        let (_, cache) = enc.forward(&store, &tokens);
        let mut grads = store.zero_grads();
        enc.backward(&store, &cache, &proj, &mut grads);
        let eps = 1e-6;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let (mut num_sq, mut diff_sq) = (0.0, 0.0);
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id)[k];
                store.get_mut(id)[k] = orig + eps;
                let up = dot(&enc.forward(&store, &tokens).0, &proj);
                store.get_mut(id)[k] = orig - eps;
                let down = dot(&enc.forward(&store, &tokens).0, &proj);
                store.get_mut(id)[k] = orig;
                let num = (up - down) / (2.0 * eps);
                num_sq += num * num;
                diff_sq += (num - grads.get(id)[k]).powi(2);
            }
        }
        assert!((diff_sq / num_sq).sqrt() < 1e-6);
    }
}
