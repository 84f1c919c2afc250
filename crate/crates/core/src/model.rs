//! The assembled hierarchy model: encoders, fusion and relation scorer over a
//! single parameter store.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::document::{normalize_coordinates, FragmentId, Page};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionCache, FusionInput, FusionStrategy, Modalities};
use crate::layout::{relu, LayoutEncoder, COORD_DIM};
use crate::nn::{Grads, ParamId, ParamStore};
use crate::scorer::{RelationScorer, ScoreTable};
use crate::semantic::{SemanticEncoder, TextCache, TextEncoderSpec};
use crate::visual::{crop_and_resize, resize_crop, ImageCrop, VisualCache, VisualEncoder, VisualEncoderSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub modalities: Modalities,
    pub semantic: TextEncoderSpec,
    pub layout_dim: usize,
    pub visual: VisualEncoderSpec,
    pub fusion: FusionStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: Modalities::ALL,
            semantic: TextEncoderSpec::default(),
            layout_dim: 32,
            visual: VisualEncoderSpec::default(),
            fusion: FusionStrategy::ConcatShiftGate,
        }
    }
}

impl ModelConfig {
    pub fn with_modalities(modalities: Modalities) -> Self {
        Self {
            modalities,
            ..Self::default()
        }
    }

    /// The visual length is tied to the semantic and layout lengths.
    pub fn visual_dim(&self) -> usize {
        self.semantic.dim + self.layout_dim
    }

    /// Checks the configuration and returns it with an odd visual length
    /// fixed by widening the layout feature by one.
    pub fn validated(&self) -> Result<Self> {
        let mut cfg = self.clone();
        if cfg.modalities.count() == 0 {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        if cfg.semantic.dim == 0 || cfg.layout_dim == 0 {
            return Err(Error::Config("semantic and layout dimensions must be positive".into()));
        }
        if cfg.modalities.visual && cfg.visual_dim() % 2 == 1 {
            warn!(
                "semantic + layout dimension {} is odd; widening the layout feature to {}",
                cfg.visual_dim(),
                cfg.layout_dim + 1
            );
            cfg.layout_dim += 1;
        }
        if cfg.modalities.semantic {
            cfg.semantic.validate()?;
        }
        if cfg.modalities.visual {
            cfg.visual.validate(cfg.visual_dim())?;
            if cfg.fusion.is_shift() && cfg.modalities.count() > 1 && !(cfg.modalities.semantic && cfg.modalities.layout) {
                return Err(Error::Config(format!(
                    "{:?} shifts the semantic+layout concatenation and needs both modalities; use concat_all for {}",
                    cfg.fusion,
                    cfg.modalities.label()
                )));
            }
        }
        Ok(cfg)
    }

    /// Short stable hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

#[derive(Debug, Clone)]
enum SemanticInput {
    Tokens(Vec<usize>),
    Fixed(Vec<f64>),
}

/// Page converted to encoder inputs once; reused every epoch.
#[derive(Debug, Clone)]
pub struct PreparedPage {
    pub page_id: String,
    pub ids: Vec<FragmentId>,
    /// Gold parent indices of each fragment, ascending.
    pub gold_parents: Vec<Vec<usize>>,
    /// `(parent, child)` index pairs in ascending order.
    pub edges: Vec<(usize, usize)>,
    semantic: Vec<SemanticInput>,
    coords: Vec<[f64; COORD_DIM]>,
    crops: Vec<ImageCrop>,
}

impl PreparedPage {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
struct FragmentCache {
    text: Option<TextCache>,
    layout_pre: Option<Vec<f64>>,
    visual: Option<VisualCache>,
    fusion: FusionCache,
}

/// Forward state of one page, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PageEncoding {
    pub joint: Vec<Vec<f64>>,
    /// `M x_i` per fragment.
    pub projected: Vec<Vec<f64>>,
    caches: Vec<FragmentCache>,
}

impl PageEncoding {
    /// Score of fragment `parent` as parent of `child` (indices).
    pub fn score(&self, parent: usize, child: usize) -> f64 {
        crate::nn::dot(&self.joint[child], &self.projected[parent])
    }
}

#[derive(Debug)]
pub struct HierarchyModel {
    config: ModelConfig,
    store: ParamStore,
    semantic: Option<SemanticEncoder>,
    layout: Option<LayoutEncoder>,
    visual: Option<VisualEncoder>,
    fusion: Fusion,
    scorer: RelationScorer,
}

impl HierarchyModel {
    /// Builds a model with parameters drawn from `seed`, rounded to `f32`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let config = config.validated()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = config.modalities;
        let semantic = if m.semantic {
            Some(SemanticEncoder::new(&mut store, &config.semantic, &mut rng)?)
        } else {
            None
        };
        let layout = m
            .layout
            .then(|| LayoutEncoder::new(&mut store, config.layout_dim, &mut rng));
        let visual = if m.visual {
            Some(VisualEncoder::new(&mut store, &config.visual, config.visual_dim(), &mut rng)?)
        } else {
            None
        };
        let dims = [config.semantic.dim, config.layout_dim, config.visual_dim()];
        let fusion = Fusion::new(&mut store, config.fusion, m, dims, &mut rng)?;
        let scorer = RelationScorer::new(&mut store, fusion.joint_dim(), &mut rng);
        store.round_to_f32();
        Ok(Self {
            config,
            store,
            semantic,
            layout,
            visual,
            fusion,
            scorer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn scorer(&self) -> &RelationScorer {
        &self.scorer
    }

    pub fn joint_dim(&self) -> usize {
        self.fusion.joint_dim()
    }

    pub fn semantic_is_adapter(&self) -> bool {
        matches!(self.semantic, Some(SemanticEncoder::Adapter { .. }))
    }

    /// Parameters whose name does not start with any of `frozen_prefixes`.
    pub fn trainable_ids(&self, frozen_prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !frozen_prefixes.iter().any(|f| p.name.starts_with(f)))
            .map(|(id, _)| id)
            .collect()
    }

    /// Scalar count per top-level module (`semantic`, `visual`, ...).
    pub fn parameter_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            let module = p.name.split('.').next().unwrap_or("").to_string();
            match out.iter_mut().find(|(m, _)| *m == module) {
                Some((_, n)) => *n += p.data.len(),
                None => out.push((module, p.data.len())),
            }
        }
        out
    }

    pub fn prepare(&self, page: &Page) -> Result<PreparedPage> {
        let n = page.fragments.len();
        let ids: Vec<FragmentId> = page.fragments.iter().map(|f| f.id).collect();
        let mut semantic = Vec::new();
        if let Some(enc) = &self.semantic {
            for f in &page.fragments {
                semantic.push(match enc {
                    SemanticEncoder::Builtin(b) => SemanticInput::Tokens(b.tokenize(&f.text)),
                    SemanticEncoder::Adapter { .. } => {
                        SemanticInput::Fixed(enc.encode_text(&self.store, &f.text)?.0)
                    }
                });
            }
        }
        let coords = if self.layout.is_some() {
            normalize_coordinates(page)?
        } else {
            Vec::new()
        };
        let mut crops = Vec::new();
        if self.visual.is_some() {
            let geometry = &self.config.visual.geometry;
            for f in &page.fragments {
                crops.push(match &f.crop {
                    Some(raw) => resize_crop(raw, geometry, f.id),
                    None => crop_and_resize(page.image.as_ref(), &f.closure()?, geometry, f.id)
                        .map_err(|e| Error::Validation(format!("page {}: {e}", page.page_id)))?,
                });
            }
        }
        let mut gold_parents = vec![Vec::new(); n];
        let mut edges = Vec::new();
        for (child, parents) in page.parents_by_child() {
            let c = page.index_of(child).expect("validated page");
            for p in parents {
                let pi = page.index_of(p).expect("validated page");
                gold_parents[c].push(pi);
                edges.push((pi, c));
            }
        }
        gold_parents.iter_mut().for_each(|g| g.sort_unstable());
        edges.sort_unstable();
        Ok(PreparedPage {
            page_id: page.page_id.clone(),
            ids,
            gold_parents,
            edges,
            semantic,
            coords,
            crops,
        })
    }

    pub fn prepare_all(&self, pages: &[Page]) -> Result<Vec<PreparedPage>> {
        pages.iter().map(|p| self.prepare(p)).collect()
    }

    pub fn encode(&self, page: &PreparedPage) -> Result<PageEncoding> {
        let store = &self.store;
        let mut joint = Vec::with_capacity(page.len());
        let mut caches = Vec::with_capacity(page.len());
        for k in 0..page.len() {
            let (s, text) = match page.semantic.get(k) {
                Some(SemanticInput::Tokens(t)) => {
                    let Some(SemanticEncoder::Builtin(enc)) = &self.semantic else {
                        unreachable!("tokens only prepared for the builtin encoder")
                    };
                    let (v, c) = enc.forward(store, t);
                    (Some(v), Some(c))
                }
                Some(SemanticInput::Fixed(v)) => (Some(v.clone()), None),
                None => (None, None),
            };
            let (l, layout_pre) = match &self.layout {
                Some(enc) => {
                    let pre = enc.forward_pre(store, &page.coords[k]);
                    (Some(relu(pre.clone())), Some(pre))
                }
                None => (None, None),
            };
            let (v, visual) = match &self.visual {
                Some(enc) => {
                    let (v, c) = enc.forward(store, &page.crops[k])?;
                    (Some(v), Some(c))
                }
                None => (None, None),
            };
            let input = FusionInput {
                semantic: s.as_deref(),
                layout: l.as_deref(),
                visual: v.as_deref(),
            };
            let (x, fusion) = self.fusion.forward(store, &input)?;
            joint.push(x);
            caches.push(FragmentCache {
                text,
                layout_pre,
                visual,
                fusion,
            });
        }
        let projected = self.scorer.project(store, &joint);
        Ok(PageEncoding {
            joint,
            projected,
            caches,
        })
    }

    /// Accumulates parameter gradients for `d_scores[parent * n + child]`.
    /// Encoders listed in `skip` are not backpropagated into.
    pub fn backward(
        &self,
        page: &PreparedPage,
        enc: &PageEncoding,
        d_scores: &[f64],
        grads: &mut Grads,
        skip: &SkipBackward,
    ) {
        let store = &self.store;
        let d_joint = self
            .scorer
            .backward_page(store, &enc.joint, &enc.projected, d_scores, grads);
        for (k, d) in d_joint.iter().enumerate() {
            if d.iter().all(|v| *v == 0.0) {
                continue;
            }
            let cache = &enc.caches[k];
            let [ds, dl, dv] = self.fusion.backward(store, &cache.fusion, d, grads);
            if let (false, Some(SemanticEncoder::Builtin(e)), Some(c)) = (skip.semantic, &self.semantic, &cache.text) {
                e.backward(store, c, &ds, grads);
            }
            if let (false, Some(e), Some(pre)) = (skip.layout, &self.layout, &cache.layout_pre) {
                e.backward(&page.coords[k], pre, &dl, grads);
            }
            if let (false, Some(e), Some(c)) = (skip.visual, &self.visual, &cache.visual) {
                e.backward(store, c, &dv, grads);
            }
        }
    }

    pub fn score_table(&self, page: &PreparedPage) -> Result<ScoreTable> {
        let enc = self.encode(page)?;
        self.scorer.score_page(&self.store, &page.page_id, &page.ids, &enc.joint)
    }

    /// Gate value per fragment, or `None` everywhere when the model has no gate.
    pub fn gate_values(&self, page: &PreparedPage) -> Result<Vec<Option<f64>>> {
        if self.fusion.gate().is_none() {
            return Ok(vec![None; page.len()]);
        }
        let enc = self.encode(page)?;
        Ok(enc.caches.iter().map(|c| c.fusion.alpha()).collect())
    }
}

/// Encoders whose backward pass can be skipped because they are frozen.
#[derive(Debug, Clone, Copy, Default)]
pub struct SkipBackward {
    pub semantic: bool,
    pub layout: bool,
    pub visual: bool,
}
