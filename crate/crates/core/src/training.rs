//! Negative-sampling trainer.
//!
//! Each gold edge `i -> j` is contrasted against up to `K` negatives drawn
//! from the same page, excluding `j` and every gold parent of `j`. The edge
//! loss is the softmax cross entropy of the positive score; a batch sums the
//! losses of its edges.
//!
//! Batches are built from whole pages so every fragment is encoded once per
//! step: pages are shuffled each epoch and appended to the current batch
//! until it holds at least `batch_size` edges.

use std::time::Instant;

use log::{debug, info};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::document::{FragmentId, HierarchyEdge, Page};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{HierarchyModel, PreparedPage, SkipBackward};
use crate::nn::{OptimizerKind, Optimizer, ParamId};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_ADAPTER_LR: f64 = 2e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeFlags {
    pub semantic: bool,
    pub layout: bool,
    pub visual: bool,
    pub fusion: bool,
    pub scorer: bool,
}

impl FreezeFlags {
    pub fn prefixes(&self) -> Vec<&'static str> {
        [
            (self.semantic, "semantic."),
            (self.layout, "layout."),
            (self.visual, "visual."),
            (self.fusion, "fusion."),
            (self.scorer, "scorer."),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, p)| p)
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Negatives per edge.
    pub negatives: usize,
    pub epochs: usize,
    /// Minimum number of edges per optimization step.
    pub batch_size: usize,
    /// Defaults to 1e-3, or 2e-5 when the semantic encoder is an adapter.
    pub learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Global gradient norm limit per step.
    pub grad_clip: Option<f64>,
    pub freeze: FreezeFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            negatives: 10,
            epochs: 50,
            batch_size: 12,
            learning_rate: None,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            grad_clip: None,
            freeze: FreezeFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::Config("training.negatives must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        if let Some(lr) = self.learning_rate.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("training.learning_rate must be positive, got {lr}")));
        }
        if let Some(c) = self.grad_clip.filter(|c| !(*c > 0.0)) {
            return Err(Error::Config(format!("training.grad_clip must be positive, got {c}")));
        }
        Ok(())
    }

    pub fn effective_lr(&self, adapter: bool) -> f64 {
        self.learning_rate
            .unwrap_or(if adapter { DEFAULT_ADAPTER_LR } else { DEFAULT_LR })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSampleSet {
    pub child_id: FragmentId,
    pub positive_parent_id: FragmentId,
    pub negative_parent_ids: Vec<FragmentId>,
}

/// Uniform sample without replacement of up to `k` indices in `0..n`, never
/// `child` nor any index in `gold` (sorted).
pub fn sample_negative_indices<R: Rng + ?Sized>(
    n: usize,
    child: usize,
    gold: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| i != child && gold.binary_search(&i).is_err())
        .collect();
    if eligible.len() <= k {
        return eligible;
    }
    index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect()
}

pub fn sample_negatives<R: Rng + ?Sized>(
    edge: &HierarchyEdge,
    page: &Page,
    k: usize,
    rng: &mut R,
) -> Result<NegativeSampleSet> {
    let missing = |id| Error::Validation(format!("page {} has no fragment {id}", page.page_id));
    let child = page.index_of(edge.child_id).ok_or_else(|| missing(edge.child_id))?;
    page.index_of(edge.parent_id).ok_or_else(|| missing(edge.parent_id))?;
    let mut gold: Vec<usize> = page
        .parents_by_child()
        .get(&edge.child_id)
        .into_iter()
        .flatten()
        .filter_map(|&p| page.index_of(p))
        .collect();
    gold.sort_unstable();
    let neg = sample_negative_indices(page.fragments.len(), child, &gold, k, rng);
    Ok(NegativeSampleSet {
        child_id: edge.child_id,
        positive_parent_id: edge.parent_id,
        negative_parent_ids: neg.into_iter().map(|i| page.fragments[i].id).collect(),
    })
}

/// `-log softmax(positive)` over `[positive, negatives...]`, max-shifted.
pub fn edge_loss(positive: f64, negatives: &[f64]) -> f64 {
    edge_loss_grad(positive, negatives).0
}

/// Loss with its derivatives with respect to the positive and each negative.
pub fn edge_loss_grad(positive: f64, negatives: &[f64]) -> (f64, f64, Vec<f64>) {
    if negatives.is_empty() {
        return (0.0, 0.0, Vec::new());
    }
    let max = negatives.iter().copied().fold(positive, f64::max);
    let e_pos = (positive - max).exp();
    let e_neg: Vec<f64> = negatives.iter().map(|s| (s - max).exp()).collect();
    let z = e_pos + e_neg.iter().sum::<f64>();
    let loss = z.ln() - (positive - max);
    let d_neg = e_neg.iter().map(|e| e / z).collect();
    (loss, e_pos / z - 1.0, d_neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean edge loss over the epoch.
    pub loss: f64,
    pub edges: usize,
    pub skipped_edges: usize,
    pub valid_hit1: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
struct Best {
    hit1: f64,
    epoch: usize,
    params: Vec<Vec<f64>>,
}

/// Training state carried across epochs and checkpoints.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    optimizer: Optimizer,
    skip: SkipBackward,
    epoch: usize,
    history: Vec<EpochRecord>,
    best: Option<Best>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Trainer {
    pub fn new(model: &HierarchyModel, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let frozen = config.freeze.prefixes();
        let trainable = model.trainable_ids(&frozen);
        let lr = config.effective_lr(model.semantic_is_adapter());
        let optimizer = Optimizer::new(config.optimizer, lr, model.store(), trainable);
        let skip = SkipBackward {
            semantic: config.freeze.semantic,
            layout: config.freeze.layout,
            visual: config.freeze.visual,
        };
        Ok(Self {
            config: config.clone(),
            optimizer,
            skip,
            epoch: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    pub fn best_hit1(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.hit1)
    }

    pub fn trainable(&self) -> &[ParamId] {
        self.optimizer.trainable()
    }

    /// Reinstates saved progress; used when resuming from a checkpoint.
    pub fn restore(
        &mut self,
        epoch: usize,
        history: Vec<EpochRecord>,
        optimizer_step: u64,
        moments: (Vec<Vec<f64>>, Vec<Vec<f64>>),
    ) {
        self.epoch = epoch;
        self.history = history;
        self.optimizer.restore(optimizer_step, moments.0, moments.1);
    }

    /// Runs one epoch and returns its record.
    pub fn train_epoch(
        &mut self,
        model: &mut HierarchyModel,
        pages: &[PreparedPage],
        valid: Option<&[PreparedPage]>,
    ) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut rng = epoch_rng(self.config.seed, epoch);
        let mut order: Vec<usize> = (0..pages.len()).collect();
        order.shuffle(&mut rng);

        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut edges_in_batch = 0;
        for p in order {
            if pages[p].edges.is_empty() {
                continue;
            }
            if batches.is_empty() || edges_in_batch >= self.config.batch_size {
                batches.push(Vec::new());
                edges_in_batch = 0;
            }
            batches.last_mut().expect("pushed").push(p);
            edges_in_batch += pages[p].edges.len();
        }

        let (mut loss_sum, mut edges, mut skipped) = (0.0, 0usize, 0usize);
        let mut grads = model.store().zero_grads();
        for (b, batch) in batches.iter().enumerate() {
            grads.zero();
            let mut batch_loss = 0.0;
            for &p in batch {
                let page = &pages[p];
                let n = page.len();
                let enc = model.encode(page)?;
                let mut d_scores = vec![0.0; n * n];
                for &(parent, child) in &page.edges {
                    let negs =
                        sample_negative_indices(n, child, &page.gold_parents[child], self.config.negatives, &mut rng);
                    if negs.is_empty() {
                        skipped += 1;
                        continue;
                    }
                    let neg_scores: Vec<f64> = negs.iter().map(|&k| enc.score(k, child)).collect();
                    let (loss, d_pos, d_neg) = edge_loss_grad(enc.score(parent, child), &neg_scores);
                    batch_loss += loss;
                    edges += 1;
                    d_scores[parent * n + child] += d_pos;
                    for (&k, d) in negs.iter().zip(d_neg) {
                        d_scores[k * n + child] += d;
                    }
                }
                model.backward(page, &enc, &d_scores, &mut grads, &self.skip);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if let Some(clip) = self.config.grad_clip {
                let norm = grads.sq_norm().sqrt();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            self.optimizer.step(model.store_mut(), &grads);
            model.store_mut().round_to_f32();
            loss_sum += batch_loss;
            debug!("epoch {epoch} batch {b}: loss {batch_loss:.6}");
        }

        let valid_hit1 = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, &[1])?.report.hit(1).unwrap_or(0.0)),
            _ => None,
        };
        if let Some(h) = valid_hit1 {
            if self.best.as_ref().is_none_or(|b| h > b.hit1) {
                self.best = Some(Best {
                    hit1: h,
                    epoch,
                    params: model.store().iter().map(|(_, p)| p.data.clone()).collect(),
                });
            }
        }
        let record = EpochRecord {
            epoch,
            split: "train".into(),
            loss: if edges > 0 { loss_sum / edges as f64 } else { 0.0 },
            edges,
            skipped_edges: skipped,
            valid_hit1,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.4} over {edges} edges{}",
            record.loss,
            valid_hit1.map(|h| format!(", valid hit@1 {h:.2}")).unwrap_or_default()
        );
        self.epoch = epoch;
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run<F>(
        &mut self,
        model: &mut HierarchyModel,
        pages: &[PreparedPage],
        valid: Option<&[PreparedPage]>,
        mut on_epoch: F,
    ) -> Result<()>
    where
        F: FnMut(&Trainer, &HierarchyModel) -> Result<()>,
    {
        if pages.iter().all(|p| p.edges.is_empty()) {
            return Err(Error::Validation("training set has no gold edges".into()));
        }
        while self.epoch < self.config.epochs {
            self.train_epoch(model, pages, valid)?;
            on_epoch(self, model)?;
        }
        Ok(())
    }

    /// Reinstates the best-validation snapshot of a resumed run.
    pub fn restore_best_state(&mut self, epoch: usize, hit1: f64, params: Vec<Vec<f64>>) {
        self.best = Some(Best { hit1, epoch, params });
    }

    /// Loads the best-validation parameters into `model`, if any were kept.
    pub fn restore_best(&self, model: &mut HierarchyModel) -> bool {
        let Some(best) = &self.best else { return false };
        let ids: Vec<ParamId> = model.store().iter().map(|(id, _)| id).collect();
        for (id, data) in ids.into_iter().zip(&best.params) {
            model.store_mut().get_mut(id).copy_from_slice(data);
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{generate_synthetic, Fragment, SynthConfig};
    use crate::fusion::Modalities;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn page(n: u32, edges: &[(u32, u32)]) -> Page {
        Page {
            page_id: "p".into(),
            width: 100,
            height: 100,
            fragments: (0..n).map(|i| Fragment::from_box(i, "x", 0.0, 0.0, 1.0, 1.0)).collect(),
            edges: edges.iter().map(|&(p, c)| HierarchyEdge { parent_id: p, child_id: c }).collect(),
            image: None,
        }
    }

    #[test]
    fn exhausted_candidates_use_all_eligible() {
        let p = page(3, &[(0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_negatives(&p.edges[0], &p, 5, &mut rng).unwrap();
        assert_eq!(s.negative_parent_ids, vec![2]);
    }

    #[test]
    fn gold_parents_are_never_sampled() {
        let p = page(12, &[(0, 5), (1, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = sample_negatives(&p.edges[0], &p, 5, &mut rng).unwrap();
            assert_eq!(s.negative_parent_ids.len(), 5);
            assert!(s.negative_parent_ids.iter().all(|id| ![0, 1, 5].contains(id)));
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let p = page(12, &[(0, 5)]);
        let draw = |seed| sample_negatives(&p.edges[0], &p, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn uniform_scores_give_log_k_plus_one() {
        for k in [1usize, 5, 10] {
            let l = edge_loss(0.7, &vec![0.7; k]);
            assert!((l - ((k + 1) as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(edge_loss(1.0, &[]), 0.0);
        assert!(edge_loss(1e4, &[0.0, -3.0]) < 1e-12);
    }

    /// `ln(1 + e^-1)` from power series only: `e^-1 = sum (-1)^k / k!` and
    /// `ln(1 + x) = 2 atanh(x / (2 + x))`.
    fn series_softplus_minus_one() -> f64 {
        let mut e_inv = 0.0;
        let mut term = 1.0;
        for k in 0..30 {
            e_inv += term;
            term *= -1.0 / (k + 1) as f64;
        }
        let y = e_inv / (2.0 + e_inv);
        let mut atanh = 0.0;
        let mut pow = y;
        for k in 0..40 {
            atanh += pow / (2 * k + 1) as f64;
            pow *= y * y;
        }
        2.0 * atanh
    }

    #[test]
    fn closed_form_single_negative() {
        let l = edge_loss(1.0, &[0.0]);
        assert!((l - series_softplus_minus_one()).abs() < 1e-14);
        assert!((l - 0.3133).abs() < 5e-5);
    }

    #[test]
    fn gradient_matches_softmax() {
        let (l, dp, dn) = edge_loss_grad(0.5, &[0.1, -0.4, 1.2]);
        let eps = 1e-6;
        let num = (edge_loss(0.5 + eps, &[0.1, -0.4, 1.2]) - edge_loss(0.5 - eps, &[0.1, -0.4, 1.2])) / (2.0 * eps);
        assert!((dp - num).abs() < 1e-8);
        let num = (edge_loss(0.5, &[0.1, -0.4, 1.2 + eps]) - edge_loss(0.5, &[0.1, -0.4, 1.2 - eps])) / (2.0 * eps);
        assert!((dn[2] - num).abs() < 1e-8);
        assert!(l > 0.0);
    }

    proptest! {
        #[test]
        fn loss_is_positive_and_monotone(
            // Wider gaps push a negative's softmax weight below f64 resolution.
            pos in -5.0f64..5.0,
            negs in prop::collection::vec(-5.0f64..5.0, 1..8),
            which in 0usize..8,
            delta in 1e-2f64..5.0,
        ) {
            let base = edge_loss(pos, &negs);
            prop_assert!(base > 0.0 && base.is_finite());
            prop_assert!(edge_loss(pos + delta, &negs) < base);
            let mut lower = negs.clone();
            let w = which % negs.len();
            lower[w] -= delta;
            prop_assert!(edge_loss(pos, &lower) < base);
        }
    }

    fn tiny_setup(modalities: Modalities) -> (HierarchyModel, Vec<PreparedPage>) {
        let ds = generate_synthetic(
            &SynthConfig {
                pages: 4,
                keys_per_page: 2,
                values_per_key: 2,
                ..SynthConfig::default()
            },
            2,
        )
        .unwrap();
        let model = HierarchyModel::new(&ModelConfig::with_modalities(modalities), 1).unwrap();
        let pages = model.prepare_all(&ds.pages).unwrap();
        (model, pages)
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let (mut model, pages) = tiny_setup(Modalities::SL);
        let before = model.store().clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&model, &cfg).unwrap();
        t.run(&mut model, &pages, None, |_, _| Ok(())).unwrap();
        assert!(before.iter().zip(model.store().iter()).all(|((_, a), (_, b))| a == b));
        assert!(t.history().is_empty());
    }

    #[test]
    fn small_step_decreases_edge_loss() {
        let (mut model, pages) = tiny_setup(Modalities::SL);
        let page = &pages[0];
        let (parent, child) = page.edges[0];
        let negs: Vec<usize> = (0..page.len()).filter(|&k| k != child && !page.gold_parents[child].contains(&k)).collect();
        let loss_of = |m: &HierarchyModel| {
            let enc = m.encode(page).unwrap();
            let ns: Vec<f64> = negs.iter().map(|&k| enc.score(k, child)).collect();
            edge_loss(enc.score(parent, child), &ns)
        };
        let before = loss_of(&model);
        let enc = model.encode(page).unwrap();
        let n = page.len();
        let ns: Vec<f64> = negs.iter().map(|&k| enc.score(k, child)).collect();
        let (_, dp, dn) = edge_loss_grad(enc.score(parent, child), &ns);
        let mut d = vec![0.0; n * n];
        d[parent * n + child] = dp;
        for (&k, g) in negs.iter().zip(dn) {
            d[k * n + child] = g;
        }
        let mut grads = model.store().zero_grads();
        let skip = SkipBackward {
            semantic: true,
            layout: true,
            visual: true,
        };
        model.backward(page, &enc, &d, &mut grads, &skip);
        let trainable = model.trainable_ids(&["semantic.", "layout.", "visual."]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1e-4, model.store(), trainable);
        opt.step(model.store_mut(), &grads);
        assert!(loss_of(&model) < before);
    }

    #[test]
    fn same_seed_gives_identical_curves_and_loss_falls() {
        let run = || {
            let (mut model, pages) = tiny_setup(Modalities::SL);
            let cfg = TrainConfig {
                epochs: 15,
                batch_size: 4,
                seed: 3,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(&model, &cfg).unwrap();
            t.run(&mut model, &pages, Some(&pages), |_, _| Ok(())).unwrap();
            t.history().iter().map(|r| r.loss).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.last().unwrap() < &a[0], "{a:?}");
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = TrainConfig {
            negatives: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: Some(-1.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn frozen_modules_keep_their_parameters() {
        let (mut model, pages) = tiny_setup(Modalities::SL);
        let before = model.store().clone();
        let cfg = TrainConfig {
            epochs: 1,
            freeze: FreezeFlags {
                semantic: true,
                ..FreezeFlags::default()
            },
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&model, &cfg).unwrap();
        t.run(&mut model, &pages, None, |_, _| Ok(())).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store().iter()) {
            assert_eq!(a.name.starts_with("semantic."), a == b, "{}", a.name);
        }
    }
}
