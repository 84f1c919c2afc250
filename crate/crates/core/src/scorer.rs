//! Directed bilinear relation scores `P(i -> j) = x_j^T M x_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::document::FragmentId;
use crate::error::{Error, Result};
use crate::nn::{dot, init, matvec, matvec_t_acc, outer_acc, Grads, ParamId, ParamStore};

pub const INIT_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct RelationScorer {
    pub matrix: ParamId,
    dim: usize,
}

/// Row `i`, column `j` holds the score of `i` as parent of `j`; the diagonal is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub page_id: String,
    pub fragment_ids: Vec<FragmentId>,
    pub scores: Vec<Option<f64>>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.fragment_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragment_ids.is_empty()
    }

    pub fn get(&self, parent: usize, child: usize) -> Option<f64> {
        self.scores[parent * self.len() + child]
    }
}

impl RelationScorer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let mut m = init::normal(rng, dim * dim, INIT_NOISE_STD);
        for k in 0..dim {
            m[k * dim + k] += 1.0;
        }
        Self {
            matrix: store.add("scorer.relation", &[dim, dim], m),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Validation(format!(
                "{what} feature has length {}, relation matrix expects {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn score_pair(&self, store: &ParamStore, parent: &[f64], child: &[f64]) -> Result<f64> {
        self.check(parent, "parent")?;
        self.check(child, "child")?;
        let mut mp = vec![0.0; self.dim];
        matvec(store.get(self.matrix), self.dim, self.dim, parent, &mut mp);
        Ok(dot(child, &mp))
    }

    /// `M x_i` for every fragment; scores are then single dot products.
    pub fn project(&self, store: &ParamStore, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = store.get(self.matrix);
        features
            .iter()
            .map(|x| {
                let mut out = vec![0.0; self.dim];
                matvec(m, self.dim, self.dim, x, &mut out);
                out
            })
            .collect()
    }

    pub fn score_page(&self, store: &ParamStore, page_id: &str, ids: &[FragmentId], features: &[Vec<f64>]) -> Result<ScoreTable> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Validation(format!("page {page_id}: page has no candidate pairs")));
        }
        for f in features {
            self.check(f, "fragment")?;
        }
        let projected = self.project(store, features);
        let mut scores = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    scores[i * n + j] = Some(dot(&features[j], &projected[i]));
                }
            }
        }
        Ok(ScoreTable {
            page_id: page_id.to_string(),
            fragment_ids: ids.to_vec(),
            scores,
        })
    }

    /// Backpropagates `d_scores[i * n + j]` (parent `i`, child `j`; diagonal
    /// ignored) into `M` and returns the gradients of every feature.
    pub fn backward_page(
        &self,
        store: &ParamStore,
        features: &[Vec<f64>],
        projected: &[Vec<f64>],
        d_scores: &[f64],
        grads: &mut Grads,
    ) -> Vec<Vec<f64>> {
        let (n, d) = (features.len(), self.dim);
        let m = store.get(self.matrix);
        let mut d_feat = vec![vec![0.0; d]; n];
        let mut u = vec![0.0; d];
        for i in 0..n {
            u.fill(0.0);
            let mut any = false;
            for j in 0..n {
                let g = d_scores[i * n + j];
                if i == j || g == 0.0 {
                    continue;
                }
                any = true;
                for (a, b) in u.iter_mut().zip(&features[j]) {
                    *a += g * b;
                }
                for (a, b) in d_feat[j].iter_mut().zip(&projected[i]) {
                    *a += g * b;
                }
            }
            if any {
                outer_acc(grads.get_mut(self.matrix), d, d, &u, &features[i]);
                matvec_t_acc(m, d, d, &u, &mut d_feat[i]);
            }
        }
        d_feat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scorer(dim: usize, seed: u64) -> (ParamStore, RelationScorer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = RelationScorer::new(&mut store, dim, &mut rng);
        (store, s, rng)
    }

    fn randomize(store: &mut ParamStore, s: &RelationScorer, rng: &mut ChaCha8Rng) {
        let m = init::normal(rng, s.dim * s.dim, 1.0);
        store.get_mut(s.matrix).copy_from_slice(&m);
    }

    #[test]
    fn identity_is_inner_product_and_symmetric() {
        let (mut store, s, _) = scorer(3, 0);
        let m = store.get_mut(s.matrix);
        m.fill(0.0);
        m[0] = 1.0;
        m[4] = 1.0;
        m[8] = 1.0;
        let (a, b) = ([1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]);
        assert_eq!(s.score_pair(&store, &a, &b).unwrap(), 6.0);
        assert_eq!(s.score_pair(&store, &b, &a).unwrap(), 6.0);
    }

    #[test]
    fn zero_matrix_scores_zero() {
        let (mut store, s, _) = scorer(3, 0);
        store.get_mut(s.matrix).fill(0.0);
        assert_eq!(s.score_pair(&store, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), 0.0);
    }

    #[test]
    fn child_on_the_left_parent_on_the_right() {
        let (mut store, s, _) = scorer(2, 0);
        // M = [[0, 1], [0, 0]]: x_j^T M x_i = child[0] * parent[1]
        store.get_mut(s.matrix).copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.score_pair(&store, &[0.0, 3.0], &[2.0, 0.0]).unwrap(), 6.0);
        assert_eq!(s.score_pair(&store, &[2.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let (mut store, s, mut rng) = scorer(3, 1);
        randomize(&mut store, &s, &mut rng);
        let a = init::normal(&mut rng, 3, 1.0);
        let b = init::normal(&mut rng, 3, 1.0);
        let m = store.get(s.matrix).to_vec();
        let mut oracle = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                oracle += b[p] * m[p * 3 + q] * a[q];
            }
        }
        assert!((s.score_pair(&store, &a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn page_table_matches_pairwise_scores() {
        let (mut store, s, mut rng) = scorer(5, 2);
        randomize(&mut store, &s, &mut rng);
        let feats: Vec<Vec<f64>> = (0..6).map(|_| init::normal(&mut rng, 5, 1.0)).collect();
        let ids: Vec<u32> = (10..16).collect();
        let t = s.score_page(&store, "p", &ids, &feats).unwrap();
        for i in 0..6 {
            assert_eq!(t.get(i, i), None);
            for j in (0..6).filter(|&j| j != i) {
                let pair = s.score_pair(&store, &feats[i], &feats[j]).unwrap();
                assert!((t.get(i, j).unwrap() - pair).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_fragments_give_two_pairs() {
        let (store, s, mut rng) = scorer(3, 3);
        let feats: Vec<Vec<f64>> = (0..2).map(|_| init::normal(&mut rng, 3, 1.0)).collect();
        let t = s.score_page(&store, "p", &[0, 1], &feats).unwrap();
        assert_eq!(t.scores.iter().filter(|v| v.is_some()).count(), 2);
        let err = s.score_page(&store, "p", &[0], &feats[..1]).unwrap_err();
        assert!(err.to_string().contains("page has no candidate pairs"));
    }

    #[test]
    fn symmetric_matrix_gives_symmetric_table_and_generic_does_not() {
        let (mut store, s, mut rng) = scorer(4, 4);
        randomize(&mut store, &s, &mut rng);
        let feats: Vec<Vec<f64>> = (0..5).map(|_| init::normal(&mut rng, 4, 1.0)).collect();
        let ids: Vec<u32> = (0..5).collect();
        let t = s.score_page(&store, "p", &ids, &feats).unwrap();
        let asym = (0..5).any(|i| (0..5).any(|j| i != j && t.get(i, j) != t.get(j, i)));
        assert!(asym);

        let m = store.get(s.matrix).to_vec();
        let sym = store.get_mut(s.matrix);
        for p in 0..4 {
            for q in 0..4 {
                sym[p * 4 + q] = 0.5 * (m[p * 4 + q] + m[q * 4 + p]);
            }
        }
        let t = s.score_page(&store, "p", &ids, &feats).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let (a, b) = (t.get(i, j), t.get(j, i));
                if let (Some(a), Some(b)) = (a, b) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_in_parent() {
        let (mut store, s, mut rng) = scorer(4, 5);
        randomize(&mut store, &s, &mut rng);
        let a = init::normal(&mut rng, 4, 1.0);
        let a2 = init::normal(&mut rng, 4, 1.0);
        let b = init::normal(&mut rng, 4, 1.0);
        let scaled: Vec<f64> = a.iter().map(|x| 2.5 * x).collect();
        let sum: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let f = |p: &[f64]| s.score_pair(&store, p, &b).unwrap();
        assert!((f(&scaled) - 2.5 * f(&a)).abs() < 1e-9);
        assert!((f(&sum) - f(&a) - f(&a2)).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mut store, s, mut rng) = scorer(3, 6);
        randomize(&mut store, &s, &mut rng);
        let mut feats: Vec<Vec<f64>> = (0..4).map(|_| init::normal(&mut rng, 3, 1.0)).collect();
        let weights = init::normal(&mut rng, 16, 1.0);
        let ids: Vec<u32> = (0..4).collect();
        let loss = |store: &ParamStore, feats: &[Vec<f64>]| -> f64 {
            let t = s.score_page(store, "p", &ids, feats).unwrap();
            t.scores.iter().zip(&weights).map(|(v, w)| v.unwrap_or(0.0) * w).sum()
        };
        let projected = s.project(&store, &feats);
        let mut grads = store.zero_grads();
        let d_feat = s.backward_page(&store, &feats, &projected, &weights, &mut grads);
        let eps = 1e-6;
        let (mut num_sq, mut diff_sq) = (0.0, 0.0);
        for k in 0..9 {
            let orig = store.get(s.matrix)[k];
            store.get_mut(s.matrix)[k] = orig + eps;
            let up = loss(&store, &feats);
            store.get_mut(s.matrix)[k] = orig - eps;
            let down = loss(&store, &feats);
            store.get_mut(s.matrix)[k] = orig;
            let num = (up - down) / (2.0 * eps);
            num_sq += num * num;
            diff_sq += (num - grads.get(s.matrix)[k]).powi(2);
        }
        for f in 0..4 {
            for k in 0..3 {
                let orig = feats[f][k];
                feats[f][k] = orig + eps;
                let up = loss(&store, &feats);
                feats[f][k] = orig - eps;
                let down = loss(&store, &feats);
                feats[f][k] = orig;
                let num = (up - down) / (2.0 * eps);
                num_sq += num * num;
                diff_sq += (num - d_feat[f][k]).powi(2);
            }
        }
        let rel = (diff_sq / num_sq).sqrt();
        assert!(rel < 1e-4, "relative error {rel}");
    }
}
