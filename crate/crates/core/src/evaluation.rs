//! Ranking metrics for parent prediction.
//!
//! Every fragment with at least one gold parent is a query; all other
//! fragments of its page are candidates, ranked by descending score with ties
//! broken by ascending fragment id. Reconstruction is scored by mean
//! interpolated average precision and mean inversion count, detection by
//! Hit@k (a hit when any gold parent is within the top k).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::document::FragmentId;
use crate::error::{Error, Result};
use crate::model::{HierarchyModel, PreparedPage};
use crate::scorer::ScoreTable;

pub const DEFAULT_KS: [usize; 3] = [1, 2, 5];
pub const HIT_RULE: &str = "any";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidates {
    pub page_id: String,
    pub child_id: FragmentId,
    pub candidates: Vec<(FragmentId, f64)>,
    pub gold_parent_ids: BTreeSet<FragmentId>,
}

impl RankedCandidates {
    /// Sorts `candidates` by score descending, then id ascending.
    pub fn new(
        page_id: impl Into<String>,
        child_id: FragmentId,
        mut candidates: Vec<(FragmentId, f64)>,
        gold_parent_ids: BTreeSet<FragmentId>,
    ) -> Self {
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            page_id: page_id.into(),
            child_id,
            candidates,
            gold_parent_ids,
        }
    }

    /// 1-based positions of the gold parents, ascending.
    pub fn gold_positions(&self) -> Result<Vec<usize>> {
        let pos: Vec<usize> = self
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| self.gold_parent_ids.contains(id))
            .map(|(k, _)| k + 1)
            .collect();
        if pos.is_empty() {
            return Err(Error::Validation(format!(
                "query {}/{} has no gold parent among its candidates",
                self.page_id, self.child_id
            )));
        }
        Ok(pos)
    }
}

/// Interpolated AP: mean over recall levels `i/m` of the best precision at
/// that recall or beyond.
pub fn average_precision(ranked: &RankedCandidates) -> Result<f64> {
    let pos = ranked.gold_positions()?;
    let m = pos.len();
    let mut best = 0.0f64;
    let mut sum = 0.0;
    for i in (0..m).rev() {
        best = best.max((i + 1) as f64 / pos[i] as f64);
        sum += best;
    }
    Ok(sum / m as f64)
}

/// Number of (wrong, right) pairs with the wrong candidate ranked higher.
pub fn rank_inversions(ranked: &RankedCandidates) -> Result<u64> {
    let pos = ranked.gold_positions()?;
    Ok(pos.iter().enumerate().map(|(k, &p)| (p - (k + 1)) as u64).sum())
}

pub fn hit_at_k(ranked: &RankedCandidates, k: usize) -> Result<bool> {
    Ok(ranked.gold_positions()?[0] <= k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Reconstruction,
    Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageMetrics {
    pub page_id: String,
    pub n_queries: usize,
    pub map: f64,
    pub mrank: f64,
    pub hit1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub mrank: f64,
    /// Hit@k as a percentage of queries, keyed by k.
    pub hits: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Fragments without a gold parent; never queried.
    pub excluded: usize,
    pub hit_rule: String,
    pub fingerprint: String,
    pub per_page: Vec<PageMetrics>,
}

impl MetricsReport {
    pub fn hit(&self, k: usize) -> Option<f64> {
        self.hits.get(&k).copied()
    }
}

#[derive(Debug, Clone, Default)]
struct Acc {
    n: usize,
    ap: f64,
    inv: u64,
    hits: BTreeMap<usize, usize>,
}

impl Acc {
    fn add(&mut self, r: &RankedCandidates, ks: &[usize]) -> Result<()> {
        self.n += 1;
        self.ap += average_precision(r)?;
        self.inv += rank_inversions(r)?;
        for &k in ks {
            *self.hits.entry(k).or_default() += hit_at_k(r, k)? as usize;
        }
        Ok(())
    }

    fn hit_pct(&self, k: usize) -> f64 {
        100.0 * self.hits.get(&k).copied().unwrap_or(0) as f64 / self.n as f64
    }
}

/// Aggregates per-query metrics. `excluded` counts fragments that had no gold
/// parent and `fingerprint` identifies the model configuration.
pub fn metrics_from_rankings(
    rankings: &[RankedCandidates],
    ks: &[usize],
    excluded: usize,
    fingerprint: &str,
) -> Result<MetricsReport> {
    if rankings.is_empty() {
        return Err(Error::Validation("no evaluation queries: no fragment has a gold parent".into()));
    }
    if ks.contains(&0) {
        return Err(Error::Config("hit@k needs k >= 1".into()));
    }
    let mut total = Acc::default();
    let mut pages: Vec<(String, Acc)> = Vec::new();
    for r in rankings {
        total.add(r, ks)?;
        if pages.last().is_none_or(|(p, _)| *p != r.page_id) {
            pages.push((r.page_id.clone(), Acc::default()));
        }
        pages.last_mut().expect("pushed").1.add(r, &[1])?;
    }
    let n = total.n as f64;
    Ok(MetricsReport {
        map: total.ap / n,
        mrank: total.inv as f64 / n,
        hits: ks.iter().map(|&k| (k, total.hit_pct(k))).collect(),
        n_queries: total.n,
        excluded,
        hit_rule: HIT_RULE.into(),
        fingerprint: fingerprint.into(),
        per_page: pages
            .into_iter()
            .map(|(page_id, a)| PageMetrics {
                page_id,
                n_queries: a.n,
                map: a.ap / a.n as f64,
                mrank: a.inv as f64 / a.n as f64,
                hit1: a.hit_pct(1),
            })
            .collect(),
    })
}

/// One ranking per fragment with a gold parent, plus the number of
/// fragments skipped for having none.
pub fn rank_page(table: &ScoreTable, gold_parents: &[Vec<usize>]) -> (Vec<RankedCandidates>, usize) {
    let n = table.len();
    let mut out = Vec::new();
    let mut excluded = 0;
    for child in 0..n {
        if gold_parents[child].is_empty() {
            excluded += 1;
            continue;
        }
        out.push(rank_child(table, gold_parents, child));
    }
    (out, excluded)
}

fn rank_child(table: &ScoreTable, gold_parents: &[Vec<usize>], child: usize) -> RankedCandidates {
    let candidates = (0..table.len())
        .filter(|&i| i != child)
        .map(|i| (table.fragment_ids[i], table.get(i, child).expect("off-diagonal")))
        .collect();
    let gold = gold_parents[child].iter().map(|&i| table.fragment_ids[i]).collect();
    RankedCandidates::new(&table.page_id, table.fragment_ids[child], candidates, gold)
}

pub fn rank_candidates(model: &HierarchyModel, page: &PreparedPage, child_id: FragmentId) -> Result<RankedCandidates> {
    let child = page
        .ids
        .iter()
        .position(|&id| id == child_id)
        .ok_or_else(|| Error::Validation(format!("page {} has no fragment {child_id}", page.page_id)))?;
    let table = model.score_table(page)?;
    Ok(rank_child(&table, &page.gold_parents, child))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rankings: Vec<RankedCandidates>,
    pub tables: Vec<ScoreTable>,
}

/// Scores every page and computes the report. Pages with fewer than two
/// fragments contribute no queries.
pub fn evaluate(model: &HierarchyModel, pages: &[PreparedPage], ks: &[usize]) -> Result<Evaluation> {
    let mut rankings = Vec::new();
    let mut tables = Vec::new();
    let mut excluded = 0;
    for page in pages {
        if page.len() < 2 {
            excluded += page.len();
            continue;
        }
        let table = model.score_table(page)?;
        let (r, ex) = rank_page(&table, &page.gold_parents);
        rankings.extend(r);
        excluded += ex;
        tables.push(table);
    }
    let report = metrics_from_rankings(&rankings, ks, excluded, &model.config().fingerprint())?;
    Ok(Evaluation {
        report,
        rankings,
        tables,
    })
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    page_id: &'a str,
    child_id: FragmentId,
    ranked: &'a [(FragmentId, f64)],
    gold_parent_ids: &'a BTreeSet<FragmentId>,
}

/// One JSON object per query.
pub fn prediction_dump(rankings: &[RankedCandidates]) -> Result<String> {
    let mut out = String::new();
    for r in rankings {
        let rec = DumpRecord {
            page_id: &r.page_id,
            child_id: r.child_id,
            ranked: &r.candidates,
            gold_parent_ids: &r.gold_parent_ids,
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::json("prediction dump", e))?);
        out.push('\n');
    }
    Ok(out)
}

/// Plain-text table with one row per named report; Hit@k columns follow the
/// k values of the first report.
pub fn format_report_table(rows: &[(&str, &MetricsReport)]) -> String {
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.hits.keys().copied().collect()).unwrap_or_default();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Model".len());
    let mut out = format!("{:<name_w$}  {:>7}  {:>7}", "Model", "mAP", "mRank");
    for k in &ks {
        out.push_str(&format!("  {:>7}", format!("Hit@{k}")));
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{name:<name_w$}  {:>7.4}  {:>7.4}", r.map, r.mrank);
        for k in &ks {
            let _ = write!(out, "  {:>7.2}", r.hit(*k).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
