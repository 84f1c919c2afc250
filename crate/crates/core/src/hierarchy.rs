//! Materializes a tree from a page's pairwise scores.
//!
//! Each fragment takes its highest-scoring candidate as parent (ties go to
//! the smaller id), optionally only when the score reaches a threshold. The
//! resulting parent map is a functional graph, so its cycles are disjoint;
//! each is broken by dropping its lowest-scoring edge.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::document::FragmentId;
use crate::scorer::ScoreTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedEdge {
    pub parent_id: FragmentId,
    pub child_id: FragmentId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub page_id: String,
    pub fragment_ids: Vec<FragmentId>,
    pub edges: Vec<PredictedEdge>,
    /// Argmax edges removed to break cycles.
    pub dropped: Vec<PredictedEdge>,
}

/// Index of the best parent for `child`, or `None` when no candidate exists.
fn argmax_parent(table: &ScoreTable, child: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for parent in 0..table.len() {
        let Some(s) = table.get(parent, child) else { continue };
        if parent == child {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && table.fragment_ids[parent] < table.fragment_ids[b]),
        };
        if better {
            best = Some((parent, s));
        }
    }
    best
}

pub fn assemble(table: &ScoreTable, threshold: Option<f64>) -> Hierarchy {
    let n = table.len();
    if n < 2 {
        warn!("page {} has {n} fragment(s); the hierarchy is empty", table.page_id);
    }
    let mut parent: Vec<Option<(usize, f64)>> = (0..n)
        .map(|c| argmax_parent(table, c).filter(|&(_, s)| threshold.is_none_or(|t| s >= t)))
        .collect();

    // 0 = unvisited, 1 = on the current walk, 2 = done.
    let mut state = vec![0u8; n];
    let mut dropped = Vec::new();
    for start in 0..n {
        let mut path = Vec::new();
        let mut cur = Some(start);
        while let Some(c) = cur {
            if state[c] == 2 {
                break;
            }
            if state[c] == 1 {
                let cycle = &path[path.iter().position(|&p| p == c).expect("on path")..];
                let weakest = *cycle
                    .iter()
                    .min_by(|&&a: &&usize, &&b: &&usize| {
                        let (sa, sb) = (parent[a].expect("in cycle").1, parent[b].expect("in cycle").1);
                        sa.total_cmp(&sb)
                            .then(table.fragment_ids[a].cmp(&table.fragment_ids[b]))
                    })
                    .expect("cycle is non-empty");
                let (p, s) = parent[weakest].take().expect("in cycle");
                dropped.push(PredictedEdge {
                    parent_id: table.fragment_ids[p],
                    child_id: table.fragment_ids[weakest],
                    score: s,
                });
                break;
            }
            state[c] = 1;
            path.push(c);
            cur = parent[c].map(|(p, _)| p);
        }
        for p in path {
            state[p] = 2;
        }
    }

    let edges = parent
        .iter()
        .enumerate()
        .filter_map(|(c, e)| {
            e.map(|(p, score)| PredictedEdge {
                parent_id: table.fragment_ids[p],
                child_id: table.fragment_ids[c],
                score,
            })
        })
        .collect();
    Hierarchy {
        page_id: table.page_id.clone(),
        fragment_ids: table.fragment_ids.clone(),
        edges,
        dropped,
    }
}

impl Hierarchy {
    pub fn parent_of(&self, child: FragmentId) -> Option<&PredictedEdge> {
        self.edges.iter().find(|e| e.child_id == child)
    }

    /// Indented text tree; roots and siblings are ordered by id.
    pub fn render(&self, texts: &BTreeMap<FragmentId, String>) -> String {
        let mut children: BTreeMap<FragmentId, Vec<&PredictedEdge>> = BTreeMap::new();
        for e in &self.edges {
            children.entry(e.parent_id).or_default().push(e);
        }
        for list in children.values_mut() {
            list.sort_by_key(|e| e.child_id);
        }
        let mut roots: Vec<FragmentId> = self
            .fragment_ids
            .iter()
            .copied()
            .filter(|id| self.parent_of(*id).is_none())
            .collect();
        roots.sort_unstable();

        let mut out = String::new();
        let mut stack: Vec<(FragmentId, usize, Option<f64>)> = roots.iter().rev().map(|&r| (r, 0, None)).collect();
        while let Some((id, depth, score)) = stack.pop() {
            let text = texts.get(&id).map(String::as_str).unwrap_or("");
            let _ = write!(out, "{}[{id}] {text}", "  ".repeat(depth));
            if let Some(s) = score {
                let _ = write!(out, "  ({s:.3})");
            }
            out.push('\n');
            if let Some(list) = children.get(&id) {
                stack.extend(list.iter().rev().map(|e| (e.child_id, depth + 1, Some(e.score))));
            }
        }
        out
    }
}
