//! Pages, fragments and the gold key-value hierarchy.
//!
//! A [`Page`] owns a list of [`Fragment`]s and directed [`HierarchyEdge`]s
//! pointing from a superior fragment (key, header) to an inferior one
//! (value). Geometry is kept in page pixel coordinates; crops are single
//! channel rasters cut by the fragment's rectangular closure.

pub mod dump;
mod font;
pub mod funsd;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dump::{load_crop_cache, read_dump, write_crop_cache, write_dump};
pub use funsd::{load_funsd, Split};
pub use synth::{generate_split, generate_synthetic, SynthConfig, SynthLayout};

pub type FragmentId = u32;

/// Side length added to a zero-width or zero-height closure.
pub const DEGENERATE_REPAIR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned bounding box of a fragment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectClosure {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RectClosure {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Corners clockwise from the top-left.
    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x_min, self.y_min),
            Point::new(self.x_max, self.y_min),
            Point::new(self.x_max, self.y_max),
            Point::new(self.x_min, self.y_max),
        ]
    }

    /// `[x1, y1, ..., x4, y4]`, clockwise from the top-left.
    pub fn flatten(&self) -> [f64; 8] {
        let c = self.corners();
        [c[0].x, c[0].y, c[1].x, c[1].y, c[2].x, c[2].y, c[3].x, c[3].y]
    }
}

/// Componentwise min/max box of four vertices. A degenerate axis is widened
/// by [`DEGENERATE_REPAIR`] pixels.
pub fn compute_rect_closure(vertices: &[Point; 4]) -> Result<RectClosure> {
    if let Some(p) = vertices.iter().find(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite vertex ({}, {})",
            p.x, p.y
        )));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, get: fn(&Point) -> f64| {
        vertices.iter().map(get).fold(init, f)
    };
    let mut rect = RectClosure {
        x_min: fold(f64::min, f64::INFINITY, |p| p.x),
        y_min: fold(f64::min, f64::INFINITY, |p| p.y),
        x_max: fold(f64::max, f64::NEG_INFINITY, |p| p.x),
        y_max: fold(f64::max, f64::NEG_INFINITY, |p| p.y),
    };
    if rect.x_max <= rect.x_min {
        rect.x_max = rect.x_min + DEGENERATE_REPAIR;
    }
    if rect.y_max <= rect.y_min {
        rect.y_max = rect.y_min + DEGENERATE_REPAIR;
    }
    Ok(rect)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fragment {
    pub id: FragmentId,
    pub text: String,
    pub vertices: [Point; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Grayscale raster of the rectangular closure (dark ink on a light background).
    #[serde(skip)]
    pub crop: Option<GrayImage>,
}

impl Fragment {
    pub fn from_box(id: FragmentId, text: impl Into<String>, x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            id,
            text: text.into(),
            vertices: [
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
            ],
            label: None,
            crop: None,
        }
    }

    pub fn closure(&self) -> Result<RectClosure> {
        compute_rect_closure(&self.vertices).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("fragment {}: {msg}", self.id)),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HierarchyEdge {
    pub parent_id: FragmentId,
    pub child_id: FragmentId,
}

impl HierarchyEdge {
    pub const fn new(parent_id: FragmentId, child_id: FragmentId) -> Self {
        Self {
            parent_id,
            child_id,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Page {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
    pub fragments: Vec<Fragment>,
    pub edges: Vec<HierarchyEdge>,
    #[serde(skip)]
    pub image: Option<GrayImage>,
}

impl Page {
    pub fn fragment(&self, id: FragmentId) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.id == id)
    }

    pub fn index_of(&self, id: FragmentId) -> Option<usize> {
        self.fragments.iter().position(|f| f.id == id)
    }

    /// Gold parents of every fragment that has at least one.
    pub fn parents_by_child(&self) -> BTreeMap<FragmentId, BTreeSet<FragmentId>> {
        let mut map: BTreeMap<FragmentId, BTreeSet<FragmentId>> = BTreeMap::new();
        for e in &self.edges {
            map.entry(e.child_id).or_default().insert(e.parent_id);
        }
        map
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::Validation(format!("page {}: {msg}", self.page_id));
        let mut ids = HashSet::new();
        for f in &self.fragments {
            if !ids.insert(f.id) {
                return Err(ctx(format!("duplicate fragment id {}", f.id)));
            }
            for p in &f.vertices {
                if !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0) {
                    return Err(ctx(format!(
                        "fragment {} has invalid vertex ({}, {})",
                        f.id, p.x, p.y
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for e in &self.edges {
            if e.parent_id == e.child_id {
                return Err(ctx(format!("self edge on fragment {}", e.parent_id)));
            }
            if !ids.contains(&e.parent_id) || !ids.contains(&e.child_id) {
                return Err(ctx(format!(
                    "edge {} -> {} references an unknown fragment",
                    e.parent_id, e.child_id
                )));
            }
            if !seen.insert(*e) {
                return Err(ctx(format!(
                    "duplicate edge {} -> {}",
                    e.parent_id, e.child_id
                )));
            }
        }
        Ok(())
    }
}

/// Closure corners divided by the page size, clamped to `[0, 1]`.
pub fn normalize_coordinates(page: &Page) -> Result<Vec<[f64; 8]>> {
    if page.width == 0 || page.height == 0 {
        return Err(Error::Validation(format!(
            "page {} has zero dimension {}x{}",
            page.page_id, page.width, page.height
        )));
    }
    let (w, h) = (page.width as f64, page.height as f64);
    page.fragments
        .iter()
        .map(|f| {
            let mut v = f.closure()?.flatten();
            for (k, x) in v.iter_mut().enumerate() {
                let scale = if k % 2 == 0 { w } else { h };
                *x = (*x / scale).clamp(0.0, 1.0);
            }
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub split_name: String,
    pub pages: Vec<Page>,
}

/// Page, fragment and pair counts of a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub pages: usize,
    pub fragments: usize,
    pub pairs: usize,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for page in &self.pages {
            if !ids.insert(page.page_id.as_str()) {
                return Err(Error::Validation(format!(
                    "split {}: duplicate page id {}",
                    self.split_name, page.page_id
                )));
            }
            page.validate()?;
        }
        Ok(())
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            pages: self.pages.len(),
            fragments: self.pages.iter().map(|p| p.fragments.len()).sum(),
            pairs: self.pages.iter().map(|p| p.edges.len()).sum(),
        }
    }

    pub fn page(&self, page_id: &str) -> Option<&Page> {
        self.pages.iter().find(|p| p.page_id == page_id)
    }
}

/// Plain-text statistics block with the columns `Split Pages Frag. Pairs`.
pub fn format_stats_table(rows: &[(&str, DatasetStats)]) -> String {
    let mut out = format!("{:<8}{:>8}{:>10}{:>8}\n", "Split", "Pages", "Frag.", "Pairs");
    for (name, s) in rows {
        out.push_str(&format!(
            "{:<8}{:>8}{:>10}{:>8}\n",
            name, s.pages, s.fragments, s.pairs
        ));
    }
    out
}

/// Cuts the closure out of a page raster, clamped to the image bounds.
pub fn cut_crop(image: &GrayImage, rect: &RectClosure) -> GrayImage {
    let (iw, ih) = image.dimensions();
    let clamp = |v: f64, hi: u32| (v.max(0.0) as u32).min(hi);
    let x0 = clamp(rect.x_min.floor(), iw.saturating_sub(1));
    let y0 = clamp(rect.y_min.floor(), ih.saturating_sub(1));
    let x1 = clamp(rect.x_max.ceil(), iw).max(x0 + 1);
    let y1 = clamp(rect.y_max.ceil(), ih).max(y0 + 1);
    image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image()
}
