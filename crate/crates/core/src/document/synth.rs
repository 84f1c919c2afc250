//! Deterministic synthetic form pages.
//!
//! Every page holds `keys_per_page` key fragments laid out either as column
//! headers (values stacked beneath) or as row headers (values to the right),
//! and `values_per_key` value fragments per key. Gold edges point from each
//! key to its values. Key texts can repeat within a page so that only the
//! layout identifies the right key, and keys can be rendered in a heavier
//! stroke so that the crop alone carries a superior/inferior signal.

use image::{GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::font::{glyph, GLYPH_H, GLYPH_W};
use super::{cut_crop, Dataset, Fragment, HierarchyEdge, Page};
use crate::error::{Error, Result};

const KEY_LEXICON: &[&str] = &[
    "NAME", "DATE", "TOTAL", "ADDRESS", "PHONE", "CITY", "STATE", "ZIP", "AMOUNT", "ACCOUNT",
    "BRAND", "REGION", "STORE", "PRICE", "UNITS", "CODE", "EMAIL", "FAX", "TITLE", "DEPT",
    "ORDER", "ITEM", "QTY", "REF", "NOTES", "SIGNED", "STATUS", "TYPE", "WEIGHT", "COUNTY",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthLayout {
    Columns,
    Rows,
    /// Each page picks columns or rows with equal probability.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub pages: usize,
    pub keys_per_page: usize,
    pub values_per_key: usize,
    /// Probability that a key reuses the text of the page's first key.
    pub duplicate_key_prob: f64,
    /// Probability that a key is drawn with a heavier stroke.
    pub bold_superior_prob: f64,
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Pixel size of one glyph cell.
    pub glyph_scale: u32,
    /// Characters used for value texts.
    pub glyph_set: String,
    pub layout: SynthLayout,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pages: 20,
            keys_per_page: 4,
            values_per_key: 3,
            duplicate_key_prob: 0.5,
            bold_superior_prob: 1.0,
            canvas_width: 640,
            canvas_height: 480,
            glyph_scale: 2,
            glyph_set: "0123456789-/.".into(),
            layout: SynthLayout::Mixed,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Validation(format!("synthetic config: {m}")));
        if self.pages == 0 {
            return fail("pages must be at least 1");
        }
        if self.keys_per_page == 0 || self.values_per_key == 0 {
            return fail("keys_per_page and values_per_key must be at least 1");
        }
        if self.keys_per_page > KEY_LEXICON.len() {
            return fail("keys_per_page exceeds the key lexicon");
        }
        for (name, p) in [
            ("duplicate_key_prob", self.duplicate_key_prob),
            ("bold_superior_prob", self.bold_superior_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must be within [0, 1]"));
            }
        }
        if self.canvas_width < 64 || self.canvas_height < 64 || self.glyph_scale == 0 {
            return fail("canvas must be at least 64x64 and glyph_scale at least 1");
        }
        if self.glyph_set.chars().all(char::is_whitespace) {
            return fail("glyph_set must contain a printable character");
        }
        Ok(())
    }
}

/// Generates one split named `synthetic`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    generate_split(config, seed, "synthetic")
}

pub fn generate_split(config: &SynthConfig, seed: u64, split_name: &str) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = (0..config.pages)
        .map(|i| generate_page(config, &mut rng, format!("{split_name}-{i:04}")))
        .collect();
    Ok(Dataset {
        split_name: split_name.to_string(),
        pages,
    })
}

struct Placed {
    text: String,
    x: u32,
    y: u32,
    bold: bool,
    is_key: bool,
    key_index: usize,
}

fn generate_page(cfg: &SynthConfig, rng: &mut ChaCha8Rng, page_id: String) -> Page {
    let scale = cfg.glyph_scale;
    let pad = scale + 1;
    let box_h = GLYPH_H * scale + 2 * pad;
    let text_w = |t: &str| (t.chars().count() as u32 * (GLYPH_W + 1) * scale).saturating_sub(scale) + 2 * pad;

    let key_texts = draw_key_texts(cfg, rng);
    let value_chars: Vec<char> = cfg.glyph_set.chars().filter(|c| !c.is_whitespace()).collect();
    let value_texts: Vec<Vec<String>> = (0..cfg.keys_per_page)
        .map(|_| {
            (0..cfg.values_per_key)
                .map(|_| {
                    let len = rng.random_range(2..=6);
                    (0..len)
                        .map(|_| value_chars[rng.random_range(0..value_chars.len())])
                        .collect()
                })
                .collect()
        })
        .collect();
    let bold: Vec<bool> = (0..cfg.keys_per_page)
        .map(|_| rng.random_bool(cfg.bold_superior_prob))
        .collect();

    let columns = match cfg.layout {
        SynthLayout::Columns => true,
        SynthLayout::Rows => false,
        SynthLayout::Mixed => rng.random_bool(0.5),
    };

    let (cw, ch) = (cfg.canvas_width, cfg.canvas_height);
    let margin_x = rng.random_range(8..=40u32);
    let top = rng.random_range(10..=60u32);
    let jitter = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.random_range(lo..=hi);
    let shift = |base: u32, d: i32| (base as i64 + d as i64).max(0) as u32;

    let mut placed = Vec::new();
    if columns {
        let pitch = (cw.saturating_sub(margin_x + 10)) as f64 / cfg.keys_per_page as f64;
        let row_pitch = box_h + rng.random_range(8..=24u32);
        for k in 0..cfg.keys_per_page {
            let kx = margin_x + (k as f64 * pitch) as u32 + rng.random_range(0..=6u32);
            let ky = shift(top, jitter(rng, -2, 2));
            placed.push(Placed { text: key_texts[k].clone(), x: kx, y: ky, bold: bold[k], is_key: true, key_index: k });
            for (r, v) in value_texts[k].iter().enumerate() {
                let vx = shift(kx, jitter(rng, -4, 4));
                let vy = shift(top + (r as u32 + 1) * row_pitch, jitter(rng, -2, 2));
                placed.push(Placed { text: v.clone(), x: vx, y: vy, bold: false, is_key: false, key_index: k });
            }
        }
    } else {
        let row_pitch = box_h + rng.random_range(10..=26u32);
        let key_col = key_texts.iter().map(|t| text_w(t)).max().unwrap_or(0) + rng.random_range(10..=30u32);
        let values_left = margin_x + key_col;
        let vpitch = (cw.saturating_sub(values_left + 10)) as f64 / cfg.values_per_key as f64;
        for k in 0..cfg.keys_per_page {
            let kx = margin_x + rng.random_range(0..=4u32);
            let ky = top + k as u32 * row_pitch;
            placed.push(Placed { text: key_texts[k].clone(), x: kx, y: ky, bold: bold[k], is_key: true, key_index: k });
            for (c, v) in value_texts[k].iter().enumerate() {
                let vx = values_left + (c as f64 * vpitch) as u32 + rng.random_range(0..=6u32);
                let vy = shift(ky, jitter(rng, -2, 2));
                placed.push(Placed { text: v.clone(), x: vx, y: vy, bold: false, is_key: false, key_index: k });
            }
        }
    }

    let mut ids: Vec<u32> = (0..placed.len() as u32).collect();
    ids.shuffle(rng);

    let mut image = GrayImage::from_pixel(cw, ch, Luma([255]));
    let mut fragments = Vec::with_capacity(placed.len());
    let mut key_ids = vec![0u32; cfg.keys_per_page];
    for (p, &id) in placed.iter().zip(&ids) {
        let w = text_w(&p.text);
        let x = p.x.min(cw.saturating_sub(w + 1));
        let y = p.y.min(ch.saturating_sub(box_h + 1));
        draw_text(&mut image, &p.text, x + pad, y + pad, scale, p.bold);
        let mut frag = Fragment::from_box(id, p.text.clone(), x as f64, y as f64, (x + w) as f64, (y + box_h) as f64);
        frag.label = Some(if p.is_key { "question" } else { "answer" }.to_string());
        if p.is_key {
            key_ids[p.key_index] = id;
        }
        fragments.push(frag);
    }
    for frag in &mut fragments {
        let rect = frag.closure().expect("generated boxes are finite");
        frag.crop = Some(cut_crop(&image, &rect));
    }
    let edges = placed
        .iter()
        .zip(&ids)
        .filter(|(p, _)| !p.is_key)
        .map(|(p, &id)| HierarchyEdge::new(key_ids[p.key_index], id))
        .collect();
    fragments.sort_by_key(|f| f.id);

    Page {
        page_id,
        width: cw,
        height: ch,
        fragments,
        edges,
        image: Some(image),
    }
}

fn draw_key_texts(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<&str> = KEY_LEXICON.to_vec();
    pool.shuffle(rng);
    let colon = rng.random_bool(0.5);
    let decorate = |w: &str| if colon { format!("{w}:") } else { w.to_string() };
    let first = pool[0];
    let mut next_fresh = 1;
    let mut texts = vec![decorate(first)];
    for _ in 1..cfg.keys_per_page {
        if rng.random_bool(cfg.duplicate_key_prob) {
            texts.push(decorate(first));
        } else {
            texts.push(decorate(pool[next_fresh]));
            next_fresh += 1;
        }
    }
    texts
}

fn draw_text(img: &mut GrayImage, text: &str, x0: u32, y0: u32, scale: u32, bold: bool) {
    let extra = if bold { (scale / 2).max(1) } else { 0 };
    let (w, h) = img.dimensions();
    for (i, c) in text.chars().enumerate() {
        let gx = x0 + i as u32 * (GLYPH_W + 1) * scale;
        for (r, row) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                let px = gx + col * scale;
                let py = y0 + r as u32 * scale;
                for dy in 0..scale {
                    for dx in 0..scale + extra {
                        if px + dx < w && py + dy < h {
                            img.put_pixel(px + dx, py + dy, Luma([0]));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::dump;

    fn small(pages: usize, keys: usize, values: usize) -> SynthConfig {
        SynthConfig {
            pages,
            keys_per_page: keys,
            values_per_key: values,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts_follow_config() {
        let ds = generate_synthetic(&small(1, 2, 2), 1).unwrap();
        let s = ds.stats();
        assert_eq!((s.pages, s.fragments, s.pairs), (1, 6, 4));
        ds.validate().unwrap();
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let cfg = small(3, 4, 3);
        let a = generate_synthetic(&cfg, 42).unwrap();
        let b = generate_synthetic(&cfg, 42).unwrap();
        assert_eq!(dump::to_jsonl(&a).unwrap(), dump::to_jsonl(&b).unwrap());
        for (pa, pb) in a.pages.iter().zip(&b.pages) {
            assert_eq!(pa.image, pb.image);
            for (fa, fb) in pa.fragments.iter().zip(&pb.fragments) {
                assert_eq!(fa.crop, fb.crop);
            }
        }
        let c = generate_synthetic(&cfg, 43).unwrap();
        assert_ne!(dump::to_jsonl(&a).unwrap(), dump::to_jsonl(&c).unwrap());
    }

    #[test]
    fn full_duplication_repeats_key_text() {
        let cfg = SynthConfig {
            duplicate_key_prob: 1.0,
            ..small(4, 3, 2)
        };
        for page in generate_synthetic(&cfg, 5).unwrap().pages {
            let keys: Vec<&str> = page
                .fragments
                .iter()
                .filter(|f| f.label.as_deref() == Some("question"))
                .map(|f| f.text.as_str())
                .collect();
            assert_eq!(keys.len(), 3);
            assert!(keys.iter().all(|t| *t == keys[0]));
        }
    }

    #[test]
    fn zero_keys_or_values_rejected() {
        assert!(generate_synthetic(&small(1, 0, 2), 0).is_err());
        assert!(generate_synthetic(&small(1, 2, 0), 0).is_err());
        assert!(generate_synthetic(&small(0, 2, 2), 0).is_err());
    }

    #[test]
    fn bold_keys_carry_more_ink() {
        let ink = |img: &GrayImage| img.pixels().filter(|p| p.0[0] < 128).count() as f64 / img.len() as f64;
        let mut plain = GrayImage::from_pixel(80, 20, Luma([255]));
        let mut heavy = plain.clone();
        draw_text(&mut plain, "NAME", 2, 2, 2, false);
        draw_text(&mut heavy, "NAME", 2, 2, 2, true);
        assert!(ink(&heavy) > 1.3 * ink(&plain));
    }

    #[test]
    fn every_fragment_has_a_crop_and_edges_resolve() {
        let ds = generate_synthetic(&small(5, 4, 3), 9).unwrap();
        for p in &ds.pages {
            assert!(p.fragments.iter().all(|f| f.crop.is_some()));
            for e in &p.edges {
                assert!(p.fragment(e.parent_id).is_some() && p.fragment(e.child_id).is_some());
                assert_ne!(e.parent_id, e.child_id);
            }
        }
    }
}
