//! Reader for the public FUNSD layout:
//! `<split>/annotations/<page>.json` next to `<split>/images/<page>.png`.
//!
//! Each entity becomes a fragment and each `linking` pair `[a, b]` becomes the
//! edge `a -> b`. Word-level boxes are ignored.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde_json::Value;

use super::{cut_crop, Dataset, Fragment, HierarchyEdge, Page};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn dir_candidates(self) -> &'static [&'static str] {
        match self {
            Split::Train => &["training_data", "train"],
            Split::Test => &["testing_data", "test"],
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "training" | "training_data" => Ok(Split::Train),
            "test" | "testing" | "testing_data" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

fn split_dir(root: &Path, split: Split) -> PathBuf {
    split
        .dir_candidates()
        .iter()
        .map(|d| root.join(d))
        .find(|p| p.join("annotations").is_dir())
        .unwrap_or_else(|| root.join(split.dir_candidates()[0]))
}

pub fn load_funsd(root: &Path, split: Split) -> Result<Dataset> {
    let dir = split_dir(root, split);
    let ann_dir = dir.join("annotations");
    let img_dir = dir.join("images");

    let mut ann_files: Vec<PathBuf> = match fs::read_dir(&ann_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if ann_files.is_empty() {
        return Err(Error::NoAnnotations(ann_dir));
    }
    ann_files.sort();

    let missing: Vec<String> = ann_files
        .iter()
        .filter(|p| !img_dir.join(image_name(p)).is_file())
        .map(|p| page_stem(p))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages { pages: missing });
    }

    let pages = ann_files
        .iter()
        .map(|ann| {
            let image_path = img_dir.join(image_name(ann));
            let image = image::open(&image_path)
                .map_err(|source| Error::Image {
                    path: image_path.clone(),
                    source,
                })?
                .to_luma8();
            parse_annotation(ann, image)
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        split_name: split.to_string(),
        pages,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn page_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn image_name(ann: &Path) -> String {
    format!("{}.png", page_stem(ann))
}

/// Builds a page from one annotation file and its page raster.
pub fn parse_annotation(path: &Path, image: image::GrayImage) -> Result<Page> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: Value = serde_json::from_str(&raw).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        field: "$".into(),
        message: e.to_string(),
    })?;
    let bad = |field: String, message: &str| Error::Annotation {
        path: path.to_path_buf(),
        field,
        message: message.to_string(),
    };

    let form = root
        .get("form")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("form".into(), "expected a list of entities"))?;

    let mut fragments = Vec::with_capacity(form.len());
    let mut links: Vec<(u32, u32)> = Vec::new();
    for (i, ent) in form.iter().enumerate() {
        let field = |name: &str| format!("form[{i}].{name}");
        let id = ent
            .get("id")
            .and_then(Value::as_u64)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| bad(field("id"), "expected a non-negative integer"))?;
        let text = ent
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(field("text"), "expected a string"))?;
        let bx = ent
            .get("box")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 4)
            .ok_or_else(|| bad(field("box"), "expected [x0, y0, x1, y1]"))?;
        let mut c = [0.0; 4];
        for (k, v) in bx.iter().enumerate() {
            c[k] = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(format!("form[{i}].box[{k}]"), "expected a number"))?;
        }
        let label = ent.get("label").and_then(Value::as_str).map(str::to_string);
        if let Some(list) = ent.get("linking") {
            let list = list
                .as_array()
                .ok_or_else(|| bad(field("linking"), "expected a list of pairs"))?;
            for (k, pair) in list.iter().enumerate() {
                let ends = pair
                    .as_array()
                    .filter(|p| p.len() == 2)
                    .and_then(|p| Some((p[0].as_u64()?, p[1].as_u64()?)))
                    .and_then(|(a, b)| Some((u32::try_from(a).ok()?, u32::try_from(b).ok()?)))
                    .ok_or_else(|| bad(format!("form[{i}].linking[{k}]"), "expected [from_id, to_id]"))?;
                links.push(ends);
            }
        }

        let (x0, y0) = (c[0].min(c[2]).max(0.0), c[1].min(c[3]).max(0.0));
        let (x1, y1) = (c[0].max(c[2]).max(0.0), c[1].max(c[3]).max(0.0));
        let mut frag = Fragment::from_box(id, text, x0, y0, x1, y1);
        frag.label = label;
        frag.crop = Some(cut_crop(&image, &frag.closure()?));
        fragments.push(frag);
    }

    let page_id = page_stem(path);
    let ids: HashSet<u32> = fragments.iter().map(|f| f.id).collect();
    let mut edges = BTreeSet::new();
    for (a, b) in links {
        if a == b {
            warn!("{page_id}: dropping self link on entity {a}");
            continue;
        }
        if !ids.contains(&a) || !ids.contains(&b) {
            warn!("{page_id}: dropping link {a} -> {b} with an unknown endpoint");
            continue;
        }
        // FUNSD lists every link on both of its entities; keep one copy.
        edges.insert(HierarchyEdge::new(a, b));
    }

    let (width, height) = image.dimensions();
    Ok(Page {
        page_id,
        width,
        height,
        fragments,
        edges: edges.into_iter().collect(),
        image: Some(image),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    fn write_page(dir: &Path, name: &str, json: &str, with_image: bool) {
        fs::create_dir_all(dir.join("annotations")).unwrap();
        fs::create_dir_all(dir.join("images")).unwrap();
        fs::write(dir.join("annotations").join(format!("{name}.json")), json).unwrap();
        if with_image {
            GrayImage::from_pixel(100, 80, Luma([255]))
                .save(dir.join("images").join(format!("{name}.png")))
                .unwrap();
        }
    }

    const SAMPLE: &str = r#"{"form": [
        {"id": 0, "text": "NAME:", "box": [5, 5, 40, 15], "label": "question",
         "linking": [[0, 1]], "words": []},
        {"id": 1, "text": "Morris Corp", "box": [45, 5, 95, 15], "label": "answer",
         "linking": [[0, 1]], "words": [{"text": "Morris", "box": [45, 5, 70, 15]}]},
        {"id": 2, "text": "", "box": [10, 30, 10, 30], "label": "other", "linking": [[2, 2]]}
    ]}"#;

    #[test]
    fn loads_entities_and_deduplicates_links() {
        let tmp = tempfile::tempdir().unwrap();
        write_page(&tmp.path().join("training_data"), "p1", SAMPLE, true);
        let ds = load_funsd(tmp.path(), Split::Train).unwrap();
        assert_eq!(ds.pages.len(), 1);
        let page = &ds.pages[0];
        assert_eq!(page.fragments.len(), 3);
        assert_eq!(page.edges, vec![HierarchyEdge::new(0, 1)]);
        assert_eq!(page.fragments[1].label.as_deref(), Some("answer"));
        assert_eq!(page.fragments[0].crop.as_ref().unwrap().dimensions(), (35, 10));
        // zero-area box survives with a 1px crop
        assert!(page.fragments[2].crop.is_some());
    }

    #[test]
    fn empty_directory_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_funsd(tmp.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("no annotation files found"), "{err}");
    }

    #[test]
    fn missing_image_lists_page() {
        let tmp = tempfile::tempdir().unwrap();
        write_page(&tmp.path().join("testing_data"), "lonely", SAMPLE, false);
        let err = load_funsd(tmp.path(), Split::Test).unwrap_err().to_string();
        assert!(err.contains("lonely"), "{err}");
    }

    #[test]
    fn malformed_box_reports_field_path() {
        let tmp = tempfile::tempdir().unwrap();
        let json = r#"{"form": [{"id": 0, "text": "a", "box": [1, 2, "x", 4], "linking": []}]}"#;
        write_page(&tmp.path().join("train"), "bad", json, true);
        let err = load_funsd(tmp.path(), Split::Train).unwrap_err().to_string();
        assert!(err.contains("form[0].box[2]") && err.contains("bad.json"), "{err}");
    }
}
