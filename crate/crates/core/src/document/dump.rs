//! Line-delimited JSON dump of a dataset (one page per line) and the on-disk
//! crop cache (`<dir>/<page_id>/<fragment_id>.png` plus `index.jsonl`).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Fragment, HierarchyEdge, Page};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PageRecord {
    format_version: u32,
    split: String,
    page_id: String,
    width: u32,
    height: u32,
    fragments: Vec<Fragment>,
    edges: Vec<HierarchyEdge>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CropIndexEntry {
    page_id: String,
    fragment_id: u32,
    file: String,
    width: u32,
    height: u32,
}

pub fn to_jsonl(dataset: &Dataset) -> Result<String> {
    let mut out = String::new();
    for page in &dataset.pages {
        let rec = PageRecord {
            format_version: FORMAT_VERSION,
            split: dataset.split_name.clone(),
            page_id: page.page_id.clone(),
            width: page.width,
            height: page.height,
            fragments: page.fragments.clone(),
            edges: page.edges.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::json(&page.page_id, e))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dump(dataset: &Dataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_jsonl(dataset)?).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut split_name = None;
    let mut pages = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
        if rec.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "{}:{}: unsupported format_version {}",
                path.display(),
                lineno + 1,
                rec.format_version
            )));
        }
        split_name.get_or_insert(rec.split);
        pages.push(Page {
            page_id: rec.page_id,
            width: rec.width,
            height: rec.height,
            fragments: rec.fragments,
            edges: rec.edges,
            image: None,
        });
    }
    let dataset = Dataset {
        split_name: split_name.unwrap_or_default(),
        pages,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_crop_cache(dataset: &Dataset, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    let mut written = 0;
    for page in &dataset.pages {
        let page_dir = dir.join(&page.page_id);
        fs::create_dir_all(&page_dir).map_err(|e| Error::io(&page_dir, e))?;
        for frag in &page.fragments {
            let Some(crop) = &frag.crop else { continue };
            let file = format!("{}/{}.png", page.page_id, frag.id);
            let path = dir.join(&file);
            crop.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            let entry = CropIndexEntry {
                page_id: page.page_id.clone(),
                fragment_id: frag.id,
                file,
                width: crop.width(),
                height: crop.height(),
            };
            index.push_str(&serde_json::to_string(&entry).map_err(|e| Error::json("crop index", e))?);
            index.push('\n');
            written += 1;
        }
    }
    let index_path = dir.join("index.jsonl");
    fs::File::create(&index_path)
        .and_then(|mut f| f.write_all(index.as_bytes()))
        .map_err(|e| Error::io(&index_path, e))?;
    Ok(written)
}

/// Attaches cached crops to the matching fragments; returns how many were found.
pub fn load_crop_cache(dataset: &mut Dataset, dir: &Path) -> Result<usize> {
    let index_path = dir.join("index.jsonl");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut files: HashMap<(String, u32), String> = HashMap::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: CropIndexEntry = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{}:{}", index_path.display(), lineno + 1), e))?;
        files.insert((entry.page_id, entry.fragment_id), entry.file);
    }
    let mut found = 0;
    for page in &mut dataset.pages {
        for frag in &mut page.fragments {
            if let Some(file) = files.get(&(page.page_id.clone(), frag.id)) {
                let path = dir.join(file);
                let img = image::open(&path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_luma8();
                frag.crop = Some(img);
                found += 1;
            }
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::{generate_synthetic, SynthConfig};

    #[test]
    fn dump_and_cache_round_trip() {
        let cfg = SynthConfig {
            pages: 2,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 3).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dump_path = tmp.path().join("data/train.jsonl");
        write_dump(&ds, &dump_path).unwrap();
        let crops = tmp.path().join("crops");
        assert_eq!(write_crop_cache(&ds, &crops).unwrap(), ds.stats().fragments);

        let mut back = read_dump(&dump_path).unwrap();
        assert_eq!(back.split_name, "synthetic");
        assert_eq!(to_jsonl(&back).unwrap(), to_jsonl(&ds).unwrap());
        assert_eq!(load_crop_cache(&mut back, &crops).unwrap(), ds.stats().fragments);
        for (a, b) in ds.pages.iter().zip(&back.pages) {
            for (fa, fb) in a.fragments.iter().zip(&b.fragments) {
                assert_eq!(fa.crop, fb.crop);
            }
        }
        let first_line = fs::read_to_string(&dump_path).unwrap();
        assert!(first_line.starts_with("{\"format_version\":1"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("d.jsonl");
        fs::write(&p, r#"{"format_version":2,"split":"x","page_id":"a","width":1,"height":1,"fragments":[],"edges":[]}"#).unwrap();
        assert!(read_dump(&p).unwrap_err().to_string().contains("format_version"));
    }
}
