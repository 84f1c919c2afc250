use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use formstruct::checkpoint::Checkpoint;
use formstruct::document::{
    format_stats_table, generate_split, load_crop_cache, load_funsd, read_dump, write_crop_cache, write_dump,
    Dataset, Split,
};
use formstruct::evaluation::{evaluate, format_report_table, prediction_dump, Task};
use formstruct::hierarchy::assemble;
use formstruct::model::HierarchyModel;
use formstruct::training::Trainer;
use log::{info, warn};
use serde_json::json;

use crate::config::{write_json, RunConfig};
use crate::Invalid;

/// Offsets keep the synthetic splits disjoint for any run seed.
const TEST_SEED_OFFSET: u64 = 1_000_003;
const VALID_SEED_OFFSET: u64 = 2_000_003;

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub valid: Option<Dataset>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    if let Some(s) = &d.synthetic {
        let gen = |pages: usize, offset: u64, name: &str| {
            let mut g = s.generator.clone();
            g.pages = pages;
            generate_split(&g, cfg.seed.wrapping_add(offset), name)
        };
        return Ok(Splits {
            train: gen(s.train_pages, 0, "train")?,
            test: gen(s.test_pages, TEST_SEED_OFFSET, "test")?,
            valid: if s.valid_pages > 0 {
                Some(gen(s.valid_pages, VALID_SEED_OFFSET, "valid")?)
            } else {
                None
            },
        });
    }
    if let Some(root) = &d.funsd {
        return Ok(Splits {
            train: load_funsd(root, Split::Train)?,
            test: load_funsd(root, Split::Test)?,
            valid: None,
        });
    }
    let dump = d.dump.as_ref().expect("validated: one source is set");
    let read = |path: &Path, split: &str| -> Result<Dataset> {
        let mut ds = read_dump(path)?;
        if let Some(crops) = &dump.crops {
            let n = load_crop_cache(&mut ds, &crops.join(split))?;
            info!("{split}: attached {n} cached crops");
        }
        Ok(ds)
    };
    Ok(Splits {
        train: read(&dump.train, "train")?,
        test: read(&dump.test, "test")?,
        valid: dump.valid.as_deref().map(|v| read(v, "valid")).transpose()?,
    })
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

pub fn synthesize(cfg: &RunConfig) -> Result<()> {
    let splits = load_splits(cfg)?;
    let data_dir = cfg.out_dir.join("data");
    create_out_dir(&data_dir)?;
    let mut rows = Vec::new();
    let named = [("train", Some(&splits.train)), ("test", Some(&splits.test)), ("valid", splits.valid.as_ref())];
    for (name, ds) in named {
        let Some(ds) = ds else { continue };
        write_dump(ds, &data_dir.join(format!("{name}.jsonl")))?;
        let crops = write_crop_cache(ds, &data_dir.join("crops").join(name))?;
        info!("{name}: wrote {crops} crops");
        rows.push((name, ds.stats()));
    }
    print!("{}", format_stats_table(&rows));
    println!("dump written to {}", data_dir.display());
    Ok(())
}

fn train_log_line(path: &Path, value: &serde_json::Value) -> formstruct::Result<()> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .and_then(|mut f| writeln!(f, "{value}"))
        .map_err(|e| formstruct::Error::io(path, e))
}

pub fn train(cfg: &RunConfig, resume: bool, checkpoint: Option<&Path>) -> Result<()> {
    let splits = load_splits(cfg)?;
    create_out_dir(&cfg.out_dir)?;
    let last_path = cfg.out_dir.join("last.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let log_path = cfg.out_dir.join("train_log.jsonl");

    let mut model = HierarchyModel::new(&cfg.model, cfg.seed)?;
    let pages = model.prepare_all(&splits.train.pages)?;
    let valid = splits.valid.as_ref().map(|v| model.prepare_all(&v.pages)).transpose()?;
    if pages.iter().all(|p| p.edges.is_empty()) {
        return Err(Invalid("training split has no gold edges".into()).into());
    }

    let mut trainer = if resume {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| last_path.clone());
        let ckpt = Checkpoint::load(&path).with_context(|| format!("resuming from {}", path.display()))?;
        if ckpt.header.model != cfg.model {
            return Err(Invalid(format!("{} was trained with a different model config", path.display())).into());
        }
        ckpt.apply_to(&mut model)?;
        let mut t = ckpt.resume_trainer(&model, &cfg.training)?;
        if let (Some(epoch), Some(hit1), true) = (ckpt.header.best_epoch, ckpt.header.best_hit1, best_path.exists()) {
            let best = Checkpoint::load(&best_path)?;
            t.restore_best_state(epoch, hit1, best.param_values(&model)?);
        }
        println!("resuming at epoch {} of {}", t.epoch(), cfg.training.epochs);
        t
    } else {
        if log_path.exists() {
            fs::remove_file(&log_path).with_context(|| format!("removing stale {}", log_path.display()))?;
        }
        Trainer::new(&model, &cfg.training)?
    };

    let train_cfg = cfg.training.clone();
    trainer.run(&mut model, &pages, valid.as_deref(), |t, m| {
        let rec = t.history().last().expect("one epoch done");
        let line = json!({
            "epoch": rec.epoch,
            "split": rec.split,
            "loss": rec.loss,
            "edges": rec.edges,
            "skipped_edges": rec.skipped_edges,
            "hit1": rec.valid_hit1,
            "wall_time_s": rec.wall_time_s,
        });
        train_log_line(&log_path, &line)?;
        println!(
            "epoch {:>3}  loss {:.4}{}",
            rec.epoch,
            rec.loss,
            rec.valid_hit1.map(|h| format!("  valid hit@1 {h:.2}")).unwrap_or_default()
        );
        Checkpoint::capture(m, &train_cfg, Some(t)).save(&last_path)?;
        if t.best_epoch() == Some(rec.epoch) {
            Checkpoint::capture(m, &train_cfg, Some(t)).save(&best_path)?;
        }
        Ok(())
    })?;
    if trainer.best_epoch().is_none() {
        // Without validation the final parameters are the result.
        fs::copy(&last_path, &best_path).with_context(|| format!("writing {}", best_path.display()))?;
    }
    println!("checkpoints: {} (last), {} (best)", last_path.display(), best_path.display());
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("best.ckpt"))
}

/// Loads a checkpoint into the model the config describes, so any
/// disagreement surfaces as a named shape error.
fn load_for_config(cfg: &RunConfig, path: &Path) -> Result<HierarchyModel> {
    if !path.exists() {
        return Err(Invalid(format!("checkpoint {} does not exist", path.display())).into());
    }
    let ckpt = Checkpoint::load(path)?;
    let mut model = HierarchyModel::new(&cfg.model, cfg.seed)?;
    ckpt.apply_to(&mut model)
        .with_context(|| format!("checkpoint {} does not match the configured model", path.display()))?;
    Ok(model)
}

pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: Option<&Path>, dump_predictions: bool) -> Result<()> {
    let path = default_checkpoint(cfg, checkpoint);
    let model = load_for_config(cfg, &path)?;
    let splits = load_splits(cfg)?;
    let pages = model.prepare_all(&splits.test.pages)?;
    let eval = evaluate(&model, &pages, &cfg.evaluation.ks)?;
    create_out_dir(&cfg.out_dir)?;

    let r = &eval.report;
    let mut blocks = serde_json::Map::new();
    for task in &cfg.evaluation.tasks {
        match task {
            Task::Reconstruction => {
                blocks.insert("reconstruction".into(), json!({ "map": r.map, "mrank": r.mrank }));
            }
            Task::Detection => {
                blocks.insert("detection".into(), json!({ "hits": r.hits, "hit_rule": r.hit_rule }));
            }
        }
    }
    blocks.insert("n_queries".into(), json!(r.n_queries));
    blocks.insert("excluded".into(), json!(r.excluded));
    blocks.insert("fingerprint".into(), json!(r.fingerprint));
    blocks.insert("checkpoint".into(), json!(path.display().to_string()));
    blocks.insert("report".into(), serde_json::to_value(r)?);
    let metrics_path = cfg.out_dir.join("metrics.json");
    write_json(&metrics_path, &blocks)?;

    print!("{}", format_report_table(&[(cfg.model.modalities.label().as_str(), r)]));
    println!("metrics written to {}", metrics_path.display());
    if dump_predictions {
        let dump_path = cfg.out_dir.join("predictions.jsonl");
        fs::write(&dump_path, prediction_dump(&eval.rankings)?)
            .with_context(|| format!("writing {}", dump_path.display()))?;
        println!("predictions written to {}", dump_path.display());
    }
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, page_id: &str) -> Result<()> {
    let path = default_checkpoint(cfg, checkpoint);
    let model = load_for_config(cfg, &path)?;
    let splits = load_splits(cfg)?;
    let page = [Some(&splits.test), Some(&splits.train), splits.valid.as_ref()]
        .into_iter()
        .flatten()
        .find_map(|ds| ds.page(page_id))
        .ok_or_else(|| Invalid(format!("page {page_id} is not in any split")))?;

    let prepared = model.prepare(page)?;
    let hierarchy = if prepared.len() < 2 {
        warn!("page {page_id} has fewer than two fragments; nothing to link");
        formstruct::hierarchy::Hierarchy {
            page_id: page_id.to_string(),
            fragment_ids: prepared.ids.clone(),
            edges: Vec::new(),
            dropped: Vec::new(),
        }
    } else {
        assemble(&model.score_table(&prepared)?, cfg.evaluation.tree_threshold)
    };
    let texts: BTreeMap<_, _> = page.fragments.iter().map(|f| (f.id, f.text.clone())).collect();
    for e in &hierarchy.edges {
        println!("{} -> {}  {:.4}", e.parent_id, e.child_id, e.score);
    }
    for e in &hierarchy.dropped {
        println!("dropped {} -> {}  {:.4}  (cycle)", e.parent_id, e.child_id, e.score);
    }
    println!();
    print!("{}", hierarchy.render(&texts));
    create_out_dir(&cfg.out_dir)?;
    let out = cfg.out_dir.join(format!("hierarchy-{page_id}.json"));
    write_json(&out, &hierarchy)?;
    Ok(())
}

pub fn inspect(checkpoint: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let model = ckpt.build_model()?;
    let h = &ckpt.header;
    println!("checkpoint   {}", checkpoint.display());
    println!("fingerprint  {}", h.fingerprint);
    println!("modalities   {}", h.model.modalities.label());
    println!("fusion       {:?}", h.model.fusion);
    println!("epoch        {}", h.epoch);
    if let (Some(e), Some(hit1)) = (h.best_epoch, h.best_hit1) {
        println!("best         epoch {e}, valid hit@1 {hit1:.2}");
    }
    if let Some(last) = h.history.last() {
        println!("last loss    {:.4}", last.loss);
    }
    println!();
    println!("{:<10}{:>12}", "Module", "Params");
    let counts = model.parameter_counts();
    for (module, n) in &counts {
        println!("{module:<10}{n:>12}");
    }
    println!("{:<10}{:>12}", "total", counts.iter().map(|(_, n)| n).sum::<usize>());
    if h.model.fingerprint() != h.fingerprint {
        bail!("stored fingerprint does not match the embedded config");
    }
    Ok(())
}
