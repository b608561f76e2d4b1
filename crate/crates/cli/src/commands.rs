use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use discseg::checkpoint::{model_hash, Checkpoint};
use discseg::data::{
    encode_mask_png, load_refuge_format, preprocess, preprocess_all, raster_to_rgb8, split, write_synthetic_dataset,
    Contrast, SampleRecord,
};
use discseg::peft::{partition_parameters, trainable_fraction};
use discseg::train::{mean_loss, ModelPredictor, StepRecord, Trainer};
use discseg::viz::{encode_png, render_panels};
use discseg::{evaluate, Error, Predictor, Result, RunConfig, SegModel};

use crate::GlobalArgs;

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
const LOSS_FILE: &str = "loss.tsv";

fn resolve(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&g.preset)?,
    };
    apply_overrides(&mut cfg, g);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, g: &GlobalArgs) {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Path {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::Path {
        path: p.to_path_buf(),
        source: e,
    })
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn load_records(root: &Path) -> Result<Vec<SampleRecord>> {
    let recs = load_refuge_format(root)?;
    if recs.is_empty() {
        return Err(Error::Ingestion(format!("no samples under {}", root.join("images").display())));
    }
    Ok(recs)
}

pub fn synth(g: &GlobalArgs, count: Option<usize>, contrast: Option<&str>) -> Result<()> {
    let mut cfg = resolve(g)?;
    if let Some(c) = contrast {
        cfg.synth_contrast = c.parse::<Contrast>()?;
    }
    let n = count.unwrap_or(cfg.synth_count);
    let root = g.out.clone().unwrap_or(cfg.data_root.clone());
    let manifest = write_synthetic_dataset(&cfg.synthetic(), n, &root)?;
    println!("wrote {} samples to {}", manifest.samples.len(), root.display());
    Ok(())
}

#[derive(Serialize)]
struct RoiRecord<'a> {
    id: &'a str,
    center_x: f64,
    center_y: f64,
    radius: f64,
    source_height: usize,
    source_width: usize,
}

pub fn preprocess_cmd(g: &GlobalArgs, data: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(g)?;
    let recs = load_records(&data.unwrap_or(cfg.data_root.clone()))?;
    let prepared = preprocess_all(&recs, &cfg.pipeline())?;
    let out = &cfg.out_dir;
    let (img_dir, mask_dir) = (out.join("images"), out.join("masks"));
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;
    let mut rois = Vec::with_capacity(prepared.len());
    for p in &prepared {
        raster_to_rgb8(&p.image.clone().retag()).save(img_dir.join(format!("{}.png", p.id)))?;
        encode_mask_png(&p.masks).save(mask_dir.join(format!("{}.png", p.id)))?;
        rois.push(RoiRecord {
            id: &p.id,
            center_x: p.roi.center_x,
            center_y: p.roi.center_y,
            radius: p.roi.radius,
            source_height: p.source_shape.0,
            source_width: p.source_shape.1,
        });
    }
    write_file(&out.join("rois.json"), to_json(&rois))?;
    println!("preprocessed {} samples into {}", prepared.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct SplitRecord {
    seed: u64,
    train: Vec<String>,
    test: Vec<String>,
}

pub fn train(g: &GlobalArgs, data: Option<PathBuf>, resume: Option<PathBuf>, epochs: Option<usize>) -> Result<()> {
    let (mut cfg, ck) = match &resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config()?;
            apply_overrides(&mut cfg, g);
            (cfg, Some(ck))
        }
        None => (resolve(g)?, None),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let recs = load_records(&data.unwrap_or(cfg.data_root.clone()))?;
    let (train, test) = split(recs, cfg.train_ratio, cfg.seed)?;
    let prepared = preprocess_all(&train, &cfg.pipeline())?;
    let mut trainer = match &ck {
        Some(ck) => Trainer::resume(ck, prepared)?,
        None => Trainer::new(&cfg, prepared)?,
    };

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    write_file(
        &out.join("split.json"),
        to_json(&SplitRecord {
            seed: cfg.seed,
            train: train.iter().map(|r| r.id.clone()).collect(),
            test: test.iter().map(|r| r.id.clone()).collect(),
        }),
    )?;
    let loss_path = out.join(LOSS_FILE);
    let fresh = ck.is_none() || !loss_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_path)
        .map_err(|e| Error::Path {
            path: loss_path.clone(),
            source: e,
        })?;
    if fresh {
        writeln!(log, "{}", StepRecord::HEADER)?;
    }
    let target = cfg.epochs as u64;
    let ck_path = out.join(CHECKPOINT_FILE);
    while trainer.epochs_done() < target {
        let steps = trainer.train_epoch()?;
        for s in &steps {
            writeln!(log, "{}", s.to_line())?;
        }
        let m = mean_loss(&steps);
        log::info!(
            "epoch {}/{}: l_disk {:.5} l_cup {:.5} l_contain {:.5} total {:.5}",
            trainer.epochs_done(),
            target,
            m.l_disk,
            m.l_cup,
            m.l_contain,
            m.total
        );
        trainer.checkpoint()?.save(&ck_path)?;
    }
    if !ck_path.exists() {
        trainer.checkpoint()?.save(&ck_path)?;
    }
    println!("checkpoint {} after {} epochs", ck_path.display(), trainer.epochs_done());
    Ok(())
}

fn predictor<'a>(cfg: &RunConfig, model: &'a SegModel, ck: &'a Checkpoint) -> ModelPredictor<'a> {
    ModelPredictor {
        model,
        norm: &ck.norm,
        seed: cfg.seed,
        batch_size: cfg.batch_size,
    }
}

fn open_checkpoint(g: &GlobalArgs, path: &Path) -> Result<(Checkpoint, RunConfig, SegModel)> {
    let ck = Checkpoint::load(path)?;
    if g.config.is_some() {
        ck.check_compatible(&resolve(g)?.model())?;
    }
    let (cfg, model) = ck.load_model()?;
    Ok((ck, cfg, model))
}

pub fn eval(g: &GlobalArgs, checkpoint: &Path, data: Option<PathBuf>, all: bool, overlays: bool) -> Result<()> {
    let (ck, cfg, model) = open_checkpoint(g, checkpoint)?;
    let recs = load_records(&data.unwrap_or(cfg.data_root.clone()))?;
    let recs = if all { recs } else { split(recs, cfg.train_ratio, cfg.seed)?.1 };
    let pred = predictor(&cfg, &model, &ck);
    let pipeline = cfg.pipeline();
    let report = evaluate(&pred, &recs, &pipeline)?;

    let out = g.out.clone().unwrap_or(cfg.out_dir.clone());
    create_dir(&out)?;
    write_file(&out.join("metrics.tsv"), report.to_table())?;
    write_file(&out.join("samples.tsv"), report.to_sample_table())?;
    write_file(&out.join("metrics.json"), to_json(&report))?;
    if overlays {
        let dir = out.join("overlays");
        create_dir(&dir)?;
        for rec in &recs {
            let prep = preprocess(rec, &pipeline)?;
            let masks = pred.predict(std::slice::from_ref(&prep))?;
            let img = render_panels(rec, &prep, &masks[0])?;
            write_file(&dir.join(format!("{}.png", rec.id)), encode_png(&img)?)?;
        }
    }
    print!("{}", report.to_table());
    Ok(())
}

pub fn ablate(g: &GlobalArgs, data: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(g)?;
    let recs = load_records(&data.unwrap_or(cfg.data_root.clone()))?;
    let report = discseg::train::ablate(&cfg, &recs)?;
    create_dir(&cfg.out_dir)?;
    let table = report.to_table();
    write_file(&cfg.out_dir.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn inspect(g: &GlobalArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = match &checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            println!("checkpoint\t{}", p.display());
            println!("epochs\t{}", ck.epoch);
            println!("optimizer_state\t{}", ck.optimizer.is_some());
            ck.config()?
        }
        None => resolve(g)?,
    };
    let census = SegModel::census(&cfg.model())?;
    let part = partition_parameters(&census, cfg.mode)?;
    println!("mode\t{}", cfg.mode.as_str());
    println!("model_hash\t{}", model_hash(&cfg.model()));
    println!("trainable_fraction\t{:.6}", trainable_fraction(&part));
    print!("{}", part.census_table());
    Ok(())
}

pub fn visualize(g: &GlobalArgs, checkpoint: &Path, data: Option<PathBuf>, sample: &str) -> Result<()> {
    let (ck, cfg, model) = open_checkpoint(g, checkpoint)?;
    let recs = load_records(&data.unwrap_or(cfg.data_root.clone()))?;
    let rec = recs
        .iter()
        .find(|r| r.id == sample)
        .ok_or_else(|| Error::InvalidArgument(format!("no sample with id '{sample}'")))?;
    let prep = preprocess(rec, &cfg.pipeline())?;
    let masks = predictor(&cfg, &model, &ck).predict(std::slice::from_ref(&prep))?;
    let img = render_panels(rec, &prep, &masks[0])?;
    let path = g.out.clone().unwrap_or_else(|| PathBuf::from(format!("{sample}_panels.png")));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&path, encode_png(&img)?)?;
    println!("wrote {}", path.display());
    Ok(())
}
