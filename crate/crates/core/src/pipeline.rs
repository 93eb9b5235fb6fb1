//! End-to-end commands: data generation, pretraining, re-ID training,
//! evaluation, mask visualization and the mask-rate sweep.
//!
//! Each command writes its artifacts into an output directory. The
//! in-memory helpers ([`SplitData`], [`pretrain_model`], [`reid_model`],
//! [`evaluate_model`]) are what the commands are built from.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Record, Split, SyntheticSpec};
use crate::eval::{self, ImageMeta, Metrics, Protocol, QueryResult};
use crate::imagecore::{self, ContourExtractor, Image};
use crate::mae::{self, EpochLoss, MaeModel, Pretrainer};
use crate::masking::{self, MaskPlan};
use crate::reid::{self, ReidEpochMetrics, ReidState};
use crate::{Error, Result};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOSS: &str = "pretrain_loss.jsonl";
pub const REID_CHECKPOINT: &str = "reid.ckpt";
pub const REID_METRICS: &str = "reid_metrics.jsonl";
pub const REID_STATE: &str = "reid_state.json";
pub const EVAL_METRICS: &str = "metrics.json";
pub const PER_QUERY: &str = "per_query.csv";
pub const SWEEP_CSV: &str = "mask_rate_sweep.csv";
pub const SWEEP_PLOT: &str = "mask_rate_sweep.png";
pub const SWEEP_RATES: [f64; 4] = [0.55, 0.65, 0.75, 0.85];

/// Train, query and gallery images with their metadata.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<Image>,
    pub query: Vec<Image>,
    pub query_meta: Vec<ImageMeta>,
    pub gallery: Vec<Image>,
    pub gallery_meta: Vec<ImageMeta>,
}

impl SplitData {
    pub fn load(dataset: &Dataset) -> Result<Self> {
        let (train, _) = dataset.load_split(Split::Train)?;
        let (query, query_meta) = dataset.load_split(Split::Query)?;
        let (gallery, gallery_meta) = dataset.load_split(Split::Gallery)?;
        Ok(SplitData {
            train,
            query,
            query_meta,
            gallery,
            gallery_meta,
        })
    }

    /// Renders the synthetic dataset straight into memory. Matches what
    /// [`data::generate_synthetic`] writes, minus the PNG quantization.
    pub fn synthesize(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_identities * spec.views_per_identity;
        let rendered = crate::par::map_indexed(n, |i| {
            let (id, view) = (i / spec.views_per_identity, i % spec.views_per_identity);
            let meta = ImageMeta {
                identity: id,
                camera: data::camera_of(spec, id, view),
            };
            (data::split_of(spec, id, view), meta, data::render(spec, id, view).0)
        });
        let mut out = SplitData {
            train: Vec::new(),
            query: Vec::new(),
            query_meta: Vec::new(),
            gallery: Vec::new(),
            gallery_meta: Vec::new(),
        };
        for (split, meta, img) in rendered {
            match split {
                Split::Train => out.train.push(img),
                Split::Query => {
                    out.query.push(img);
                    out.query_meta.push(meta);
                }
                Split::Gallery => {
                    out.gallery.push(img);
                    out.gallery_meta.push(meta);
                }
            }
        }
        Ok(out)
    }
}

fn protocol(cfg: &RunConfig) -> Protocol {
    Protocol {
        drop_same_camera: cfg.eval.drop_same_camera,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Appends JSON lines to a file.
struct JsonLines {
    path: PathBuf,
    file: File,
}

impl JsonLines {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines { path, file })
    }

    fn push<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let mut line = serde_json::to_string(value)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

pub fn evaluate_model(model: &MaeModel, data: &SplitData, protocol: Protocol) -> Result<(Metrics, Vec<QueryResult>)> {
    let q = model.extract_features(&data.query)?;
    let g = model.extract_features(&data.gallery)?;
    eval::evaluate(&q, &data.query_meta, &g, &data.gallery_meta, protocol)
}

/// Pretrains from scratch, or continues `resume` until `cfg.mae.epochs`.
pub fn pretrain_model(
    cfg: &RunConfig,
    images: &[Image],
    resume: Option<Pretrainer>,
    mut on_epoch: impl FnMut(&Pretrainer, &EpochLoss) -> Result<()>,
) -> Result<(Pretrainer, Vec<EpochLoss>)> {
    let extractor = ContourExtractor::new(cfg.contour.clone());
    let mut trainer = match resume {
        Some(mut t) => {
            // The checkpoint records the target it was trained towards.
            t.model.config.epochs = cfg.mae.epochs;
            t
        }
        None => Pretrainer::new(MaeModel::new(cfg.mae.clone())?),
    };
    let samples = mae::prepare_samples(&trainer.model.config, images, &extractor)?;
    let mut curve = Vec::new();
    while trainer.epochs_done < cfg.mae.epochs {
        let loss = trainer.run_epoch(&samples)?;
        let entry = EpochLoss {
            epoch: trainer.epochs_done - 1,
            loss,
        };
        log::info!("pretrain epoch {} loss {:.6}", entry.epoch, entry.loss);
        on_epoch(&trainer, &entry)?;
        curve.push(entry);
    }
    Ok((trainer, curve))
}

pub fn reid_model(
    cfg: &RunConfig,
    model: &mut MaeModel,
    data: &SplitData,
    on_epoch: impl FnMut(&ReidEpochMetrics, &ReidState),
) -> Result<(Vec<ReidEpochMetrics>, ReidState)> {
    let proto = protocol(cfg);
    reid::train_reid(
        model,
        &data.train,
        &cfg.reid,
        |m| evaluate_model(m, data, proto).map(|r| r.0),
        on_epoch,
    )
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Vec<Record>> {
    let extractor = ContourExtractor::new(cfg.contour.clone());
    data::generate_synthetic(&cfg.data, out, &extractor)
}

fn load_checkpoint(path: &Path, stage: Option<Stage>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(s) = stage {
        if ck.stage != s {
            return Err(Error::Checkpoint(format!(
                "{} holds a {:?} checkpoint, expected {:?}",
                path.display(),
                ck.stage,
                s
            )));
        }
    }
    Ok(ck)
}

/// Pretrains on the train split. With `resume`, training continues from
/// the checkpoint's epoch and appends to the loss log.
pub fn pretrain(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<Vec<EpochLoss>> {
    let ds = data::load_dataset(dataset)?;
    let (train, _) = ds.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training images".into()));
    }
    create_dir(out)?;
    let trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(Stage::Pretrain))?;
            let model = ck.model()?;
            let optimizer = match ck.optimizer {
                Some(o) => o,
                None => mae::AdamW::new(&model.store, model.config.lr, model.config.weight_decay),
            };
            log::info!("resuming pretraining after epoch {}", ck.epoch);
            Some(Pretrainer {
                model,
                optimizer,
                epochs_done: ck.epoch,
            })
        }
        None => None,
    };
    let mut log_file = JsonLines::open(out.join(PRETRAIN_LOSS), resume.is_some())?;
    let ck_path = out.join(PRETRAIN_CHECKPOINT);
    let (trainer, curve) = pretrain_model(cfg, &train, trainer, |t, e| {
        log_file.push(e)?;
        Checkpoint::new(&t.model, Stage::Pretrain, t.epochs_done)
            .with_optimizer(&t.optimizer)
            .save(&ck_path)
    })?;
    if trainer.epochs_done == 0 {
        Checkpoint::new(&trainer.model, Stage::Pretrain, 0)
            .with_optimizer(&trainer.optimizer)
            .save(&ck_path)?;
    }
    let full = read_loss_curve(&out.join(PRETRAIN_LOSS))?;
    if !full.is_empty() {
        let pts = full.iter().map(|e| (e.epoch as f64, e.loss)).collect();
        crate::plot::save_line_plot(&out.join("pretrain_loss.png"), &[pts])?;
    }
    Ok(curve)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<EpochLoss>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Fine-tunes a checkpoint on the unlabeled train split, logging metrics
/// per epoch.
pub fn train_reid(cfg: &RunConfig, dataset: &Path, checkpoint: &Path, out: &Path) -> Result<Vec<ReidEpochMetrics>> {
    let ck = load_checkpoint(checkpoint, None)?;
    let mut model = ck.model()?;
    let ds = data::load_dataset(dataset)?;
    let split = SplitData::load(&ds)?;
    create_dir(out)?;
    let mut log_file = JsonLines::open(out.join(REID_METRICS), false)?;
    let mut log_err = None;
    let state_path = out.join(REID_STATE);
    let (history, _) = reid_model(cfg, &mut model, &split, |m, state| {
        if let Some(e) = &m.eval {
            log::info!(
                "re-ID epoch {} clusters {} outliers {} mAP {:.4} rank1 {:.4}",
                m.epoch,
                m.num_clusters,
                m.num_outliers,
                e.map,
                e.rank1
            );
        }
        // The state file always holds the latest completed epoch.
        let res = log_file
            .push(m)
            .and_then(|_| write_file(&state_path, serde_json::to_string(state)?));
        if let Err(e) = res {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    Checkpoint::new(&model, Stage::Reid, history.len()).save(&out.join(REID_CHECKPOINT))?;
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub chance_map_mean: f64,
    pub chance_map_std: f64,
    pub chance_trials: usize,
}

pub fn evaluate(cfg: &RunConfig, dataset: &Path, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint, None)?.model()?;
    let ds = data::load_dataset(dataset)?;
    let (query, query_meta) = ds.load_split(Split::Query)?;
    let (gallery, gallery_meta) = ds.load_split(Split::Gallery)?;
    let split = SplitData {
        train: Vec::new(),
        query,
        query_meta,
        gallery,
        gallery_meta,
    };
    let proto = protocol(cfg);
    let (metrics, per_query) = evaluate_model(&model, &split, proto)?;
    let (mean, std) = eval::chance_map(
        &split.query_meta,
        &split.gallery_meta,
        model.feature_dim(),
        cfg.eval.chance_trials,
        cfg.seed,
        proto,
    )?;
    let report = EvalReport {
        metrics,
        chance_map_mean: mean,
        chance_map_std: std,
        chance_trials: cfg.eval.chance_trials,
    };
    create_dir(out)?;
    write_file(&out.join(EVAL_METRICS), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&out.join(PER_QUERY), eval::per_query_csv(&per_query))?;
    Ok(report)
}

/// Mask plan used when visualizing image `index`.
pub fn visualization_plan(cfg: &RunConfig, extractor: &ContourExtractor, img: &Image, index: usize) -> Result<MaskPlan> {
    let contour = extractor.extract_or_uniform(img)?;
    let scores = masking::patch_scores(&contour, cfg.mae.patch_size)?;
    let seed = crate::seed::derive(cfg.seed, "visualize", &[index as u64]);
    masking::plan_mask(&scores, cfg.mae.mask_rate, seed, cfg.mae.contour_fraction)
}

/// Reconstruction with visible patches copied from the input.
pub fn compose_reconstruction(model: &MaeModel, img: &Image, plan: &MaskPlan) -> Result<Image> {
    let mut grid = model.patchify(img)?;
    let pred = model.reconstruct(&grid, plan)?;
    for (row, &p) in plan.masked.iter().enumerate() {
        grid.patches[p].copy_from_slice(pred.row(row));
    }
    imagecore::from_patches(&grid)
}

fn overlay(img: &Image, plan: &MaskPlan, patch: usize) -> Image {
    let mut out = img.clone();
    let cols = img.width() / patch;
    for &p in &plan.masked {
        let (pr, pc) = (p / cols, p % cols);
        for y in pr * patch..(pr + 1) * patch {
            for x in pc * patch..(pc + 1) * patch {
                for c in 0..img.channels() {
                    out.set(y, x, c, 0.5);
                }
            }
        }
    }
    out
}

/// Grid with one column per image and four rows: original, contour map,
/// masked input (hidden patches grey) and reconstruction.
pub fn visualize(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], out_file: &Path) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to visualize".into()));
    }
    let model = load_checkpoint(checkpoint, None)?.model()?;
    let extractor = ContourExtractor::new(cfg.contour.clone());
    let loaded: Vec<Image> = images.iter().map(Image::load).collect::<Result<_>>()?;
    let grid = visualization_grid(cfg, &model, &extractor, &loaded)?;
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    grid.save(out_file)
}

pub fn visualization_grid(cfg: &RunConfig, model: &MaeModel, extractor: &ContourExtractor, images: &[Image]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to visualize".into()));
    }
    let s = cfg.mae.image_size;
    let gap = 2;
    let (rows, cols) = (4, images.len());
    let (h, w) = (rows * s + (rows + 1) * gap, cols * s + (cols + 1) * gap);
    let mut canvas = Image::new(h, w, 3, vec![1.0; h * w * 3])?;
    for (j, img) in images.iter().enumerate() {
        let plan = visualization_plan(cfg, extractor, img, j)?;
        let contour = extractor.extract_or_uniform(img)?;
        let max = contour.values.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let cmap = Image::new(
            s,
            s,
            3,
            contour.values.iter().flat_map(|v| [v / max; 3]).collect(),
        )?;
        let tiles = [
            img.clone(),
            cmap,
            overlay(img, &plan, cfg.mae.patch_size),
            compose_reconstruction(model, img, &plan)?,
        ];
        for (i, tile) in tiles.iter().enumerate() {
            let (oy, ox) = (gap + i * (s + gap), gap + j * (s + gap));
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        let v = tile.get(y, x, c.min(tile.channels() - 1));
                        canvas.set(oy + y, ox + x, c, v.clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    Ok(canvas)
}

/// Squared reconstruction error on contour pixels that fall in masked
/// patches, divided by the number of contour pixels. Visible patches are
/// copied through, so their contour pixels contribute zero.
pub fn masked_contour_mse(
    model: &MaeModel,
    images: &[Image],
    extractor: &ContourExtractor,
    mask_rate: f64,
    contour_fraction: f64,
    seed: u64,
) -> Result<f64> {
    let patch = model.config.patch_size;
    let parts: Vec<Result<(f64, usize)>> = crate::par::map_indexed(images.len(), |i| {
        let img = &images[i];
        let response = imagecore::contour_response(img, extractor.params())?;
        let bin = match imagecore::binarize(&response, extractor.config().threshold) {
            Ok(b) => b,
            Err(Error::DegenerateMap(_)) => return Ok((0.0, 0)),
            Err(e) => return Err(e),
        };
        let contour = extractor.extract_or_uniform(img)?;
        let scores = masking::patch_scores(&contour, patch)?;
        let plan_seed = crate::seed::derive(seed, "contour-mse", &[i as u64]);
        let plan = masking::plan_mask(&scores, mask_rate, plan_seed, contour_fraction)?;
        let recon = compose_reconstruction(model, img, &plan)?;
        let mut sse = 0.0;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if bin.is_target(y, x) {
                    for c in 0..img.channels() {
                        sse += (recon.get(y, x, c) - img.get(y, x, c)).powi(2);
                    }
                }
            }
        }
        Ok((sse, bin.target_count() * img.channels()))
    });
    let (mut sse, mut n) = (0.0, 0usize);
    for p in parts {
        let (s, c) = p?;
        sse += s;
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no contour pixels in the evaluation images".into()));
    }
    Ok(sse / n as f64)
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_rate: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Full pipeline at each mask rate in memory. Returns one row per rate.
pub fn sweep_rates(cfg: &RunConfig, data: &SplitData, rates: &[f64]) -> Result<Vec<SweepRow>> {
    rates
        .iter()
        .map(|&rate| {
            let mut c = cfg.clone();
            c.mae.mask_rate = rate;
            c.validate()?;
            let (trainer, _) = pretrain_model(&c, &data.train, None, |_, _| Ok(()))?;
            let mut model = trainer.model;
            reid_model(&c, &mut model, data, |_, _| {})?;
            let (metrics, _) = evaluate_model(&model, data, protocol(&c))?;
            log::info!("mask rate {rate}: mAP {:.4}", metrics.map);
            Ok(SweepRow { mask_rate: rate, metrics })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mask_rate,mAP,rank1,rank5,rank10\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.6},{:.6}\n",
            r.mask_rate, m.map, m.rank1, m.rank5, m.rank10
        ));
    }
    out
}

/// Runs the pipeline at each mask rate and writes the CSV and plot.
pub fn sweep_mask_rate(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<Vec<SweepRow>> {
    let ds = data::load_dataset(dataset)?;
    let split = SplitData::load(&ds)?;
    let rows = sweep_rates(cfg, &split, &SWEEP_RATES)?;
    create_dir(out)?;
    write_file(&out.join(SWEEP_CSV), sweep_csv(&rows))?;
    let pts = rows.iter().map(|r| (r.mask_rate, r.metrics.map)).collect();
    crate::plot::save_line_plot(&out.join(SWEEP_PLOT), &[pts])?;
    Ok(rows)
}
