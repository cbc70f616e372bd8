//! Pipeline stages over one experiment directory.
//!
//! ```text
//! <dir>/config.toml            normalised configuration
//! <dir>/dataset/               images + manifest.json
//! <dir>/performer/             checkpoint + train_log.csv
//! <dir>/explainer/             checkpoint + train_log.csv
//! <dir>/metrics.json|csv       evaluation
//! <dir>/visualize/             filter grids and grad-CAM panels
//! <dir>/report/                metrics copies and SVG plots
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use explainer_core::metrics::{
    evaluate, grad_cam_for, infer_part_location, EvalSample, ExplainerPipeline, GradCamTarget, MetricsReport,
};
use explainer_core::performer::{train_performer as fit_performer, LabeledImage, TrainStatus};
use explainer_core::synth::SyntheticScene;
use explainer_core::training::{train_explainer as fit_explainer, TrainLog};

use crate::checkpoint::{
    load_explainer, load_performer, performer_hash, save_explainer, save_performer, ExplainerCheckpoint, ExplainerExtra,
    PerformerCheckpoint, MANIFEST_FILE,
};
use crate::config::ExperimentConfig;
use crate::dataset::{self, load_dataset, Dataset, Split};
use crate::error::{AppError, Result};
use crate::imageio::GrayImage;
use crate::plots;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Paths of every artifact inside an experiment directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.dataset().join(dataset::MANIFEST)
    }
    pub fn performer(&self) -> PathBuf {
        self.root.join("performer")
    }
    pub fn explainer(&self) -> PathBuf {
        self.root.join("explainer")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.root.join(METRICS_JSON)
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join(METRICS_CSV)
    }
    pub fn visualize(&self) -> PathBuf {
        self.root.join("visualize")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(AppError::io(parent))?;
    }
    std::fs::write(path, contents).map_err(AppError::io(path))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| AppError::Failed(e.to_string()))
}

fn record_timing(layout: &Layout, stage: &str, secs: f64) -> Result<()> {
    let path = layout.timings();
    let mut map: serde_json::Map<String, serde_json::Value> = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    map.insert(stage.to_string(), serde_json::json!(secs));
    write_file(&path, to_json(&map)?)
}

/// Writes the normalised configuration into the experiment directory.
pub fn echo_config(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    write_file(&layout.config(), cfg.normalized())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.join(MANIFEST_FILE).exists() || path.is_file() {
        Ok(())
    } else {
        Err(AppError::Config(format!("{what} not found at {}", path.display())))
    }
}

fn open_dataset(layout: &Layout) -> Result<Dataset> {
    let m = layout.dataset_manifest();
    if !m.exists() {
        return Err(AppError::Config(format!("no dataset at {}; run gen-data first", m.display())));
    }
    load_dataset(&m)
}

fn open_performer(cfg: &ExperimentConfig, layout: &Layout) -> Result<PerformerCheckpoint> {
    require(&layout.performer(), "performer checkpoint")?;
    load_performer(&layout.performer(), Some(&cfg.performer_arch()))
}

fn open_explainer(layout: &Layout, performer: &PerformerCheckpoint) -> Result<ExplainerCheckpoint> {
    require(&layout.explainer(), "explainer checkpoint")?;
    load_explainer(&layout.explainer(), Some(&performer.params))
}

fn labeled<'a>(scenes: &'a [SyntheticScene], idx: &[usize]) -> Vec<LabeledImage<'a>> {
    idx.iter().map(|&i| LabeledImage { image: &scenes[i].image, label: scenes[i].label }).collect()
}

pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<dataset::DatasetManifest> {
    let t = Instant::now();
    echo_config(cfg, layout)?;
    let m = dataset::generate_dataset(cfg, &layout.dataset())?;
    record_timing(layout, "gen-data", t.elapsed().as_secs_f64())?;
    Ok(m)
}

/// Trains and saves the performer. A run below the accuracy threshold is
/// saved and then reported as a failure.
pub fn train_performer(cfg: &ExperimentConfig, layout: &Layout) -> Result<PerformerCheckpoint> {
    let t = Instant::now();
    let data = open_dataset(layout)?;
    let train = labeled(&data.scenes, data.split(Split::Train));
    let val = labeled(&data.scenes, data.split(Split::Val));
    let tcfg = cfg.performer_train();
    let run = fit_performer(&cfg.performer_arch(), &train, &val, &tcfg)?;
    let metrics = serde_json::json!({
        "final_loss": run.final_loss,
        "val_accuracy": run.val_accuracy,
        "status": run.status,
    });
    save_performer(&layout.performer(), &run.params, tcfg.seed, &cfg.normalized(), metrics)?;
    let mut csv = String::from("epoch,mean_loss,val_accuracy\n");
    for e in &run.log {
        let _ = writeln!(csv, "{},{},{}", e.epoch, e.mean_loss, e.val_accuracy);
    }
    write_file(&layout.performer().join("train_log.csv"), csv)?;
    record_timing(layout, "train-performer", t.elapsed().as_secs_f64())?;
    if run.status == TrainStatus::Failed {
        return Err(AppError::Failed(format!(
            "performer did not converge: validation accuracy {:.3} < {:.3} (checkpoint saved)",
            run.val_accuracy, tcfg.min_val_accuracy
        )));
    }
    load_performer(&layout.performer(), Some(&cfg.performer_arch()))
}

/// CSV rendering of an explainer training log.
pub fn train_log_csv(log: &TrainLog) -> String {
    let mut csv = String::from("step,epoch,recon,gate,filter,total,p\n");
    for r in &log.rows {
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", r.step, r.epoch, r.recon, r.gate, r.filter, r.total, r.p);
    }
    csv
}

pub fn train_explainer(cfg: &ExperimentConfig, layout: &Layout) -> Result<ExplainerCheckpoint> {
    let t = Instant::now();
    let data = open_dataset(layout)?;
    let performer = open_performer(cfg, layout)?;
    let before = performer_hash(&performer.params);
    let train = labeled(&data.scenes, data.split(Split::Train));
    let val = labeled(&data.scenes, data.split(Split::Val));
    let tcfg = cfg.explainer_train();
    let mut run = fit_explainer(&performer.params, &train, &val, cfg.explainer.filters, &tcfg)?;
    run.log.wall_clock_secs = t.elapsed().as_secs_f64();
    if performer_hash(&performer.params) != before {
        return Err(AppError::Failed("performer parameters changed during explainer training".into()));
    }
    let extra = ExplainerExtra {
        performer_hash: before,
        templates: tcfg.templates.clone(),
        weights: run.weights.clone(),
        assignment: run.assignment.clone(),
        norm_momentum: run.stats.momentum,
        norm_updates: run.stats.updates,
        reconstruction_target: "post-relu".into(),
    };
    let last = run.log.rows.last();
    let metrics = serde_json::json!({
        "p": run.params.p(),
        "p_per_epoch": run.log.p_per_epoch,
        "final_total": last.map(|r| r.total),
        "steps": run.log.rows.len(),
    });
    save_explainer(&layout.explainer(), &run.params, &run.stats, &extra, tcfg.seed, &cfg.normalized(), metrics)?;
    write_file(&layout.explainer().join("train_log.csv"), train_log_csv(&run.log))?;
    record_timing(layout, "train-explainer", t.elapsed().as_secs_f64())?;
    load_explainer(&layout.explainer(), Some(&performer.params))
}

fn eval_samples(data: &Dataset) -> Vec<EvalSample<'_>> {
    data.eval_indices()
        .into_iter()
        .map(|i| {
            let s = &data.scenes[i];
            EvalSample { image: &s.image, label: s.label, landmarks: &s.landmarks }
        })
        .collect()
}

/// CSV of `network,filter,metric,value`; summary rows leave `filter` empty.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut csv = String::from("network,filter,metric,value\n");
    let fmt = |v: &Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for (net, per) in [("explainer", &report.explainer_instability), ("performer", &report.performer_instability)] {
        for (f, v) in per.iter().enumerate() {
            let _ = writeln!(csv, "{net},{f},instability,{}", fmt(v));
        }
    }
    for (net, k, v) in [
        ("explainer", "aggregate_instability", report.explainer_aggregate_instability),
        ("performer", "aggregate_instability", report.performer_aggregate_instability),
        ("explainer", "p", report.p),
        ("explainer", "fc1_relative_error", report.fc1_relative_error),
        ("explainer", "fc2_relative_error", report.fc2_relative_error),
        ("explainer", "substitution_agreement", report.substitution_agreement),
    ] {
        let _ = writeln!(csv, "{net},,{k},{v}");
    }
    csv
}

pub fn eval(cfg: &ExperimentConfig, layout: &Layout) -> Result<MetricsReport> {
    let t = Instant::now();
    let data = open_dataset(layout)?;
    let performer = open_performer(cfg, layout)?;
    let explainer = open_explainer(layout, &performer)?;
    let pipe = ExplainerPipeline {
        performer: &performer.params,
        explainer: &explainer.params,
        stats: &explainer.stats,
        bank: &explainer.bank,
    };
    let report = evaluate(&pipe, &eval_samples(&data), &cfg.instability())?;
    write_file(&layout.metrics_json(), to_json(&report)?)?;
    write_file(&layout.metrics_csv(), metrics_csv(&report))?;
    record_timing(layout, "eval", t.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Square crop of side `side` centred at pixel `(r, c)`, zero outside the image.
fn crop(image: &GrayImage, center: (f64, f64), side: usize) -> GrayImage {
    let mut out = GrayImage::new(side, side);
    let top = center.0.round() as isize - side as isize / 2;
    let left = center.1.round() as isize - side as isize / 2;
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (top + r as isize, left + c as isize);
            if y >= 0 && x >= 0 && (y as usize) < image.height && (x as usize) < image.width {
                out.pixels[r * side + c] = image.pixels[y as usize * image.width + x as usize];
            }
        }
    }
    out
}

/// Grid of crops, `cols` per row, separated by a one-pixel white border.
fn grid(tiles: &[GrayImage], cols: usize, side: usize) -> GrayImage {
    let rows = tiles.len().div_ceil(cols).max(1);
    let mut out = GrayImage::new(cols * (side + 1) + 1, rows * (side + 1) + 1);
    out.pixels.fill(255);
    for (i, t) in tiles.iter().enumerate() {
        out.blit(t, 1 + (i / cols) * (side + 1), 1 + (i % cols) * (side + 1));
    }
    out
}

/// Ranks images by a filter's peak response and crops the top `k` around
/// the peak location.
fn top_crops(
    peaks: &[(f64, (f64, f64))],
    images: &[GrayImage],
    k: usize,
    side: usize,
) -> Vec<GrayImage> {
    let mut order: Vec<usize> = (0..peaks.len()).filter(|&i| peaks[i].0 > 0.0).collect();
    order.sort_by(|&a, &b| peaks[b].0.total_cmp(&peaks[a].0).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| crop(&images[i], peaks[i].1, side)).collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradCamSummary {
    /// Mean fraction of heatmap mass inside the object box.
    pub performer_in_box: f64,
    pub explainer_in_box: f64,
    pub images: usize,
}

/// Writes filter grids and grad-CAM panels; returns the number of files.
pub fn visualize(cfg: &ExperimentConfig, layout: &Layout) -> Result<usize> {
    let t = Instant::now();
    let data = open_dataset(layout)?;
    let performer = open_performer(cfg, layout)?;
    let explainer = open_explainer(layout, &performer)?;
    let out = layout.visualize();
    std::fs::create_dir_all(&out).map_err(AppError::io(&out))?;
    let arch = &performer.params.arch;
    let size = arch.input_size;
    let n = arch.tap_size();
    let side = arch.tap_receptive_field().min(size / 2);
    let k = cfg.eval.top_k;
    let cols = (k as f64).sqrt().ceil() as usize;

    let idx = data.eval_indices();
    let images: Vec<GrayImage> = idx.iter().map(|&i| GrayImage::from_unit_map(&data.scenes[i].image)).collect();
    let filters = explainer.params.arch.filters;
    let channels = arch.tap_channels();
    let mut expl_peaks = vec![Vec::with_capacity(idx.len()); filters];
    let mut perf_peaks = vec![Vec::with_capacity(idx.len()); channels];
    let cell = size as f64 / n as f64;
    for &i in &idx {
        let tap = performer.params.forward(&data.scenes[i].image)?;
        let pass = explainer.params.forward(&tap.x_tap, &explainer.stats, &explainer.bank, None)?;
        let tr = &pass.output.trace;
        for f in 0..filters {
            let (r, c) = tr.mask_centers[f];
            let peak = tr.per_filter_premask[f].iter().cloned().fold(0.0, f64::max);
            expl_peaks[f].push((peak, (r as f64 * cell + cell / 2.0, c as f64 * cell + cell / 2.0)));
        }
        for (c, peaks) in perf_peaks.iter_mut().enumerate() {
            let plane = tap.x_tap.channel(c);
            let peak = plane.iter().cloned().fold(0.0, f64::max);
            peaks.push((peak, infer_part_location(plane, n, size)));
        }
    }
    let mut written = 0;
    for (f, peaks) in expl_peaks.iter().enumerate() {
        grid(&top_crops(peaks, &images, k, side), cols, side).save(&out.join(format!("explainer_filter_{f:02}.png")))?;
        written += 1;
    }
    for (c, peaks) in perf_peaks.iter().enumerate() {
        grid(&top_crops(peaks, &images, k, side), cols, side).save(&out.join(format!("performer_filter_{c:02}.png")))?;
        written += 1;
    }

    let pipe = ExplainerPipeline {
        performer: &performer.params,
        explainer: &explainer.params,
        stats: &explainer.stats,
        bank: &explainer.bank,
    };
    let (mut in_p, mut in_e, mut count) = (0.0, 0.0, 0usize);
    for (j, &i) in idx.iter().take(cfg.eval.gradcam_images).enumerate() {
        let scene = &data.scenes[i];
        let class = scene.label;
        let cam_p = grad_cam_for(&performer.params, None, &scene.image, class, GradCamTarget::PerformerConv(arch.tap_layer))?;
        let cam_e = grad_cam_for(&performer.params, Some(&pipe), &scene.image, class, GradCamTarget::ExplainerInterp)?;
        let tiles = [
            images[j].clone(),
            GrayImage::from_unit_plane(size, size, &cam_p),
            GrayImage::from_unit_plane(size, size, &cam_e),
        ];
        grid(&tiles, 3, size).save(&out.join(format!("gradcam_{j:02}.png")))?;
        written += 1;
        if !scene.landmarks.is_empty() {
            in_p += mass_in_box(&cam_p, size, &scene.object_bbox);
            in_e += mass_in_box(&cam_e, size, &scene.object_bbox);
            count += 1;
        }
    }
    let denom = count.max(1) as f64;
    let summary = GradCamSummary { performer_in_box: in_p / denom, explainer_in_box: in_e / denom, images: count };
    write_file(&out.join("gradcam.json"), to_json(&summary)?)?;
    record_timing(layout, "visualize", t.elapsed().as_secs_f64())?;
    Ok(written)
}

fn mass_in_box(cam: &[f64], size: usize, bbox: &explainer_core::synth::BoundingBox) -> f64 {
    let total: f64 = cam.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for r in 0..size {
        for c in 0..size {
            if bbox.contains((r as f64 + 0.5, c as f64 + 0.5)) {
                inside += cam[r * size + c];
            }
        }
    }
    inside / total
}

/// Copies the metrics and renders the comparison plots.
pub fn report(layout: &Layout) -> Result<Vec<PathBuf>> {
    let t = Instant::now();
    let mpath = layout.metrics_json();
    let text = std::fs::read_to_string(&mpath)
        .map_err(|_| AppError::Config(format!("no metrics at {}; run eval first", mpath.display())))?;
    let metrics: MetricsReport =
        serde_json::from_str(&text).map_err(|e| AppError::Corrupt { file: mpath.clone(), reason: e.to_string() })?;
    let emanifest = layout.explainer().join(MANIFEST_FILE);
    let etext = std::fs::read_to_string(&emanifest).map_err(AppError::io(&emanifest))?;
    let eman: serde_json::Value = serde_json::from_str(&etext).map_err(|e| AppError::Failed(e.to_string()))?;
    let p_traj: Vec<f64> = eman["metrics"]["p_per_epoch"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    let out = layout.report();
    let files = vec![
        (out.join(METRICS_JSON), to_json(&metrics)?),
        (out.join(METRICS_CSV), metrics_csv(&metrics)),
        (
            out.join("instability.svg"),
            plots::bar_chart(
                "Aggregate location instability",
                &[
                    ("performer", metrics.performer_aggregate_instability),
                    ("explainer", metrics.explainer_aggregate_instability),
                ],
            ),
        ),
        (out.join("p_trajectory.svg"), plots::line_chart("Gate p per epoch", "epoch", &p_traj, 1.0)),
    ];
    let mut paths = Vec::new();
    for (path, body) in files {
        write_file(&path, body)?;
        paths.push(path);
    }
    record_timing(layout, "report", t.elapsed().as_secs_f64())?;
    Ok(paths)
}

/// Every stage in order into one directory.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout) -> Result<MetricsReport> {
    gen_data(cfg, layout)?;
    train_performer(cfg, layout)?;
    train_explainer(cfg, layout)?;
    let metrics = eval(cfg, layout)?;
    visualize(cfg, layout)?;
    report(layout)?;
    Ok(metrics)
}
