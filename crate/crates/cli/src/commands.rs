//! The five subcommands as library functions returning what they wrote.

use std::path::{Path, PathBuf};

use bitrap::checkpoint::{load, loss_log_ndjson, save};
use bitrap::data::{
    load_bev_scene, load_fpv_tracks, make_windows, synth_multimodal_dataset, write_bev, Scene,
    TrajectoryWindow,
};
use bitrap::metrics::{aggregate, evaluate_window, reports_to_markdown, MetricReport};
use bitrap::training::{predict_with, Checkpoint, Trainer};
use bitrap::{Error, Result};
use log::info;
use serde::Serialize;

use crate::config::{beside, DataFormat, RunConfig};
use crate::dump::{read_dump, write_dump, DumpRecord};
use crate::plot::{plot_dump, PlotSummary};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub agents: usize,
    /// Agents per branch.
    pub branch_counts: Vec<usize>,
    /// Windows of the training length the scene yields.
    pub windows: usize,
    pub labels: Vec<usize>,
}

/// Writes a synthetic BEV scene plus `<out>.meta.json` and `<out>.config.toml`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let s = synth_multimodal_dataset(&cfg.synth)?;
    std::fs::write(out, write_bev(&s.scene)?)?;
    let mut branch_counts = vec![0; cfg.synth.branch_probs.len()];
    for &l in &s.labels {
        branch_counts[l] += 1;
    }
    let windows = make_windows(&s.scene, cfg.train.tau, cfg.train.delta, cfg.train.stride)?
        .windows
        .len();
    let summary = SynthSummary {
        agents: s.scene.tracks.len(),
        branch_counts,
        windows,
        labels: s.labels,
    };
    let meta = serde_json::json!({ "config": s.config, "summary": summary });
    std::fs::write(beside(out, "meta.json"), serde_json::to_string_pretty(&meta)?)?;
    cfg.write_beside(out)?;
    Ok(summary)
}

pub fn load_scene(cfg: &RunConfig, path: &Path) -> Result<Scene> {
    match cfg.data.format {
        DataFormat::Bev => load_bev_scene(path, cfg.data.dt),
        DataFormat::Fpv => load_fpv_tracks(path, cfg.data.dt),
    }
}

fn windows_for(scene: &Scene, tau: usize, delta: usize, stride: usize) -> Result<Vec<TrajectoryWindow>> {
    let set = make_windows(scene, tau, delta, stride)?;
    if set.windows.is_empty() {
        return Err(Error::Data(format!(
            "scene {} yields no windows of {} frames",
            scene.id,
            tau + delta
        )));
    }
    if set.skipped_tracks > 0 {
        info!("{}: {} tracks too short for a window", scene.id, set.skipped_tracks);
    }
    Ok(set.windows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_lr: f64,
    pub windows: usize,
}

/// Trains (or resumes) up to `train.epochs` and writes the checkpoint,
/// `<out>.loss.ndjson` and `<out>.config.toml`.
pub fn train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    val: Option<&Path>,
) -> Result<TrainSummary> {
    let t = &cfg.train;
    let windows = windows_for(&load_scene(cfg, data)?, t.tau, t.delta, t.stride)?;
    let val_windows = match val {
        Some(p) => windows_for(&load_scene(cfg, p)?, t.tau, t.delta, t.stride)?,
        None => Vec::new(),
    };
    let mut trainer = match resume {
        Some(p) => {
            let ck = load(p)?;
            if ck.epoch > t.epochs {
                return Err(Error::Config(format!(
                    "checkpoint is at epoch {} beyond train.epochs = {}",
                    ck.epoch, t.epochs
                )));
            }
            Trainer::resume(ck, &windows, &val_windows)?
        }
        None => Trainer::new(t.clone(), &windows, &val_windows)?,
    };
    while trainer.checkpoint.epoch < t.epochs {
        let records = trainer.run_epoch()?;
        if let Some(r) = records.first() {
            info!("epoch {} loss {:.5} lr {:.6}", r.epoch, r.loss, r.lr);
        }
    }
    let ck = trainer.into_checkpoint();
    save(&ck, out)?;
    std::fs::write(beside(out, "loss.ndjson"), loss_log_ndjson(&ck.history)?)?;
    cfg.write_beside(out)?;
    let last = ck.history.iter().rev().find(|r| r.split == "train");
    Ok(TrainSummary {
        epochs: ck.epoch,
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        final_lr: last.map_or(f64::NAN, |r| r.lr),
        windows: windows.len(),
    })
}

fn evaluation_windows(cfg: &RunConfig, ck: &Checkpoint, data: &Path) -> Result<Vec<TrajectoryWindow>> {
    let c = &ck.config;
    let mut windows = windows_for(&load_scene(cfg, data)?, c.tau, c.delta, c.stride)?;
    if let Some(n) = cfg.predict.max_windows {
        windows.truncate(n);
    }
    Ok(windows)
}

fn predictions(
    cfg: &RunConfig,
    ck: &Checkpoint,
    windows: &[TrajectoryWindow],
    n_samples: usize,
) -> Result<Vec<DumpRecord>> {
    let model = ck.build_model()?;
    windows
        .iter()
        .map(|w| {
            let p = predict_with(&model, ck, w, n_samples, cfg.seed)?;
            Ok(DumpRecord::new(w, ck.config.dt, p))
        })
        .collect()
}

/// Evaluates a checkpoint and writes `<out>.md`, `<out>.jsonl` (one metrics
/// record per window, then the summary) and optionally a prediction dump.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    dump: Option<&Path>,
) -> Result<MetricReport> {
    let ck = load(checkpoint)?;
    let windows = evaluation_windows(cfg, &ck, data)?;
    let records = predictions(cfg, &ck, &windows, cfg.eval.samples_needed())?;
    let mut lines = String::new();
    let mut per_window = Vec::with_capacity(windows.len());
    for (w, r) in windows.iter().zip(&records) {
        let samples = r
            .samples
            .iter()
            .map(crate::dump::to_matrix)
            .collect::<Result<Vec<_>>>()?;
        let m = evaluate_window(w, &samples, ck.config.dt, &cfg.eval)?;
        lines.push_str(&serde_json::to_string(&serde_json::json!({ "metrics": m }))?);
        lines.push('\n');
        per_window.push(m);
    }
    let units = if windows[0].dim() == 4 { "px2" } else { "m" };
    let report = aggregate(ck.config.variant.name(), &per_window, units)?;
    lines.push_str(&serde_json::to_string(&serde_json::json!({ "summary": report }))?);
    lines.push('\n');
    std::fs::write(beside(out, "jsonl"), lines)?;
    std::fs::write(beside(out, "md"), reports_to_markdown(std::slice::from_ref(&report)))?;
    cfg.write_beside(out)?;
    if let Some(d) = dump {
        write_dump(&records, d)?;
    }
    Ok(report)
}

/// Writes a prediction dump with `predict.samples` futures per window.
pub fn predict(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<usize> {
    let ck = load(checkpoint)?;
    let windows = evaluation_windows(cfg, &ck, data)?;
    let records = predictions(cfg, &ck, &windows, cfg.predict.samples)?;
    write_dump(&records, out)?;
    cfg.write_beside(out)?;
    Ok(records.len())
}

/// Renders every figure for a dump into `out_dir`.
pub fn plot(cfg: &RunConfig, dump: &Path, out_dir: &Path) -> Result<PlotSummary> {
    let records = read_dump(dump)?;
    let summary = plot_dump(&records, out_dir, &cfg.plot, cfg.eval.box_anchor)?;
    cfg.write_beside(&out_dir.join("plot"))?;
    Ok(summary)
}

/// Figure paths as printable lines.
pub fn list_figures(s: &PlotSummary) -> Vec<PathBuf> {
    s.overlays
        .iter()
        .chain(&s.heatmaps)
        .chain(&s.ellipse_figures)
        .chain(&s.nll_curve)
        .cloned()
        .collect()
}
