//! SVG figures from prediction dumps.

use std::path::{Path, PathBuf};

use bitrap::data::{box_centers, BoxAnchor};
use bitrap::gmm::{GmmStep, Mat2};
use bitrap::metrics::{
    kde_log_density, kde_nll, scott_bandwidth, BANDWIDTH_FLOOR_M, BANDWIDTH_FLOOR_PX,
};
use bitrap::tensor::Matrix;
use bitrap::{Error, Result};
use plotters::coord::types::RangedCoordf64;
use plotters::prelude::*;

use crate::config::PlotConfig;
use crate::dump::{to_matrix, DumpRecord};

const PAST: RGBColor = RGBColor(20, 40, 120);
const TRUTH: RGBColor = RGBColor(200, 30, 30);
const SAMPLE: RGBColor = RGBColor(30, 150, 60);

/// What [`plot_dump`] wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSummary {
    pub overlays: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
    pub ellipse_figures: Vec<PathBuf>,
    /// Ellipses drawn in each ellipse figure.
    pub ellipses_per_window: Vec<usize>,
    pub nll_curve: Option<PathBuf>,
    /// Time span of the NLL curve's x axis, seconds.
    pub nll_time_range: Option<(f64, f64)>,
}

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("drawing failed: {e}")))
}

/// 2-D view of a trajectory: box data is reduced to centers.
fn planar(m: Matrix, anchor: BoxAnchor) -> Matrix {
    if m.cols() == 4 {
        box_centers(&m, anchor)
    } else {
        m
    }
}

struct Planar {
    past: Matrix,
    truth: Matrix,
    samples: Vec<Matrix>,
}

fn planar_record(r: &DumpRecord, anchor: BoxAnchor) -> Result<Planar> {
    Ok(Planar {
        past: planar(to_matrix(&r.past)?, anchor),
        truth: planar(to_matrix(&r.ground_truth)?, anchor),
        samples: r
            .samples
            .iter()
            .map(|s| to_matrix(s).map(|m| planar(m, anchor)))
            .collect::<Result<_>>()?,
    })
}

fn xy(m: &Matrix) -> Vec<(f64, f64)> {
    m.iter_rows().map(|r| (r[0], r[1])).collect()
}

/// Padded square-ish bounds around every point.
fn bounds<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = 0.1 * (x1 - x0).max(y1 - y0).max(1e-3);
    ((x0 - pad, x1 + pad), (y0 - pad, y1 + pad))
}

type Chart<'a, 'b> = ChartContext<'a, SVGBackend<'b>, Cartesian2d<RangedCoordf64, RangedCoordf64>>;

fn chart<'a, 'b>(
    root: &'a DrawingArea<SVGBackend<'b>, plotters::coord::Shift>,
    title: &str,
    x: (f64, f64),
    y: (f64, f64),
) -> Result<Chart<'a, 'b>> {
    root.fill(&WHITE).map_err(draw_err)?;
    let mut c = ChartBuilder::on(root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(x.0..x.1, y.0..y.1)
        .map_err(draw_err)?;
    c.configure_mesh().draw().map_err(draw_err)?;
    Ok(c)
}

fn draw_tracks(c: &mut Chart<'_, '_>, p: &Planar) -> Result<()> {
    for s in &p.samples {
        c.draw_series(LineSeries::new(xy(s), SAMPLE.mix(0.35)))
            .map_err(draw_err)?;
    }
    c.draw_series(LineSeries::new(xy(&p.past), PAST.stroke_width(2)))
        .map_err(draw_err)?;
    c.draw_series(LineSeries::new(xy(&p.truth), TRUTH.stroke_width(2)))
        .map_err(draw_err)?;
    Ok(())
}

/// Past (dark blue), ground truth (red) and sampled futures (green).
pub fn overlay(r: &DumpRecord, path: &Path, cfg: &PlotConfig, anchor: BoxAnchor) -> Result<()> {
    let p = planar_record(r, anchor)?;
    let all: Vec<(f64, f64)> = xy(&p.past)
        .into_iter()
        .chain(xy(&p.truth))
        .chain(p.samples.iter().flat_map(xy))
        .collect();
    let (x, y) = bounds(all.iter());
    let root = SVGBackend::new(path, (cfg.width, cfg.height)).into_drawing_area();
    let mut c = chart(&root, &r.window, x, y)?;
    draw_tracks(&mut c, &p)?;
    root.present().map_err(draw_err)
}

/// Kernel density of every sampled waypoint on a grid, with the tracks on top.
pub fn heatmap(r: &DumpRecord, path: &Path, cfg: &PlotConfig, anchor: BoxAnchor) -> Result<()> {
    let p = planar_record(r, anchor)?;
    let pts: Vec<(f64, f64)> = p.samples.iter().flat_map(xy).collect();
    let all: Vec<(f64, f64)> = pts.iter().copied().chain(xy(&p.past)).chain(xy(&p.truth)).collect();
    let (x, y) = bounds(all.iter());
    let rows: Vec<[f64; 2]> = pts.iter().map(|&(a, b)| [a, b]).collect();
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let floor = 1e-3 * (x.1 - x.0).max(y.1 - y.0);
    let bw = if refs.len() >= 2 {
        scott_bandwidth(&refs, floor)
    } else {
        vec![floor * 10.0; 2]
    };
    let n = cfg.grid;
    let (dx, dy) = ((x.1 - x.0) / n as f64, (y.1 - y.0) / n as f64);
    let mut density = vec![0.0; n * n];
    if !refs.is_empty() {
        for i in 0..n {
            for j in 0..n {
                let c = [x.0 + (i as f64 + 0.5) * dx, y.0 + (j as f64 + 0.5) * dy];
                density[i * n + j] = kde_log_density(&refs, &bw, &c).exp();
            }
        }
    }
    let peak = density.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let root = SVGBackend::new(path, (cfg.width, cfg.height)).into_drawing_area();
    let mut c = chart(&root, &format!("{} sample density", r.window), x, y)?;
    c.draw_series((0..n * n).map(|k| {
        let (i, j) = (k / n, k % n);
        let v = density[k] / peak;
        let shade = |full: f64| (255.0 - v * (255.0 - full)) as u8;
        let color = RGBColor(shade(20.0), shade(110.0), shade(40.0));
        let x0 = x.0 + i as f64 * dx;
        let y0 = y.0 + j as f64 * dy;
        Rectangle::new([(x0, y0), (x0 + dx, y0 + dy)], color.filled())
    }))
    .map_err(draw_err)?;
    c.draw_series(LineSeries::new(xy(&p.past), PAST.stroke_width(2)))
        .map_err(draw_err)?;
    c.draw_series(LineSeries::new(xy(&p.truth), TRUTH.stroke_width(2)))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Two-standard-deviation outline of a bivariate normal.
pub fn ellipse_points(mean: [f64; 2], cov: &Mat2, n: usize) -> Vec<(f64, f64)> {
    let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = ((mid + rad).max(0.0), (mid - rad).max(0.0));
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (ct, st) = (theta.cos(), theta.sin());
    (0..n)
        .map(|k| {
            let t = k as f64 / n as f64 * std::f64::consts::TAU;
            let (u, v) = (2.0 * l1.sqrt() * t.cos(), 2.0 * l2.sqrt() * t.sin());
            (mean[0] + ct * u - st * v, mean[1] + st * u + ct * v)
        })
        .collect()
}

/// Endpoint mixture components as ellipses, opacity following the weights.
/// Returns the number of ellipses drawn.
pub fn goal_ellipses(
    r: &DumpRecord,
    goal: &GmmStep,
    path: &Path,
    cfg: &PlotConfig,
    anchor: BoxAnchor,
) -> Result<usize> {
    let p = planar_record(r, anchor)?;
    let shapes: Vec<Vec<(f64, f64)>> = goal
        .means
        .iter()
        .zip(&goal.covs)
        .map(|(m, c)| ellipse_points(*m, c, 64))
        .collect();
    let all: Vec<(f64, f64)> = shapes
        .iter()
        .flatten()
        .copied()
        .chain(xy(&p.past))
        .chain(xy(&p.truth))
        .collect();
    let (x, y) = bounds(all.iter());
    let top = goal.weights.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);

    let root = SVGBackend::new(path, (cfg.width, cfg.height)).into_drawing_area();
    let mut c = chart(&root, &format!("{} goal mixture", r.window), x, y)?;
    let mut drawn = 0;
    for (shape, w) in shapes.into_iter().zip(&goal.weights) {
        let alpha = 0.08 + 0.6 * w / top;
        c.draw_series(std::iter::once(Polygon::new(shape.clone(), SAMPLE.mix(alpha).filled())))
            .map_err(draw_err)?;
        let mut outline = shape;
        outline.push(outline[0]);
        c.draw_series(LineSeries::new(outline, SAMPLE.mix(alpha.min(1.0))))
            .map_err(draw_err)?;
        drawn += 1;
    }
    c.draw_series(LineSeries::new(xy(&p.past), PAST.stroke_width(2)))
        .map_err(draw_err)?;
    c.draw_series(LineSeries::new(xy(&p.truth), TRUTH.stroke_width(2)))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(drawn)
}

/// Mean per-step KDE negative log-likelihood over windows against time.
/// Returns the x-axis span, or `None` when no window has two samples.
pub fn nll_curve(
    records: &[DumpRecord],
    path: &Path,
    cfg: &PlotConfig,
    anchor: BoxAnchor,
) -> Result<Option<(f64, f64)>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut dt = 0.0;
    for r in records.iter().filter(|r| r.samples.len() >= 2) {
        let p = planar_record(r, anchor)?;
        let floor = if r.ground_truth[0].len() == 4 {
            BANDWIDTH_FLOOR_PX
        } else {
            BANDWIDTH_FLOOR_M
        };
        let k = kde_nll(&p.samples, &p.truth, floor)?;
        if sum.is_empty() {
            sum = vec![0.0; k.per_step.len()];
            dt = r.dt;
        }
        if k.per_step.len() != sum.len() {
            return Err(Error::Data("dump mixes prediction horizons".into()));
        }
        for (a, v) in sum.iter_mut().zip(&k.per_step) {
            *a += v;
        }
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    let curve: Vec<(f64, f64)> = sum
        .iter()
        .enumerate()
        .map(|(s, v)| ((s + 1) as f64 * dt, v / count as f64))
        .collect();
    let span = (dt, sum.len() as f64 * dt);
    let lo = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let pad = 0.1 * (hi - lo).max(0.1);

    let root = SVGBackend::new(path, (cfg.width, cfg.height)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut c = ChartBuilder::on(&root)
        .caption("per-step KDE NLL", ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(span.0..span.1, (lo - pad)..(hi + pad))
        .map_err(draw_err)?;
    c.configure_mesh()
        .x_desc("prediction time (s)")
        .y_desc("NLL")
        .draw()
        .map_err(draw_err)?;
    c.draw_series(LineSeries::new(curve.clone(), SAMPLE.stroke_width(2)))
        .map_err(draw_err)?;
    c.draw_series(curve.iter().map(|&p| Circle::new(p, 3, SAMPLE.filled())))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(Some(span))
}

/// All figures for a dump, written into `dir`.
pub fn plot_dump(
    records: &[DumpRecord],
    dir: &Path,
    cfg: &PlotConfig,
    anchor: BoxAnchor,
) -> Result<PlotSummary> {
    if records.is_empty() {
        return Err(Error::Data("empty prediction dump".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut out = PlotSummary::default();
    for (i, r) in records.iter().take(cfg.max_windows).enumerate() {
        let path = dir.join(format!("overlay_{i:03}.svg"));
        overlay(r, &path, cfg, anchor)?;
        out.overlays.push(path);
        let path = dir.join(format!("heatmap_{i:03}.svg"));
        heatmap(r, &path, cfg, anchor)?;
        out.heatmaps.push(path);
        if let Some(m) = &r.mixture {
            let path = dir.join(format!("goal_mixture_{i:03}.svg"));
            out.ellipses_per_window.push(goal_ellipses(r, &m.goal, &path, cfg, anchor)?);
            out.ellipse_figures.push(path);
        }
    }
    let path = dir.join("nll_per_step.svg");
    out.nll_time_range = nll_curve(records, &path, cfg, anchor)?;
    if out.nll_time_range.is_some() {
        out.nll_curve = Some(path);
    }
    Ok(out)
}
