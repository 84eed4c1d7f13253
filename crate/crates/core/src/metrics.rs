//! Displacement errors, best-of-N reduction and KDE negative log-likelihood.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{box_centers, BoxAnchor, TrajectoryWindow};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-step log-densities below this are clamped before negation.
pub const LOG_DENSITY_FLOOR: f64 = -20.0;
/// Minimum KDE bandwidth for metric coordinates.
pub const BANDWIDTH_FLOOR_M: f64 = 0.01;
/// Minimum KDE bandwidth for pixel coordinates.
pub const BANDWIDTH_FLOOR_PX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplacementMode {
    /// Euclidean distance per step.
    EuclideanM,
    /// Mean squared error over the coordinates of each step.
    SquaredPx,
}

fn check_shapes(pred: &Matrix, gt: &Matrix) -> Result<()> {
    if pred.shape() != gt.shape() || pred.rows() == 0 {
        return Err(Error::shape(format!(
            "prediction is {:?}, ground truth is {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn step_error(p: &[f64], g: &[f64], mode: DisplacementMode) -> f64 {
    let sq: f64 = p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
    match mode {
        DisplacementMode::EuclideanM => sq.sqrt(),
        DisplacementMode::SquaredPx => sq / p.len() as f64,
    }
}

/// Mean per-step error.
pub fn ade(pred: &Matrix, gt: &Matrix, mode: DisplacementMode) -> Result<f64> {
    ade_at(pred, gt, pred.rows(), mode)
}

/// Mean per-step error over the first `steps` steps.
pub fn ade_at(pred: &Matrix, gt: &Matrix, steps: usize, mode: DisplacementMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    if steps == 0 || steps > pred.rows() {
        return Err(Error::shape(format!(
            "horizon of {steps} steps outside 1..={}",
            pred.rows()
        )));
    }
    let total: f64 = (0..steps)
        .map(|s| step_error(pred.row(s), gt.row(s), mode))
        .sum();
    Ok(total / steps as f64)
}

/// Error at the final step.
pub fn fde(pred: &Matrix, gt: &Matrix, mode: DisplacementMode) -> Result<f64> {
    check_shapes(pred, gt)?;
    let s = pred.rows() - 1;
    Ok(step_error(pred.row(s), gt.row(s), mode))
}

fn check_boxes(pred: &Matrix, gt: &Matrix) -> Result<()> {
    check_shapes(pred, gt)?;
    if pred.cols() != 4 {
        return Err(Error::shape("center errors need (x, y, w, h) boxes"));
    }
    Ok(())
}

/// Squared-pixel ADE of box centers.
pub fn c_ade(pred: &Matrix, gt: &Matrix, anchor: BoxAnchor) -> Result<f64> {
    check_boxes(pred, gt)?;
    ade(
        &box_centers(pred, anchor),
        &box_centers(gt, anchor),
        DisplacementMode::SquaredPx,
    )
}

/// Squared-pixel FDE of box centers.
pub fn c_fde(pred: &Matrix, gt: &Matrix, anchor: BoxAnchor) -> Result<f64> {
    check_boxes(pred, gt)?;
    fde(
        &box_centers(pred, anchor),
        &box_centers(gt, anchor),
        DisplacementMode::SquaredPx,
    )
}

/// Smallest metric value over the samples.
pub fn best_of_n<F>(preds: &[Matrix], gt: &Matrix, metric: F) -> Result<f64>
where
    F: Fn(&Matrix, &Matrix) -> Result<f64>,
{
    if preds.is_empty() {
        return Err(Error::config("best_of_n needs at least one sample"));
    }
    let mut best = f64::INFINITY;
    for p in preds {
        best = best.min(metric(p, gt)?);
    }
    Ok(best)
}

/// KDE negative log-likelihoods of one ground-truth trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdeNll {
    pub per_step: Vec<f64>,
    pub average: f64,
    pub final_step: f64,
    /// Steps whose bandwidth hit the floor in some dimension.
    pub floored_steps: usize,
}

/// Per-dimension Scott bandwidths `std * n^(-1/(d+4))`, floored.
pub fn scott_bandwidth(points: &[&[f64]], floor: f64) -> Vec<f64> {
    let n = points.len() as f64;
    let d = points[0].len();
    let factor = n.powf(-1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|j| {
            let mean = points.iter().map(|p| p[j]).sum::<f64>() / n;
            let var = points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var.sqrt() * factor).max(floor)
        })
        .collect()
}

/// Log-density at `x` of a product-Gaussian kernel estimate.
pub fn kde_log_density(points: &[&[f64]], bandwidth: &[f64], x: &[f64]) -> f64 {
    let log_norm: f64 = bandwidth
        .iter()
        .map(|h| -0.5 * (2.0 * PI).ln() - h.ln())
        .sum();
    let terms: Vec<f64> = points
        .iter()
        .map(|p| {
            let q: f64 = p
                .iter()
                .zip(x)
                .zip(bandwidth)
                .map(|((a, b), h)| ((a - b) / h).powi(2))
                .sum();
            log_norm - 0.5 * q
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln() - (points.len() as f64).ln()
}

/// Fits a kernel density to the samples at each step and evaluates the
/// ground truth under it.
pub fn kde_nll(samples: &[Matrix], gt: &Matrix, bandwidth_floor: f64) -> Result<KdeNll> {
    if samples.len() < 2 {
        return Err(Error::config("KDE-NLL needs at least two samples"));
    }
    for s in samples {
        check_shapes(s, gt)?;
    }
    let mut per_step = Vec::with_capacity(gt.rows());
    let mut floored_steps = 0;
    for step in 0..gt.rows() {
        let pts: Vec<&[f64]> = samples.iter().map(|s| s.row(step)).collect();
        let h = scott_bandwidth(&pts, bandwidth_floor);
        if h.iter().any(|&v| v == bandwidth_floor) {
            floored_steps += 1;
        }
        let lp = kde_log_density(&pts, &h, gt.row(step));
        per_step.push(-lp.max(LOG_DENSITY_FLOOR));
    }
    if floored_steps > 0 {
        log::warn!("KDE bandwidth floor applied at {floored_steps} step(s)");
    }
    let average = per_step.iter().sum::<f64>() / per_step.len() as f64;
    let final_step = *per_step.last().expect("non-empty horizon");
    Ok(KdeNll {
        per_step,
        average,
        final_step,
        floored_steps,
    })
}

/// Options of the evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples for best-of-N displacement metrics.
    pub n_best: usize,
    /// Samples for the kernel density (the first `n_best` are reused for displacement).
    pub n_kde: usize,
    /// Overrides the unit-dependent bandwidth floor.
    pub bandwidth_floor: Option<f64>,
    /// Horizons in seconds for partial ADE (FPV data).
    pub horizons_s: Vec<f64>,
    pub box_anchor: BoxAnchor,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_best: 20,
            n_kde: 2000,
            bandwidth_floor: None,
            horizons_s: vec![0.5, 1.0, 1.5],
            box_anchor: BoxAnchor::TopLeft,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_best == 0 {
            return Err(Error::config("n_best must be positive"));
        }
        if self.n_kde < 2 {
            return Err(Error::config("n_kde must be at least 2"));
        }
        Ok(())
    }

    pub fn samples_needed(&self) -> usize {
        self.n_best.max(self.n_kde)
    }
}

/// Metrics of one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: String,
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub c_ade: Option<f64>,
    pub c_fde: Option<f64>,
    pub ade_at: BTreeMap<String, f64>,
    pub nll: Option<KdeNll>,
}

/// Dataset-level means over windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub windows: usize,
    /// `m` for bird's-eye data, `px2` for boxes.
    pub units: String,
    pub ade: Option<f64>,
    pub fde: Option<f64>,
    pub c_ade: Option<f64>,
    pub c_fde: Option<f64>,
    pub ade_at: BTreeMap<String, f64>,
    pub anll: Option<f64>,
    pub fnll: Option<f64>,
    pub nll_per_step: Option<Vec<f64>>,
}

fn horizon_key(h: f64) -> String {
    format!("{h:.1}s")
}

/// Best-of-N displacement metrics and KDE-NLL of one window.
///
/// `samples` are in world coordinates; they are 2-D centers when `gt` has
/// boxes but the model predicts centers. NLL is computed when there are at
/// least two samples, on centers for box data.
pub fn evaluate_window(
    window: &TrajectoryWindow,
    samples: &[Matrix],
    dt: f64,
    cfg: &EvalConfig,
) -> Result<WindowMetrics> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let gt = &window.future;
    let boxes = gt.cols() == 4;
    let centers_only = boxes && samples[0].cols() == 2;
    let best = &samples[..cfg.n_best.min(samples.len())];
    let mut m = WindowMetrics {
        window: window.key(),
        ade: None,
        fde: None,
        c_ade: None,
        c_fde: None,
        ade_at: BTreeMap::new(),
        nll: None,
    };
    let gt_centers = boxes.then(|| box_centers(gt, cfg.box_anchor));
    if boxes {
        let gc = gt_centers.as_ref().expect("box data");
        let mode = DisplacementMode::SquaredPx;
        if centers_only {
            m.c_ade = Some(best_of_n(best, gc, |p, g| ade(p, g, mode))?);
            m.c_fde = Some(best_of_n(best, gc, |p, g| fde(p, g, mode))?);
        } else {
            m.ade = Some(best_of_n(best, gt, |p, g| ade(p, g, mode))?);
            m.fde = Some(best_of_n(best, gt, |p, g| fde(p, g, mode))?);
            m.c_ade = Some(best_of_n(best, gt, |p, g| c_ade(p, g, cfg.box_anchor))?);
            m.c_fde = Some(best_of_n(best, gt, |p, g| c_fde(p, g, cfg.box_anchor))?);
            for &h in &cfg.horizons_s {
                let steps = (h / dt).round() as usize;
                if steps >= 1 && steps <= gt.rows() {
                    let v = best_of_n(best, gt, |p, g| ade_at(p, g, steps, mode))?;
                    m.ade_at.insert(horizon_key(h), v);
                }
            }
        }
    } else {
        let mode = DisplacementMode::EuclideanM;
        m.ade = Some(best_of_n(best, gt, |p, g| ade(p, g, mode))?);
        m.fde = Some(best_of_n(best, gt, |p, g| fde(p, g, mode))?);
    }
    if samples.len() >= 2 {
        let floor = cfg.bandwidth_floor.unwrap_or(if boxes {
            BANDWIDTH_FLOOR_PX
        } else {
            BANDWIDTH_FLOOR_M
        });
        m.nll = Some(if boxes {
            let pts: Vec<Matrix> = if centers_only {
                samples.to_vec()
            } else {
                samples
                    .iter()
                    .map(|s| box_centers(s, cfg.box_anchor))
                    .collect()
            };
            kde_nll(&pts, gt_centers.as_ref().expect("box data"), floor)?
        } else {
            kde_nll(samples, gt, floor)?
        });
    }
    Ok(m)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages window metrics; a field is reported only if every window has it.
pub fn aggregate(method: &str, windows: &[WindowMetrics], units: &str) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::data("no windows to aggregate"));
    }
    let n = windows.len() as f64;
    let mut ade_at = BTreeMap::new();
    for key in windows[0].ade_at.keys() {
        if let Some(v) = mean_opt(windows.iter().map(|w| w.ade_at.get(key).copied())) {
            ade_at.insert(key.clone(), v);
        }
    }
    let nll_per_step = windows
        .iter()
        .map(|w| w.nll.as_ref().map(|k| k.per_step.clone()))
        .collect::<Option<Vec<_>>>()
        .map(|all| {
            let mut acc = vec![0.0; all[0].len()];
            for v in &all {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
            acc.into_iter().map(|a| a / n).collect::<Vec<f64>>()
        });
    Ok(MetricReport {
        method: method.to_string(),
        windows: windows.len(),
        units: units.to_string(),
        ade: mean_opt(windows.iter().map(|w| w.ade)),
        fde: mean_opt(windows.iter().map(|w| w.fde)),
        c_ade: mean_opt(windows.iter().map(|w| w.c_ade)),
        c_fde: mean_opt(windows.iter().map(|w| w.c_fde)),
        ade_at,
        anll: mean_opt(windows.iter().map(|w| w.nll.as_ref().map(|k| k.average))),
        fnll: mean_opt(windows.iter().map(|w| w.nll.as_ref().map(|k| k.final_step))),
        nll_per_step,
    })
}

/// Markdown table with one row per report and one column per metric present in any report.
pub fn reports_to_markdown(reports: &[MetricReport]) -> String {
    let mut cols: Vec<(String, Box<dyn Fn(&MetricReport) -> Option<f64>>)> = vec![
        ("ADE".into(), Box::new(|r: &MetricReport| r.ade)),
        ("FDE".into(), Box::new(|r: &MetricReport| r.fde)),
        ("C_ADE".into(), Box::new(|r: &MetricReport| r.c_ade)),
        ("C_FDE".into(), Box::new(|r: &MetricReport| r.c_fde)),
    ];
    let mut horizons: Vec<String> = reports
        .iter()
        .flat_map(|r| r.ade_at.keys().cloned())
        .collect();
    horizons.sort();
    horizons.dedup();
    for h in horizons {
        let key = h.clone();
        cols.push((
            format!("ADE@{h}"),
            Box::new(move |r: &MetricReport| r.ade_at.get(&key).copied()),
        ));
    }
    cols.push(("ANLL".into(), Box::new(|r: &MetricReport| r.anll)));
    cols.push(("FNLL".into(), Box::new(|r: &MetricReport| r.fnll)));
    cols.retain(|(_, f)| reports.iter().any(|r| f(r).is_some()));

    let mut out = String::from("| method | windows | units |");
    for (name, _) in &cols {
        out.push_str(&format!(" {name} |"));
    }
    out.push_str("\n|---|---|---|");
    for _ in &cols {
        out.push_str("---|");
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("| {} | {} | {} |", r.method, r.windows, r.units));
        for (_, f) in &cols {
            match f(r) {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
