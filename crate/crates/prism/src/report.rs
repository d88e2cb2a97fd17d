//! Experiment reporting: CSV tables and self-contained SVG figures.
//!
//! Everything here is pure formatting — callers compute the numbers, this
//! module renders them. All output is deterministic byte-for-byte: floats
//! go through Rust's shortest round-trip `Display`, no timestamps or
//! machine identifiers appear, and files are written atomically.
//!
//! Every CSV starts with `#`-prefixed provenance lines carrying the
//! checkpoint and dataset hashes the numbers were computed from, then a
//! header row naming the columns.

use crate::field::EpochLog;
use crate::fisher::FisherReport;
use crate::inverse::{InverseEpochLog, TimeMap};
use crate::io::{atomic_write, IoError};
use std::path::Path;

// ── CSV ─────────────────────────────────────────────────────────────────────

/// Provenance stamped into every CSV: which artifacts produced the numbers.
#[derive(Debug, Clone, Default)]
pub struct CsvMeta {
    /// SHA-256 of the model checkpoint used, if any.
    pub checkpoint_sha256: Option<String>,
    /// SHA-256 of the dataset file used, if any.
    pub dataset_sha256: Option<String>,
    /// Additional key=value provenance lines (seeds, grid sizes, …).
    pub extra: Vec<(String, String)>,
}

impl CsvMeta {
    fn comment_lines(&self) -> String {
        let mut out = String::new();
        let ck = self.checkpoint_sha256.as_deref().unwrap_or("-");
        let ds = self.dataset_sha256.as_deref().unwrap_or("-");
        out.push_str(&format!("# checkpoint_sha256={ck}\n"));
        out.push_str(&format!("# dataset_sha256={ds}\n"));
        for (k, v) in &self.extra {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }
}

/// Shortest decimal rendering that parses back to the identical bits
/// (Rust's float `Display` contract). `None` renders as an empty cell.
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Render an optional value; absent means "not computed", shown empty.
pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn csv_escape(cell: &str) -> String {
    if cell.contains(',') || cell.contains('"') || cell.contains('\n') {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

/// Write a CSV atomically: provenance comments, a column-name row, then
/// data rows. Every row must match the column count.
pub fn write_csv(
    path: &Path,
    meta: &CsvMeta,
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<(), IoError> {
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(
            row.len(),
            columns.len(),
            "row {i} has {} cells for {} columns",
            row.len(),
            columns.len()
        );
    }
    let mut out = meta.comment_lines();
    out.push_str(&columns.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| csv_escape(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

// ── standard tables ─────────────────────────────────────────────────────────

/// One row of a time-estimation quality table (global or per-region).
#[derive(Debug, Clone)]
pub struct TimeEstimateRow {
    /// Dataset name (e.g. the file stem).
    pub dataset: String,
    /// Estimator name.
    pub method: String,
    /// Region the row covers (`global`, `arm`, `leg`, …).
    pub location: String,
    /// Pearson correlation between estimated and true time.
    pub r: f64,
    /// Coefficient of determination.
    pub r2: f64,
    /// Mean absolute error.
    pub mae: f64,
}

/// Time-estimation table: `dataset,method,location,r,r2,mae`.
pub fn write_time_estimate_table(
    path: &Path,
    meta: &CsvMeta,
    rows: &[TimeEstimateRow],
) -> Result<(), IoError> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.dataset.clone(),
                r.method.clone(),
                r.location.clone(),
                fmt_f64(r.r),
                fmt_f64(r.r2),
                fmt_f64(r.mae),
            ]
        })
        .collect();
    write_csv(path, meta, &["dataset", "method", "location", "r", "r2", "mae"], &data)
}

/// One row of a point-cloud fidelity table (values on the caller's scale).
#[derive(Debug, Clone)]
pub struct CloudMetricsRow {
    /// Dataset name.
    pub dataset: String,
    /// Method name.
    pub method: String,
    /// Mean symmetric Chamfer distance.
    pub cd: f64,
    /// Mean Hausdorff distance.
    pub hd: f64,
    /// Mean earth mover's distance.
    pub emd: f64,
}

/// Shape-fidelity table: `dataset,method,cd,hd,emd`.
pub fn write_cloud_metrics_table(
    path: &Path,
    meta: &CsvMeta,
    rows: &[CloudMetricsRow],
) -> Result<(), IoError> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![r.dataset.clone(), r.method.clone(), fmt_f64(r.cd), fmt_f64(r.hd), fmt_f64(r.emd)]
        })
        .collect();
    write_csv(path, meta, &["dataset", "method", "cd", "hd", "emd"], &data)
}

/// One row of an anomaly-detection table.
#[derive(Debug, Clone)]
pub struct OodTableRow {
    /// Method name.
    pub method: String,
    /// Whether the score pools the whole shape or reacts to one region.
    pub time_scope: String,
    /// Area under the ROC curve.
    pub auc: f64,
    /// Sensitivity at the reported operating point.
    pub sensitivity: f64,
    /// Specificity at the reported operating point.
    pub specificity: f64,
    /// Accuracy at the reported operating point.
    pub accuracy: f64,
}

/// Anomaly-detection table:
/// `method,time_scope,auc,sensitivity,specificity,accuracy`.
pub fn write_ood_table(path: &Path, meta: &CsvMeta, rows: &[OodTableRow]) -> Result<(), IoError> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.time_scope.clone(),
                fmt_f64(r.auc),
                fmt_f64(r.sensitivity),
                fmt_f64(r.specificity),
                fmt_f64(r.accuracy),
            ]
        })
        .collect();
    write_csv(
        path,
        meta,
        &["method", "time_scope", "auc", "sensitivity", "specificity", "accuracy"],
        &data,
    )
}

/// Operating point of a score-thresholded detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Scores at or below this value are called anomalous.
    pub threshold: f64,
    /// Fraction of anomalous inputs correctly flagged.
    pub sensitivity: f64,
    /// Fraction of normal inputs correctly passed.
    pub specificity: f64,
    /// Overall fraction correct.
    pub accuracy: f64,
}

/// Pick the threshold maximizing Youden's J (sensitivity + specificity − 1)
/// over the observed score values. Anomalous inputs are expected to score
/// lower (more negative) than normal ones; classification is `score ≤
/// threshold`. Ties in J resolve to the lowest threshold, deterministically.
/// Returns `None` when either side is empty.
pub fn youden_operating_point(anomalous: &[f64], normal: &[f64]) -> Option<OperatingPoint> {
    if anomalous.is_empty() || normal.is_empty() {
        return None;
    }
    let mut candidates: Vec<f64> = anomalous.iter().chain(normal).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<OperatingPoint> = None;
    for &thr in &candidates {
        let tp = anomalous.iter().filter(|&&s| s <= thr).count();
        let tn = normal.iter().filter(|&&s| s > thr).count();
        let sens = tp as f64 / anomalous.len() as f64;
        let spec = tn as f64 / normal.len() as f64;
        let acc = (tp + tn) as f64 / (anomalous.len() + normal.len()) as f64;
        let j = sens + spec - 1.0;
        let better = match &best {
            None => true,
            Some(b) => j > (b.sensitivity + b.specificity - 1.0),
        };
        if better {
            best = Some(OperatingPoint { threshold: thr, sensitivity: sens, specificity: spec, accuracy: acc });
        }
    }
    best
}

// ── specialized dumps ───────────────────────────────────────────────────────

/// Field-training curve: `epoch,stage,l1,nll,total`.
pub fn write_training_log(path: &Path, meta: &CsvMeta, log: &[EpochLog]) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.stage.to_string(),
                fmt_f64(e.l1),
                fmt_f64(e.nll),
                fmt_f64(e.total),
            ]
        })
        .collect();
    write_csv(path, meta, &["epoch", "stage", "l1", "nll", "total"], &rows)
}

/// Inverse-training curve: `epoch,loss`.
pub fn write_inverse_log(
    path: &Path,
    meta: &CsvMeta,
    log: &[InverseEpochLog],
) -> Result<(), IoError> {
    let rows: Vec<Vec<String>> =
        log.iter().map(|e| vec![e.epoch.to_string(), fmt_f64(e.loss)]).collect();
    write_csv(path, meta, &["epoch", "loss"], &rows)
}

/// Information-validation grid. Columns: point coordinates, time, the
/// closed-form information split, the implied temporal variance, and the
/// Monte-Carlo cross-check when present.
pub fn write_fisher_grid(
    path: &Path,
    meta: &CsvMeta,
    reports: &[FisherReport],
) -> Result<(), IoError> {
    let d = reports.first().map(|r| r.p.len()).unwrap_or(0);
    let coord_names: Vec<String> = (0..d).map(|i| format!("p{i}")).collect();
    let mut columns: Vec<&str> = coord_names.iter().map(String::as_str).collect();
    columns.extend([
        "t",
        "i_mu",
        "i_sigma",
        "i_full",
        "sigma2_tau",
        "mc_i",
        "mc_i_se",
        "mc_score_mean",
        "mc_score_se",
    ]);
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            assert_eq!(r.p.len(), d, "mixed dimensions in one grid");
            let mut row: Vec<String> = r.p.iter().map(|&x| fmt_f64(x)).collect();
            row.extend([
                fmt_f64(r.t),
                fmt_f64(r.i_mu),
                fmt_f64(r.i_sigma),
                fmt_f64(r.i_full),
                fmt_f64(r.sigma2_tau),
                fmt_opt(r.mc_i),
                fmt_opt(r.mc_i_se),
                fmt_opt(r.mc_score_mean),
                fmt_opt(r.mc_score_se),
            ]);
            row
        })
        .collect();
    write_csv(path, meta, &columns, &rows)
}

/// Per-point time map: raw and clipped estimates plus identifiability.
pub fn write_time_map(path: &Path, meta: &CsvMeta, map: &TimeMap) -> Result<(), IoError> {
    let d = map.entries.first().map(|e| e.p.len()).unwrap_or(0);
    let coord_names: Vec<String> = (0..d).map(|i| format!("p{i}")).collect();
    let mut columns = vec!["index"];
    columns.extend(coord_names.iter().map(String::as_str));
    columns.extend(["tau_raw", "tau_clipped", "i_mu", "identifiable"]);
    let rows: Vec<Vec<String>> = map
        .entries
        .iter()
        .map(|e| {
            let mut row = vec![e.index.to_string()];
            row.extend(e.p.iter().map(|&x| fmt_f64(x)));
            row.extend([
                fmt_f64(e.tau_raw),
                fmt_f64(e.tau_clipped),
                fmt_opt(e.i_mu),
                e.identifiable.map(|b| b.to_string()).unwrap_or_default(),
            ]);
            row
        })
        .collect();
    write_csv(path, meta, &columns, &rows)
}

// ── SVG figures ─────────────────────────────────────────────────────────────

/// A shaded vertical band between two curves sharing an x grid.
#[derive(Debug, Clone)]
pub struct Band {
    /// X coordinates, ascending.
    pub x: Vec<f64>,
    /// Lower edge, same length as `x`.
    pub lo: Vec<f64>,
    /// Upper edge, same length as `x`.
    pub hi: Vec<f64>,
    /// Legend label.
    pub label: String,
}

/// A polyline.
#[derive(Debug, Clone)]
pub struct Line {
    /// X coordinates.
    pub x: Vec<f64>,
    /// Y coordinates, same length.
    pub y: Vec<f64>,
    /// Legend label.
    pub label: String,
}

/// A scatter layer.
#[derive(Debug, Clone)]
pub struct Scatter {
    /// X coordinates.
    pub x: Vec<f64>,
    /// Y coordinates, same length.
    pub y: Vec<f64>,
    /// Legend label.
    pub label: String,
}

/// A complete figure: layers are drawn bands first, then lines, then
/// points, so data is never hidden behind fills.
#[derive(Debug, Clone, Default)]
pub struct Figure {
    /// Title above the plot area.
    pub title: String,
    /// X-axis label.
    pub x_label: String,
    /// Y-axis label.
    pub y_label: String,
    /// Shaded bands.
    pub bands: Vec<Band>,
    /// Polylines.
    pub lines: Vec<Line>,
    /// Scatter layers.
    pub scatters: Vec<Scatter>,
    /// Draw the y = x diagonal (for estimate-vs-truth plots).
    pub identity: bool,
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 560.0;
const MARGIN_L: f64 = 72.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 48.0;
const MARGIN_B: f64 = 58.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round-numbered tick positions covering `[min, max]` (1–2–5 ladder).
fn nice_ticks(min: f64, max: f64) -> Vec<f64> {
    let span = (max - min).abs();
    if !span.is_finite() || span == 0.0 {
        return vec![min];
    }
    let raw_step = span / 5.0;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = mag * if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut v = start;
    while v <= max + step * 1e-9 {
        // Snap to the grid so ticks render as short decimals.
        ticks.push((v / step).round() * step);
        v += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    // Kill negative zero and float-grid residue for axis labels.
    let v = if v == 0.0 { 0.0 } else { v };
    let s = format!("{:.6}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

struct Extent {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Extent {
    fn collect(fig: &Figure) -> Extent {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for b in &fig.bands {
            xs.extend(&b.x);
            ys.extend(&b.lo);
            ys.extend(&b.hi);
        }
        for l in &fig.lines {
            xs.extend(&l.x);
            ys.extend(&l.y);
        }
        for s in &fig.scatters {
            xs.extend(&s.x);
            ys.extend(&s.y);
        }
        fn finite_range(v: &[f64]) -> (f64, f64) {
            v.iter().copied().filter(|x| x.is_finite()).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), x| (lo.min(x), hi.max(x)),
            )
        }
        let (mut x0, mut x1) = finite_range(&xs);
        let (mut y0, mut y1) = finite_range(&ys);
        if !x0.is_finite() || !x1.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() || !y1.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if fig.identity {
            y0 = y0.min(x0);
            y1 = y1.max(x1);
            x0 = x0.min(y0);
            x1 = x1.max(y1);
        }
        let pad = |a: f64, b: f64| {
            let w = (b - a).abs();
            let p = if w == 0.0 { a.abs().max(1.0) * 0.05 } else { w * 0.05 };
            (a - p, b + p)
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Extent { x0, x1, y0, y1 }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (SVG_W - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        SVG_H - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (SVG_H - MARGIN_T - MARGIN_B)
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{:.2}", v)
}

/// Render a figure to a standalone SVG document. Output is a pure function
/// of the figure: rendering twice yields identical bytes.
pub fn render_svg(fig: &Figure) -> String {
    let e = Extent::collect(fig);
    let mut s = String::with_capacity(1 << 14);
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_W} {SVG_H}\" \
         font-family=\"Helvetica, Arial, sans-serif\" font-size=\"13\">\n"
    ));
    s.push_str(&format!("<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"));

    // Grid and ticks.
    let (plot_x1, plot_y1) = (SVG_W - MARGIN_R, SVG_H - MARGIN_B);
    for tx in nice_ticks(e.x0, e.x1) {
        let px = e.sx(tx);
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#dddddd\"/>\n",
            fmt_coord(px),
            fmt_coord(MARGIN_T),
            fmt_coord(plot_y1)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#333333\">{}</text>\n",
            fmt_coord(px),
            fmt_coord(plot_y1 + 18.0),
            fmt_tick(tx)
        ));
    }
    for ty in nice_ticks(e.y0, e.y1) {
        let py = e.sy(ty);
        s.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"#dddddd\"/>\n",
            fmt_coord(MARGIN_L),
            fmt_coord(py),
            fmt_coord(plot_x1)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" fill=\"#333333\">{}</text>\n",
            fmt_coord(MARGIN_L - 8.0),
            fmt_coord(py + 4.0),
            fmt_tick(ty)
        ));
    }
    // Axes frame.
    s.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>\n",
        fmt_coord(MARGIN_L),
        fmt_coord(MARGIN_T),
        fmt_coord(plot_x1 - MARGIN_L),
        fmt_coord(plot_y1 - MARGIN_T)
    ));
    // Labels and title.
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"16\" fill=\"#111111\">{}</text>\n",
        fmt_coord((MARGIN_L + plot_x1) / 2.0),
        fmt_coord(MARGIN_T - 16.0),
        xml_escape(&fig.title)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#111111\">{}</text>\n",
        fmt_coord((MARGIN_L + plot_x1) / 2.0),
        fmt_coord(SVG_H - 14.0),
        xml_escape(&fig.x_label)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"#111111\" transform=\"rotate(-90 {0} {1})\">{2}</text>\n",
        fmt_coord(20.0),
        fmt_coord((MARGIN_T + plot_y1) / 2.0),
        xml_escape(&fig.y_label)
    ));

    let mut legend: Vec<(String, String, &str)> = Vec::new(); // (label, color, kind)
    let mut color_idx = 0usize;
    let mut next_color = || {
        let c = PALETTE[color_idx % PALETTE.len()];
        color_idx += 1;
        c
    };

    for b in &fig.bands {
        let color = next_color();
        if b.x.is_empty() {
            continue;
        }
        let mut path = String::from("M");
        for (x, y) in b.x.iter().zip(&b.hi) {
            path.push_str(&format!(" {} {}", fmt_coord(e.sx(*x)), fmt_coord(e.sy(*y))));
        }
        for (x, y) in b.x.iter().rev().zip(b.lo.iter().rev()) {
            path.push_str(&format!(" L {} {}", fmt_coord(e.sx(*x)), fmt_coord(e.sy(*y))));
        }
        path.push_str(" Z");
        s.push_str(&format!(
            "<path d=\"{path}\" fill=\"{color}\" fill-opacity=\"0.18\" stroke=\"none\"/>\n"
        ));
        legend.push((b.label.clone(), color.to_string(), "band"));
    }

    if fig.identity {
        let lo = e.x0.max(e.y0);
        let hi = e.x1.min(e.y1);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888888\" stroke-dasharray=\"6 4\"/>\n",
            fmt_coord(e.sx(lo)),
            fmt_coord(e.sy(lo)),
            fmt_coord(e.sx(hi)),
            fmt_coord(e.sy(hi))
        ));
    }

    for l in &fig.lines {
        let color = next_color();
        let pts: Vec<String> = l
            .x
            .iter()
            .zip(&l.y)
            .map(|(x, y)| format!("{},{}", fmt_coord(e.sx(*x)), fmt_coord(e.sy(*y))))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        legend.push((l.label.clone(), color.to_string(), "line"));
    }

    for sc in &fig.scatters {
        let color = next_color();
        for (x, y) in sc.x.iter().zip(&sc.y) {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
                fmt_coord(e.sx(*x)),
                fmt_coord(e.sy(*y))
            ));
        }
        legend.push((sc.label.clone(), color.to_string(), "scatter"));
    }

    // Legend, top-right inside the frame.
    let lx = plot_x1 - 190.0;
    for (i, (label, color, kind)) in legend.iter().enumerate() {
        let ly = MARGIN_T + 16.0 + 20.0 * i as f64;
        match *kind {
            "scatter" => s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{color}\"/>\n",
                fmt_coord(lx + 8.0),
                fmt_coord(ly - 4.0)
            )),
            "band" => s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"16\" height=\"10\" fill=\"{color}\" fill-opacity=\"0.3\"/>\n",
                fmt_coord(lx),
                fmt_coord(ly - 9.0)
            )),
            _ => s.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                fmt_coord(lx),
                fmt_coord(ly - 4.0),
                fmt_coord(lx + 16.0)
            )),
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"#111111\">{}</text>\n",
            fmt_coord(lx + 22.0),
            fmt_coord(ly),
            xml_escape(label)
        ));
    }

    s.push_str("</svg>\n");
    s
}

/// Render and write a figure atomically.
pub fn write_svg(path: &Path, fig: &Figure) -> Result<(), IoError> {
    atomic_write(path, render_svg(fig).as_bytes())
}

// ── tests ────────────────────────────────────────────────────────────────
