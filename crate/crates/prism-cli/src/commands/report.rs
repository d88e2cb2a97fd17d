//! `report`: one-stop summary of a trained model on a dataset — accuracy
//! tables plus calibration and uncertainty figures.
//!
//! Always writes the same five files into `--out-dir`:
//!
//! * `table2.csv` — whole-shape time-estimation accuracy,
//! * `table3.csv` — per-region time-estimation accuracy,
//! * `table4.csv` — longitudinal shape-prediction distances,
//! * `fig3.svg`  — estimated vs chronological time with a ±2σ band,
//! * `fig4.svg`  — temporal spread over time, estimated (and true, for
//!   synthetic data) per region.
//!
//! The tables need the inverse encoder; without `--inverse-ckpt` they are
//! written header-only and the figures carry what the field alone supports.

use crate::commands::infer_time::{check_model_pair, dataset_name, time_estimate_rows};
use crate::commands::predict::score_longitudinal_pairs;
use crate::common::{self, CliError};
use clap::Args;
use prism::analysis::aggregated_sigma_tau;
use prism::io::Provenance;
use prism::network::{HeadKind, Params};
use prism::report::{
    write_cloud_metrics_table, write_svg, write_time_estimate_table, Band, CloudMetricsRow,
    CsvMeta, Figure, Line, Scatter, TimeEstimateRow,
};
use prism::starman::{self, LimbGroup};
use std::path::PathBuf;

/// Evaluation times for the spread curves and the calibration band.
const T_GRID: usize = 21;
/// Cap on template points per spread evaluation (deterministic stride
/// subsample; the aggregate is a mean, so a subsample only trades noise).
const MAX_SPREAD_POINTS: usize = 256;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Displacement-field checkpoint (.pck).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Inverse time-encoder checkpoint (.pck); omit to get field-only
    /// figures and empty tables.
    #[arg(long = "inverse-ckpt")]
    pub inverse_ckpt: Option<PathBuf>,
    /// Dataset to evaluate (.psd).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn stride_sample(points: &[Vec<f64>], cap: usize) -> Vec<&[f64]> {
    let stride = points.len().div_ceil(cap).max(1);
    points.iter().step_by(stride).map(Vec::as_slice).collect()
}

/// `sqrt(1/mean I_mu)` over `points` at each grid time; `None` where every
/// point is unidentifiable.
fn spread_curve(
    field: &Params,
    points: &[&[f64]],
    ts: &[f64],
) -> Result<Vec<Option<f64>>, CliError> {
    ts.iter()
        .map(|&t| match aggregated_sigma_tau(field, points, t) {
            Ok(s) => Ok(Some(s)),
            Err(prism::analysis::AnalysisError::AllUnidentifiable(_)) => Ok(None),
            Err(e) => Err(CliError::Runtime(anyhow::Error::new(e))),
        })
        .collect()
}

/// Split an optional-valued curve into contiguous defined segments.
fn segments(ts: &[f64], ys: &[Option<f64>], label: &str) -> Vec<Line> {
    let mut out = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (&t, &v) in ts.iter().zip(ys) {
        match v {
            Some(v) => {
                x.push(t);
                y.push(v);
            }
            None => {
                if x.len() > 1 {
                    out.push(Line { x: x.clone(), y: y.clone(), label: label.to_string() });
                }
                x.clear();
                y.clear();
            }
        }
    }
    if x.len() > 1 {
        out.push(Line { x, y, label: label.to_string() });
    }
    out
}

pub fn run(args: ReportArgs) -> Result<(), CliError> {
    let field = common::load_checkpoint(&args.ckpt)?;
    if field.ckpt.params.arch.head != HeadKind::Field {
        return Err(CliError::Usage(
            "--ckpt must be a displacement-field checkpoint".to_string(),
        ));
    }
    let ds = common::load_dataset(&args.dataset)?;
    if field.ckpt.params.arch.d != ds.dataset.header.d {
        return Err(CliError::Usage(format!(
            "checkpoint expects D = {}, dataset has D = {}",
            field.ckpt.params.arch.d, ds.dataset.header.d
        )));
    }
    let inverse = match &args.inverse_ckpt {
        Some(p) => {
            let inv = common::load_checkpoint(p)?;
            check_model_pair(&field, &inv, ds.dataset.header.d)?;
            Some(inv)
        }
        None => {
            log::warn!("no --inverse-ckpt: tables will be empty, figures field-only");
            None
        }
    };

    let t_range = field.ckpt.t_range;
    let groups = common::observations(&ds.dataset.samples);
    let name = dataset_name(&args.dataset);

    // Estimates drive table2, table3, and the fig3 scatter.
    let ests = match &inverse {
        Some(inv) => Some(common::estimate_observations(
            &field.ckpt.params,
            &inv.ckpt.params,
            &groups,
            t_range,
        )?),
        None => None,
    };

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", args.out_dir.display()))?;
    let meta = CsvMeta {
        checkpoint_sha256: Some(field.sha256.clone()),
        dataset_sha256: Some(ds.sha256.clone()),
        extra: inverse
            .as_ref()
            .map(|inv| vec![("inverse_checkpoint_sha256".to_string(), inv.sha256.clone())])
            .unwrap_or_default(),
    };

    let table_rows: Vec<TimeEstimateRow> =
        ests.as_ref().map(|e| time_estimate_rows(&name, e)).unwrap_or_default();
    let (global_rows, region_rows): (Vec<_>, Vec<_>) =
        table_rows.into_iter().partition(|r| r.location == "global");
    write_time_estimate_table(&args.out_dir.join("table2.csv"), &meta, &global_rows)?;
    write_time_estimate_table(&args.out_dir.join("table3.csv"), &meta, &region_rows)?;

    let pair_rows: Vec<CloudMetricsRow> = match &inverse {
        Some(inv) => {
            let pairs = score_longitudinal_pairs(
                &field.ckpt.params,
                &inv.ckpt.params,
                &groups,
                t_range,
            )?;
            if pairs.is_empty() {
                log::warn!("no subject has more than one observation; table4 will hold no rows");
                Vec::new()
            } else {
                let n = pairs.len() as f64;
                vec![CloudMetricsRow {
                    dataset: name.clone(),
                    method: "field".to_string(),
                    cd: pairs.iter().map(|p| p.cd).sum::<f64>() / n,
                    hd: pairs.iter().map(|p| p.hd).sum::<f64>() / n,
                    emd: pairs.iter().map(|p| p.emd).sum::<f64>() / n,
                }]
            }
        }
        None => Vec::new(),
    };
    write_cloud_metrics_table(&args.out_dir.join("table4.csv"), &meta, &pair_rows)?;

    // Shared evaluation grid.
    let (t_lo, t_hi) = t_range;
    let ts: Vec<f64> = (0..T_GRID)
        .map(|i| t_lo + (t_hi - t_lo) * i as f64 / (T_GRID - 1) as f64)
        .collect();
    let all_points = common::distinct_points(&ds.dataset.samples);
    let template = stride_sample(&all_points, MAX_SPREAD_POINTS);

    // fig3: estimated vs chronological time, population ±2σ band.
    let spread = spread_curve(&field.ckpt.params, &template, &ts)?;
    let band_pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(&spread)
        .filter_map(|(&t, &s)| s.map(|s| (t, s)))
        .collect();
    let mut fig3 = Figure {
        title: "Estimated vs chronological time".to_string(),
        x_label: "chronological time t".to_string(),
        y_label: "estimated intrinsic time".to_string(),
        identity: true,
        ..Figure::default()
    };
    if band_pts.len() > 1 {
        fig3.bands.push(Band {
            x: band_pts.iter().map(|&(t, _)| t).collect(),
            lo: band_pts.iter().map(|&(t, s)| t - 2.0 * s).collect(),
            hi: band_pts.iter().map(|&(t, s)| t + 2.0 * s).collect(),
            label: "population ±2σ".to_string(),
        });
    }
    if let Some(ests) = &ests {
        let pts: Vec<(f64, f64)> =
            ests.iter().filter_map(|e| e.tau_weighted.map(|w| (e.t, w))).collect();
        fig3.scatters.push(Scatter {
            x: pts.iter().map(|&(t, _)| t).collect(),
            y: pts.iter().map(|&(_, w)| w).collect(),
            label: "weighted estimate".to_string(),
        });
    }
    write_svg(&args.out_dir.join("fig3.svg"), &fig3)?;

    // fig4: temporal spread by region, estimated vs (synthetic) truth.
    let mut fig4 = Figure {
        title: "Temporal spread over time".to_string(),
        x_label: "chronological time t".to_string(),
        y_label: "sigma_tau".to_string(),
        ..Figure::default()
    };
    let mut any_region = false;
    for (label, group) in [("arm", LimbGroup::Arm), ("leg", LimbGroup::Leg)] {
        let labeled: Vec<prism::field::ShapeSample> = ds
            .dataset
            .samples
            .iter()
            .filter(|s| s.limb.map(starman::limb_group) == Some(group))
            .cloned()
            .collect();
        let pts = common::distinct_points(&labeled);
        if pts.is_empty() {
            continue;
        }
        any_region = true;
        let sample = stride_sample(&pts, MAX_SPREAD_POINTS);
        let curve = spread_curve(&field.ckpt.params, &sample, &ts)?;
        fig4.lines.extend(segments(&ts, &curve, &format!("{label} estimated")));
    }
    if !any_region {
        // Unlabeled data: one whole-shape curve.
        let curve = spread_curve(&field.ckpt.params, &template, &ts)?;
        fig4.lines.extend(segments(&ts, &curve, "estimated"));
    }
    if let Provenance::Starman { config, .. } = &ds.dataset.header.provenance {
        for (label, params) in [("arm", &config.arm), ("leg", &config.leg)] {
            let truth: Vec<f64> = ts.iter().map(|&t| starman::sigma_tau(t, params)).collect();
            fig4.lines.push(Line {
                x: ts.clone(),
                y: truth,
                label: format!("{label} true"),
            });
        }
    }
    write_svg(&args.out_dir.join("fig4.svg"), &fig4)?;

    for f in ["table2.csv", "table3.csv", "table4.csv", "fig3.svg", "fig4.svg"] {
        println!("{}", args.out_dir.join(f).display());
    }
    Ok(())
}
