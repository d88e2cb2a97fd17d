//! `infer-time`: estimate each observation's intrinsic time and, when the
//! dataset carries ground truth, summarize estimator accuracy.

use crate::common::{self, CliError};
use clap::Args;
use prism::analysis::scalar_metrics;
use prism::network::HeadKind;
use prism::report::{self, fmt_f64, fmt_opt, CsvMeta, TimeEstimateRow};
use std::path::{Path, PathBuf};

#[derive(Args, Debug)]
pub struct InferTimeArgs {
    /// Displacement-field checkpoint (.pck).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Inverse time-encoder checkpoint (.pck).
    #[arg(long = "inverse-ckpt")]
    pub inverse_ckpt: PathBuf,
    /// Dataset to estimate (.psd).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for estimates.csv and metrics.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Check that the two checkpoints form a usable (field, encoder) pair for
/// a dataset of dimension `d`. Shared by every command that runs the
/// estimation pipeline.
pub fn check_model_pair(
    field: &common::LoadedCheckpoint,
    inverse: &common::LoadedCheckpoint,
    d: usize,
) -> Result<(), CliError> {
    if field.ckpt.params.arch.head != HeadKind::Field {
        return Err(CliError::Usage(
            "--ckpt must be a displacement-field checkpoint (this one has a scalar head)"
                .to_string(),
        ));
    }
    if inverse.ckpt.params.arch.head != HeadKind::Scalar {
        return Err(CliError::Usage(
            "--inverse-ckpt must be an inverse-encoder checkpoint (this one has a field head)"
                .to_string(),
        ));
    }
    if field.ckpt.params.arch.d != d {
        return Err(CliError::Usage(format!(
            "field checkpoint expects D = {}, dataset has D = {d}",
            field.ckpt.params.arch.d
        )));
    }
    if inverse.ckpt.params.arch.d != d {
        return Err(CliError::Usage(format!(
            "inverse checkpoint expects D = {}, dataset has D = {d}",
            inverse.ckpt.params.arch.d
        )));
    }
    Ok(())
}

/// Standard provenance block for outputs derived from one model pair and
/// one dataset.
pub fn meta_for(
    field: &common::LoadedCheckpoint,
    inverse: &common::LoadedCheckpoint,
    dataset_sha256: &str,
) -> CsvMeta {
    CsvMeta {
        checkpoint_sha256: Some(field.sha256.clone()),
        dataset_sha256: Some(dataset_sha256.to_string()),
        extra: vec![("inverse_checkpoint_sha256".to_string(), inverse.sha256.clone())],
    }
}

/// Accuracy rows for one named scope: one row per estimator that has at
/// least two truth-bearing pairs.
fn metric_rows(
    dataset_name: &str,
    location: &str,
    pairs_mean: &[(f64, f64)],
    pairs_weighted: &[(f64, f64)],
    rows: &mut Vec<TimeEstimateRow>,
) {
    for (method, pairs) in [("mean", pairs_mean), ("weighted", pairs_weighted)] {
        if pairs.len() < 2 {
            continue;
        }
        let pred: Vec<f64> = pairs.iter().map(|&(p, _)| p).collect();
        let truth: Vec<f64> = pairs.iter().map(|&(_, t)| t).collect();
        match scalar_metrics(&pred, &truth) {
            Ok(m) => rows.push(TimeEstimateRow {
                dataset: dataset_name.to_string(),
                method: method.to_string(),
                location: location.to_string(),
                r: m.r,
                r2: m.r2,
                mae: m.mae,
            }),
            Err(e) => log::warn!("skipping {location}/{method} metrics: {e}"),
        }
    }
}

/// Build the accuracy table for a set of per-observation estimates.
pub fn time_estimate_rows(
    dataset_name: &str,
    ests: &[common::ObsEstimate],
) -> Vec<TimeEstimateRow> {
    let mut rows = Vec::new();
    let global_mean: Vec<(f64, f64)> =
        ests.iter().filter_map(|e| e.tau_gt.map(|gt| (e.tau_mean, gt))).collect();
    let global_weighted: Vec<(f64, f64)> = ests
        .iter()
        .filter_map(|e| match (e.tau_weighted, e.tau_gt) {
            (Some(p), Some(gt)) => Some((p, gt)),
            _ => None,
        })
        .collect();
    metric_rows(dataset_name, "global", &global_mean, &global_weighted, &mut rows);
    for region in ["arm", "leg"] {
        let mut pairs_mean = Vec::new();
        let mut pairs_weighted = Vec::new();
        for e in ests {
            for r in e.regions.iter().filter(|r| r.name == region) {
                if let Some(gt) = r.tau_gt {
                    pairs_mean.push((r.tau_mean, gt));
                    if let Some(w) = r.tau_weighted {
                        pairs_weighted.push((w, gt));
                    }
                }
            }
        }
        metric_rows(dataset_name, region, &pairs_mean, &pairs_weighted, &mut rows);
    }
    rows
}

/// File stem of a dataset path, for table rows.
pub fn dataset_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

pub fn run(args: InferTimeArgs) -> Result<(), CliError> {
    let field = common::load_checkpoint(&args.ckpt)?;
    let inverse = common::load_checkpoint(&args.inverse_ckpt)?;
    let ds = common::load_dataset(&args.dataset)?;
    check_model_pair(&field, &inverse, ds.dataset.header.d)?;
    let groups = common::observations(&ds.dataset.samples);
    if groups.is_empty() {
        return Err(CliError::Usage(format!(
            "dataset {} contains no observations",
            args.dataset.display()
        )));
    }
    log::info!("estimating {} observations", groups.len());
    let ests = common::estimate_observations(
        &field.ckpt.params,
        &inverse.ckpt.params,
        &groups,
        field.ckpt.t_range,
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", args.out_dir.display()))?;
    let meta = meta_for(&field, &inverse, &ds.sha256);

    // One row per (observation, scope): the whole shape plus each labeled
    // region, so downstream tooling gets a single tidy file.
    let columns = [
        "scope",
        "subject_id",
        "t",
        "n_points",
        "n_identifiable",
        "tau_gt",
        "tau_mean",
        "tau_weighted",
    ];
    let mut rows: Vec<Vec<String>> = Vec::new();
    for e in &ests {
        rows.push(vec![
            "shape".to_string(),
            e.subject_id.to_string(),
            fmt_f64(e.t),
            e.n_points.to_string(),
            e.n_identifiable.to_string(),
            fmt_opt(e.tau_gt),
            fmt_f64(e.tau_mean),
            fmt_opt(e.tau_weighted),
        ]);
        for r in &e.regions {
            rows.push(vec![
                r.name.to_string(),
                e.subject_id.to_string(),
                fmt_f64(e.t),
                r.n_points.to_string(),
                String::new(),
                fmt_opt(r.tau_gt),
                fmt_f64(r.tau_mean),
                fmt_opt(r.tau_weighted),
            ]);
        }
    }
    let estimates_path = args.out_dir.join("estimates.csv");
    report::write_csv(&estimates_path, &meta, &columns, &rows)?;

    let table = time_estimate_rows(&dataset_name(&args.dataset), &ests);
    if table.is_empty() {
        log::warn!("dataset carries no ground-truth times; metrics.csv will hold no rows");
    }
    let metrics_path = args.out_dir.join("metrics.csv");
    report::write_time_estimate_table(&metrics_path, &meta, &table)?;

    println!("{}", estimates_path.display());
    println!("{}", metrics_path.display());
    Ok(())
}
