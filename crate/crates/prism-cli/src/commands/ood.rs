//! `ood`: score shapes for internal temporal inconsistency and benchmark
//! the score against a synthetically lagged copy of the dataset.

use crate::commands::infer_time::{check_model_pair, meta_for};
use crate::common::{self, CliError};
use clap::Args;
use prism::analysis::{auc, ood_score, AnalysisError, ObservationGroup};
use prism::inverse::time_map;
use prism::io::Provenance;
use prism::network::Params;
use prism::report::{self, fmt_f64, youden_operating_point, OodTableRow};
use prism::starman::{self, Split};
use rayon::prelude::*;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct OodArgs {
    /// Displacement-field checkpoint (.pck).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Inverse time-encoder checkpoint (.pck).
    #[arg(long = "inverse-ckpt")]
    pub inverse_ckpt: PathBuf,
    /// Synthetic dataset whose generator settings seed the lagged copy.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for scores.csv and ood_metrics.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Intrinsic-time lag injected into the anomalous copy.
    #[arg(long, default_value_t = 0.3)]
    pub lag: f64,
    /// Which limb group lags in the anomalous copy (arm|leg).
    #[arg(long, default_value = "arm")]
    pub ood_limb: String,
    /// Generation seed for the lagged copy; defaults to the dataset's own
    /// seed so the copy shares its subjects.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// One scored observation.
pub struct ScoredObs {
    pub subject_id: u64,
    pub t: f64,
    pub score: f64,
    pub tau_max: f64,
    pub argmin_point: usize,
}

/// Score every observation; unidentifiable shapes are skipped with a
/// warning rather than aborting the run.
pub fn score_groups(
    field: &Params,
    inverse: &Params,
    groups: &[ObservationGroup<'_>],
    t_range: (f64, f64),
) -> Result<Vec<ScoredObs>, CliError> {
    let scored: Result<Vec<Option<ScoredObs>>, String> = groups
        .par_iter()
        .map(|g| {
            let map = time_map(inverse, &g.shape(), t_range)
                .map_err(|e| format!("subject {} at t = {}: {e}", g.subject_id, g.t))?;
            match ood_score(&map, field, g.t) {
                Ok(r) => Ok(Some(ScoredObs {
                    subject_id: g.subject_id,
                    t: g.t,
                    score: r.score,
                    tau_max: r.tau_max,
                    argmin_point: r.argmin_point,
                })),
                Err(AnalysisError::AllUnidentifiable(_)) => {
                    log::warn!(
                        "subject {} at t = {}: no identifiable points, skipping",
                        g.subject_id,
                        g.t
                    );
                    Ok(None)
                }
                Err(e) => Err(format!("subject {} at t = {}: {e}", g.subject_id, g.t)),
            }
        })
        .collect();
    let scored = scored.map_err(|m| CliError::Runtime(anyhow::anyhow!(m)))?;
    Ok(scored.into_iter().flatten().collect())
}

pub fn run(args: OodArgs) -> Result<(), CliError> {
    let field = common::load_checkpoint(&args.ckpt)?;
    let inverse = common::load_checkpoint(&args.inverse_ckpt)?;
    let ds = common::load_dataset(&args.dataset)?;
    check_model_pair(&field, &inverse, ds.dataset.header.d)?;
    let lagged_group = common::parse_limb_group(&args.ood_limb)?;
    let Provenance::Starman { config, split } = &ds.dataset.header.provenance else {
        return Err(CliError::Usage(
            "ood needs a synthetic dataset: the lagged copy is regenerated \
             from the generator settings stored in its header"
                .to_string(),
        ));
    };
    let seed = match args.seed.or(ds.dataset.header.seed) {
        Some(s) => s,
        None => {
            return Err(CliError::Usage(
                "dataset header carries no seed; pass --seed for the lagged copy".to_string(),
            ))
        }
    };
    if *split != Split::Test {
        log::warn!(
            "dataset holds the training split; the lagged copy uses test-split \
             subjects, so normal and anomalous groups will not share subjects"
        );
    }
    if !(args.lag.is_finite() && args.lag > 0.0) {
        return Err(CliError::Usage(format!("--lag must be a positive number, got {}", args.lag)));
    }

    let lagged = starman::make_synthetic_ood(config, seed, args.lag, lagged_group);
    let t_range = field.ckpt.t_range;
    let normal_groups = common::observations(&ds.dataset.samples);
    let lagged_groups = common::observations(&lagged.samples);
    log::info!(
        "scoring {} normal and {} lagged observations",
        normal_groups.len(),
        lagged_groups.len()
    );
    let normal =
        score_groups(&field.ckpt.params, &inverse.ckpt.params, &normal_groups, t_range)?;
    let lagged_scores =
        score_groups(&field.ckpt.params, &inverse.ckpt.params, &lagged_groups, t_range)?;
    if normal.is_empty() || lagged_scores.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "no scorable observations (normal: {}, lagged: {})",
            normal.len(),
            lagged_scores.len()
        )));
    }

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", args.out_dir.display()))?;
    let mut meta = meta_for(&field, &inverse, &ds.sha256);
    meta.extra.push(("lag".to_string(), fmt_f64(args.lag)));
    meta.extra.push(("ood_limb".to_string(), args.ood_limb.clone()));
    meta.extra.push(("ood_seed".to_string(), seed.to_string()));

    let columns = ["set", "subject_id", "t", "score", "tau_max", "argmin_point"];
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (set, list) in [("normal", &normal), ("lagged", &lagged_scores)] {
        for s in list {
            rows.push(vec![
                set.to_string(),
                s.subject_id.to_string(),
                fmt_f64(s.t),
                fmt_f64(s.score),
                fmt_f64(s.tau_max),
                s.argmin_point.to_string(),
            ]);
        }
    }
    let scores_path = args.out_dir.join("scores.csv");
    report::write_csv(&scores_path, &meta, &columns, &rows)?;

    let normal_vals: Vec<f64> = normal.iter().map(|s| s.score).collect();
    let lagged_vals: Vec<f64> = lagged_scores.iter().map(|s| s.score).collect();
    let area = auc(&lagged_vals, &normal_vals);
    let op = youden_operating_point(&lagged_vals, &normal_vals)
        .expect("both score groups are non-empty");
    let table = vec![OodTableRow {
        method: "temporal_lag".to_string(),
        time_scope: "local".to_string(),
        auc: area,
        sensitivity: op.sensitivity,
        specificity: op.specificity,
        accuracy: op.accuracy,
    }];
    let metrics_path = args.out_dir.join("ood_metrics.csv");
    report::write_ood_table(&metrics_path, &meta, &table)?;

    println!(
        "auc={} sensitivity={} specificity={} accuracy={} threshold={}",
        fmt_f64(area),
        fmt_f64(op.sensitivity),
        fmt_f64(op.specificity),
        fmt_f64(op.accuracy),
        fmt_f64(op.threshold),
    );
    println!("{}", scores_path.display());
    println!("{}", metrics_path.display());
    Ok(())
}
