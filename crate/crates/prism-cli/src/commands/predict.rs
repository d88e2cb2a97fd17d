//! `predict`: forecast each subject's shape at a later visit from an
//! earlier one, and score the forecasts against the observed shapes.

use crate::commands::infer_time::{check_model_pair, dataset_name, meta_for};
use crate::common::{self, CliError};
use clap::Args;
use prism::analysis::{chamfer, emd, hausdorff, predict_longitudinal, ObservationGroup};
use prism::report::{self, fmt_f64, fmt_opt, CloudMetricsRow};
use rayon::prelude::*;
use std::path::PathBuf;

/// Reported point-cloud distances are multiplied by this factor — template
/// coordinates live in a unit box, so raw distances are hundredths.
pub const CLOUD_METRIC_SCALE: f64 = 100.0;

/// Seed for the entropic transport solver inside `emd`; below the solver's
/// subsampling cap the value is irrelevant, it only pins determinism.
const EMD_SEED: u64 = 0x454d44;

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Displacement-field checkpoint (.pck).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Inverse time-encoder checkpoint (.pck).
    #[arg(long = "inverse-ckpt")]
    pub inverse_ckpt: PathBuf,
    /// Dataset of longitudinal observations (.psd).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directory for predictions.csv and summary.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Anchor time: use each subject's observation nearest to this time
    /// instead of their earliest one. Requires --t1.
    #[arg(long)]
    pub t0: Option<f64>,
    /// Target time: predict at this time instead of at each later
    /// observation. Requires --t0.
    #[arg(long)]
    pub t1: Option<f64>,
}

/// One anchor→target prediction task.
struct Task<'a> {
    anchor: &'a ObservationGroup<'a>,
    t1: f64,
    /// Observed shape at the target time, when one exists to score against.
    truth: Option<&'a ObservationGroup<'a>>,
}

/// The observed point set of a group: `p + d` per sample.
pub(crate) fn observed_points(g: &ObservationGroup<'_>) -> Vec<Vec<f64>> {
    g.samples.iter().map(|s| s.p.iter().zip(&s.d).map(|(p, d)| p + d).collect()).collect()
}

/// Distances of one scored earliest→later prediction, on the reporting
/// scale (`CLOUD_METRIC_SCALE` × raw).
pub struct PairScore {
    pub subject_id: u64,
    pub t0: f64,
    pub t1: f64,
    pub cd: f64,
    pub hd: f64,
    pub emd: f64,
}

/// Predict every later observation of every subject from their earliest
/// one and score against the observed shapes. Subjects with a single
/// observation contribute nothing.
pub fn score_longitudinal_pairs(
    field: &prism::network::Params,
    inverse: &prism::network::Params,
    groups: &[ObservationGroup<'_>],
    t_range: (f64, f64),
) -> Result<Vec<PairScore>, CliError> {
    let mut pairs: Vec<(&ObservationGroup<'_>, &ObservationGroup<'_>)> = Vec::new();
    let mut i = 0;
    while i < groups.len() {
        let mut j = i + 1;
        while j < groups.len() && groups[j].subject_id == groups[i].subject_id {
            pairs.push((&groups[i], &groups[j]));
            j += 1;
        }
        i = j;
    }
    let scores: Result<Vec<PairScore>, String> = pairs
        .par_iter()
        .map(|(anchor, target)| {
            let pred = predict_longitudinal(
                &anchor.shape(),
                anchor.t,
                target.t,
                field,
                inverse,
                t_range,
            )
            .map_err(|e| format!("subject {} at t = {}: {e}", anchor.subject_id, anchor.t))?;
            let observed = observed_points(target);
            Ok(PairScore {
                subject_id: anchor.subject_id,
                t0: anchor.t,
                t1: target.t,
                cd: CLOUD_METRIC_SCALE * chamfer(&pred.points, &observed),
                hd: CLOUD_METRIC_SCALE * hausdorff(&pred.points, &observed),
                emd: CLOUD_METRIC_SCALE * emd(&pred.points, &observed, EMD_SEED),
            })
        })
        .collect();
    scores.map_err(|m| CliError::Runtime(anyhow::anyhow!(m)))
}

pub fn run(args: PredictArgs) -> Result<(), CliError> {
    if args.t0.is_some() != args.t1.is_some() {
        return Err(CliError::Usage("--t0 and --t1 must be given together".to_string()));
    }
    let field = common::load_checkpoint(&args.ckpt)?;
    let inverse = common::load_checkpoint(&args.inverse_ckpt)?;
    let ds = common::load_dataset(&args.dataset)?;
    check_model_pair(&field, &inverse, ds.dataset.header.d)?;
    let groups = common::observations(&ds.dataset.samples);

    // Collect per-subject observation sequences (already time-sorted by the
    // grouping), then derive the prediction tasks.
    let mut by_subject: Vec<Vec<&ObservationGroup<'_>>> = Vec::new();
    for g in &groups {
        match by_subject.last_mut() {
            Some(seq) if seq[0].subject_id == g.subject_id => seq.push(g),
            _ => by_subject.push(vec![g]),
        }
    }
    let mut tasks: Vec<Task<'_>> = Vec::new();
    match (args.t0, args.t1) {
        (Some(t0), Some(t1)) => {
            // Anchor at the observation nearest t0; score against the one
            // nearest t1 when it is reasonably close, otherwise leave the
            // row unscored.
            let tol = 0.05 * (field.ckpt.t_range.1 - field.ckpt.t_range.0).abs().max(1e-12);
            for seq in &by_subject {
                let anchor = seq
                    .iter()
                    .min_by(|a, b| (a.t - t0).abs().total_cmp(&(b.t - t0).abs()))
                    .expect("sequence is non-empty");
                let nearest =
                    seq.iter().min_by(|a, b| (a.t - t1).abs().total_cmp(&(b.t - t1).abs()));
                let truth = nearest.filter(|g| (g.t - t1).abs() <= tol).copied();
                tasks.push(Task { anchor, t1, truth });
            }
        }
        _ => {
            // Default: earliest observation forecasts every later one.
            for seq in &by_subject {
                let (anchor, rest) = seq.split_first().expect("sequence is non-empty");
                for target in rest {
                    tasks.push(Task { anchor, t1: target.t, truth: Some(target) });
                }
            }
        }
    }
    if tasks.is_empty() {
        return Err(CliError::Usage(
            "no prediction tasks: every subject has a single observation \
             (use --t0/--t1 to predict at an explicit time)"
                .to_string(),
        ));
    }
    log::info!("predicting {} anchor\u{2192}target pairs", tasks.len());

    struct Outcome {
        subject_id: u64,
        t0: f64,
        t1: f64,
        tau0: f64,
        z: f64,
        tau1: f64,
        extrapolated: bool,
        cd: Option<f64>,
        hd: Option<f64>,
        emd: Option<f64>,
    }
    let t_range = field.ckpt.t_range;
    let outcomes: Result<Vec<Outcome>, String> = tasks
        .par_iter()
        .map(|task| {
            let g = task.anchor;
            let shape = g.shape();
            let pred =
                predict_longitudinal(&shape, g.t, task.t1, &field.ckpt.params, &inverse.ckpt.params, t_range)
                    .map_err(|e| format!("subject {} at t = {}: {e}", g.subject_id, g.t))?;
            let (cd, hd, dist_emd) = match task.truth {
                Some(truth) => {
                    let observed = observed_points(truth);
                    (
                        Some(CLOUD_METRIC_SCALE * chamfer(&pred.points, &observed)),
                        Some(CLOUD_METRIC_SCALE * hausdorff(&pred.points, &observed)),
                        Some(CLOUD_METRIC_SCALE * emd(&pred.points, &observed, EMD_SEED)),
                    )
                }
                None => (None, None, None),
            };
            Ok(Outcome {
                subject_id: g.subject_id,
                t0: g.t,
                t1: task.t1,
                tau0: pred.tau_bar0,
                z: pred.z_tau,
                tau1: pred.tau_bar1,
                extrapolated: pred.extrapolated,
                cd,
                hd,
                emd: dist_emd,
            })
        })
        .collect();
    let outcomes = outcomes.map_err(|m| CliError::Runtime(anyhow::anyhow!(m)))?;

    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", args.out_dir.display()))?;
    let mut meta = meta_for(&field, &inverse, &ds.sha256);
    meta.extra.push(("cloud_metric_scale".to_string(), fmt_f64(CLOUD_METRIC_SCALE)));

    let columns =
        ["subject_id", "t0", "t1", "tau0", "z", "tau1", "extrapolated", "cd", "hd", "emd"];
    let rows: Vec<Vec<String>> = outcomes
        .iter()
        .map(|o| {
            vec![
                o.subject_id.to_string(),
                fmt_f64(o.t0),
                fmt_f64(o.t1),
                fmt_f64(o.tau0),
                fmt_f64(o.z),
                fmt_f64(o.tau1),
                o.extrapolated.to_string(),
                fmt_opt(o.cd),
                fmt_opt(o.hd),
                fmt_opt(o.emd),
            ]
        })
        .collect();
    let predictions_path = args.out_dir.join("predictions.csv");
    report::write_csv(&predictions_path, &meta, &columns, &rows)?;

    let scored: Vec<&Outcome> = outcomes.iter().filter(|o| o.cd.is_some()).collect();
    let mean = |f: fn(&Outcome) -> Option<f64>| {
        scored.iter().map(|o| f(o).expect("scored rows carry all metrics")).sum::<f64>()
            / scored.len() as f64
    };
    let summary: Vec<CloudMetricsRow> = if scored.is_empty() {
        log::warn!("no prediction had a matching observed shape; summary.csv will hold no rows");
        Vec::new()
    } else {
        vec![CloudMetricsRow {
            dataset: dataset_name(&args.dataset),
            method: "field".to_string(),
            cd: mean(|o| o.cd),
            hd: mean(|o| o.hd),
            emd: mean(|o| o.emd),
        }]
    };
    let summary_path = args.out_dir.join("summary.csv");
    report::write_cloud_metrics_table(&summary_path, &meta, &summary)?;

    println!("{}", predictions_path.display());
    println!("{}", summary_path.display());
    Ok(())
}
