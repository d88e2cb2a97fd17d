//! Applications of the trained models: whole-shape time estimation,
//! personalized longitudinal prediction, outlier scoring, and the scalar
//! and point-cloud metrics used to evaluate them.
//!
//! Everything here consumes frozen models. Time estimates aggregate a dense
//! per-point [`TimeMap`](crate::inverse::TimeMap) either uniformly or
//! weighted by the mean-term Fisher information (points whose displacement
//! moves fast with time count more). Longitudinal prediction propagates a
//! subject's temporal z-score — how far ahead of or behind the population
//! clock it sits, in units of the population's time spread — from one
//! chronological age to another. The outlier score is the most negative
//! within-shape temporal lag, normalized by the local temporal uncertainty.

use crate::field::{forward_field, ShapeSample};
use crate::fisher;
use crate::inverse::TimeMap;
use crate::network::{NonFiniteError, Params};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An operation got a shape or map with no points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("empty shape: no points to aggregate")]
pub struct EmptyShapeError;

/// Every point of the shape failed the identifiability floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no identifiable points: I_mu below {floor:.0e} everywhere", floor = fisher::I_MU_FLOOR)]
pub struct AllUnidentifiableError;

/// Correlation metrics are undefined on zero-variance inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("degenerate input: {what} has zero variance")]
pub struct DegenerateError {
    /// Which side of the comparison is constant.
    pub what: &'static str,
}

/// Failure modes of the analysis operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    /// No points at all.
    #[error(transparent)]
    Empty(#[from] EmptyShapeError),
    /// No identifiable points.
    #[error(transparent)]
    AllUnidentifiable(#[from] AllUnidentifiableError),
    /// A network evaluation went non-finite.
    #[error(transparent)]
    NonFinite(#[from] NonFiniteError),
    /// Zero-variance input to a correlation metric.
    #[error(transparent)]
    Degenerate(#[from] DegenerateError),
}

// ── whole-shape time estimation ─────────────────────────────────────────────

/// How a whole-shape time estimate aggregated its per-point map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateMethod {
    /// Plain arithmetic mean over points.
    Mean,
    /// Fisher-information-weighted mean (needs the chronological time).
    FisherWeighted,
}

/// A whole-shape intrinsic-time estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEstimate {
    /// The aggregated estimate.
    pub tau_bar: f64,
    /// Aggregation rule that produced it.
    pub method: EstimateMethod,
    /// Points that contributed (identifiable ones, for the weighted rule).
    pub n_points: usize,
    /// Chronological time the weights were evaluated at; always present for
    /// the weighted rule, absent for the plain mean.
    pub t_chron: Option<f64>,
}

/// Arithmetic mean of the clipped per-point estimates.
pub fn estimate_time_mean(map: &TimeMap) -> Result<TimeEstimate, EmptyShapeError> {
    if map.entries.is_empty() {
        return Err(EmptyShapeError);
    }
    let sum: f64 = map.entries.iter().map(|e| e.tau_clipped).sum();
    Ok(TimeEstimate {
        tau_bar: sum / map.entries.len() as f64,
        method: EstimateMethod::Mean,
        n_points: map.entries.len(),
        t_chron: None,
    })
}

/// Weighted mean with explicit weights; `None` when every weight is below
/// the identifiability floor. The scalar core of [`estimate_time_weighted`],
/// exposed so callers can pool arbitrary point subsets (e.g. one labeled
/// region of a shape) under the same floor rule.
pub fn weighted_estimate(taus: &[f64], weights: &[f64]) -> Option<(f64, usize)> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut n = 0usize;
    for (&tau, &w) in taus.iter().zip(weights) {
        if w < fisher::I_MU_FLOOR {
            continue;
        }
        num += w * tau;
        den += w;
        n += 1;
    }
    (n > 0).then(|| (num / den, n))
}

/// Per-point weights for the Fisher-weighted estimate: `I_mu(p, t)` for each
/// map entry, evaluated at the chronological time `t`. Pairs with
/// [`weighted_estimate`] when a caller wants to pool subsets of a shape.
pub fn fisher_point_weights(
    map: &TimeMap,
    forward: &Params,
    t: f64,
) -> Result<Vec<f64>, NonFiniteError> {
    map.entries
        .par_iter()
        .map(|e| {
            let dv = fisher::time_derivs(forward, &e.p, t)?;
            Ok(fisher::fisher_parts(&dv.mu_t, &dv.sigma(), &dv.sigma_t).i_mu)
        })
        .collect()
}

/// Fisher-weighted mean of the clipped per-point estimates: each point is
/// weighted by `I_mu(p, t)` at the *chronological* time `t`, so regions
/// whose displacement is static around `t` barely vote. Points below the
/// identifiability floor are skipped entirely.
pub fn estimate_time_weighted(
    map: &TimeMap,
    forward: &Params,
    t: f64,
) -> Result<TimeEstimate, AnalysisError> {
    if map.entries.is_empty() {
        return Err(EmptyShapeError.into());
    }
    let weights = fisher_point_weights(map, forward, t)?;
    let taus: Vec<f64> = map.entries.iter().map(|e| e.tau_clipped).collect();
    let (tau_bar, n_points) =
        weighted_estimate(&taus, &weights).ok_or(AllUnidentifiableError)?;
    Ok(TimeEstimate {
        tau_bar,
        method: EstimateMethod::FisherWeighted,
        n_points,
        t_chron: Some(t),
    })
}

// ── longitudinal prediction ─────────────────────────────────────────────────

/// Population temporal spread at `t`, aggregated over template points as
/// `sqrt(1 / mean_p I_mu(p, t))` across points above the identifiability
/// floor.
pub fn aggregated_sigma_tau(
    forward: &Params,
    points: &[&[f64]],
    t: f64,
) -> Result<f64, AnalysisError> {
    if points.is_empty() {
        return Err(EmptyShapeError.into());
    }
    let infos: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let dv = fisher::time_derivs(forward, p, t)?;
            Ok(fisher::fisher_parts(&dv.mu_t, &dv.sigma(), &dv.sigma_t).i_mu)
        })
        .collect::<Result<_, NonFiniteError>>()?;
    let kept: Vec<f64> = infos.into_iter().filter(|&i| i >= fisher::I_MU_FLOOR).collect();
    if kept.is_empty() {
        return Err(AllUnidentifiableError.into());
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    Ok((1.0 / mean).sqrt())
}

/// A personalized shape prediction at a new chronological time.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalPrediction {
    /// Predicted point set: `p + mu(p, tau_bar1)` over the input points.
    pub points: Vec<Vec<f64>>,
    /// Whole-shape estimate at the anchor time.
    pub tau_bar0: f64,
    /// Temporal z-score `(tau_bar0 - t0) / sigma_tau(t0)` — carried
    /// unchanged to the target time.
    pub z_tau: f64,
    /// Predicted intrinsic time `t1 + z_tau * sigma_tau(t1)`.
    pub tau_bar1: f64,
    /// Population temporal spread at the anchor time.
    pub sigma_tau0: f64,
    /// Population temporal spread at the target time.
    pub sigma_tau1: f64,
    /// Whether `t1` fell outside the model's training range (the
    /// prediction is still produced, but extrapolated).
    pub extrapolated: bool,
}

/// Core of the longitudinal step, starting from an already-estimated
/// anchor `tau_bar0`: convert it to a temporal z-score at `t0`, carry the
/// z-score to `t1`, and reconstruct the shape from the mean trajectory.
pub fn predict_from_tau0(
    points: &[&[f64]],
    tau_bar0: f64,
    t0: f64,
    t1: f64,
    forward: &Params,
    t_range: (f64, f64),
) -> Result<LongitudinalPrediction, AnalysisError> {
    let sigma_tau0 = aggregated_sigma_tau(forward, points, t0)?;
    let sigma_tau1 = if t1 == t0 {
        sigma_tau0
    } else {
        aggregated_sigma_tau(forward, points, t1)?
    };
    let z_tau = (tau_bar0 - t0) / sigma_tau0;
    let tau_bar1 = t1 + z_tau * sigma_tau1;
    let extrapolated = t1 < t_range.0 || t1 > t_range.1;
    if extrapolated {
        log::warn!("prediction target t = {t1} lies outside the training range {t_range:?}");
    }
    let predicted: Vec<Vec<f64>> = points
        .par_iter()
        .map(|p| {
            let eval = forward_field(forward, p, tau_bar1)?;
            Ok(p.iter().zip(&eval.mu).map(|(x, m)| x + m).collect())
        })
        .collect::<Result<_, NonFiniteError>>()?;
    Ok(LongitudinalPrediction {
        points: predicted,
        tau_bar0,
        z_tau,
        tau_bar1,
        sigma_tau0,
        sigma_tau1,
        extrapolated,
    })
}

/// Predict a subject's shape at `t1` from one observation at `t0`: estimate
/// the anchor intrinsic time with the Fisher-weighted rule, then carry the
/// temporal z-score forward via [`predict_from_tau0`].
pub fn predict_longitudinal(
    shape: &[(&[f64], &[f64])],
    t0: f64,
    t1: f64,
    forward: &Params,
    inverse: &Params,
    t_range: (f64, f64),
) -> Result<LongitudinalPrediction, AnalysisError> {
    if shape.is_empty() {
        return Err(EmptyShapeError.into());
    }
    let map = crate::inverse::time_map(inverse, shape, t_range)?;
    let est = estimate_time_weighted(&map, forward, t0)?;
    let points: Vec<&[f64]> = shape.iter().map(|&(p, _)| p).collect();
    predict_from_tau0(&points, est.tau_bar, t0, t1, forward, t_range)
}

// ── outlier scoring ─────────────────────────────────────────────────────────

/// Caller-assigned group label on an outlier score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OodLabel {
    /// Drawn from the normal population.
    Normal,
    /// Known or suspected anomaly.
    Anomalous,
}

/// The most negative normalized temporal lag within one shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    /// `min_p (tau_p - tau_max) / sigma(p, t)`; 0 exactly when the map is
    /// constant over identifiable points, negative otherwise.
    pub score: f64,
    /// Map index of the most lagging point.
    pub argmin_point: usize,
    /// Largest estimate over identifiable points.
    pub tau_max: f64,
    /// Optional caller-assigned ground-truth label.
    pub label: Option<OodLabel>,
}

/// Score one shape for internal temporal inconsistency: how many local
/// uncertainty units the most lagging region sits behind the most advanced
/// one. Raw (unclipped) estimates are used on purpose — a limb lagging
/// right out of the training range is the strongest possible anomaly
/// signal, and clipping would erase it. Points below the identifiability
/// floor are skipped; scoring fails only if nothing remains.
pub fn ood_score(map: &TimeMap, forward: &Params, t: f64) -> Result<OodResult, AnalysisError> {
    if map.entries.is_empty() {
        return Err(EmptyShapeError.into());
    }
    let sigmas: Vec<Option<f64>> = map
        .entries
        .par_iter()
        .map(|e| {
            let dv = fisher::time_derivs(forward, &e.p, t)?;
            let i_mu = fisher::fisher_parts(&dv.mu_t, &dv.sigma(), &dv.sigma_t).i_mu;
            Ok((i_mu >= fisher::I_MU_FLOOR).then(|| (1.0 / i_mu).sqrt()))
        })
        .collect::<Result<_, NonFiniteError>>()?;
    let tau_max = map
        .entries
        .iter()
        .zip(&sigmas)
        .filter_map(|(e, s)| s.map(|_| e.tau_raw))
        .fold(f64::NEG_INFINITY, f64::max);
    if tau_max == f64::NEG_INFINITY {
        return Err(AllUnidentifiableError.into());
    }
    let mut best: Option<(f64, usize)> = None;
    for (e, s) in map.entries.iter().zip(&sigmas) {
        let Some(sigma) = s else { continue };
        let lag = (e.tau_raw - tau_max) / sigma;
        if best.map_or(true, |(b, _)| lag < b) {
            best = Some((lag, e.index));
        }
    }
    let (score, argmin_point) = best.expect("at least one identifiable point");
    Ok(OodResult { score, argmin_point, tau_max, label: None })
}

/// Probability that a random `anomalous` score ranks below a random
/// `normal` score (ties count half) — the area under the ROC curve of
/// "more negative means more anomalous". Rank-based, tie-corrected.
pub fn auc(anomalous: &[f64], normal: &[f64]) -> f64 {
    assert!(!anomalous.is_empty() && !normal.is_empty(), "both groups must be non-empty");
    let mut all: Vec<(f64, bool)> = anomalous
        .iter()
        .map(|&s| (s, true))
        .chain(normal.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be comparable"));
    // Average ranks across ties, then Mann-Whitney.
    let mut rank_sum_anom = 0.0;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        rank_sum_anom += all[i..j].iter().filter(|e| e.1).count() as f64 * avg_rank;
        i = j;
    }
    let n_a = anomalous.len() as f64;
    let n_n = normal.len() as f64;
    // Pairs where the anomalous score is higher (ties half-counted):
    let u_greater = rank_sum_anom - n_a * (n_a + 1.0) / 2.0;
    1.0 - u_greater / (n_a * n_n)
}

// ── scalar metrics ──────────────────────────────────────────────────────────

/// Agreement metrics between predicted and true scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    /// Pearson correlation.
    pub r: f64,
    /// Coefficient of determination `1 - SS_res / SS_tot`.
    pub r2: f64,
    /// Mean absolute error.
    pub mae: f64,
}

/// Pearson r, R², and MAE of `pred` against `truth`.
pub fn scalar_metrics(pred: &[f64], truth: &[f64]) -> Result<ScalarMetrics, DegenerateError> {
    assert_eq!(pred.len(), truth.len(), "paired inputs must have equal length");
    assert!(!pred.is_empty(), "need at least one pair");
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let mut spt = 0.0;
    let mut spp = 0.0;
    let mut stt = 0.0;
    let mut ss_res = 0.0;
    let mut abs = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        spt += (p - mp) * (t - mt);
        spp += (p - mp) * (p - mp);
        stt += (t - mt) * (t - mt);
        ss_res += (p - t) * (p - t);
        abs += (p - t).abs();
    }
    if stt == 0.0 {
        return Err(DegenerateError { what: "truth" });
    }
    if spp == 0.0 {
        return Err(DegenerateError { what: "prediction" });
    }
    Ok(ScalarMetrics {
        r: spt / (spp.sqrt() * stt.sqrt()),
        r2: 1.0 - ss_res / stt,
        mae: abs / n,
    })
}

// ── point-cloud metrics ─────────────────────────────────────────────────────

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nearest(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    from.iter()
        .map(|x| to.iter().map(|y| euclid(x, y)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Symmetric mean nearest-neighbor distance: the average of the two
/// directed mean distances. A rigid unit shift of identical clouds gives 1.
pub fn chamfer(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "clouds must be non-empty");
    let ab = nearest(a, b);
    let ba = nearest(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(&ab) + mean(&ba))
}

/// Largest nearest-neighbor distance in either direction.
pub fn hausdorff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "clouds must be non-empty");
    let worst = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    worst(nearest(a, b)).max(worst(nearest(b, a)))
}

/// Exact minimum-cost perfect matching on a square cost matrix — the
/// Hungarian algorithm with row/column potentials, O(n³). Returns the
/// per-row assigned column and the total cost.
pub(crate) fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    // 1-based arrays; p[j] is the row matched to column j (0 = none),
    // way[j] the previous column on the alternating path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Unwind the alternating path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[i][assign[i]]).sum();
    (assign, total)
}

/// Cap on the exact-assignment size for [`emd`]; larger clouds are
/// subsampled (seeded, independently per cloud) before matching.
pub const EMD_MAX_POINTS: usize = 512;

/// Earth mover's distance between equal-mass point clouds: the mean matched
/// distance of an exact minimum-cost assignment. Clouds larger than
/// [`EMD_MAX_POINTS`] are subsampled without replacement first, making the
/// result a seeded estimate; at or below the cap it is exact.
pub fn emd(a: &[Vec<f64>], b: &[Vec<f64>], seed: u64) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "clouds must be non-empty");
    let m = a.len().min(b.len()).min(EMD_MAX_POINTS);
    let pick = |cloud: &[Vec<f64>], stream: u64| -> Vec<Vec<f64>> {
        if cloud.len() == m {
            return cloud.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::stream_seed(seed, stream));
        rand::seq::index::sample(&mut rng, cloud.len(), m)
            .into_iter()
            .map(|i| cloud[i].clone())
            .collect()
    };
    let sa = pick(a, 0);
    let sb = pick(b, 1);
    let cost: Vec<Vec<f64>> = sa
        .iter()
        .map(|x| sb.iter().map(|y| euclid(x, y)).collect())
        .collect();
    let (_, total) = hungarian(&cost);
    total / m as f64
}

// ── grouping observations ───────────────────────────────────────────────────

/// One observed shape: all samples sharing a subject and chronological time.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGroup<'a> {
    /// Owning subject.
    pub subject_id: u64,
    /// Chronological time of the observation.
    pub t: f64,
    /// The observation's per-point samples, in input order.
    pub samples: Vec<&'a ShapeSample>,
}

impl<'a> ObservationGroup<'a> {
    /// Borrow the `(p, d)` pairs in map-building form.
    pub fn shape(&self) -> Vec<(&'a [f64], &'a [f64])> {
        self.samples.iter().map(|s| (s.p.as_slice(), s.d.as_slice())).collect()
    }

    /// Mean ground-truth intrinsic time over samples carrying one.
    pub fn mean_tau_gt(&self) -> Option<f64> {
        let taus: Vec<f64> = self.samples.iter().filter_map(|s| s.tau_gt).collect();
        (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64)
    }
}

/// Group flat samples into observations keyed by `(subject_id, t)`,
/// preserving first-seen order.
pub fn group_observations(samples: &[ShapeSample]) -> Vec<ObservationGroup<'_>> {
    let mut order: Vec<ObservationGroup> = Vec::new();
    let mut index: std::collections::HashMap<(u64, u64), usize> = std::collections::HashMap::new();
    for s in samples {
        let key = (s.subject_id, s.t.to_bits());
        match index.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => {
                order[*e.get()].samples.push(s);
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(order.len());
                order.push(ObservationGroup { subject_id: s.subject_id, t: s.t, samples: vec![s] });
            }
        }
    }
    order
}

// ── tests ────────────────────────────────────────────────────────────────
