//! Shared plumbing for the subcommands: exit-code-aware errors, key=value
//! config files with flag precedence, artifact loading with content hashes,
//! and the per-observation estimation pipeline reused by several commands.

use prism::analysis::{
    estimate_time_mean, fisher_point_weights, group_observations, weighted_estimate,
    ObservationGroup,
};
use prism::field::ShapeSample;
use prism::inverse::time_map;
use prism::io::{self, Checkpoint, Dataset, Provenance};
use prism::network::Params;
use prism::starman::{limb_group, LimbGroup};
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Command failure, tagged with the process exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation: unknown config keys, unparseable values, flag
    /// combinations that cannot be acted on. Exit code 1.
    Usage(String),
    /// The requested validation ran and failed its tolerance. Exit code 2.
    Validation(String),
    /// Everything else: I/O failures, corrupt files, diverged training.
    /// Exit code 3.
    Runtime(anyhow::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> Self {
        CliError::Runtime(anyhow::Error::new(e))
    }
}

impl From<prism::network::NonFiniteError> for CliError {
    fn from(e: prism::network::NonFiniteError) -> Self {
        CliError::Runtime(anyhow::Error::new(e))
    }
}

/// `key=value` configuration file. One pair per line; `#` starts a comment;
/// blank lines are skipped. Explicit command-line flags always take
/// precedence over file values, and every key must be consumed by the
/// command — leftovers are reported as usage errors so typos cannot pass
/// silently.
pub struct ConfigMap {
    values: HashMap<String, String>,
    source: PathBuf,
}

impl ConfigMap {
    /// Read a config file; `None` yields an empty map.
    pub fn load(path: Option<&Path>) -> Result<ConfigMap, CliError> {
        let Some(path) = path else {
            return Ok(ConfigMap { values: HashMap::new(), source: PathBuf::new() });
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Runtime(anyhow::anyhow!("cannot read config {}: {e}", path.display()))
        })?;
        let mut values = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    idx + 1
                )));
            };
            if values.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!(
                    "{}:{}: duplicate key {:?}",
                    path.display(),
                    idx + 1,
                    k.trim()
                )));
            }
        }
        Ok(ConfigMap { values, source: path.to_path_buf() })
    }

    /// Consume `key`, parsing it as `T`. Unparseable values are usage
    /// errors; an absent key is `None`.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| {
                CliError::Usage(format!(
                    "{}: key {key:?}: cannot parse {v:?}: {e}",
                    self.source.display()
                ))
            }),
        }
    }

    /// Fail on any key the command did not consume.
    pub fn finish(self) -> Result<(), CliError> {
        if self.values.is_empty() {
            return Ok(());
        }
        let mut keys: Vec<&String> = self.values.keys().collect();
        keys.sort();
        let list = keys.iter().map(|k| format!("{k:?}")).collect::<Vec<_>>().join(", ");
        Err(CliError::Usage(format!(
            "{}: unknown config keys: {list}",
            self.source.display()
        )))
    }
}

/// A dataset together with the hash of the file it came from.
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub sha256: String,
}

/// Read and validate a dataset, hashing the raw file for provenance lines.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, CliError> {
    let dataset = io::read_dataset(path).map_err(|e| {
        CliError::Runtime(anyhow::anyhow!("reading dataset {}: {e}", path.display()))
    })?;
    let sha256 = io::file_sha256(path)?;
    log::info!(
        "dataset {}: {} samples, D = {}, sha256 {}",
        path.display(),
        dataset.samples.len(),
        dataset.header.d,
        &sha256[..12]
    );
    Ok(LoadedDataset { dataset, sha256 })
}

/// A checkpoint together with the hash of the file it came from.
pub struct LoadedCheckpoint {
    pub ckpt: Checkpoint,
    pub sha256: String,
}

/// Read and validate a checkpoint, hashing the raw file for provenance.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let ckpt = io::load_checkpoint(path).map_err(|e| {
        CliError::Runtime(anyhow::anyhow!("reading checkpoint {}: {e}", path.display()))
    })?;
    let sha256 = io::file_sha256(path)?;
    log::info!(
        "checkpoint {}: {:?} head, {} weights, sha256 {}",
        path.display(),
        ckpt.params.arch.head,
        ckpt.params.w.len(),
        &sha256[..12]
    );
    Ok(LoadedCheckpoint { ckpt, sha256 })
}

/// Distinct template points of a dataset, in first-seen order (deduped by
/// exact bit pattern, so regenerated files give identical domains).
pub fn distinct_points(samples: &[ShapeSample]) -> Vec<Vec<f64>> {
    let mut seen: HashMap<Vec<u64>, ()> = HashMap::new();
    let mut out = Vec::new();
    for s in samples {
        let key: Vec<u64> = s.p.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key, ()).is_none() {
            out.push(s.p.clone());
        }
    }
    out
}

/// The time range a model was trained over, recovered from the dataset:
/// synthetic headers carry it explicitly, external data falls back to the
/// observed span.
pub fn dataset_t_range(ds: &Dataset) -> (f64, f64) {
    match &ds.header.provenance {
        Provenance::Starman { config, .. } => config.t_range,
        Provenance::External { .. } => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in &ds.samples {
                lo = lo.min(s.t);
                hi = hi.max(s.t);
            }
            if lo.is_finite() && hi.is_finite() {
                (lo, hi)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

/// Human name for a limb label (synthetic data labels points by the
/// generator control they belong to; controls pair up into limb groups).
pub fn limb_group_name(label: u8) -> &'static str {
    match limb_group(label) {
        LimbGroup::Arm => "arm",
        LimbGroup::Leg => "leg",
    }
}

/// Parse a limb-group name from the command line.
pub fn parse_limb_group(name: &str) -> Result<LimbGroup, CliError> {
    match name {
        "arm" => Ok(LimbGroup::Arm),
        "leg" => Ok(LimbGroup::Leg),
        other => Err(CliError::Usage(format!("unknown limb group {other:?}, expected arm|leg"))),
    }
}

/// Pooled estimate over one labeled region of an observation.
pub struct RegionEstimate {
    /// Region name ("arm" / "leg" for synthetic labels).
    pub name: &'static str,
    pub n_points: usize,
    /// Mean ground-truth intrinsic time over the region's points.
    pub tau_gt: Option<f64>,
    /// Unweighted mean of the region's clipped per-point estimates.
    pub tau_mean: f64,
    /// Information-weighted estimate over the region; `None` when every
    /// point in it sits below the identifiability floor.
    pub tau_weighted: Option<f64>,
}

/// Per-observation intrinsic-time estimates.
pub struct ObsEstimate {
    pub subject_id: u64,
    pub t: f64,
    pub n_points: usize,
    pub n_identifiable: usize,
    /// Mean ground-truth intrinsic time over the observation's points, when
    /// the dataset carries it.
    pub tau_gt: Option<f64>,
    /// Unweighted mean of clipped per-point estimates.
    pub tau_mean: f64,
    /// Information-weighted estimate; `None` when every point is below the
    /// identifiability floor.
    pub tau_weighted: Option<f64>,
    /// Per-region estimates, present when the dataset labels its points.
    /// Regions appear in a fixed order (arm before leg).
    pub regions: Vec<RegionEstimate>,
}

/// Estimate intrinsic time for every observation in the dataset: dense
/// per-point inverse-encoder maps, then unweighted and information-weighted
/// pooling over the whole shape and over each labeled region. Parallel
/// across observations, deterministic order.
pub fn estimate_observations(
    field: &Params,
    inverse: &Params,
    groups: &[ObservationGroup<'_>],
    t_range: (f64, f64),
) -> Result<Vec<ObsEstimate>, CliError> {
    let results: Result<Vec<ObsEstimate>, String> = groups
        .par_iter()
        .map(|g| {
            let ctx = |e: &dyn fmt::Display| format!("subject {} at t = {}: {e}", g.subject_id, g.t);
            let shape = g.shape();
            let map = time_map(inverse, &shape, t_range)
                .and_then(|m| m.with_confidence(field))
                .map_err(|e| ctx(&e))?;
            let mean = estimate_time_mean(&map).map_err(|e| ctx(&e))?;
            let weights = fisher_point_weights(&map, field, g.t).map_err(|e| ctx(&e))?;
            let taus: Vec<f64> = map.entries.iter().map(|e| e.tau_clipped).collect();
            let weighted = weighted_estimate(&taus, &weights).map(|(tau, _)| tau);
            let n_identifiable =
                map.entries.iter().filter(|e| e.identifiable == Some(true)).count();

            // Pool each labeled region separately, reusing the same map and
            // weights. Map entries are in sample order, so index i of the
            // map corresponds to g.samples[i].
            let mut regions = Vec::new();
            for name in ["arm", "leg"] {
                let idx: Vec<usize> = g
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.limb.map(limb_group_name) == Some(name))
                    .map(|(i, _)| i)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let sub_taus: Vec<f64> = idx.iter().map(|&i| taus[i]).collect();
                let sub_weights: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
                let gts: Vec<f64> =
                    idx.iter().filter_map(|&i| g.samples[i].tau_gt).collect();
                regions.push(RegionEstimate {
                    name,
                    n_points: idx.len(),
                    tau_gt: (!gts.is_empty())
                        .then(|| gts.iter().sum::<f64>() / gts.len() as f64),
                    tau_mean: sub_taus.iter().sum::<f64>() / sub_taus.len() as f64,
                    tau_weighted: weighted_estimate(&sub_taus, &sub_weights)
                        .map(|(tau, _)| tau),
                });
            }

            Ok(ObsEstimate {
                subject_id: g.subject_id,
                t: g.t,
                n_points: map.entries.len(),
                n_identifiable,
                tau_gt: g.mean_tau_gt(),
                tau_mean: mean.tau_bar,
                tau_weighted: weighted,
                regions,
            })
        })
        .collect();
    results.map_err(|m| CliError::Runtime(anyhow::anyhow!(m)))
}

/// Group a dataset into per-(subject, visit) observations.
pub fn observations(samples: &[ShapeSample]) -> Vec<ObservationGroup<'_>> {
    group_observations(samples)
}
