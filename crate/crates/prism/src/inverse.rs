//! Amortized inverse inference: a scalar net `g(p, d) -> tau` trained to
//! invert the forward field's mean displacement.
//!
//! Training data is synthesized from the frozen forward model itself:
//! template points `p` and intrinsic times `tau` are drawn uniformly, the
//! forward mean `d = mu(p, tau)` is computed, and `g` learns to undo the
//! mapping with an L1 objective `(1/M)·Σ|g(p_j, d_j) − tau_j|`. The
//! displacements are noiseless by design; a separately named sampler adds
//! model-covariance noise for robustness experiments.
//!
//! At inference, [`time_map`] applies `g` to every observed `(p, d)` pair of
//! a shape, yielding a dense per-point intrinsic-time map with both the raw
//! and range-clipped estimate; [`TimeMap::with_confidence`] flags points
//! whose mean-term Fisher information is below the identifiability floor
//! (torso-like regions whose displacement carries no time signal).

use crate::autodiff::{NodeId, Tape};
use crate::field::{forward_field, Adam, DivergenceError, TrainError};
use crate::fisher;
use crate::network::{
    self, encode_inverse_input, Alg, F64Alg, HeadKind, NetArch, NonFiniteError, Params, TapeAlg,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Synthetic training triplets drawn from a frozen forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    /// Template points.
    pub p: Vec<Vec<f64>>,
    /// Sampled intrinsic times.
    pub tau: Vec<f64>,
    /// Forward mean displacements `mu(p, tau)` (noiseless).
    pub d: Vec<Vec<f64>>,
}

impl TripletBatch {
    /// Number of triplets.
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    /// Whether the batch is empty.
    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Draw `n` triplets: `p` uniform over the template vertex set, `tau`
/// uniform over `t_range` (degenerate ranges pin `tau` to the single value),
/// `d = mu(p, tau)` from the frozen forward model, exactly.
pub fn sample_triplets(
    forward: &Params,
    n: usize,
    p_domain: &[Vec<f64>],
    t_range: (f64, f64),
    seed: u64,
) -> Result<TripletBatch, NonFiniteError> {
    sample_triplets_inner(forward, n, p_domain, t_range, seed, false)
}

/// Like [`sample_triplets`], but each displacement gets one draw of the
/// model's own covariance added: `d = mu + L·xi`. This deliberately departs
/// from the noiseless construction and exists only for robustness
/// experiments; nothing in the standard pipeline calls it.
pub fn sample_triplets_with_noise(
    forward: &Params,
    n: usize,
    p_domain: &[Vec<f64>],
    t_range: (f64, f64),
    seed: u64,
) -> Result<TripletBatch, NonFiniteError> {
    sample_triplets_inner(forward, n, p_domain, t_range, seed, true)
}

fn sample_triplets_inner(
    forward: &Params,
    n: usize,
    p_domain: &[Vec<f64>],
    t_range: (f64, f64),
    seed: u64,
    noisy: bool,
) -> Result<TripletBatch, NonFiniteError> {
    assert!(!p_domain.is_empty(), "need a non-empty point domain");
    // Draw the cheap indices/times sequentially from one stream, then
    // evaluate the forward model in parallel: deterministic either way.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = forward.arch.d;
    let draws: Vec<(usize, f64)> = (0..n)
        .map(|_| {
            let idx = rng.random_range(0..p_domain.len());
            let tau = if t_range.0 == t_range.1 {
                t_range.0
            } else {
                rng.random_range(t_range.0..t_range.1)
            };
            (idx, tau)
        })
        .collect();
    let noise: Vec<Vec<f64>> = if noisy {
        draws
            .iter()
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let d: Vec<Vec<f64>> = draws
        .par_iter()
        .enumerate()
        .map(|(k, &(idx, tau))| {
            let eval = forward_field(forward, &p_domain[idx], tau)?;
            let mut d = eval.mu;
            if noisy {
                for i in 0..dim {
                    d[i] += (0..=i).map(|j| eval.l[(i, j)] * noise[k][j]).sum::<f64>();
                }
            }
            Ok(d)
        })
        .collect::<Result<_, NonFiniteError>>()?;
    Ok(TripletBatch {
        p: draws.iter().map(|&(idx, _)| p_domain[idx].clone()).collect(),
        tau: draws.iter().map(|&(_, tau)| tau).collect(),
        d,
    })
}

/// Inverse-encoder training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseTrainConfig {
    /// Architecture of the scalar net (must have a scalar head).
    pub arch: NetArch,
    /// Intrinsic-time range triplets are sampled from (and estimates are
    /// later clipped to).
    pub t_range: (f64, f64),
    /// Fresh triplets streamed per epoch.
    pub triplets_per_epoch: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Training epochs.
    pub epochs: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Master seed: initialization, sampling, and shuffling all derive
    /// from it.
    pub seed: u64,
    /// Optional cap on optimizer steps per epoch.
    pub max_steps_per_epoch: Option<usize>,
}

impl InverseTrainConfig {
    /// Defaults mirroring the forward trunk for dimension `d`.
    pub fn defaults(d: usize) -> Self {
        InverseTrainConfig {
            arch: NetArch::inverse_default(d),
            t_range: (0.0, 1.0),
            triplets_per_epoch: 8192,
            batch_size: 256,
            epochs: 100,
            lr: 1e-3,
            seed: 0,
            max_steps_per_epoch: None,
        }
    }
}

/// One epoch of the inverse training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseEpochLog {
    /// Epoch number, 1-based.
    pub epoch: usize,
    /// Mean L1 loss over the epoch's streamed triplets.
    pub loss: f64,
}

/// Trained inverse encoder plus its training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseTrainResult {
    /// Trained scalar-net weights.
    pub params: Params,
    /// Per-epoch mean L1 loss.
    pub log: Vec<InverseEpochLog>,
}

/// Train the inverse encoder against a frozen forward model by streamed
/// synthetic triplets. Deterministic under `cfg.seed`.
pub fn train_inverse(
    forward: &Params,
    p_domain: &[Vec<f64>],
    cfg: &InverseTrainConfig,
) -> Result<InverseTrainResult, TrainError> {
    if cfg.arch.head != HeadKind::Scalar {
        return Err(TrainError::InvalidInput("inverse training needs a scalar head".into()));
    }
    if cfg.arch.d != forward.arch.d {
        return Err(TrainError::InvalidInput(format!(
            "inverse dimension {} does not match the forward model's {}",
            cfg.arch.d, forward.arch.d
        )));
    }
    if p_domain.is_empty() {
        return Err(TrainError::InvalidInput("no template points".into()));
    }

    let arch = cfg.arch;
    let mut params = Params::init(arch, cfg.seed);
    let n_w = arch.n_weights();
    let mut adam = Adam::new(n_w, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let mut tape = Tape::new();
    let mut grads: Vec<f64> = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let batch_seed = crate::stream_seed(cfg.seed, epoch as u64);
        let triplets =
            sample_triplets(forward, cfg.triplets_per_epoch, p_domain, cfg.t_range, batch_seed)
                .map_err(TrainError::NonFinite)?;
        // Pre-encode once per epoch; the tape sees features as leaves.
        let feats: Vec<Vec<f64>> = triplets
            .p
            .iter()
            .zip(&triplets.d)
            .map(|(p, d)| encode_inverse_input(p, d, arch.num_frequencies))
            .collect();

        let mut perm: Vec<usize> = (0..triplets.len()).collect();
        perm.shuffle(&mut rng);
        let steps = cfg
            .max_steps_per_epoch
            .unwrap_or(usize::MAX)
            .min(perm.len().div_ceil(cfg.batch_size));
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for step in 0..steps {
            let lo = step * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(perm.len());
            if lo >= hi {
                break;
            }
            tape.clear();
            let mut alg = TapeAlg(&mut tape);
            let w_nodes: Vec<NodeId> = params.w.iter().map(|&v| alg.lift(v)).collect();
            let mut terms = Vec::with_capacity(hi - lo);
            for &k in &perm[lo..hi] {
                let f_nodes: Vec<NodeId> = feats[k].iter().map(|&v| alg.lift(v)).collect();
                let tau_hat = network::eval_scalar(&mut alg, &arch, &w_nodes, &f_nodes);
                let target = alg.lift(triplets.tau[k]);
                let r = alg.sub(tau_hat, target);
                // |r| recorded as r·sign(r): exact value and derivative away
                // from zero, subgradient 0 at zero.
                let sign = alg.lift(if alg.value(r) >= 0.0 { 1.0 } else { -1.0 });
                terms.push(alg.mul(r, sign));
            }
            let zero = alg.lift(0.0);
            let ones = vec![alg.lift(1.0); terms.len()];
            let sum = alg.dot_bias(&terms, &ones, zero);
            let scale = alg.lift(1.0 / terms.len() as f64);
            let loss = alg.mul(sum, scale);
            let loss_val = tape.value(loss);
            if !loss_val.is_finite() {
                return Err(DivergenceError { epoch, value: loss_val }.into());
            }
            epoch_loss += loss_val * (hi - lo) as f64;
            epoch_samples += hi - lo;
            tape.backward_into(loss, &mut grads);
            adam.update(&mut params.w, &grads[..n_w]);
        }

        let mean_loss = epoch_loss / epoch_samples as f64;
        if !mean_loss.is_finite() {
            return Err(DivergenceError { epoch, value: mean_loss }.into());
        }
        log.push(InverseEpochLog { epoch, loss: mean_loss });
        log::debug!("inverse epoch {epoch}: l1 {mean_loss:.6}");
    }

    params.validate_finite()?;
    Ok(InverseTrainResult { params, log })
}

/// Apply the inverse encoder to one `(p, d)` pair.
pub fn eval_inverse(params: &Params, p: &[f64], d: &[f64]) -> Result<f64, NonFiniteError> {
    assert_eq!(params.arch.head, HeadKind::Scalar, "needs a scalar-head net");
    let feats = encode_inverse_input(p, d, params.arch.num_frequencies);
    let mut alg = F64Alg;
    let lifted: Vec<f64> = feats;
    let tau = network::eval_scalar(&mut alg, &params.arch, &params.w, &lifted);
    if !tau.is_finite() {
        return Err(NonFiniteError { what: "tau estimate", value: tau });
    }
    Ok(tau)
}

/// Mean absolute error of the encoder on a triplet batch.
pub fn triplet_mae(params: &Params, batch: &TripletBatch) -> Result<f64, NonFiniteError> {
    assert!(!batch.is_empty(), "empty batch");
    let errs: Vec<f64> = batch
        .p
        .par_iter()
        .zip(&batch.d)
        .zip(&batch.tau)
        .map(|((p, d), &tau)| Ok((eval_inverse(params, p, d)? - tau).abs()))
        .collect::<Result<_, NonFiniteError>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// One point of a dense intrinsic-time map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMapEntry {
    /// Index of the point in the queried shape.
    pub index: usize,
    /// Template point.
    pub p: Vec<f64>,
    /// Raw encoder output.
    pub tau_raw: f64,
    /// Encoder output clipped to the map's time range.
    pub tau_clipped: f64,
    /// Mean-term Fisher information at `(p, tau_clipped)`, when computed.
    pub i_mu: Option<f64>,
    /// Whether `i_mu` clears the identifiability floor (`None` until
    /// confidence is computed).
    pub identifiable: Option<bool>,
}

/// Dense per-point intrinsic-time map of one observed shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMap {
    /// One entry per queried point, in input order.
    pub entries: Vec<TimeMapEntry>,
    /// Clipping range of the estimates.
    pub t_range: (f64, f64),
}

/// Estimate `tau` at every observed point of a shape: `tau_p = g(p, d_p)`,
/// no aggregation. Entries preserve input order.
pub fn time_map(
    inverse: &Params,
    shape: &[(&[f64], &[f64])],
    t_range: (f64, f64),
) -> Result<TimeMap, NonFiniteError> {
    let entries: Vec<TimeMapEntry> = shape
        .par_iter()
        .enumerate()
        .map(|(index, &(p, d))| {
            let tau_raw = eval_inverse(inverse, p, d)?;
            Ok(TimeMapEntry {
                index,
                p: p.to_vec(),
                tau_raw,
                tau_clipped: tau_raw.clamp(t_range.0, t_range.1),
                i_mu: None,
                identifiable: None,
            })
        })
        .collect::<Result<_, NonFiniteError>>()?;
    Ok(TimeMap { entries, t_range })
}

impl TimeMap {
    /// Fill the per-point confidence flags from the forward model's
    /// mean-term Fisher information, evaluated at each point's clipped
    /// estimate.
    pub fn with_confidence(mut self, forward: &Params) -> Result<TimeMap, NonFiniteError> {
        let flags: Vec<(f64, bool)> = self
            .entries
            .par_iter()
            .map(|e| {
                let dv = fisher::time_derivs(forward, &e.p, e.tau_clipped)?;
                let parts = fisher::fisher_parts(&dv.mu_t, &dv.sigma(), &dv.sigma_t);
                Ok((parts.i_mu, parts.i_mu >= fisher::I_MU_FLOOR))
            })
            .collect::<Result<_, NonFiniteError>>()?;
        for (e, (i_mu, ok)) in self.entries.iter_mut().zip(flags) {
            e.i_mu = Some(i_mu);
            e.identifiable = Some(ok);
        }
        Ok(self)
    }
}

// ── tests ────────────────────────────────────────────────────────────────
