//! The heteroscedastic Gaussian displacement field and its training loop.
//!
//! A field net maps an encoded `(p, t)` to a displacement mean `mu` and a
//! lower-triangular factor `L` with `Sigma = L L'`; the factor diagonal is
//! `softplus(raw) + EPS_DIAG`, so `Sigma` is positive definite by
//! construction. Training minimizes, over mini-batches,
//!
//! ```text
//! NLL = 1/(2M) Σ [ (d-mu)' Sigma^-1 (d-mu) + log det Sigma ]
//! L1  = 1/(M·D) Σ |d - mu|
//! ```
//!
//! with a two-stage curriculum: epochs `1..=t_warm` fit the mean only (L1,
//! covariance-head gradients masked), later epochs minimize
//! `lambda_l1 * L1 + lambda_nll * NLL` on the same batches. The optimizer is
//! adaptive moment estimation with bias correction.

use crate::autodiff::{NodeId, Tape};
use crate::linalg::Mat;
use crate::network::{
    self, encode_input, eval_field, Alg, F64Alg, HeadKind, NetArch, NonFiniteError, Params,
    TapeAlg, EPS_DIAG,
};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One observed template point: where it sits on the template (`p`), when it
/// was observed (`t`), and how far it moved (`d`). Synthetic generators also
/// record the latent time `tau_gt` and a limb label (an index into the
/// generator's control points; `None` marks torso points below the labeling
/// threshold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    /// Subject the observation belongs to.
    pub subject_id: u64,
    /// Chronological time of the observation, normalized to the train range.
    pub t: f64,
    /// Template point.
    pub p: Vec<f64>,
    /// Observed displacement of `p` at time `t`.
    pub d: Vec<f64>,
    /// Ground-truth intrinsic time (synthetic data only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau_gt: Option<f64>,
    /// Limb label: index of the generator control point whose region the
    /// template point belongs to.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub limb: Option<u8>,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Warm-up epochs (stage 1: L1 only, covariance head frozen).
    pub t_warm: usize,
    /// Stage-2 weight of the L1 term.
    pub lambda_l1: f64,
    /// Stage-2 weight of the NLL term.
    pub lambda_nll: f64,
    /// Learning rate.
    pub lr: f64,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Total epochs (stage 1 + stage 2).
    pub epochs: usize,
    /// Seed for initialization and batch sampling.
    pub seed: u64,
    /// Optional cap on optimizer steps per epoch; `None` runs a full
    /// permutation pass. A capped epoch still samples uniformly across
    /// subjects and template points (the permutation is seeded).
    pub max_steps_per_epoch: Option<usize>,
    /// Global L2 gradient-norm ceiling; `None` disables clipping.
    ///
    /// The likelihood objective is stiff once the learned scales tighten: a
    /// batch with an unlucky tail sample produces mean-head gradients
    /// proportional to the residual over the squared scale, which can throw
    /// the mean off and force a slow recover-and-retighten cycle. Clipping
    /// the whole gradient vector (a single scale factor, so the direction is
    /// preserved and determinism is untouched) caps those excursions.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_warm: 10,
            lambda_l1: 1.0,
            lambda_nll: 1.0,
            lr: 1e-3,
            batch_size: 256,
            epochs: 200,
            seed: 0,
            max_steps_per_epoch: None,
            grad_clip: Some(10.0),
        }
    }
}

/// Per-epoch monitoring record (losses evaluated on a fixed held-in subset).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Curriculum stage: 1 = warm-up (L1 only), 2 = joint.
    pub stage: u8,
    /// Mean absolute residual.
    pub l1: f64,
    /// Gaussian negative log-likelihood (without the 2π constant).
    pub nll: f64,
    /// Stage-weighted total.
    pub total: f64,
}

/// The loss went non-finite during training.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("training diverged at epoch {epoch}: loss = {value}")]
pub struct DivergenceError {
    /// Epoch (1-based) at which the non-finite loss appeared.
    pub epoch: usize,
    /// The non-finite loss value.
    pub value: f64,
}

/// Training failure.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrainError {
    /// Non-finite loss.
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    /// Non-finite weights or outputs.
    #[error(transparent)]
    NonFinite(#[from] NonFiniteError),
    /// The dataset cannot train this architecture.
    #[error("invalid training input: {0}")]
    InvalidInput(String),
}

/// Field evaluation at one `(p, t)`: mean displacement and the Cholesky
/// factor of the displacement covariance.
#[derive(Debug, Clone)]
pub struct FieldEval {
    /// Mean displacement (length D).
    pub mu: Vec<f64>,
    /// Lower-triangular factor with positive diagonal; `Sigma = L L'`.
    pub l: Mat,
}

impl FieldEval {
    /// Displacement covariance `L L'`.
    pub fn sigma(&self) -> Mat {
        self.l.ll_t()
    }
}

// ── generic loss kernels ───────────────────────────────────────────────────

/// Lower-triangular factor from raw head outputs: softplus + floor on the
/// diagonal, raw off-diagonals. Returned flat in row-major lower-triangular
/// order (row `i` starts at `i(i+1)/2`).
pub(crate) fn assemble_l<A: Alg>(alg: &mut A, l_raw: &[A::R], d: usize) -> Vec<A::R> {
    let mut out = Vec::with_capacity(l_raw.len());
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            let v = l_raw[idx];
            if i == j {
                let s = network::softplus(alg, v);
                let eps = alg.lift(EPS_DIAG);
                out.push(alg.add(s, eps));
            } else {
                out.push(v);
            }
            idx += 1;
        }
    }
    out
}

/// `(d-mu)' Sigma^-1 (d-mu) + log det Sigma` for one sample, via one
/// triangular solve against the factor (`Sigma = L L'` implies
/// `maha = |L^-1 r|^2` and `log det Sigma = 2 Σ log L_ii`).
pub(crate) fn nll_half_term<A: Alg>(alg: &mut A, r: &[A::R], l: &[A::R], d: usize) -> A::R {
    let mut y: Vec<A::R> = Vec::with_capacity(d);
    for i in 0..d {
        let mut s = r[i];
        for j in 0..i {
            let lij = l[i * (i + 1) / 2 + j];
            let t = alg.mul(lij, y[j]);
            s = alg.sub(s, t);
        }
        let lii = l[i * (i + 1) / 2 + i];
        y.push(alg.div_pos(s, lii));
    }
    let zero = alg.lift(0.0);
    let maha = alg.dot_bias(&y, &y, zero);
    let mut logdet = {
        let l00 = l[0];
        alg.log_pos(l00)
    };
    for i in 1..d {
        let lii = l[i * (i + 1) / 2 + i];
        let li = alg.log_pos(lii);
        logdet = alg.add(logdet, li);
    }
    let two = alg.lift(2.0);
    let logdet = alg.mul(two, logdet);
    alg.add(maha, logdet)
}

/// `Σ_i |r_i|`, recorded as `r_i * sign(r_i)` with the sign captured as a
/// constant — exact value and the subgradient 0 at `r_i = 0` (the op set has
/// no `abs`).
pub(crate) fn l1_term<A: Alg>(alg: &mut A, r: &[A::R]) -> A::R {
    let mut acc: Option<A::R> = None;
    for &ri in r {
        let sign = match alg.value(ri) {
            v if v > 0.0 => 1.0,
            v if v < 0.0 => -1.0,
            _ => 0.0,
        };
        let s = alg.lift(sign);
        let a = alg.mul(ri, s);
        acc = Some(match acc {
            None => a,
            Some(prev) => alg.add(prev, a),
        });
    }
    acc.expect("l1_term on empty residual")
}

/// Mini-batch losses `(L1, NLL)` over pre-encoded samples, written once for
/// both carriers. `batch` holds `(features, displacement)` pairs; passing
/// `with_nll = false` skips the covariance path entirely (warm-up).
fn losses_generic<A: Alg>(
    alg: &mut A,
    arch: &NetArch,
    w: &[A::R],
    batch: &[(Vec<f64>, &[f64])],
    with_nll: bool,
) -> (A::R, Option<A::R>) {
    assert!(!batch.is_empty(), "empty batch");
    let d = arch.d;
    let m = batch.len();
    let mut l1_acc: Option<A::R> = None;
    let mut nll_acc: Option<A::R> = None;
    for (feats, disp) in batch {
        let feats_r: Vec<A::R> = feats.iter().map(|&f| alg.lift(f)).collect();
        let raw = eval_field(alg, arch, w, &feats_r);
        let r: Vec<A::R> = (0..d)
            .map(|i| {
                let di = alg.lift(disp[i]);
                alg.sub(di, raw.mu[i])
            })
            .collect();
        let l1 = l1_term(alg, &r);
        l1_acc = Some(match l1_acc {
            None => l1,
            Some(prev) => alg.add(prev, l1),
        });
        if with_nll {
            let l = assemble_l(alg, &raw.l_raw, d);
            let term = nll_half_term(alg, &r, &l, d);
            nll_acc = Some(match nll_acc {
                None => term,
                Some(prev) => alg.add(prev, term),
            });
        }
    }
    let l1_scale = alg.lift(1.0 / (m * d) as f64);
    let l1 = alg.mul(l1_acc.expect("batch not empty"), l1_scale);
    let nll = nll_acc.map(|acc| {
        let s = alg.lift(1.0 / (2 * m) as f64);
        alg.mul(acc, s)
    });
    (l1, nll)
}

fn encode_batch<'a>(arch: &NetArch, samples: &[&'a ShapeSample]) -> Vec<(Vec<f64>, &'a [f64])> {
    samples
        .iter()
        .map(|s| (encode_input(&s.p, s.t, arch.num_frequencies), s.d.as_slice()))
        .collect()
}

/// Mini-batch `(L1, NLL)` on plain `f64` — the monitoring/evaluation path.
/// Bit-identical to the tape path used for gradients.
pub fn batch_losses(params: &Params, samples: &[&ShapeSample]) -> (f64, f64) {
    let packed = encode_batch(&params.arch, samples);
    let (l1, nll) = losses_generic(&mut F64Alg, &params.arch, &params.w, &packed, true);
    (l1, nll.expect("nll requested"))
}

/// Mini-batch NLL and its gradient with respect to every weight, through the
/// same recorded computation the optimizer steps on. Returns
/// `(nll, d nll / d w)` with the gradient in weight order. Exposed so custom
/// training loops and gradient checks can reach the training objective
/// without re-deriving it.
pub fn nll_weight_gradients(params: &Params, samples: &[&ShapeSample]) -> (f64, Vec<f64>) {
    let packed = encode_batch(&params.arch, samples);
    let mut tape = Tape::new();
    let mut alg = TapeAlg(&mut tape);
    let w_nodes: Vec<NodeId> = params.w.iter().map(|&v| alg.lift(v)).collect();
    let (_, nll_node) = losses_generic(&mut alg, &params.arch, &w_nodes, &packed, true);
    let root = nll_node.expect("nll requested");
    let adjoints = tape.backward(root);
    let grads = w_nodes.iter().map(|n| adjoints[n.index()]).collect();
    (tape.value(root), grads)
}

// ── field evaluation ───────────────────────────────────────────────────────

/// Evaluate the field at `(p, t)`: displacement mean and covariance factor.
///
/// The factor diagonal is `softplus(raw) + EPS_DIAG`, so `Sigma` is positive
/// definite for any weights. Non-finite outputs are rejected.
pub fn forward_field(params: &Params, p: &[f64], t: f64) -> Result<FieldEval, NonFiniteError> {
    assert_eq!(params.arch.head, HeadKind::Field, "forward_field needs a field net");
    assert_eq!(p.len(), params.arch.d, "point dimension mismatch");
    let feats = encode_input(p, t, params.arch.num_frequencies);
    let raw = eval_field(&mut F64Alg, &params.arch, &params.w, &feats);
    let l_flat = assemble_l(&mut F64Alg, &raw.l_raw, params.arch.d);
    for &v in raw.mu.iter().chain(&l_flat) {
        if !v.is_finite() {
            return Err(NonFiniteError { what: "field output", value: v });
        }
    }
    let d = params.arch.d;
    let mut l = Mat::zeros(d);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            l[(i, j)] = l_flat[idx];
            idx += 1;
        }
    }
    Ok(FieldEval { mu: raw.mu, l })
}

/// Gaussian log-density of a displacement under a field evaluation,
/// constant included:
/// `-1/2 [ (d-mu)' Sigma^-1 (d-mu) + log det Sigma + D log 2π ]`.
pub fn log_density_eval(eval: &FieldEval, d: &[f64]) -> f64 {
    let dim = eval.mu.len();
    assert_eq!(d.len(), dim);
    let r: Vec<f64> = d.iter().zip(&eval.mu).map(|(a, b)| a - b).collect();
    let y = eval.l.solve_lower(&r);
    let maha: f64 = y.iter().map(|v| v * v).sum();
    let logdet = eval.l.logdet_from_chol();
    -0.5 * (maha + logdet + dim as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Gaussian log-density of displacement `d` at `(p, t)` under the field.
pub fn log_density(params: &Params, p: &[f64], t: f64, d: &[f64]) -> Result<f64, NonFiniteError> {
    Ok(log_density_eval(&forward_field(params, p, t)?, d))
}

// ── optimizer ──────────────────────────────────────────────────────────────

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub(crate) fn update(&mut self, w: &mut [f64], g: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

// ── training ───────────────────────────────────────────────────────────────

/// A trained field plus its per-epoch monitoring log.
#[derive(Debug, Clone)]
pub struct TrainResult {
    /// The trained parameters.
    pub params: Params,
    /// One record per epoch.
    pub log: Vec<EpochLog>,
}

/// Scale `g` so its L2 norm is at most `max_norm`; returns the pre-clip
/// norm. A single multiplicative factor, so the gradient direction is
/// exactly preserved.
pub(crate) fn clip_global_norm(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    norm
}

/// Train a field net on displacement samples with the two-stage curriculum.
///
/// Deterministic: initialization, batch permutations, and every arithmetic
/// step derive from `cfg.seed`, so identical inputs produce bit-identical
/// weights.
pub fn train(samples: &[ShapeSample], arch: NetArch, cfg: &TrainConfig) -> Result<TrainResult, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidInput("no samples".into()));
    }
    if arch.head != HeadKind::Field {
        return Err(TrainError::InvalidInput("train needs a field architecture".into()));
    }
    for s in samples {
        if s.p.len() != arch.d || s.d.len() != arch.d {
            return Err(TrainError::InvalidInput(format!(
                "sample dimension {} does not match architecture D = {}",
                s.p.len(),
                arch.d
            )));
        }
    }

    let mut params = Params::init(arch, cfg.seed);
    let n_w = arch.n_weights();
    let chol_span = arch.chol_head_span();
    let mut adam = Adam::new(n_w, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    // Fixed monitoring subset: losses are logged on the same samples every
    // epoch so the curve is comparable across epochs.
    let mut mon_idx: Vec<usize> = (0..samples.len()).collect();
    mon_idx.shuffle(&mut rng);
    mon_idx.truncate(4096.min(samples.len()));
    let monitor: Vec<&ShapeSample> = mon_idx.iter().map(|&i| &samples[i]).collect();

    let mut perm: Vec<usize> = (0..samples.len()).collect();
    let mut tape = Tape::new();
    let mut grads: Vec<f64> = Vec::new();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let stage: u8 = if epoch <= cfg.t_warm { 1 } else { 2 };
        perm.shuffle(&mut rng);
        let steps = cfg
            .max_steps_per_epoch
            .unwrap_or(usize::MAX)
            .min(perm.len().div_ceil(cfg.batch_size));
        for step in 0..steps {
            let lo = step * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(perm.len());
            if lo >= hi {
                break;
            }
            let batch: Vec<&ShapeSample> = perm[lo..hi].iter().map(|&i| &samples[i]).collect();
            let packed = encode_batch(&arch, &batch);

            tape.clear();
            let mut alg = TapeAlg(&mut tape);
            let w_nodes: Vec<NodeId> = params.w.iter().map(|&v| alg.lift(v)).collect();
            let (l1, nll) = losses_generic(&mut alg, &arch, &w_nodes, &packed, stage == 2);
            let total = match (stage, nll) {
                (1, _) => l1,
                (_, Some(nll)) => {
                    let a = alg.lift(cfg.lambda_l1);
                    let b = alg.lift(cfg.lambda_nll);
                    let wl1 = alg.mul(a, l1);
                    let wnll = alg.mul(b, nll);
                    alg.add(wl1, wnll)
                }
                _ => unreachable!("stage 2 always computes the NLL"),
            };
            let loss_val = tape.value(total);
            if !loss_val.is_finite() {
                return Err(DivergenceError { epoch, value: loss_val }.into());
            }
            tape.backward_into(total, &mut grads);
            // Warm-up keeps the covariance head frozen; the mask keeps the
            // optimizer path identical across stages.
            if stage == 1 {
                grads[chol_span.clone()].iter_mut().for_each(|g| *g = 0.0);
            }
            if let Some(clip) = cfg.grad_clip {
                clip_global_norm(&mut grads[..n_w], clip);
            }
            adam.update(&mut params.w, &grads[..n_w]);
        }

        let (l1_mon, nll_mon) = batch_losses(&params, &monitor);
        let total_mon = if stage == 1 {
            l1_mon
        } else {
            cfg.lambda_l1 * l1_mon + cfg.lambda_nll * nll_mon
        };
        if !total_mon.is_finite() {
            return Err(DivergenceError { epoch, value: total_mon }.into());
        }
        log.push(EpochLog { epoch, stage, l1: l1_mon, nll: nll_mon, total: total_mon });
        log::debug!(
            "epoch {epoch} stage {stage}: l1 {l1_mon:.6} nll {nll_mon:.6} total {total_mon:.6}"
        );
    }

    params.validate_finite()?;
    Ok(TrainResult { params, log })
}

/// NLL (same form as the training objective, no 2π constant) of the best
/// *constant* Gaussian — mean and covariance fitted by moments over all
/// samples. A trained heteroscedastic field should beat this.
pub fn constant_gaussian_nll(samples: &[ShapeSample]) -> f64 {
    assert!(!samples.is_empty());
    let d = samples[0].d.len();
    let m = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s.d[i];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut cov = Mat::zeros(d);
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (s.d[i] - mean[i]) * (s.d[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            cov[(i, j)] /= m;
        }
        cov[(i, i)] += EPS_DIAG * EPS_DIAG;
    }
    let l = cov.cholesky().expect("moment covariance is SPD");
    let logdet = l.logdet_from_chol();
    let mut acc = 0.0;
    for s in samples {
        let r: Vec<f64> = (0..d).map(|i| s.d[i] - mean[i]).collect();
        let y = l.solve_lower(&r);
        acc += y.iter().map(|v| v * v).sum::<f64>() + logdet;
    }
    acc / (2.0 * m)
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    #[test]
    fn nll_term_matches_hand_value() {
        // r = (1,1), Sigma = diag(1,4) => L = diag(1,2);
        // (r' S^-1 r + log det S)/2 = (1.25 + ln 4)/2.
        let l = vec![1.0, 0.0, 2.0];
        let term = nll_half_term(&mut F64Alg, &[1.0, 1.0], &l, 2);
        assert_close(term / 2.0, 1.3181471805599454, 1e-15, "hand NLL");
    }

    #[test]
    fn l1_term_matches_hand_value() {
        // d - mu = (3, -4): mean over coordinates is 3.5.
        let term = l1_term(&mut F64Alg, &[3.0, -4.0]);
        assert_close(term / 2.0, 3.5, 1e-15, "hand L1");
        // Exactly zero residual contributes value 0 (and gradient 0).
        let z = l1_term(&mut F64Alg, &[0.0, 0.0]);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn log_density_at_mode_is_normalization_constant() {
        let eval = FieldEval { mu: vec![0.3, -0.2], l: Mat::eye(2) };
        let lp = log_density_eval(&eval, &[0.3, -0.2]);
        assert_close(lp, -1.8378770664093453, 1e-15, "-log 2π at the mode");
        // One sigma out drops the density by exactly 1/2 in the exponent.
        let lp1 = log_density_eval(&eval, &[1.3, -0.2]);
        assert_close(lp - lp1, 0.5, 1e-12, "quadratic falloff");
    }

    #[test]
    fn density_integrates_to_one_by_monte_carlo() {
        use rand::Rng;
        let sigma = Mat::from_rows(2, vec![1.0, 0.3, 0.3, 0.8]);
        let eval = FieldEval { mu: vec![0.4, -0.1], l: sigma.cholesky().unwrap() };
        // Uniform box ±6σ_i around the mean: mean of exp(logp) times the box
        // area estimates the total mass.
        let (s0, s1) = (1.0f64.sqrt(), 0.8f64.sqrt());
        let (w0, w1) = (12.0 * s0, 12.0 * s1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = eval.mu[0] - 6.0 * s0 + rng.random::<f64>() * w0;
            let y = eval.mu[1] - 6.0 * s1 + rng.random::<f64>() * w1;
            acc += log_density_eval(&eval, &[x, y]).exp();
        }
        let mass = acc / n as f64 * (w0 * w1);
        assert!((mass - 1.0).abs() <= 0.01, "MC mass {mass} should be 1 ± 0.01");
    }

    #[test]
    fn untrained_field_has_softplus_zero_diagonal() {
        let arch = NetArch { d: 2, hidden_layers: 2, hidden_width: 16, num_frequencies: 2, head: HeadKind::Field };
        let params = Params::init(arch, 3);
        let eval = forward_field(&params, &[0.2, 0.4], 0.5).unwrap();
        // Covariance head starts at zero: diag = softplus(0) + 1e-4 ≈ 0.6932.
        let want = (2.0f64).ln() + EPS_DIAG;
        assert_close(eval.l[(0, 0)], want, 1e-12, "fresh diag 0");
        assert_close(eval.l[(1, 1)], want, 1e-12, "fresh diag 1");
        assert_eq!(eval.l[(1, 0)], 0.0, "fresh off-diagonal");
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<ShapeSample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let p: Vec<f64> = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let t: f64 = rng.random_range(0.0..1.0);
                // Smooth deterministic displacement plus a t-scaled wiggle.
                let d = vec![
                    0.3 * t * (p[0]).sin() + 0.05 * (3.0 * p[1]).sin(),
                    -0.2 * t + 0.1 * p[0] * p[1],
                ];
                ShapeSample { subject_id: i as u64, t, p, d, tau_gt: Some(t), limb: None }
            })
            .collect()
    }

    fn tiny_arch() -> NetArch {
        NetArch { d: 2, hidden_layers: 2, hidden_width: 16, num_frequencies: 2, head: HeadKind::Field }
    }

    #[test]
    fn tape_and_plain_losses_agree_bitwise() {
        let samples = toy_samples(32, 11);
        let refs: Vec<&ShapeSample> = samples.iter().collect();
        let arch = tiny_arch();
        let params = Params::init(arch, 7);
        let (l1_plain, nll_plain) = batch_losses(&params, &refs);

        let packed = encode_batch(&arch, &refs);
        let mut tape = Tape::new();
        let mut alg = TapeAlg(&mut tape);
        let w_nodes: Vec<NodeId> = params.w.iter().map(|&v| alg.lift(v)).collect();
        let (l1_node, nll_node) = losses_generic(&mut alg, &arch, &w_nodes, &packed, true);
        assert_eq!(tape.value(l1_node).to_bits(), l1_plain.to_bits(), "L1 parity");
        assert_eq!(tape.value(nll_node.unwrap()).to_bits(), nll_plain.to_bits(), "NLL parity");
    }

    #[test]
    fn nll_weight_gradients_match_finite_differences() {
        use rand::Rng;
        let samples = toy_samples(8, 21);
        let refs: Vec<&ShapeSample> = samples.iter().collect();
        let arch = tiny_arch();
        let params = Params::init(arch, 13);
        let packed = encode_batch(&arch, &refs);

        let mut tape = Tape::new();
        let mut alg = TapeAlg(&mut tape);
        let w_nodes: Vec<NodeId> = params.w.iter().map(|&v| alg.lift(v)).collect();
        let (_, nll_node) = losses_generic(&mut alg, &arch, &w_nodes, &packed, true);
        let grads = tape.backward(nll_node.unwrap());

        // Central differences through the independent plain-f64 path.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..params.w.len());
            let mut wp = params.clone();
            wp.w[i] += h;
            let (_, fp) = batch_losses(&wp, &refs);
            wp.w[i] = params.w[i] - h;
            let (_, fm) = batch_losses(&wp, &refs);
            let fd = (fp - fm) / (2.0 * h);
            let ad = grads[w_nodes[i].index()];
            let denom = fd.abs().max(ad.abs()).max(1e-3);
            assert!(
                (ad - fd).abs() / denom <= 1e-4,
                "weight {i}: tape {ad} vs FD {fd}"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(64, 5);
        let cfg = TrainConfig { epochs: 4, t_warm: 2, batch_size: 16, ..Default::default() };
        let a = train(&samples, tiny_arch(), &cfg).unwrap();
        let b = train(&samples, tiny_arch(), &cfg).unwrap();
        assert_eq!(a.params.w, b.params.w, "same seed must give identical weights");
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn gradient_clipping_rescales_exactly_and_leaves_small_gradients_alone() {
        let mut g = vec![3.0, 4.0]; // norm 5
        let pre = clip_global_norm(&mut g, 10.0);
        assert_eq!(pre, 5.0);
        assert_eq!(g, vec![3.0, 4.0], "below the ceiling nothing changes");
        let pre = clip_global_norm(&mut g, 2.5);
        assert_eq!(pre, 5.0);
        assert_eq!(g, vec![1.5, 2.0], "uniform rescale to the ceiling");
        // Direction preserved: components keep their ratio and signs.
        let mut h = vec![-30.0, 40.0];
        clip_global_norm(&mut h, 5.0);
        assert_eq!(h, vec![-3.0, 4.0]);
    }

    #[test]
    fn clipping_changes_steps_only_when_the_ceiling_binds() {
        let samples = toy_samples(64, 9);
        let unclipped = TrainConfig {
            epochs: 3,
            t_warm: 1,
            batch_size: 16,
            grad_clip: None,
            ..Default::default()
        };
        let loose = TrainConfig { grad_clip: Some(1e12), ..unclipped.clone() };
        let a = train(&samples, tiny_arch(), &unclipped).unwrap();
        let b = train(&samples, tiny_arch(), &loose).unwrap();
        assert_eq!(a.params.w, b.params.w, "a never-binding ceiling is a no-op");
    }

    #[test]
    fn warmup_leaves_covariance_head_at_initialization() {
        let samples = toy_samples(64, 6);
        let arch = tiny_arch();
        let cfg = TrainConfig { epochs: 3, t_warm: 3, batch_size: 16, ..Default::default() };
        let init = Params::init(arch, cfg.seed);
        let out = train(&samples, arch, &cfg).unwrap();
        let span = arch.chol_head_span();
        assert_eq!(
            &out.params.w[span.clone()],
            &init.w[span],
            "stage 1 must not move the covariance head"
        );
        assert!(out.log.iter().all(|e| e.stage == 1));
    }

    #[test]
    fn stage_two_moves_covariance_head_and_beats_baseline() {
        let samples = toy_samples(512, 8);
        let arch = tiny_arch();
        let cfg = TrainConfig { epochs: 30, t_warm: 5, batch_size: 64, ..Default::default() };
        let out = train(&samples, arch, &cfg).unwrap();
        let span = arch.chol_head_span();
        let init = Params::init(arch, cfg.seed);
        assert_ne!(&out.params.w[span.clone()], &init.w[span], "stage 2 trains the head");
        let baseline = constant_gaussian_nll(&samples);
        let last = out.log.last().unwrap();
        assert!(
            last.nll < baseline,
            "trained NLL {} should beat the constant-Gaussian baseline {}",
            last.nll,
            baseline
        );
        let first = &out.log[0];
        assert!(last.l1 < first.l1, "L1 should improve over training");
    }

    #[test]
    fn non_finite_data_reports_divergence_with_epoch() {
        let mut samples = toy_samples(32, 9);
        samples[0].d[0] = f64::MAX;
        let cfg = TrainConfig { epochs: 2, t_warm: 0, batch_size: 32, ..Default::default() };
        match train(&samples, tiny_arch(), &cfg) {
            Err(TrainError::Divergence(e)) => assert_eq!(e.epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut w = vec![0.0f64];
        let mut adam = Adam::new(1, 0.05);
        for _ in 0..2000 {
            let g = vec![2.0 * (w[0] - 3.0)];
            adam.update(&mut w, &g);
        }
        assert_close(w[0], 3.0, 1e-3, "Adam fixed point");
    }
}
