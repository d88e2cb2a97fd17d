//! Positional-encoded MLPs shared by the forward displacement field and the
//! inverse time encoder.
//!
//! Evaluation is written once, generically over an [`Alg`] carrier, and
//! instantiated for plain `f64` (fast inference) and for [`Tape`] nodes
//! (training and time-derivatives). Both instantiations execute the exact
//! same op sequence, so their outputs agree bit-for-bit — including the
//! cosine features, which are computed as `sin(x + π/2)` in both paths
//! because the tape's op set has `sin` but not `cos`.

use crate::autodiff::{NodeId, Tape};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Floor added to the covariance factor's diagonal after softplus.
pub const EPS_DIAG: f64 = 1e-4;

/// A forward pass produced a non-finite output.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("non-finite network output: {what} = {value}")]
pub struct NonFiniteError {
    /// Which output went non-finite.
    pub what: &'static str,
    /// The offending value.
    pub value: f64,
}

/// What the final layer produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Displacement mean (D values) plus a Cholesky factor (D(D+1)/2 raw
    /// values) of the displacement covariance.
    Field,
    /// A single scalar (the inverse encoder's time estimate).
    Scalar,
}

/// Architecture descriptor: spatial dimension, trunk shape, and encoding
/// frequencies. Weight vectors are validated against this everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetArch {
    /// Spatial dimension D of points and displacements (2 or 3).
    pub d: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    /// Units per hidden layer.
    pub hidden_width: usize,
    /// Number of octave frequencies in the positional encoding.
    pub num_frequencies: usize,
    /// Output head.
    pub head: HeadKind,
}

impl NetArch {
    /// Default forward-field architecture for dimension `d`:
    /// 4 hidden layers × 128 tanh units, 4 encoding frequencies.
    pub fn field_default(d: usize) -> Self {
        NetArch { d, hidden_layers: 4, hidden_width: 128, num_frequencies: 4, head: HeadKind::Field }
    }

    /// Default inverse-encoder architecture, mirroring the forward trunk.
    pub fn inverse_default(d: usize) -> Self {
        NetArch { d, hidden_layers: 4, hidden_width: 128, num_frequencies: 4, head: HeadKind::Scalar }
    }

    /// Length of the encoded input feature vector.
    ///
    /// The field head encodes the D+1 components of (p, t); the scalar head
    /// encodes the D components of p and appends the D raw displacement
    /// coordinates.
    pub fn input_dim(&self) -> usize {
        let enc = |c: usize| c * (1 + 2 * self.num_frequencies);
        match self.head {
            HeadKind::Field => enc(self.d + 1),
            HeadKind::Scalar => enc(self.d) + self.d,
        }
    }

    /// Number of outputs of the head layer(s).
    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Field => self.d + self.d * (self.d + 1) / 2,
            HeadKind::Scalar => 1,
        }
    }

    /// Rows of the covariance factor head (0 for scalar nets).
    pub fn chol_rows(&self) -> usize {
        match self.head {
            HeadKind::Field => self.d * (self.d + 1) / 2,
            HeadKind::Scalar => 0,
        }
    }

    /// Bounds that keep every derived size computable without overflow and
    /// keep untrusted headers from requesting absurd allocations. Checked
    /// when a checkpoint is read back.
    pub fn validate(&self) -> Result<(), String> {
        if self.d < 1 || self.d > 16 {
            return Err(format!("dimension {} is outside 1..=16", self.d));
        }
        if self.hidden_layers < 1 || self.hidden_layers > 64 {
            return Err(format!("hidden_layers {} is outside 1..=64", self.hidden_layers));
        }
        if self.hidden_width < 1 || self.hidden_width > 8192 {
            return Err(format!("hidden_width {} is outside 1..=8192", self.hidden_width));
        }
        if self.num_frequencies > 64 {
            return Err(format!("num_frequencies {} is over 64", self.num_frequencies));
        }
        Ok(())
    }

    /// Total weight count (matrices + biases, trunk + heads).
    pub fn n_weights(&self) -> usize {
        let (h, l) = (self.hidden_width, self.hidden_layers);
        let trunk = h * (self.input_dim() + 1) + (l - 1) * h * (h + 1);
        let heads = match self.head {
            HeadKind::Field => {
                let m = self.chol_rows();
                self.d * (h + 1) + m * (h + 1)
            }
            HeadKind::Scalar => h + 1,
        };
        trunk + heads
    }

    /// Index range of the covariance-factor head inside the flat weight
    /// vector (empty for scalar nets). Used for warm-up gradient masking.
    pub fn chol_head_span(&self) -> std::ops::Range<usize> {
        let n = self.n_weights();
        let m = self.chol_rows();
        n - m * (self.hidden_width + 1)..n
    }
}

/// Architecture plus a flat weight vector.
///
/// Weight layout, in order: trunk layer 0 (row-major W, then b), trunk
/// layers 1..L-1, then the mean head (W, b) and covariance head (W, b) for
/// field nets, or the single scalar head for inverse nets.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Architecture the weights belong to.
    pub arch: NetArch,
    /// Flat weight vector of length `arch.n_weights()`.
    pub w: Vec<f64>,
}

impl Params {
    /// Seeded initialization: every layer draws uniformly from
    /// `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` (biases included), except the
    /// covariance head, which starts at exactly zero so an untrained field
    /// begins near `softplus(0) ≈ 0.6931` on the factor diagonal.
    pub fn init(arch: NetArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Vec::with_capacity(arch.n_weights());
        let layer = |w: &mut Vec<f64>, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (cols as f64).sqrt();
            for _ in 0..rows * (cols + 1) {
                w.push(rng.random_range(-bound..=bound));
            }
        };
        let (h, l) = (arch.hidden_width, arch.hidden_layers);
        layer(&mut w, h, arch.input_dim(), &mut rng);
        for _ in 1..l {
            layer(&mut w, h, h, &mut rng);
        }
        match arch.head {
            HeadKind::Field => {
                layer(&mut w, arch.d, h, &mut rng);
                w.extend(std::iter::repeat(0.0).take(arch.chol_rows() * (h + 1)));
            }
            HeadKind::Scalar => layer(&mut w, 1, h, &mut rng),
        }
        debug_assert_eq!(w.len(), arch.n_weights());
        Params { arch, w }
    }

    /// Error if any weight is non-finite.
    pub fn validate_finite(&self) -> Result<(), NonFiniteError> {
        for &v in &self.w {
            if !v.is_finite() {
                return Err(NonFiniteError { what: "weight", value: v });
            }
        }
        Ok(())
    }
}

// ── generic evaluation ─────────────────────────────────────────────────────

/// Carrier for network arithmetic: either plain `f64` or tape nodes.
/// `log_pos` requires a positive argument (all call sites guarantee it).
pub(crate) trait Alg {
    type R: Copy;
    fn lift(&mut self, c: f64) -> Self::R;
    fn add(&mut self, a: Self::R, b: Self::R) -> Self::R;
    fn sub(&mut self, a: Self::R, b: Self::R) -> Self::R;
    fn mul(&mut self, a: Self::R, b: Self::R) -> Self::R;
    fn neg(&mut self, a: Self::R) -> Self::R;
    /// `a / b` with `b` guaranteed nonzero by the caller.
    fn div_pos(&mut self, a: Self::R, b: Self::R) -> Self::R;
    fn exp(&mut self, a: Self::R) -> Self::R;
    fn log_pos(&mut self, a: Self::R) -> Self::R;
    fn tanh(&mut self, a: Self::R) -> Self::R;
    fn sin(&mut self, a: Self::R) -> Self::R;
    /// Fused `dot(w, x) + b`, accumulated in index order.
    fn dot_bias(&mut self, w: &[Self::R], x: &[Self::R], b: Self::R) -> Self::R;
    fn value(&self, a: Self::R) -> f64;
}

/// Plain-f64 arithmetic.
pub(crate) struct F64Alg;

impl Alg for F64Alg {
    type R = f64;
    #[inline]
    fn lift(&mut self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    #[inline]
    fn div_pos(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline]
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    #[inline]
    fn log_pos(&mut self, a: f64) -> f64 {
        a.ln()
    }
    #[inline]
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    #[inline]
    fn sin(&mut self, a: f64) -> f64 {
        a.sin()
    }
    #[inline]
    fn dot_bias(&mut self, w: &[f64], x: &[f64], b: f64) -> f64 {
        let mut acc = 0.0;
        for (wi, xi) in w.iter().zip(x) {
            acc += wi * xi;
        }
        acc + b
    }
    #[inline]
    fn value(&self, a: f64) -> f64 {
        a
    }
}

/// Tape-recording arithmetic.
pub(crate) struct TapeAlg<'a>(pub &'a mut Tape);

impl Alg for TapeAlg<'_> {
    type R = NodeId;
    #[inline]
    fn lift(&mut self, c: f64) -> NodeId {
        self.0.leaf(c)
    }
    #[inline]
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.0.add(a, b)
    }
    #[inline]
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.0.sub(a, b)
    }
    #[inline]
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.0.mul(a, b)
    }
    #[inline]
    fn neg(&mut self, a: NodeId) -> NodeId {
        self.0.neg(a)
    }
    #[inline]
    fn div_pos(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.0.div(a, b).expect("divisor nonzero by construction")
    }
    #[inline]
    fn exp(&mut self, a: NodeId) -> NodeId {
        self.0.exp(a)
    }
    #[inline]
    fn log_pos(&mut self, a: NodeId) -> NodeId {
        self.0.log(a).expect("log argument positive by construction")
    }
    #[inline]
    fn tanh(&mut self, a: NodeId) -> NodeId {
        self.0.tanh(a)
    }
    #[inline]
    fn sin(&mut self, a: NodeId) -> NodeId {
        self.0.sin(a)
    }
    #[inline]
    fn dot_bias(&mut self, w: &[NodeId], x: &[NodeId], b: NodeId) -> NodeId {
        let d = self.0.dot(w, x);
        self.0.add(d, b)
    }
    #[inline]
    fn value(&self, a: NodeId) -> f64 {
        self.0.value(a)
    }
}

/// Positional encoding of `comps`: the raw components followed, per
/// component, by `sin(2^k x), cos(2^k x)` for `k = 0..num_frequencies`.
pub(crate) fn encode<A: Alg>(alg: &mut A, comps: &[A::R], num_frequencies: usize) -> Vec<A::R> {
    let mut out = Vec::with_capacity(comps.len() * (1 + 2 * num_frequencies));
    out.extend_from_slice(comps);
    for &c in comps {
        for k in 0..num_frequencies {
            let scale = alg.lift((1u64 << k) as f64);
            let arg = alg.mul(scale, c);
            out.push(alg.sin(arg));
            // cos(x) = sin(x + π/2): keeps both carriers on the same op set.
            let half_pi = alg.lift(FRAC_PI_2);
            let shifted = alg.add(arg, half_pi);
            out.push(alg.sin(shifted));
        }
    }
    out
}

/// Numerically guarded softplus built from primitive ops:
/// `x + log(1 + exp(-x))` for positive `x`, `log(1 + exp(x))` otherwise.
/// The branch is chosen on the recorded value, and both branches agree at 0.
pub(crate) fn softplus<A: Alg>(alg: &mut A, x: A::R) -> A::R {
    let one = alg.lift(1.0);
    if alg.value(x) > 0.0 {
        let nx = alg.neg(x);
        let e = alg.exp(nx);
        let s = alg.add(one, e);
        let l = alg.log_pos(s);
        alg.add(x, l)
    } else {
        let e = alg.exp(x);
        let s = alg.add(one, e);
        alg.log_pos(s)
    }
}

/// Raw head outputs of a field net: the displacement mean and the raw
/// (pre-softplus) covariance-factor entries in row-major lower-triangular
/// order `(0,0), (1,0), (1,1), (2,0), …`.
pub(crate) struct FieldRaw<R> {
    pub mu: Vec<R>,
    pub l_raw: Vec<R>,
}

/// Run the trunk: `features -> hidden activations`.
fn trunk<A: Alg>(alg: &mut A, arch: &NetArch, w: &[A::R], features: &[A::R]) -> (Vec<A::R>, usize) {
    assert_eq!(
        w.len(),
        arch.n_weights(),
        "weight vector length {} does not match architecture ({} expected)",
        w.len(),
        arch.n_weights()
    );
    assert_eq!(features.len(), arch.input_dim(), "encoded input length mismatch");
    let h = arch.hidden_width;
    let mut offset = 0;
    let mut act: Vec<A::R> = Vec::with_capacity(h);
    let mut cur: &[A::R] = features;
    let mut buf: Vec<A::R>;
    for layer in 0..arch.hidden_layers {
        let cols = if layer == 0 { arch.input_dim() } else { h };
        buf = Vec::with_capacity(h);
        for r in 0..h {
            let row = &w[offset + r * cols..offset + (r + 1) * cols];
            let b = w[offset + h * cols + r];
            let z = alg.dot_bias(row, cur, b);
            buf.push(alg.tanh(z));
        }
        offset += h * (cols + 1);
        act = buf;
        cur = &act;
    }
    (act, offset)
}

/// Evaluate a field net on already-encoded features.
pub(crate) fn eval_field<A: Alg>(alg: &mut A, arch: &NetArch, w: &[A::R], features: &[A::R]) -> FieldRaw<A::R> {
    assert_eq!(arch.head, HeadKind::Field);
    let (hid, mut offset) = trunk(alg, arch, w, features);
    let h = arch.hidden_width;
    let head = |alg: &mut A, rows: usize, offset: &mut usize| -> Vec<A::R> {
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &w[*offset + r * h..*offset + (r + 1) * h];
            let b = w[*offset + rows * h + r];
            out.push(alg.dot_bias(row, &hid, b));
        }
        *offset += rows * (h + 1);
        out
    };
    let mu = head(alg, arch.d, &mut offset);
    let l_raw = head(alg, arch.chol_rows(), &mut offset);
    debug_assert_eq!(offset, arch.n_weights());
    FieldRaw { mu, l_raw }
}

/// Evaluate a scalar (inverse-encoder) net on already-encoded features.
pub(crate) fn eval_scalar<A: Alg>(alg: &mut A, arch: &NetArch, w: &[A::R], features: &[A::R]) -> A::R {
    assert_eq!(arch.head, HeadKind::Scalar);
    let (hid, offset) = trunk(alg, arch, w, features);
    let h = arch.hidden_width;
    let b = w[offset + h];
    alg.dot_bias(&w[offset..offset + h], &hid, b)
}

/// Positional encoding of a space-time input, `f64` convenience:
/// raw `(p, t)` followed by the octave sin/cos features of each component.
pub fn encode_input(p: &[f64], t: f64, num_frequencies: usize) -> Vec<f64> {
    let mut comps = p.to_vec();
    comps.push(t);
    encode(&mut F64Alg, &comps, num_frequencies)
}

/// Encoded input for the inverse encoder: encoded `p` followed by raw `d`.
pub fn encode_inverse_input(p: &[f64], d: &[f64], num_frequencies: usize) -> Vec<f64> {
    let mut feats = encode(&mut F64Alg, p, num_frequencies);
    feats.extend_from_slice(d);
    feats
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoded_length_matches_formula() {
        // D = 2, 4 frequencies: (2+1) * (1 + 2*4) = 27.
        let f = encode_input(&[0.3, -0.7], 0.5, 4);
        assert_eq!(f.len(), 27);
        assert_eq!(f[0], 0.3);
        assert_eq!(f[1], -0.7);
        assert_eq!(f[2], 0.5);
        // First sin feature of p[0] at k=0.
        assert_eq!(f[3], (0.3f64).sin());
    }

    #[test]
    fn cos_features_use_the_sin_composition() {
        let f = encode_input(&[], 1.1, 1);
        // layout: [t, sin(t), sin(t + π/2)]
        assert_eq!(f[2], (1.1 + FRAC_PI_2).sin());
    }

    #[test]
    fn weight_count_matches_hand_tally() {
        let arch = NetArch { d: 2, hidden_layers: 2, hidden_width: 8, num_frequencies: 1, head: HeadKind::Field };
        // input_dim = 3*3 = 9; trunk = 8*10 + 8*9 = 152; heads = 2*9 + 3*9 = 45.
        assert_eq!(arch.input_dim(), 9);
        assert_eq!(arch.n_weights(), 8 * 10 + 8 * 9 + 2 * 9 + 3 * 9);
    }

    #[test]
    fn init_is_seeded_bounded_and_zeroes_covariance_head() {
        let arch = NetArch { d: 2, hidden_layers: 2, hidden_width: 16, num_frequencies: 2, head: HeadKind::Field };
        let a = Params::init(arch, 9);
        let b = Params::init(arch, 9);
        assert_eq!(a.w, b.w, "same seed, same weights");
        let c = Params::init(arch, 10);
        assert_ne!(a.w, c.w, "different seed, different weights");
        let span = arch.chol_head_span();
        assert!(a.w[span.clone()].iter().all(|&v| v == 0.0), "cov head starts at zero");
        // Trunk layer 0 bound: 1/sqrt(input_dim).
        let bound = 1.0 / (arch.input_dim() as f64).sqrt();
        assert!(a.w[..16 * arch.input_dim()].iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn tape_and_f64_paths_agree_bitwise() {
        let arch = NetArch { d: 2, hidden_layers: 3, hidden_width: 10, num_frequencies: 3, head: HeadKind::Field };
        let params = Params::init(arch, 123);
        let p = [0.4, -1.2];
        let t = 0.37;

        // Plain path.
        let feats = encode_input(&p, t, arch.num_frequencies);
        let plain = eval_field(&mut F64Alg, &arch, &params.w, &feats);

        // Tape path: weights and raw components as leaves, encoding on-tape.
        let mut tape = crate::autodiff::Tape::new();
        let mut alg = TapeAlg(&mut tape);
        let wn: Vec<_> = params.w.iter().map(|&v| alg.lift(v)).collect();
        let comps: Vec<_> = [p[0], p[1], t].iter().map(|&v| alg.lift(v)).collect();
        let enc = encode(&mut alg, &comps, arch.num_frequencies);
        let taped = eval_field(&mut alg, &arch, &wn, &enc);

        for (a, b) in plain.mu.iter().zip(&taped.mu) {
            assert_eq!(a.to_bits(), tape.value(*b).to_bits(), "mu parity");
        }
        for (a, b) in plain.l_raw.iter().zip(&taped.l_raw) {
            assert_eq!(a.to_bits(), tape.value(*b).to_bits(), "l_raw parity");
        }
    }

    #[test]
    fn softplus_matches_reference_values() {
        let v0 = softplus(&mut F64Alg, 0.0);
        assert!((v0 - (2.0f64).ln()).abs() < 1e-15, "softplus(0) = ln 2");
        let v = softplus(&mut F64Alg, 30.0);
        assert!((v - 30.0).abs() < 1e-12, "softplus(x) → x for large x");
        let n = softplus(&mut F64Alg, -30.0);
        assert!(n > 0.0 && n < 1e-12, "softplus stays positive");
    }

    #[test]
    fn scalar_head_evaluates() {
        let arch = NetArch { d: 2, hidden_layers: 2, hidden_width: 6, num_frequencies: 2, head: HeadKind::Scalar };
        let params = Params::init(arch, 5);
        let feats = encode_inverse_input(&[0.1, 0.2], &[0.01, -0.02], 2);
        assert_eq!(feats.len(), arch.input_dim());
        let out = eval_scalar(&mut F64Alg, &arch, &params.w, &feats);
        assert!(out.is_finite());
    }

    #[test]
    #[should_panic(expected = "weight vector length")]
    fn wrong_weight_count_is_rejected() {
        let arch = NetArch { d: 2, hidden_layers: 2, hidden_width: 6, num_frequencies: 2, head: HeadKind::Scalar };
        let feats = encode_inverse_input(&[0.1, 0.2], &[0.0, 0.0], 2);
        let w = vec![0.0; arch.n_weights() - 1];
        let _ = eval_scalar(&mut F64Alg, &arch, &w, &feats);
    }
}
