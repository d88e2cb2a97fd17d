//! Probabilistic implicit shape fields with closed-form temporal Fisher
//! information.
//!
//! The crate models a population of deforming 2-D/3-D shapes as a
//! heteroscedastic Gaussian displacement field `f(p, t) -> (mu, Sigma)`
//! over template points `p` and a normalized time coordinate `t`, trained
//! by Gaussian negative log-likelihood on observed displacements. On top of
//! the field it provides:
//!
//! * [`autodiff`] — a scalar reverse-mode tape sufficient to train the MLPs
//!   and to differentiate the field with respect to `t`;
//! * [`network`] — the positional-encoded MLP parameterization shared by the
//!   forward field and the inverse time encoder;
//! * [`field`] — losses, the two-stage training loop, and Gaussian density
//!   evaluation;
//! * [`fisher`] — the temporal score, closed-form Fisher information, its
//!   Monte-Carlo validators, and the Cramér–Rao consistency check;
//! * [`starman`] — bit-exact synthetic generators for a four-limbed star
//!   shape with a global or per-limb time signal;
//! * [`inverse`] — the amortized inverse encoder `g(p, d) -> tau` and
//!   per-point time maps;
//! * [`analysis`] — time estimation, longitudinal prediction, outlier
//!   scoring, and shape/accuracy metrics;
//! * [`io`] — versioned dataset (`.psd`) and checkpoint (`.pck`) formats;
//! * [`report`] — CSV tables and SVG figures summarizing an experiment.

pub mod analysis;
pub mod autodiff;
pub mod field;
pub mod fisher;
pub mod inverse;
pub mod io;
pub mod linalg;
pub mod network;
pub mod report;
pub mod starman;

/// Decorrelated seed for one stream of a fanned-out computation: a
/// splitmix64 scramble of `(seed, stream)`. Used wherever work is split
/// across subjects or Monte-Carlo chunks, so results are reproducible and
/// independent of scheduling or thread count.
pub(crate) fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}
