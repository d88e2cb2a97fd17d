//! Bit-exact synthetic generators for a four-limbed star shape.
//!
//! The canonical template is a star-shaped closed polygon
//! `r(θ) = 1 + 0.35·cos(4(θ − π/4))` sampled at `n_vertices` uniformly
//! spaced parameter values, with four control points at the bump tips:
//! two "arms" (upper half, deformation direction (0, 1)) and two "legs"
//! (lower half, direction (1, 0)). Both limbs of a pair share a direction;
//! opposed directions would cancel exactly on the symmetry axis between
//! them and leave zero-signal vertices inside a labeled region.
//!
//! A subject carries one latent z ~ N(0,1) shared by all limbs and
//! observations; at chronological time `t`, limb `i` has intrinsic time
//! `τ_i = t + z·σ_i(t)` with a logistic variability schedule
//! `σ(t) = σ_min + (σ_max − σ_min) / (1 + exp(−(t − t50)/k))`. The observed
//! displacement of template point `p` is the RBF blend
//! `d(p) = Σ_i τ_i · exp(−‖p − c_i‖² / (2σ_rbf²)) · v_i`.
//!
//! The *global* variant gives every limb the same schedule (so every limb
//! shares one τ); the *local* variant lets arms disperse early and legs
//! late. All randomness is drawn from per-subject streams derived from
//! `(seed, subject_id)`, so generation is reproducible per subject and
//! parallelizable without changing output.

use crate::field::ShapeSample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Base radius of the template polygon.
const BASE_RADIUS: f64 = 1.0;
/// Bump amplitude of the template polygon.
const BUMP_AMPLITUDE: f64 = 0.35;
/// Number of bumps (= number of control points).
const N_BUMPS: usize = 4;
/// RBF weight below which a vertex belongs to no limb (torso).
const TORSO_THRESHOLD: f64 = 1e-3;

/// Logistic schedule of the intrinsic-time variability σ_τ(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaTauParams {
    /// Early-time variability floor.
    pub sigma_min: f64,
    /// Late-time variability plateau.
    pub sigma_max: f64,
    /// Midpoint of the logistic transition.
    pub t50: f64,
    /// Transition width.
    pub k: f64,
}

/// `σ_min + (σ_max − σ_min) / (1 + exp(−(t − t50)/k))`; strictly increasing
/// in `t` and bounded by `(σ_min, σ_max)`.
pub fn sigma_tau(t: f64, p: &SigmaTauParams) -> f64 {
    p.sigma_min + (p.sigma_max - p.sigma_min) / (1.0 + (-(t - p.t50) / p.k).exp())
}

/// Which generator family a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// One shared τ: every limb follows the same schedule.
    Global,
    /// Per-limb τ: arms disperse early, legs late.
    Local,
}

/// Which half of the template a control point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimbGroup {
    /// Upper control points (vertical deformation).
    Arm,
    /// Lower control points (horizontal deformation).
    Leg,
}

/// Control index → limb group: arms are 0 and 1, legs are 2 and 3.
pub fn limb_group(control: u8) -> LimbGroup {
    if control < 2 {
        LimbGroup::Arm
    } else {
        LimbGroup::Leg
    }
}

/// Generator configuration; fully determines the dataset given a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarmanConfig {
    /// Generator family.
    pub variant: Variant,
    /// Training-split subjects (ids `0..n_train_subjects`).
    pub n_train_subjects: usize,
    /// Test-split subjects (ids continuing after the training split).
    pub n_test_subjects: usize,
    /// Template polygon resolution.
    pub n_vertices: usize,
    /// RBF bandwidth of the limb deformations.
    pub rbf_sigma: f64,
    /// Variability schedule of the arm limbs.
    pub arm: SigmaTauParams,
    /// Variability schedule of the leg limbs.
    pub leg: SigmaTauParams,
    /// Minimum observations per subject.
    pub min_obs: usize,
    /// Maximum observations per subject.
    pub max_obs: usize,
    /// Chronological time range observations are drawn from.
    pub t_range: (f64, f64),
}

impl StarmanConfig {
    /// The global-time variant: all limbs share
    /// `(σ_min, σ_max, t50, k) = (0.01, 0.20, 0.88, 0.12)`.
    pub fn global() -> Self {
        let shared = SigmaTauParams { sigma_min: 0.01, sigma_max: 0.20, t50: 0.88, k: 0.12 };
        StarmanConfig {
            variant: Variant::Global,
            n_train_subjects: 1000,
            n_test_subjects: 1000,
            n_vertices: 100,
            rbf_sigma: 0.5,
            arm: shared,
            leg: shared,
            min_obs: 1,
            max_obs: 9,
            t_range: (0.0, 1.0),
        }
    }

    /// The local-time variant: arms disperse early
    /// `(σ_max, t50, k) = (0.15, 0.30, 0.10)`, legs late
    /// `(0.20, 0.88, 0.12)`; both reuse `σ_min = 0.01`.
    pub fn local() -> Self {
        StarmanConfig {
            variant: Variant::Local,
            arm: SigmaTauParams { sigma_min: 0.01, sigma_max: 0.15, t50: 0.30, k: 0.10 },
            ..StarmanConfig::global()
        }
    }

    /// σ_τ schedule of a control point's limb.
    pub fn schedule(&self, control: u8) -> &SigmaTauParams {
        match limb_group(control) {
            LimbGroup::Arm => &self.arm,
            LimbGroup::Leg => &self.leg,
        }
    }
}

/// One limb anchor: where it sits and which way it deforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    /// Anchor position (the limb tip).
    pub c: Vec<f64>,
    /// Unit deformation direction.
    pub v: Vec<f64>,
}

/// The canonical template: polygon vertices plus the four limb anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    /// Closed-polygon vertices, uniformly parameterized.
    pub vertices: Vec<Vec<f64>>,
    /// Limb anchors: arms (0, 1) then legs (2, 3).
    pub controls: Vec<Control>,
    /// Per-vertex limb label (`None` = torso), by nearest control, with
    /// vertices whose RBF weight stays below 1e-3 for all controls
    /// unlabeled.
    pub labels: Vec<Option<u8>>,
}

/// Build the canonical template for a configuration.
pub fn template(cfg: &StarmanConfig) -> Template {
    use std::f64::consts::PI;
    let tip_radius = BASE_RADIUS + BUMP_AMPLITUDE;
    // Arms at 135° and 45°, legs at 225° and 315°.
    let angles = [3.0 * PI / 4.0, PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0];
    let dirs = [[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]];
    let controls: Vec<Control> = angles
        .iter()
        .zip(dirs)
        .map(|(&a, v)| Control {
            c: vec![tip_radius * a.cos(), tip_radius * a.sin()],
            v: v.to_vec(),
        })
        .collect();

    let vertices: Vec<Vec<f64>> = (0..cfg.n_vertices)
        .map(|j| {
            let theta = 2.0 * PI * j as f64 / cfg.n_vertices as f64;
            let r = BASE_RADIUS + BUMP_AMPLITUDE * (N_BUMPS as f64 * (theta - PI / 4.0)).cos();
            vec![r * theta.cos(), r * theta.sin()]
        })
        .collect();

    let labels = vertices
        .iter()
        .map(|p| {
            let max_w = (0..4)
                .map(|i| rbf_weight(p, &controls[i].c, cfg.rbf_sigma))
                .fold(f64::NEG_INFINITY, f64::max);
            if max_w < TORSO_THRESHOLD {
                return None;
            }
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    dist2(p, &controls[a].c)
                        .partial_cmp(&dist2(p, &controls[b].c))
                        .unwrap()
                })
                .unwrap();
            Some(nearest as u8)
        })
        .collect();

    Template { vertices, controls, labels }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf_weight(p: &[f64], c: &[f64], sigma: f64) -> f64 {
    (-dist2(p, c) / (2.0 * sigma * sigma)).exp()
}

/// RBF displacement of template point `p` for per-control intrinsic times
/// `taus`: `d = Σ_i τ_i · exp(−‖p − c_i‖²/(2σ²)) · v_i`.
pub fn deform(p: &[f64], taus: &[f64; 4], controls: &[Control], rbf_sigma: f64) -> Vec<f64> {
    let mut d = vec![0.0; p.len()];
    for (tau, ctl) in taus.iter().zip(controls) {
        let w = rbf_weight(p, &ctl.c, rbf_sigma);
        for (dk, vk) in d.iter_mut().zip(&ctl.v) {
            *dk += tau * w * vk;
        }
    }
    d
}

/// One observation of a subject: chronological time and the per-group
/// intrinsic times realized at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Chronological time.
    pub t: f64,
    /// Intrinsic time of the arm limbs.
    pub tau_arm: f64,
    /// Intrinsic time of the leg limbs.
    pub tau_leg: f64,
}

/// One synthetic subject: the shared latent z and its observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    /// Subject id (doubles as the RNG stream selector).
    pub id: u64,
    /// Latent z ~ N(0,1) shared across limbs and observations.
    pub z: f64,
    /// Observations, in draw order.
    pub observations: Vec<Observation>,
}

/// Which split of a dataset to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    /// Subjects `0..n_train_subjects`.
    Train,
    /// Subjects `n_train_subjects..n_train_subjects + n_test_subjects`.
    Test,
}

/// A generated split: subject manifest plus the flat sample records.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Per-subject latent variables and observation times.
    pub subjects: Vec<Subject>,
    /// One record per (observation, template vertex).
    pub samples: Vec<ShapeSample>,
}

fn draw_subject(cfg: &StarmanConfig, seed: u64, id: u64) -> Subject {
    // Per-subject stream: decorrelated from the id and independent of
    // generation order, so subjects can be drawn in parallel.
    let mut rng = ChaCha8Rng::seed_from_u64(crate::stream_seed(seed, id));
    let z: f64 = rng.sample(StandardNormal);
    let n_obs = rng.random_range(cfg.min_obs..=cfg.max_obs);
    let observations = (0..n_obs)
        .map(|_| {
            let t = rng.random_range(cfg.t_range.0..cfg.t_range.1);
            Observation {
                t,
                tau_arm: t + z * sigma_tau(t, &cfg.arm),
                tau_leg: t + z * sigma_tau(t, &cfg.leg),
            }
        })
        .collect();
    Subject { id, z, observations }
}

/// Flatten one subject into per-vertex samples against a template.
fn subject_samples(cfg: &StarmanConfig, tpl: &Template, subject: &Subject) -> Vec<ShapeSample> {
    let mut out = Vec::with_capacity(subject.observations.len() * tpl.vertices.len());
    for obs in &subject.observations {
        let taus = [obs.tau_arm, obs.tau_arm, obs.tau_leg, obs.tau_leg];
        for (p, label) in tpl.vertices.iter().zip(&tpl.labels) {
            let d = deform(p, &taus, &tpl.controls, cfg.rbf_sigma);
            // Ground truth follows the nearest control even for unlabeled
            // torso vertices (their displacement is dominated by it anyway).
            let nearest = (0..4)
                .min_by(|&a, &b| {
                    dist2(p, &tpl.controls[a].c)
                        .partial_cmp(&dist2(p, &tpl.controls[b].c))
                        .unwrap()
                })
                .unwrap() as u8;
            let tau_gt = match limb_group(nearest) {
                LimbGroup::Arm => obs.tau_arm,
                LimbGroup::Leg => obs.tau_leg,
            };
            out.push(ShapeSample {
                subject_id: subject.id,
                t: obs.t,
                p: p.clone(),
                d,
                tau_gt: Some(tau_gt),
                limb: *label,
            });
        }
    }
    out
}

/// Generate one split. Deterministic in `(cfg, split, seed)`; subjects are
/// drawn from disjoint per-subject streams, so the result does not depend on
/// scheduling.
pub fn generate(cfg: &StarmanConfig, split: Split, seed: u64) -> Generated {
    let (lo, hi) = match split {
        Split::Train => (0, cfg.n_train_subjects as u64),
        Split::Test => (
            cfg.n_train_subjects as u64,
            (cfg.n_train_subjects + cfg.n_test_subjects) as u64,
        ),
    };
    let tpl = template(cfg);
    let subjects: Vec<Subject> = (lo..hi)
        .into_par_iter()
        .map(|id| draw_subject(cfg, seed, id))
        .collect();
    let samples: Vec<ShapeSample> = subjects
        .par_iter()
        .map(|s| subject_samples(cfg, &tpl, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Generated { subjects, samples }
}

/// Copy of the test split with one limb group's intrinsic time lagged:
/// `τ ← τ − lag` for the chosen group, displacements regenerated, labels and
/// pairing (subject ids, observation order) preserved for AUC computation.
pub fn make_synthetic_ood(cfg: &StarmanConfig, seed: u64, lag: f64, lagged: LimbGroup) -> Generated {
    let normal = generate(cfg, Split::Test, seed);
    let tpl = template(cfg);
    let subjects: Vec<Subject> = normal
        .subjects
        .into_iter()
        .map(|mut s| {
            for obs in &mut s.observations {
                match lagged {
                    LimbGroup::Arm => obs.tau_arm -= lag,
                    LimbGroup::Leg => obs.tau_leg -= lag,
                }
            }
            s
        })
        .collect();
    let samples: Vec<ShapeSample> = subjects
        .par_iter()
        .map(|s| subject_samples(cfg, &tpl, s))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Generated { subjects, samples }
}

// ── tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
    }

    #[test]
    fn sigma_tau_midpoint_and_endpoint_match_hand_values() {
        let g = StarmanConfig::global();
        // At the midpoint the logistic sits exactly halfway.
        assert_close(sigma_tau(0.88, &g.arm), 0.105, 1e-15, "σ(t50)");
        // σ(1.0) = 0.01 + 0.19/(1 + e^{-1}).
        assert_close(sigma_tau(1.0, &g.arm), 0.14890112993970095, 1e-15, "σ(1)");
    }

    #[test]
    fn sigma_tau_is_monotone_and_bounded() {
        let l = StarmanConfig::local();
        for params in [&l.arm, &l.leg] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                let s = sigma_tau(t, params);
                assert!(s > prev, "σ_τ must increase");
                assert!(s > params.sigma_min && s < params.sigma_max);
                prev = s;
            }
        }
    }

    #[test]
    fn deform_at_a_control_point_returns_its_direction() {
        let cfg = StarmanConfig::global();
        let tpl = template(&cfg);
        let d = deform(&tpl.controls[0].c.clone(), &[1.0, 0.0, 0.0, 0.0], &tpl.controls, cfg.rbf_sigma);
        // Self-weight is exactly 1; the other controls are ~2 units away and
        // contribute ~1e-4 at most in their own directions.
        assert_close(d[0], tpl.controls[0].v[0], 1e-3, "d_x at arm tip");
        assert_close(d[1], tpl.controls[0].v[1], 1e-3, "d_y at arm tip");
    }

    #[test]
    fn deform_magnitude_at_sqrt2_sigma_is_exp_minus_one() {
        let cfg = StarmanConfig::global();
        let tpl = template(&cfg);
        // One control only, unit τ, probe at distance σ√2 along x from it.
        let c = &tpl.controls[1];
        let p = vec![c.c[0] + cfg.rbf_sigma * (2.0f64).sqrt(), c.c[1]];
        let lone = [c.clone()];
        let d = deform(&p, &[1.0, 0.0, 0.0, 0.0], &lone, cfg.rbf_sigma);
        let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
        assert_close(norm, 0.36787944117144233, 1e-15, "‖d‖ at σ√2");
    }

    #[test]
    fn template_is_star_shaped_and_fully_labeled() {
        let cfg = StarmanConfig::global();
        let tpl = template(&cfg);
        assert_eq!(tpl.vertices.len(), 100);
        assert_eq!(tpl.controls.len(), 4);
        for p in &tpl.vertices {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(r > 0.64 && r < 1.36, "radius {r} outside the star band");
        }
        // Controls sit at the tips.
        for ctl in &tpl.controls {
            let r = (ctl.c[0] * ctl.c[0] + ctl.c[1] * ctl.c[1]).sqrt();
            assert_close(r, 1.35, 1e-12, "control radius");
        }
        // Arms point up, legs point right.
        assert_eq!(tpl.controls[0].v, vec![0.0, 1.0]);
        assert_eq!(tpl.controls[1].v, vec![0.0, 1.0]);
        assert_eq!(tpl.controls[2].v, vec![1.0, 0.0]);
        assert_eq!(tpl.controls[3].v, vec![1.0, 0.0]);
        // With this geometry every vertex keeps non-negligible signal, so
        // every vertex carries a label and all four limbs are populated.
        let mut counts = [0usize; 4];
        for l in &tpl.labels {
            counts[l.expect("no torso vertices on this template") as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            assert!(*c >= 15, "limb {i} has only {c} vertices");
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_ids_are_disjoint() {
        let cfg = StarmanConfig { n_train_subjects: 20, n_test_subjects: 10, ..StarmanConfig::global() };
        let a = generate(&cfg, Split::Train, 7);
        let b = generate(&cfg, Split::Train, 7);
        assert_eq!(a, b, "same seed, same split, same bytes");
        let t = generate(&cfg, Split::Test, 7);
        assert!(a.subjects.iter().all(|s| s.id < 20));
        assert!(t.subjects.iter().all(|s| (20..30).contains(&s.id)));
        let c = generate(&cfg, Split::Train, 8);
        assert_ne!(a, c, "different seed, different draws");
    }

    #[test]
    fn observations_respect_config_bounds() {
        let cfg = StarmanConfig { n_train_subjects: 50, ..StarmanConfig::global() };
        let g = generate(&cfg, Split::Train, 3);
        for s in &g.subjects {
            assert!((cfg.min_obs..=cfg.max_obs).contains(&s.observations.len()));
            for o in &s.observations {
                assert!((0.0..1.0).contains(&o.t));
            }
        }
    }

    #[test]
    fn z_is_shared_across_observations_and_limbs() {
        let cfg = StarmanConfig { n_train_subjects: 30, ..StarmanConfig::local() };
        let g = generate(&cfg, Split::Train, 11);
        for s in &g.subjects {
            for o in &s.observations {
                let z_arm = (o.tau_arm - o.t) / sigma_tau(o.t, &cfg.arm);
                let z_leg = (o.tau_leg - o.t) / sigma_tau(o.t, &cfg.leg);
                assert_close(z_arm, s.z, 1e-10, "arm z");
                assert_close(z_leg, s.z, 1e-10, "leg z");
            }
        }
    }

    #[test]
    fn tau_variance_tracks_the_schedule() {
        // Var(τ | t) = σ_τ(t)² exactly, so the standardized residuals
        // (τ − t)/σ_τ(t) have unit variance.
        let cfg = StarmanConfig::global();
        let g = generate(&cfg, Split::Train, 42);
        let zs: Vec<f64> = g
            .subjects
            .iter()
            .flat_map(|s| {
                s.observations
                    .iter()
                    .map(|o| (o.tau_arm - o.t) / sigma_tau(o.t, &cfg.arm))
            })
            .collect();
        let n = zs.len() as f64;
        let mean = zs.iter().sum::<f64>() / n;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.1, "standardized variance {var} should be ≈ 1");
        // Expected shape count: 1000 subjects × mean 5 observations.
        let n_shapes: usize = g.subjects.iter().map(|s| s.observations.len()).sum();
        assert!((4500..=5500).contains(&n_shapes), "shape count {n_shapes}");
    }

    #[test]
    fn ood_lag_shifts_only_the_chosen_limb() {
        let cfg = StarmanConfig { n_train_subjects: 5, n_test_subjects: 5, ..StarmanConfig::global() };
        let normal = generate(&cfg, Split::Test, 9);
        let ood = make_synthetic_ood(&cfg, 9, 0.3, LimbGroup::Arm);
        assert_eq!(normal.subjects.len(), ood.subjects.len());
        for (a, b) in normal.subjects.iter().zip(&ood.subjects) {
            assert_eq!(a.id, b.id, "pairing preserved");
            for (oa, ob) in a.observations.iter().zip(&b.observations) {
                assert_close(ob.tau_arm, oa.tau_arm - 0.3, 1e-15, "arm lagged");
                assert_close(ob.tau_leg, oa.tau_leg, 0.0, "leg untouched");
                assert_eq!(oa.t, ob.t);
            }
        }
    }
}
