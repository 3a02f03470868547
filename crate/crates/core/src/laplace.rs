//! Per-mode Laplace evidence with rotation detection and mode combination.
//!
//! Rotation is first judged from the optimizer's own steps, whitened by the
//! diagonal curvature. When that is inconclusive, a handful of directional
//! second differences decide. Rotated modes get a full finite-difference
//! Hessian; the rest use the diagonal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::density::{BoundsBox, Problem};
use crate::error::{Error, Result};
use crate::lbfgs::{Trajectory, TrajectoryBank};
use crate::linalg::{self, SymMatrix};
use crate::refine::{hessian_steps, Peak};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    AxisAligned,
    Rotated,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PerpReference {
    /// Whitened step against the whitened gradient change over the step.
    Secant,
    /// Whitened step against the whitened gradient at the step's start.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianChoice {
    Auto,
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianKind {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LaplaceConfig {
    pub eps_rot: f64,
    /// Below this mean `f⊥` the mode is axis-aligned without probing.
    pub eps_rot_low: f64,
    /// Relative threshold for the directional probes.
    pub probe_threshold: f64,
    /// Extra random-direction probes beside the all-ones one.
    pub random_probes: usize,
    pub reference: PerpReference,
    pub hessian: HessianChoice,
    /// Whitened steps shorter than this are ignored.
    pub min_step: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            eps_rot: 0.05,
            eps_rot_low: 0.02,
            probe_threshold: 0.05,
            random_probes: 3,
            reference: PerpReference::Secant,
            hessian: HessianChoice::Auto,
            min_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RotationVerdict {
    pub decision: Decision,
    pub perp_mean: Option<f64>,
    pub perp_max: Option<f64>,
    pub perp_steps: usize,
    pub probe_b: Option<f64>,
    /// Largest relative deviation seen by the random-direction probes.
    pub probe_deviation: Option<f64>,
}

/// `‖s - (s·r̂) r̂‖ / ‖s‖` for a step `s` and reference direction `r`.
pub fn perp_fraction(step: &[f64], reference: &[f64]) -> Option<f64> {
    let ns = linalg::norm2(step);
    let nr = linalg::norm2(reference);
    if !(ns > 1e-14) || !(nr > 0.0) || !nr.is_finite() {
        return None;
    }
    let proj = linalg::dot(step, reference) / linalg::dot(reference, reference);
    let perp: Vec<f64> = step
        .iter()
        .zip(reference)
        .map(|(s, r)| s - proj * r)
        .collect();
    Some((linalg::norm2(&perp) / ns).min(1.0))
}

/// Mean and max whitened `f⊥` over every step of the given trajectories, and
/// the number of steps used.
pub fn perpendicular_fraction(
    trajectories: &[&Trajectory],
    diag_hessian: &[f64],
    reference: PerpReference,
    min_step: f64,
) -> (Option<f64>, Option<f64>, usize) {
    let root: Vec<f64> = diag_hessian.iter().map(|h| (-h).sqrt()).collect();
    let mut fs = vec![];
    for t in trajectories {
        for w in t.points.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let s_phi: Vec<f64> = (0..root.len())
                .map(|i| root[i] * (b.position[i] - a.position[i]))
                .collect();
            if linalg::norm2(&s_phi) < min_step {
                continue;
            }
            let r: Vec<f64> = match reference {
                // ∇f change over the step, f = -ℓ.
                PerpReference::Secant => (0..root.len())
                    .map(|i| (a.grad[i] - b.grad[i]) / root[i])
                    .collect(),
                PerpReference::Gradient => (0..root.len()).map(|i| a.grad[i] / root[i]).collect(),
            };
            if let Some(f) = perp_fraction(&s_phi, &r) {
                fs.push(f);
            }
        }
    }
    if fs.is_empty() {
        return (None, None, 0);
    }
    let mean = fs.iter().sum::<f64>() / fs.len() as f64;
    let max = fs.iter().copied().fold(0.0, f64::max);
    (Some(mean), Some(max), fs.len())
}

/// `uᵀHu` by a three-point second difference along unit `u` with step `h`.
fn directional_curvatures(problem: &Problem, peak: &Peak, dirs: &[(Vec<f64>, f64)]) -> Vec<f64> {
    let mut pts = vec![];
    for (u, h) in dirs {
        for sign in [1.0, -1.0] {
            pts.push(
                peak.location
                    .iter()
                    .zip(u)
                    .map(|(x, v)| x + sign * h * v)
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let vals = problem.evaluate_batch(&pts);
    dirs.iter()
        .enumerate()
        .map(|(k, (_, h))| (vals[2 * k] - 2.0 * peak.logl + vals[2 * k + 1]) / (h * h))
        .collect()
}

/// `b = (vᵀHv - a)/(d - 1)` with `v` the normalized all-ones vector and `a`
/// the mean diagonal entry. Two evaluations.
pub fn probe_offdiag(problem: &Problem, peak: &Peak) -> Result<f64> {
    let d = peak.location.len();
    if d < 2 {
        return Err(Error::InvalidParameter(
            "off-diagonal probe needs d ≥ 2".into(),
        ));
    }
    let a = peak.diag_hessian.iter().sum::<f64>() / d as f64;
    let v = vec![1.0 / (d as f64).sqrt(); d];
    let h = 1e-3 / (-a).sqrt();
    let c = directional_curvatures(problem, peak, &[(v, h)])[0];
    if !c.is_finite() {
        return Err(Error::HessianFailed("non-finite off-diagonal probe".into()));
    }
    Ok((c - a) / (d - 1) as f64)
}

/// Largest `|uᵀHu - uᵀ diag(H) u| / |uᵀ diag(H) u|` over random directions
/// that are isotropic after whitening. Two evaluations per direction.
pub fn probe_random(problem: &Problem, peak: &Peak, count: usize, seed: u64) -> Result<f64> {
    let d = peak.location.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = vec![];
    let mut predicted = vec![];
    for _ in 0..count {
        let z: Vec<f64> = (0..d)
            .map(|i| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * peak.width[i]
            })
            .collect();
        let n = linalg::norm2(&z);
        let u: Vec<f64> = z.iter().map(|v| v / n).collect();
        let pred: f64 = u
            .iter()
            .zip(&peak.diag_hessian)
            .map(|(x, h)| h * x * x)
            .sum();
        dirs.push((u, 1e-3 / (-pred).sqrt()));
        predicted.push(pred);
    }
    let measured = directional_curvatures(problem, peak, &dirs);
    let mut worst: f64 = 0.0;
    for (m, p) in measured.iter().zip(&predicted) {
        if !m.is_finite() {
            return Err(Error::HessianFailed("non-finite random probe".into()));
        }
        worst = worst.max((m - p).abs() / p.abs());
    }
    Ok(worst)
}

pub fn detect_rotation(
    problem: &Problem,
    peak: &Peak,
    bank: &TrajectoryBank,
    config: &LaplaceConfig,
    seed: u64,
) -> RotationVerdict {
    let d = peak.location.len();
    let trajs: Vec<&Trajectory> = peak
        .trajectories
        .iter()
        .filter_map(|&i| bank.trajectories.get(i))
        .collect();
    let (mean, max, steps) = perpendicular_fraction(
        &trajs,
        &peak.diag_hessian,
        config.reference,
        config.min_step,
    );
    let mut verdict = RotationVerdict {
        decision: Decision::Inconclusive,
        perp_mean: mean,
        perp_max: max,
        perp_steps: steps,
        probe_b: None,
        probe_deviation: None,
    };
    if d < 2 {
        verdict.decision = Decision::AxisAligned;
        return verdict;
    }
    if steps >= 2 {
        let m = mean.expect("steps counted");
        if m > config.eps_rot {
            verdict.decision = Decision::Rotated;
            return verdict;
        }
        if m < config.eps_rot_low {
            verdict.decision = Decision::AxisAligned;
            return verdict;
        }
    }
    // A failed probe counts as rotated.
    let a = peak.diag_hessian.iter().sum::<f64>() / d as f64;
    match probe_offdiag(problem, peak) {
        Ok(b) => {
            verdict.probe_b = Some(b);
            if b.abs() > config.probe_threshold * a.abs() {
                verdict.decision = Decision::Rotated;
                return verdict;
            }
        }
        Err(_) => {
            verdict.decision = Decision::Rotated;
            return verdict;
        }
    }
    if config.random_probes > 0 {
        match probe_random(problem, peak, config.random_probes, seed) {
            Ok(dev) => {
                verdict.probe_deviation = Some(dev);
                if dev > config.probe_threshold {
                    verdict.decision = Decision::Rotated;
                    return verdict;
                }
            }
            Err(_) => {
                verdict.decision = Decision::Rotated;
                return verdict;
            }
        }
    }
    verdict.decision = Decision::AxisAligned;
    verdict
}

/// Full Hessian: the peak's diagonal plus four-point off-diagonals, all
/// `2d(d-1)` evaluations in one batch.
pub fn full_hessian(problem: &Problem, peak: &Peak) -> Result<SymMatrix> {
    let d = peak.location.len();
    let eps = hessian_steps(&peak.location, &peak.width);
    let mut pts = Vec::with_capacity(2 * d * d.saturating_sub(1));
    let mut pairs = vec![];
    for i in 0..d {
        for j in (i + 1)..d {
            pairs.push((i, j));
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut p = peak.location.clone();
                p[i] += si * eps[i];
                p[j] += sj * eps[j];
                pts.push(p);
            }
        }
    }
    let vals = problem.evaluate_batch(&pts);
    let mut h = SymMatrix::from_diagonal(&peak.diag_hessian);
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let f = &vals[4 * k..4 * k + 4];
        let v = (f[0] - f[1] - f[2] + f[3]) / (4.0 * eps[i] * eps[j]);
        if !v.is_finite() {
            return Err(Error::HessianFailed(format!("non-finite entry ({i}, {j})")));
        }
        h.set(i, j, v);
    }
    if !h.is_finite() {
        return Err(Error::HessianFailed("non-finite diagonal".into()));
    }
    Ok(h)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeEvidence {
    pub location: Vec<f64>,
    pub logl: f64,
    pub log_z: f64,
    pub hessian_kind: HessianKind,
    pub log_det_neg_h: f64,
    pub condition_number: f64,
    pub rotation: RotationVerdict,
    #[serde(skip)]
    pub hessian: Option<SymMatrix>,
}

/// `ℓ* + (d/2) log 2π - ½ log det(-H)`.
pub fn laplace_log_z(logl: f64, dim: usize, log_det_neg_h: f64) -> f64 {
    logl + dim as f64 * HALF_LN_2PI - 0.5 * log_det_neg_h
}

/// Evidence of one refined peak. A full Hessian whose negative is not
/// positive definite rejects the mode.
pub fn mode_evidence(
    problem: &Problem,
    peak: &Peak,
    bank: &TrajectoryBank,
    config: &LaplaceConfig,
    seed: u64,
) -> Result<ModeEvidence> {
    let d = peak.location.len();
    let rotation = match config.hessian {
        HessianChoice::Auto => detect_rotation(problem, peak, bank, config, seed),
        forced => RotationVerdict {
            decision: if forced == HessianChoice::Full {
                Decision::Rotated
            } else {
                Decision::AxisAligned
            },
            perp_mean: None,
            perp_max: None,
            perp_steps: 0,
            probe_b: None,
            probe_deviation: None,
        },
    };
    if rotation.decision == Decision::Rotated && d >= 2 {
        let h = full_hessian(problem, peak)?;
        let eig = linalg::eig_symmetric(&h.scaled(-1.0))?;
        if let Some(k) = eig.eigenvalues.iter().position(|l| !(*l > 0.0)) {
            return Err(Error::NotPositiveDefinite { pivot: k });
        }
        let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
        let cond = eig.eigenvalues[d - 1] / eig.eigenvalues[0];
        return Ok(ModeEvidence {
            location: peak.location.clone(),
            logl: peak.logl,
            log_z: laplace_log_z(peak.logl, d, log_det),
            hessian_kind: HessianKind::Full,
            log_det_neg_h: log_det,
            condition_number: cond,
            rotation,
            hessian: Some(h),
        });
    }
    if let Some(k) = peak.diag_hessian.iter().position(|h| !(*h < 0.0)) {
        return Err(Error::NotPositiveDefinite { pivot: k });
    }
    let log_det: f64 = peak.diag_hessian.iter().map(|h| (-h).ln()).sum();
    let max = peak.diag_hessian.iter().map(|h| -h).fold(0.0, f64::max);
    let min = peak
        .diag_hessian
        .iter()
        .map(|h| -h)
        .fold(f64::INFINITY, f64::min);
    Ok(ModeEvidence {
        location: peak.location.clone(),
        logl: peak.logl,
        log_z: laplace_log_z(peak.logl, d, log_det),
        hessian_kind: HessianKind::Diagonal,
        log_det_neg_h: log_det,
        condition_number: max / min,
        rotation,
        hessian: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Combined {
    pub log_z: f64,
    pub log_z_vs_prior: f64,
}

/// `logsumexp` of the mode evidences plus the marginal correction, and the
/// same divided by the full prior volume.
pub fn combine(
    mode_log_z: &[f64],
    log_z_marginal: f64,
    full_bounds: &BoundsBox,
) -> Result<Combined> {
    if mode_log_z.is_empty() {
        return Err(Error::NoModesFound {
            best_location: None,
            best_logl: f64::NEG_INFINITY,
            summary: "no mode evidences to combine".into(),
        });
    }
    let log_z = linalg::logsumexp(mode_log_z)? + log_z_marginal;
    Ok(Combined {
        log_z,
        log_z_vs_prior: log_z - full_bounds.log_volume(),
    })
}
