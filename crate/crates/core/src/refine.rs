//! Peak refinement: seeding around coarse peaks, one batched L-BFGS run to
//! tight tolerance, stationarity and saddle filters, diagonal Hessians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::density::Problem;
use crate::discovery::CoarsePeak;
use crate::error::{Error, Result};
use crate::lbfgs::{self, BatchState, LbfgsConfig, SampleStatus, StepConfig, TrajectoryBank};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// `2d` seeds at `θ* ± 0.9w·e_i`.
    Default,
    /// 20 seeds uniform in the L∞ ball of radius `0.9w`.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefineConfig {
    pub mode: SeedMode,
    /// Step tolerance on `‖∇ℓ‖∞`, relative to `max(1, |ℓ|)`.
    pub tolerance: f64,
    /// Stationarity filter, relative to `max(1, |ℓ|)`.
    pub grad_filter: f64,
    /// L∞ merge radius as a fraction of the mean box width.
    pub dedup_radius: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            mode: SeedMode::Default,
            tolerance: 1e-10,
            grad_filter: 1e-6,
            dedup_radius: 1e-4,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

const FAST_SEEDS: usize = 20;
const SEED_OFFSET: f64 = 0.9;

/// `max(10, ⌈3 log₂ d⌉)`.
pub fn refine_iterations(dim: usize) -> usize {
    10.max((3.0 * (dim as f64).log2()).ceil() as usize)
}

/// Seeds around a coarse peak, clipped into the box. `width` must already be
/// floored to a positive value.
pub fn seed_peak(
    problem: &Problem,
    location: &[f64],
    width: f64,
    mode: SeedMode,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let d = location.len();
    let r = SEED_OFFSET * width;
    let mut seeds = match mode {
        SeedMode::Default => {
            let mut out = Vec::with_capacity(2 * d);
            for i in 0..d {
                for sign in [1.0, -1.0] {
                    let mut s = location.to_vec();
                    s[i] += sign * r;
                    out.push(s);
                }
            }
            out
        }
        SeedMode::Fast => (0..FAST_SEEDS)
            .map(|_| {
                location
                    .iter()
                    .map(|x| x + rng.random_range(-r..=r))
                    .collect()
            })
            .collect(),
    };
    for s in seeds.iter_mut() {
        problem.bounds().clip(s);
    }
    seeds
}

/// Stencil steps `max(10⁻⁴ w_i, 10⁻⁶ (1 + |θ_i|))`.
pub fn hessian_steps(theta: &[f64], widths: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(widths)
        .map(|(t, w)| (1e-4 * w).max(1e-6 * (1.0 + t.abs())))
        .collect()
}

/// Three-point second differences along each axis at every center; the
/// `2d` off-center points of all centers form one batch. `center_logls`
/// are reused. Non-finite entries come back as NaN.
pub fn diag_hessians(
    problem: &Problem,
    centers: &[Vec<f64>],
    center_logls: &[f64],
    steps: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = problem.dim();
    let mut pts = Vec::with_capacity(centers.len() * 2 * d);
    for (c, h) in centers.iter().zip(steps) {
        for i in 0..d {
            let mut p = c.clone();
            p[i] += h[i];
            pts.push(p);
            let mut m = c.clone();
            m[i] -= h[i];
            pts.push(m);
        }
    }
    let vals = problem.evaluate_batch(&pts);
    centers
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let l0 = center_logls[k];
            (0..d)
                .map(|i| {
                    let lp = vals[k * 2 * d + 2 * i];
                    let lm = vals[k * 2 * d + 2 * i + 1];
                    let h = steps[k][i];
                    let v = (lp - 2.0 * l0 + lm) / (h * h);
                    if v.is_finite() {
                        v
                    } else {
                        f64::NAN
                    }
                })
                .collect()
        })
        .collect()
}

/// Diagonal Hessian at one point, including the evaluation of `ℓ(center)`.
pub fn diag_hessian(problem: &Problem, center: &[f64], steps: &[f64]) -> Vec<f64> {
    let l0 = problem.evaluate(center);
    diag_hessians(problem, &[center.to_vec()], &[l0], &[steps.to_vec()])
        .pop()
        .expect("one center")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Peak {
    pub location: Vec<f64>,
    pub logl: f64,
    /// `∂²ℓ/∂θ_i²`, all negative.
    pub diag_hessian: Vec<f64>,
    pub grad_linf: f64,
    /// `1/√(-H_ii)`.
    pub width: Vec<f64>,
    /// Coarse peak this one descends from.
    pub origin: usize,
    /// Indices into the trajectory bank of every candidate merged here.
    pub trajectories: Vec<usize>,
    /// Diagonal estimate from the default seed ring, kept as a cross-check.
    pub seed_ring_hessian: Option<Vec<f64>>,
    /// The coarse width was below the floor and replaced.
    pub width_floored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub candidate: usize,
    pub origin: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Refinement {
    pub peaks: Vec<Peak>,
    pub rejections: Vec<Rejection>,
    pub n_candidates: usize,
    pub iterations: usize,
    #[serde(skip)]
    pub trajectories: TrajectoryBank,
}

pub fn refine(
    problem: &Problem,
    coarse: &[CoarsePeak],
    lambda_fine: f64,
    config: &RefineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Refinement> {
    if coarse.is_empty() {
        return Err(Error::InvalidParameter("no coarse peaks to refine".into()));
    }
    if !(config.tolerance > 0.0 && config.grad_filter > 0.0 && config.dedup_radius > 0.0) {
        return Err(Error::InvalidParameter(
            "refinement tolerances must be positive".into(),
        ));
    }
    let bounds = problem.bounds();
    let d = problem.dim();
    let floor = 1e-12 * bounds.mean_width();

    let mut positions = vec![];
    let mut origins = vec![];
    let mut widths = vec![];
    let mut ring_slots: Vec<Option<usize>> = vec![None; coarse.len()];
    let mut floored = vec![false; coarse.len()];
    for (k, cp) in coarse.iter().enumerate() {
        let mut w = cp.width;
        if !(w > floor) {
            floored[k] = true;
            w = lambda_fine.max(floor);
        }
        let seeds = seed_peak(problem, &cp.location, w, config.mode, rng);
        if config.mode == SeedMode::Default {
            ring_slots[k] = Some(positions.len());
        }
        positions.push(cp.location.clone());
        origins.push(k);
        widths.push(Some(vec![w; d]));
        for s in seeds {
            positions.push(s);
            origins.push(k);
            widths.push(Some(vec![w; d]));
        }
    }
    let n = positions.len();
    let mut state = BatchState::initialize(problem, positions, widths, config.lbfgs.memory);

    let seed_ring: Vec<Option<Vec<f64>>> = coarse
        .iter()
        .enumerate()
        .map(|(k, cp)| {
            let base = ring_slots[k]?;
            let w = state.widths[base].as_ref()?[0];
            let h = SEED_OFFSET * w;
            let l0 = state.logls[base];
            (0..d)
                .map(|i| {
                    let p = base + 1 + 2 * i;
                    // Clipped seeds do not sit on the symmetric stencil.
                    let exact = (state.positions[p][i] - cp.location[i] - h).abs()
                        <= 1e-12 * (1.0 + h)
                        && (cp.location[i] - state.positions[p + 1][i] - h).abs()
                            <= 1e-12 * (1.0 + h);
                    let v = (state.logls[p] - 2.0 * l0 + state.logls[p + 1]) / (h * h);
                    (exact && v.is_finite()).then_some(v)
                })
                .collect()
        })
        .collect();

    let origin_opts: Vec<Option<usize>> = origins.iter().map(|&o| Some(o)).collect();
    let mut bank = TrajectoryBank::from_state(&state, &origin_opts);
    let iterations = refine_iterations(d);
    let step_cfg = StepConfig {
        n_iters: iterations,
        tolerance_linf: config.tolerance,
        relative: true,
    };
    bank.extend(lbfgs::step_batch(
        &mut state,
        problem,
        &step_cfg,
        &config.lbfgs,
    ));

    // Stationarity filter on the gradient already held by the optimizer.
    let mut rejections = vec![];
    let mut stationary = vec![];
    for i in 0..n {
        let l = state.logls[i];
        if state.status[i] == SampleStatus::Failed || !l.is_finite() {
            rejections.push(Rejection {
                candidate: i,
                origin: origins[i],
                reason: "non-finite log-likelihood".into(),
            });
            continue;
        }
        let g = state.grad_linf(i);
        let eps = config.grad_filter * l.abs().max(1.0);
        if g < eps {
            stationary.push(i);
        } else {
            rejections.push(Rejection {
                candidate: i,
                origin: origins[i],
                reason: format!("not stationary: gradient {g:.3e} ≥ {eps:.3e}"),
            });
        }
    }

    let pts: Vec<Vec<f64>> = stationary
        .iter()
        .map(|&i| state.positions[i].clone())
        .collect();
    let scores: Vec<f64> = stationary.iter().map(|&i| state.logls[i]).collect();
    let dd = linalg::dedup_linf(&pts, &scores, config.dedup_radius * bounds.mean_width());
    let survivors: Vec<usize> = dd.kept.iter().map(|&k| stationary[k]).collect();

    let centers: Vec<Vec<f64>> = survivors
        .iter()
        .map(|&i| state.positions[i].clone())
        .collect();
    let center_logls: Vec<f64> = survivors.iter().map(|&i| state.logls[i]).collect();
    let steps: Vec<Vec<f64>> = survivors
        .iter()
        .map(|&i| {
            hessian_steps(
                &state.positions[i],
                state.widths[i].as_ref().expect("width set"),
            )
        })
        .collect();
    let hessians = diag_hessians(problem, &centers, &center_logls, &steps);

    let mut peaks = vec![];
    for (k, (&i, h)) in survivors.iter().zip(hessians).enumerate() {
        if let Some(bad) = h.iter().position(|v| !(*v < 0.0)) {
            rejections.push(Rejection {
                candidate: i,
                origin: origins[i],
                reason: if h[bad].is_nan() {
                    format!("saddle check failed: non-finite curvature along axis {bad}")
                } else {
                    format!("saddle: curvature {:.3e} ≥ 0 along axis {bad}", h[bad])
                },
            });
            continue;
        }
        let members: Vec<usize> = (0..stationary.len())
            .filter(|&m| dd.survivor[m] == dd.kept[k])
            .map(|m| stationary[m])
            .collect();
        let origin = origins[i];
        let ring = seed_ring[origin].clone();
        peaks.push(Peak {
            location: state.positions[i].clone(),
            logl: state.logls[i],
            width: h.iter().map(|v| 1.0 / (-v).sqrt()).collect(),
            diag_hessian: h,
            grad_linf: state.grad_linf(i),
            origin,
            trajectories: members,
            seed_ring_hessian: ring,
            width_floored: floored[origin],
        });
    }
    if peaks.is_empty() {
        rejections.sort_by_key(|r| r.candidate);
        return Err(Error::NoValidMaxima {
            reasons: rejections
                .iter()
                .map(|r| {
                    format!(
                        "candidate {} (peak {}): {}",
                        r.candidate, r.origin, r.reason
                    )
                })
                .collect(),
        });
    }
    rejections.sort_by_key(|r| r.candidate);
    Ok(Refinement {
        peaks,
        rejections,
        n_candidates: n,
        iterations,
        trajectories: bank,
    })
}

/// Convenience for callers without their own stream.
pub fn refine_seeded(
    problem: &Problem,
    coarse: &[CoarsePeak],
    lambda_fine: f64,
    config: &RefineConfig,
    seed: u64,
) -> Result<Refinement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    refine(problem, coarse, lambda_fine, config, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::BoundsBox;

    fn coarse(location: Vec<f64>, logl: f64, width: f64) -> CoarsePeak {
        CoarsePeak {
            location,
            logl,
            width,
            stuck_at_oscillation: 0,
        }
    }

    fn iso(dim: usize) -> Problem {
        Problem::from_fn("g", BoundsBox::cube(dim, -10.0, 10.0).unwrap(), |x| {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        })
        .unwrap()
    }

    #[test]
    fn iteration_rule() {
        assert_eq!(refine_iterations(64), 18);
        assert_eq!(refine_iterations(2), 10);
        assert_eq!(refine_iterations(1), 10);
        assert_eq!(refine_iterations(1024), 30);
    }

    #[test]
    fn default_seed_ring() {
        let p = iso(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = seed_peak(&p, &[1.0, 2.0, 3.0], 0.5, SeedMode::Default, &mut rng);
        assert_eq!(s.len(), 6);
        for seed in &s {
            let diffs: Vec<f64> = seed
                .iter()
                .zip([1.0, 2.0, 3.0])
                .map(|(a, b)| a - b)
                .filter(|v| *v != 0.0)
                .collect();
            assert_eq!(diffs.len(), 1);
            assert!((diffs[0].abs() - 0.45).abs() < 1e-15);
        }
    }

    #[test]
    fn fast_seeds() {
        let p = iso(7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = vec![9.9; 7];
        let s = seed_peak(&p, &c, 1.0, SeedMode::Fast, &mut rng);
        assert_eq!(s.len(), 20);
        assert!(s.iter().all(|x| p.bounds().contains(x)));
        assert!(s
            .iter()
            .all(|x| linalg::linf_distance(x, &c) <= 0.9 + 1e-12));
    }

    #[test]
    fn stencil_is_exact_on_quadratics() {
        let p = Problem::from_fn("g", BoundsBox::cube(2, -1e4, 1e4).unwrap(), |x| {
            -0.5 * (x[0] * x[0] + x[1] * x[1] / 1e6)
        })
        .unwrap();
        let h = diag_hessian(&p, &[0.0, 0.0], &hessian_steps(&[0.0, 0.0], &[1.0, 1e3]));
        assert!((h[0] + 1.0).abs() < 1e-8);
        assert!((h[1] + 1e-6).abs() < 1e-12);
        assert_eq!(p.eval_count(), 5);

        let s = Problem::from_fn("s", BoundsBox::cube(2, -1.0, 1.0).unwrap(), |x| {
            0.5 * (x[0] * x[0] - x[1] * x[1])
        })
        .unwrap();
        let h = diag_hessian(&s, &[0.0, 0.0], &[1e-3, 1e-3]);
        assert!((h[0] - 1.0).abs() < 1e-6 && (h[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn offset_gaussian_refines_to_mean() {
        let p = iso(4);
        let peaks = [coarse(vec![0.1; 4], -0.02, 1.0)];
        let r = refine_seeded(&p, &peaks, 1e-2, &RefineConfig::default(), 3).unwrap();
        assert_eq!(r.peaks.len(), 1);
        let pk = &r.peaks[0];
        assert!(linalg::norm_inf(&pk.location) < 1e-10, "{:?}", pk.location);
        for h in &pk.diag_hessian {
            assert!((h + 1.0).abs() < 1e-6);
        }
        assert!(pk.logl >= peaks[0].logl);
        let ring = pk.seed_ring_hessian.as_ref().unwrap();
        assert!(ring.iter().all(|h| (h + 1.0).abs() < 1e-9));
        assert_eq!(r.trajectories.trajectories.len(), 9);
    }

    #[test]
    fn anisotropic_hessian_diagonal() {
        let var = [1.0, 1e-4, 4.0];
        let p = Problem::from_fn("g", BoundsBox::cube(3, -10.0, 10.0).unwrap(), move |x| {
            -0.5 * x.iter().zip(var).map(|(a, v)| a * a / v).sum::<f64>()
        })
        .unwrap();
        let peaks = [coarse(vec![0.05, 0.001, -0.1], -20.0, 0.05)];
        let r = refine_seeded(&p, &peaks, 1e-3, &RefineConfig::default(), 1).unwrap();
        let pk = &r.peaks[0];
        for (h, v) in pk.diag_hessian.iter().zip(var) {
            assert!((h * v + 1.0).abs() < 1e-6, "{h} vs {v}");
        }
    }

    #[test]
    fn saddle_is_rejected() {
        let p = Problem::from_fn("s", BoundsBox::cube(2, -5.0, 5.0).unwrap(), |x| {
            0.5 * (x[0] * x[0] - x[1] * x[1])
        })
        .unwrap();
        let err = refine_seeded(
            &p,
            &[coarse(vec![0.0, 0.0], 0.0, 0.5)],
            1e-2,
            &RefineConfig::default(),
            0,
        )
        .unwrap_err();
        match err {
            Error::NoValidMaxima { reasons } => {
                assert!(reasons.iter().any(|r| r.contains("saddle")), "{reasons:?}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn gradient_filter_costs_nothing() {
        let p = iso(2);
        let cfg = RefineConfig::default();
        let peaks = [coarse(vec![0.0, 0.0], 0.0, 1.0)];
        let r = refine_seeded(&p, &peaks, 1e-2, &cfg, 0).unwrap();
        // Initialization (5 + 5·4), optimizer evaluations, then one 2d batch
        // per surviving peak; nothing for the stationarity filter.
        let total = p.eval_count();
        let p2 = iso(2);
        let mut st = BatchState::initialize(
            &p2,
            std::iter::once(vec![0.0, 0.0])
                .chain(seed_peak(
                    &p2,
                    &[0.0, 0.0],
                    1.0,
                    SeedMode::Default,
                    &mut ChaCha8Rng::seed_from_u64(0),
                ))
                .collect(),
            vec![Some(vec![1.0, 1.0]); 5],
            10,
        );
        lbfgs::step_batch(
            &mut st,
            &p2,
            &StepConfig {
                n_iters: refine_iterations(2),
                tolerance_linf: cfg.tolerance,
                relative: true,
            },
            &cfg.lbfgs,
        );
        assert_eq!(total, p2.eval_count() + 4 * r.peaks.len() as u64);
    }

    #[test]
    fn zero_width_is_floored() {
        let p = iso(2);
        let r = refine_seeded(
            &p,
            &[coarse(vec![0.0, 0.0], 0.0, 0.0)],
            0.3,
            &RefineConfig::default(),
            0,
        )
        .unwrap();
        assert!(r.peaks[0].width_floored);
    }
}
