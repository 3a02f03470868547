//! Batched L-BFGS ascent on the log-likelihood with central-difference
//! gradients.
//!
//! Internally the objective is `f = -ℓ`. Stored gradients, trajectories and
//! everything returned to callers are gradients of `ℓ`.

use std::collections::VecDeque;

use serde::Serialize;

use crate::density::{BoundsBox, Problem};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, norm_inf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub armijo: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
    /// Pairs with `sᵀy ≤ curvature_eps · ‖s‖‖y‖` are discarded.
    pub curvature_eps: f64,
    /// Cap on `‖p‖∞` for steepest-ascent steps taken without curvature
    /// history, as a fraction of the mean box width.
    pub first_step_fraction: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 20,
            curvature_eps: 1e-12,
            first_step_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Ring buffer of curvature pairs `(s_k, y_k)` for the minimized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pairs: VecDeque<Pair>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        Self {
            pairs: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    /// Stores the pair if it satisfies the curvature condition; returns
    /// whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>, curvature_eps: f64) -> bool {
        let sy = dot(&s, &y);
        if !(sy > curvature_eps * norm2(&s) * norm2(&y)) || !sy.is_finite() {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(Pair {
            rho: 1.0 / sy,
            s,
            y,
        });
        true
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }
}

/// Two-loop recursion: `p ≈ -H⁻¹ grad` for the minimized objective, with
/// `H₀ = γI`, `γ = sᵀy/yᵀy` from the newest pair. Empty history gives
/// `-grad`.
pub fn two_loop_direction(grad: &[f64], history: &History) -> Vec<f64> {
    let mut q = grad.to_vec();
    let Some(newest) = history.pairs.back() else {
        return q.iter().map(|v| -v).collect();
    };
    let mut alphas = vec![0.0; history.len()];
    for (k, pair) in history.pairs.iter().enumerate().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        alphas[k] = a;
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
    }
    let gamma = dot(&newest.s, &newest.y) / dot(&newest.y, &newest.y);
    let mut r: Vec<f64> = q.iter().map(|v| gamma * v).collect();
    for (k, pair) in history.pairs.iter().enumerate() {
        let b = pair.rho * dot(&pair.y, &r);
        for (ri, si) in r.iter_mut().zip(&pair.s) {
            *ri += (alphas[k] - b) * si;
        }
    }
    r.iter().map(|v| -v).collect()
}

/// `γ = sᵀy / yᵀy` of the newest pair: the average inverse curvature.
pub fn width_estimate(history: &History) -> Result<f64> {
    let p = history.pairs.back().ok_or(Error::MissingCurvature)?;
    Ok(dot(&p.s, &p.y) / dot(&p.y, &p.y))
}

/// Per-coordinate central-difference steps:
/// `max(√ε_mach (1 + |θ_i|), 10⁻³ w_i)`, the second term only when widths
/// are known.
pub fn fd_steps(theta: &[f64], widths: Option<&[f64]>) -> Vec<f64> {
    let root_eps = f64::EPSILON.sqrt();
    theta
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let base = root_eps * (1.0 + t.abs());
            match widths {
                Some(w) => base.max(1e-3 * w[i]),
                None => base,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub grads: Vec<Vec<f64>>,
    /// `flagged[n][i]` is set when a probe for entry `i` was non-finite; the
    /// entry itself is then 0.
    pub flagged: Vec<Vec<bool>>,
}

/// Central-difference gradients of `ℓ` at each point. All `2·N·d` probes go
/// out as one batch.
pub fn fd_gradient(problem: &Problem, points: &[Vec<f64>], steps: &[Vec<f64>]) -> FdGradient {
    let d = problem.dim();
    let mut probes = Vec::with_capacity(2 * d * points.len());
    for (p, h) in points.iter().zip(steps) {
        for i in 0..d {
            let mut plus = p.clone();
            plus[i] += h[i];
            let mut minus = p.clone();
            minus[i] -= h[i];
            probes.push(plus);
            probes.push(minus);
        }
    }
    let values = problem.evaluate_batch(&probes);
    let mut grads = Vec::with_capacity(points.len());
    let mut flagged = Vec::with_capacity(points.len());
    for (n, h) in steps.iter().enumerate() {
        let mut g = vec![0.0; d];
        let mut f = vec![false; d];
        for i in 0..d {
            let lp = values[2 * (n * d + i)];
            let lm = values[2 * (n * d + i) + 1];
            if lp.is_finite() && lm.is_finite() {
                g[i] = (lp - lm) / (2.0 * h[i]);
            } else {
                f[i] = true;
            }
        }
        grads.push(g);
        flagged.push(f);
    }
    FdGradient { grads, flagged }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Active,
    Converged,
    /// Line search failed twice in a row.
    Stalled,
    /// Non-finite log-likelihood at the start position.
    Failed,
}

/// Positions, log-likelihoods, gradients and curvature histories of a batch
/// of independent optimizations.
#[derive(Debug, Clone)]
pub struct BatchState {
    pub positions: Vec<Vec<f64>>,
    pub logls: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
    pub histories: Vec<History>,
    /// Frozen samples are neither moved nor evaluated.
    pub frozen: Vec<bool>,
    pub status: Vec<SampleStatus>,
    /// Width hints for finite-difference steps.
    pub widths: Vec<Option<Vec<f64>>>,
}

impl BatchState {
    /// Evaluates `ℓ` and gradients at `positions` (two batches).
    pub fn initialize(
        problem: &Problem,
        positions: Vec<Vec<f64>>,
        widths: Vec<Option<Vec<f64>>>,
        memory: usize,
    ) -> Self {
        let n = positions.len();
        let mut state = Self {
            logls: vec![f64::NEG_INFINITY; n],
            grads: vec![vec![0.0; problem.dim()]; n],
            histories: vec![History::new(memory); n],
            frozen: vec![false; n],
            status: vec![SampleStatus::Active; n],
            widths,
            positions,
        };
        let all: Vec<usize> = (0..n).collect();
        state.refresh(problem, &all);
        state
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Re-evaluates `ℓ` and gradients of the listed samples after their
    /// positions were changed externally; clears their histories.
    pub fn refresh(&mut self, problem: &Problem, idx: &[usize]) {
        if idx.is_empty() {
            return;
        }
        let pts: Vec<Vec<f64>> = idx.iter().map(|&i| self.positions[i].clone()).collect();
        let logls = problem.evaluate_batch(&pts);
        let live: Vec<usize> = idx
            .iter()
            .zip(&logls)
            .filter(|(_, l)| l.is_finite())
            .map(|(&i, _)| i)
            .collect();
        let live_pts: Vec<Vec<f64>> = live.iter().map(|&i| self.positions[i].clone()).collect();
        let steps: Vec<Vec<f64>> = live.iter().map(|&i| self.fd_steps_for(i)).collect();
        let g = fd_gradient(problem, &live_pts, &steps);
        for (&i, l) in idx.iter().zip(&logls) {
            self.histories[i].clear();
            if l.is_finite() {
                self.logls[i] = *l;
                self.status[i] = SampleStatus::Active;
            } else {
                self.logls[i] = f64::NEG_INFINITY;
                self.status[i] = SampleStatus::Failed;
                self.frozen[i] = true;
                self.grads[i] = vec![0.0; problem.dim()];
            }
        }
        for (k, &i) in live.iter().enumerate() {
            self.grads[i] = g.grads[k].clone();
        }
    }

    fn fd_steps_for(&self, i: usize) -> Vec<f64> {
        fd_steps(&self.positions[i], self.widths[i].as_deref())
    }

    /// `‖∇ℓ‖∞` of sample `i`.
    pub fn grad_linf(&self, i: usize) -> f64 {
        norm_inf(&self.grads[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepConfig {
    pub n_iters: usize,
    pub tolerance_linf: f64,
    /// Scale the tolerance by `max(1, |ℓ|)`.
    pub relative: bool,
}

impl StepConfig {
    pub fn threshold(&self, logl: f64) -> f64 {
        if self.relative {
            self.tolerance_linf * logl.abs().max(1.0)
        } else {
            self.tolerance_linf
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub position: Vec<f64>,
    pub logl: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// Index of the peak this trajectory was seeded from.
    pub origin: Option<usize>,
}

/// Visited positions per optimized sample, in visit order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrajectoryBank {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectoryBank {
    /// Starts one trajectory per sample at its current position.
    pub fn from_state(state: &BatchState, origins: &[Option<usize>]) -> Self {
        Self {
            trajectories: (0..state.len())
                .map(|i| Trajectory {
                    points: if state.logls[i].is_finite() {
                        vec![TrajectoryPoint {
                            position: state.positions[i].clone(),
                            logl: state.logls[i],
                            grad: state.grads[i].clone(),
                        }]
                    } else {
                        vec![]
                    },
                    origin: origins.get(i).copied().flatten(),
                })
                .collect(),
        }
    }

    pub fn extend(&mut self, delta: Vec<Vec<TrajectoryPoint>>) {
        for (t, d) in self.trajectories.iter_mut().zip(delta) {
            t.points.extend(d);
        }
    }

    pub fn total_points(&self) -> usize {
        self.trajectories.iter().map(|t| t.points.len()).sum()
    }
}

/// Zeroes direction components that would leave the box from a face the
/// point already sits on.
fn project_at_faces(p: &mut [f64], x: &[f64], bounds: &BoundsBox) {
    for i in 0..p.len() {
        if (x[i] <= bounds.lower()[i] && p[i] < 0.0) || (x[i] >= bounds.upper()[i] && p[i] > 0.0) {
            p[i] = 0.0;
        }
    }
}

/// Largest `t ≤ 1` keeping `x + t p` inside the box.
fn max_feasible_step(p: &[f64], x: &[f64], bounds: &BoundsBox) -> f64 {
    let mut t: f64 = 1.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            t = t.min((bounds.upper()[i] - x[i]) / p[i]);
        } else if p[i] < 0.0 {
            t = t.min((bounds.lower()[i] - x[i]) / p[i]);
        }
    }
    t.max(0.0)
}

struct Search {
    sample: usize,
    direction: Vec<f64>,
    slope: f64,
    step: f64,
    tries: usize,
}

/// Up to `n_iters` ascent iterations per unfrozen sample. Line-search
/// candidates of all samples are evaluated together in each backtracking
/// round; gradients at accepted points go out as one batch per iteration.
pub fn step_batch(
    state: &mut BatchState,
    problem: &Problem,
    cfg: &StepConfig,
    lcfg: &LbfgsConfig,
) -> Vec<Vec<TrajectoryPoint>> {
    let n = state.len();
    let bounds = problem.bounds().clone();
    let first_cap = lcfg.first_step_fraction * bounds.mean_width();
    let mut delta: Vec<Vec<TrajectoryPoint>> = vec![vec![]; n];
    let mut failures = vec![0usize; n];

    for i in 0..n {
        if state.status[i] == SampleStatus::Stalled || state.status[i] == SampleStatus::Converged {
            state.status[i] = SampleStatus::Active;
        }
    }

    for _ in 0..cfg.n_iters {
        let mut searches = vec![];
        for i in 0..n {
            if state.frozen[i] || state.status[i] != SampleStatus::Active {
                continue;
            }
            if state.grad_linf(i) < cfg.threshold(state.logls[i]) {
                state.status[i] = SampleStatus::Converged;
                continue;
            }
            let x = &state.positions[i];
            let g = &state.grads[i];
            let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
            let mut p = two_loop_direction(&neg_g, &state.histories[i]);
            project_at_faces(&mut p, x, &bounds);
            let mut slope = dot(g, &p);
            if !(slope > 0.0) || state.histories[i].is_empty() {
                state.histories[i].clear();
                p = g.clone();
                project_at_faces(&mut p, x, &bounds);
                let m = norm_inf(&p);
                if m > first_cap {
                    for v in p.iter_mut() {
                        *v *= first_cap / m;
                    }
                }
                slope = dot(g, &p);
            }
            if !(slope > 0.0) {
                state.status[i] = SampleStatus::Stalled;
                continue;
            }
            let step = max_feasible_step(&p, x, &bounds);
            if step <= 0.0 {
                state.status[i] = SampleStatus::Stalled;
                continue;
            }
            searches.push(Search {
                sample: i,
                direction: p,
                slope,
                step,
                tries: 0,
            });
        }
        if searches.is_empty() {
            break;
        }

        let mut accepted: Vec<(usize, Vec<f64>, f64)> = vec![];
        while !searches.is_empty() {
            let candidates: Vec<Vec<f64>> = searches
                .iter()
                .map(|s| {
                    let x = &state.positions[s.sample];
                    let mut c: Vec<f64> = x
                        .iter()
                        .zip(&s.direction)
                        .map(|(a, b)| a + s.step * b)
                        .collect();
                    bounds.clip(&mut c);
                    c
                })
                .collect();
            let values = problem.evaluate_batch(&candidates);
            let mut next = vec![];
            for ((mut s, c), v) in searches.into_iter().zip(candidates).zip(values) {
                let l0 = state.logls[s.sample];
                if v.is_finite() && v >= l0 + lcfg.armijo * s.step * s.slope {
                    accepted.push((s.sample, c, v));
                } else if s.tries < lcfg.max_backtracks {
                    s.tries += 1;
                    s.step *= lcfg.shrink;
                    next.push(s);
                } else {
                    let i = s.sample;
                    failures[i] += 1;
                    if state.histories[i].is_empty() || failures[i] >= 2 {
                        state.status[i] = SampleStatus::Stalled;
                    }
                    state.histories[i].clear();
                }
            }
            searches = next;
        }
        if accepted.is_empty() {
            continue;
        }

        let pts: Vec<Vec<f64>> = accepted.iter().map(|(_, c, _)| c.clone()).collect();
        let steps: Vec<Vec<f64>> = accepted
            .iter()
            .map(|(i, c, _)| fd_steps(c, state.widths[*i].as_deref()))
            .collect();
        let g = fd_gradient(problem, &pts, &steps);
        for ((i, c, v), g_new) in accepted.into_iter().zip(g.grads) {
            let s: Vec<f64> = c
                .iter()
                .zip(&state.positions[i])
                .map(|(a, b)| a - b)
                .collect();
            // y for f = -ℓ
            let y: Vec<f64> = state.grads[i]
                .iter()
                .zip(&g_new)
                .map(|(a, b)| a - b)
                .collect();
            state.histories[i].push(s, y, lcfg.curvature_eps);
            failures[i] = 0;
            state.positions[i] = c.clone();
            state.logls[i] = v;
            state.grads[i] = g_new.clone();
            delta[i].push(TrajectoryPoint {
                position: c,
                logl: v,
                grad: g_new,
            });
        }
    }
    for i in 0..n {
        if !state.frozen[i]
            && state.status[i] == SampleStatus::Active
            && state.grad_linf(i) < cfg.threshold(state.logls[i])
        {
            state.status[i] = SampleStatus::Converged;
        }
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::BoundsBox;

    fn quadratic(dim: usize) -> Problem {
        Problem::from_fn("q", BoundsBox::cube(dim, -10.0, 10.0).unwrap(), |x| {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        })
        .unwrap()
    }

    #[test]
    fn gradient_of_quadratic() {
        let p = quadratic(2);
        let x = vec![1.0, 0.0];
        let g = fd_gradient(&p, std::slice::from_ref(&x), &[fd_steps(&x, None)]);
        assert!((g.grads[0][0] + 1.0).abs() < 1e-7);
        assert!(g.grads[0][1].abs() < 1e-12);
        assert_eq!(p.eval_count(), 4);
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let p = Problem::from_fn("c", BoundsBox::cube(3, -1.0, 1.0).unwrap(), |_| 2.5).unwrap();
        let g = fd_gradient(&p, &[vec![0.1, 0.2, 0.3]], &[vec![1e-3; 3]]);
        assert_eq!(g.grads[0], vec![0.0; 3]);
    }

    #[test]
    fn gradient_of_quartic() {
        let p = Problem::from_fn("c", BoundsBox::cube(1, -2.0, 2.0).unwrap(), |x| {
            -x[0].powi(4)
        })
        .unwrap();
        let g = fd_gradient(&p, &[vec![1.0]], &[vec![1e-4]]);
        assert!((g.grads[0][0] + 4.0).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_probe_is_flagged() {
        let p = Problem::from_fn("c", BoundsBox::cube(2, -1.0, 1.0).unwrap(), |x| {
            if x[0] > 0.5 {
                f64::NEG_INFINITY
            } else {
                x[1]
            }
        })
        .unwrap();
        let g = fd_gradient(&p, &[vec![0.5, 0.0]], &[vec![1e-3, 1e-3]]);
        assert_eq!(g.flagged[0], vec![true, false]);
        assert_eq!(g.grads[0][0], 0.0);
        assert!((g.grads[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_history_gives_negative_gradient() {
        let h = History::new(10);
        assert_eq!(two_loop_direction(&[1.0, -2.0], &h), vec![-1.0, 2.0]);
    }

    #[test]
    fn single_identity_pair_with_orthogonal_gradient() {
        let mut h = History::new(10);
        assert!(h.push(vec![1.0, 0.0], vec![1.0, 0.0], 1e-12));
        assert_eq!(width_estimate(&h).unwrap(), 1.0);
        assert_eq!(two_loop_direction(&[0.0, 3.0], &h), vec![0.0, -3.0]);
    }

    #[test]
    fn conjugate_pairs_recover_newton_step() {
        // f = ½ xᵀAx; with d A-conjugate pairs the two-loop matrix is A⁻¹.
        let a = [[3.0, 1.0], [1.0, 2.0]];
        let mul = |v: &[f64]| {
            vec![
                a[0][0] * v[0] + a[0][1] * v[1],
                a[1][0] * v[0] + a[1][1] * v[1],
            ]
        };
        let s1 = vec![1.0, 0.0];
        let as1 = mul(&s1);
        // s2 ⟂_A s1
        let s2 = vec![-as1[1], as1[0]];
        let mut h = History::new(10);
        assert!(h.push(s1.clone(), mul(&s1), 1e-12));
        assert!(h.push(s2.clone(), mul(&s2), 1e-12));
        let g = vec![0.7, -1.3];
        let p = two_loop_direction(&g, &h);
        let ap = mul(&p);
        assert!(
            (ap[0] + g[0]).abs() < 1e-8 && (ap[1] + g[1]).abs() < 1e-8,
            "{ap:?}"
        );
    }

    #[test]
    fn width_estimates() {
        let mut h = History::new(10);
        assert!(matches!(width_estimate(&h), Err(Error::MissingCurvature)));
        h.push(vec![0.4], vec![0.1], 1e-12);
        assert_eq!(width_estimate(&h).unwrap(), 4.0);
    }

    #[test]
    fn curvature_violation_is_discarded() {
        let mut h = History::new(2);
        assert!(!h.push(vec![1.0, 0.0], vec![-1.0, 0.0], 1e-12));
        assert!(!h.push(vec![1.0, 0.0], vec![0.0, 1.0], 1e-12));
        assert!(h.is_empty());
        h.push(vec![1.0], vec![1.0], 1e-12);
        h.push(vec![2.0], vec![1.0], 1e-12);
        h.push(vec![3.0], vec![1.0], 1e-12);
        assert_eq!(h.len(), 2);
        assert_eq!(width_estimate(&h).unwrap(), 3.0);
    }

    #[test]
    fn batch_converges_on_isotropic_gaussian() {
        use rand::{Rng, SeedableRng};
        let p = quadratic(4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let seeds: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..4).map(|_| rng.random_range(-9.0..9.0)).collect())
            .collect();
        let mut st = BatchState::initialize(&p, seeds, vec![None; 64], 10);
        let cfg = StepConfig {
            n_iters: 20,
            tolerance_linf: 1e-12,
            relative: false,
        };
        step_batch(&mut st, &p, &cfg, &LbfgsConfig::default());
        for x in &st.positions {
            assert!(norm_inf(x) < 1e-8, "{x:?}");
        }
    }

    #[test]
    fn converged_and_frozen_samples_do_not_move() {
        let p = quadratic(2);
        let mut st = BatchState::initialize(
            &p,
            vec![vec![0.0, 0.0], vec![3.0, 1.0]],
            vec![None, None],
            10,
        );
        st.frozen[1] = true;
        let before = p.eval_count();
        let cfg = StepConfig {
            n_iters: 5,
            tolerance_linf: 1e-6,
            relative: false,
        };
        let delta = step_batch(&mut st, &p, &cfg, &LbfgsConfig::default());
        assert_eq!(st.positions[0], vec![0.0, 0.0]);
        assert_eq!(st.positions[1], vec![3.0, 1.0]);
        assert!(delta.iter().all(|d| d.is_empty()));
        assert_eq!(p.eval_count(), before);
    }

    #[test]
    fn infinite_start_is_frozen() {
        let p = Problem::from_fn("c", BoundsBox::cube(1, -1.0, 1.0).unwrap(), |x| {
            if x[0] > 0.0 {
                f64::NEG_INFINITY
            } else {
                -x[0] * x[0]
            }
        })
        .unwrap();
        let st = BatchState::initialize(&p, vec![vec![0.5], vec![-0.5]], vec![None, None], 10);
        assert_eq!(st.status[0], SampleStatus::Failed);
        assert!(st.frozen[0]);
        assert_eq!(st.status[1], SampleStatus::Active);
    }
}
