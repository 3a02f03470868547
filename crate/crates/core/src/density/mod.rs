//! Log-likelihood interface, uniform box prior and the analytic test suite.

mod suite;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

pub use suite::*;

/// Axis-aligned prior support `∏ [lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoundsBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidParameter(
                "bounds must be non-empty and of equal length".into(),
            ));
        }
        for (i, (a, b)) in lower.iter().zip(&upper).enumerate() {
            if !(b > a) || !(b - a).is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "bounds[{i}] = [{a}, {b}] is empty or unbounded"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| b - a)
            .collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn mean_width(&self) -> f64 {
        self.widths().iter().sum::<f64>() / self.dim() as f64
    }

    pub fn log_volume(&self) -> f64 {
        self.widths().iter().map(|w| w.ln()).sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (v, (a, b)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*a, *b);
        }
    }

    /// Smallest distance from `x` to any face, relative to that face's width.
    pub fn relative_face_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| ((v - self.lower[i]).min(self.upper[i] - v)) / self.width(i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Keeps only the listed coordinates.
    pub fn select(&self, dims: &[usize]) -> Result<Self> {
        Self::new(
            dims.iter().map(|&i| self.lower[i]).collect(),
            dims.iter().map(|&i| self.upper[i]).collect(),
        )
    }

    /// Length of the chord through `p` along unit direction `u`.
    pub fn chord_length(&self, p: &[f64], u: &[f64]) -> f64 {
        let (lo, hi) = self.chord_range(p, u);
        hi - lo
    }

    /// Parameter range `[t_lo, t_hi]` with `p + t·u` inside the box.
    pub fn chord_range(&self, p: &[f64], u: &[f64]) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..self.dim() {
            if u[i].abs() < 1e-300 {
                continue;
            }
            let t1 = (self.lower[i] - p[i]) / u[i];
            let t2 = (self.upper[i] - p[i]) / u[i];
            lo = lo.max(t1.min(t2));
            hi = hi.min(t1.max(t2));
        }
        (lo, hi.max(lo))
    }
}

/// A log-likelihood `ℓ(θ)`. Must be pure and safe to call concurrently.
/// Non-finite values are allowed.
pub trait LogDensity: Send + Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, theta: &[f64]) -> f64;
}

/// Bounded problem: log-likelihood, prior box and a shared evaluation tally.
#[derive(Clone)]
pub struct Problem {
    name: String,
    bounds: BoundsBox,
    density: Arc<dyn LogDensity>,
    evals: Arc<AtomicU64>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("evals", &self.eval_count())
            .finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        bounds: BoundsBox,
        density: Arc<dyn LogDensity>,
    ) -> Result<Self> {
        if density.dim() != bounds.dim() {
            return Err(Error::InvalidParameter(format!(
                "density has dimension {} but bounds have {}",
                density.dim(),
                bounds.dim()
            )));
        }
        Ok(Self {
            name: name.into(),
            bounds,
            density,
            evals: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn from_fn(
        name: impl Into<String>,
        bounds: BoundsBox,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let dim = bounds.dim();
        Self::new(name, bounds, Arc::new(FnDensity { dim, f }))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn bounds(&self) -> &BoundsBox {
        &self.bounds
    }

    pub fn density(&self) -> &Arc<dyn LogDensity> {
        &self.density
    }

    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    /// Evaluates a batch of points in parallel. Output order matches input
    /// order regardless of scheduling.
    pub fn evaluate_batch(&self, points: &[Vec<f64>]) -> Vec<f64> {
        self.evals.fetch_add(points.len() as u64, Ordering::Relaxed);
        let density = &*self.density;
        points
            .par_iter()
            .with_min_len(16)
            .map(|p| density.log_density(p))
            .collect()
    }

    pub fn evaluate(&self, point: &[f64]) -> f64 {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.density.log_density(point)
    }

    /// Sub-problem over `active` coordinates with the remaining ones held at
    /// `anchor`. Shares this problem's evaluation counter.
    pub fn restrict(&self, active: &[usize], anchor: &[f64]) -> Result<Problem> {
        if anchor.len() != self.dim() {
            return Err(Error::InvalidParameter("anchor has wrong length".into()));
        }
        if active.is_empty() {
            return Err(Error::InvalidParameter("no active dimensions".into()));
        }
        Ok(Problem {
            name: self.name.clone(),
            bounds: self.bounds.select(active)?,
            density: Arc::new(Restricted {
                inner: self.density.clone(),
                active: active.to_vec(),
                anchor: anchor.to_vec(),
            }),
            evals: self.evals.clone(),
        })
    }

    /// Copy with a fresh evaluation counter.
    pub fn fresh(&self) -> Problem {
        Problem {
            evals: Arc::new(AtomicU64::new(0)),
            ..self.clone()
        }
    }
}

struct FnDensity<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> LogDensity for FnDensity<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        (self.f)(theta)
    }
}

struct Restricted {
    inner: Arc<dyn LogDensity>,
    active: Vec<usize>,
    anchor: Vec<f64>,
}

impl LogDensity for Restricted {
    fn dim(&self) -> usize {
        self.active.len()
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        let mut full = self.anchor.clone();
        for (&i, &v) in self.active.iter().zip(theta) {
            full[i] = v;
        }
        self.inner.log_density(&full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Gaussian,
    Anisotropic,
    Rotated,
    Multimodal,
    HeavyTail,
    Saddle,
    Funnel,
}

/// Reference answer for a test function.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyticTarget {
    pub name: String,
    /// `log ∫ exp ℓ(θ) dθ` over ℝ^d (over the prior box for the periodic
    /// egg-box and along flat padding dimensions), in nats.
    pub true_log_integral: f64,
    pub known_modes: Vec<Vec<f64>>,
    pub tags: Vec<Tag>,
}

impl AnalyticTarget {
    pub fn has_tag(&self, tag: Tag) -> bool {
        self.tags.contains(&tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_validation() {
        assert!(BoundsBox::new(vec![0.0], vec![0.0]).is_err());
        assert!(BoundsBox::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(BoundsBox::new(vec![], vec![]).is_err());
        let b = BoundsBox::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        assert!((b.log_volume() - 6f64.ln()).abs() < 1e-15);
        assert_eq!(b.center(), vec![0.0, 1.5]);
    }

    #[test]
    fn chord_through_center() {
        let b = BoundsBox::cube(2, -1.0, 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.chord_length(&[0.0, 0.0], &[s, s]) - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        assert!((b.chord_length(&[0.5, 0.0], &[1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn counter_tracks_batches() {
        let p = Problem::from_fn("t", BoundsBox::cube(2, -1.0, 1.0).unwrap(), |x| x[0]).unwrap();
        p.evaluate_batch(&vec![vec![0.0, 0.0]; 7]);
        p.evaluate(&[0.1, 0.2]);
        p.evaluate_batch(&[]);
        assert_eq!(p.eval_count(), 8);
    }

    #[test]
    fn restriction_shares_counter() {
        let p = Problem::from_fn("t", BoundsBox::cube(3, -1.0, 1.0).unwrap(), |x| {
            x[0] + 10.0 * x[1] + 100.0 * x[2]
        })
        .unwrap();
        let sub = p.restrict(&[2], &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(sub.dim(), 1);
        assert_eq!(sub.evaluate(&[0.5]), 1.0 + 20.0 + 50.0);
        assert_eq!(p.eval_count(), 1);
    }
}
