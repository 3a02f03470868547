//! Flat and soft-nuisance dimension detection from one batch of 2d+1 probes.

use serde::Serialize;

use crate::density::Problem;
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecheckConfig {
    pub eps_flat: f64,
    pub eps_soft: f64,
    /// Credit flat dimensions with `log Δ_i` (half-width) instead of the
    /// full width.
    pub half_width_flat: bool,
}

impl Default for PrecheckConfig {
    fn default() -> Self {
        Self {
            eps_flat: 1e-6,
            eps_soft: 1e-3,
            half_width_flat: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecheckReport {
    /// `s_i`, in nats.
    pub sensitivities: Vec<f64>,
    pub flat_dims: Vec<usize>,
    pub soft_dims: Vec<usize>,
    pub active_dims: Vec<usize>,
    pub log_z_marginal: f64,
    pub center_logl: f64,
}

/// Lower median (element `(n-1)/2` of the sorted values).
fn lower_median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Classifies dimensions from sensitivities. Exposed separately so the
/// thresholds can be checked without a likelihood.
pub fn classify(s: &[f64], eps_flat: f64, eps_soft: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let median = lower_median(s);
    let max = s.iter().copied().fold(0.0, f64::max);
    let mut flat = vec![];
    let mut soft = vec![];
    let mut active = vec![];
    for (i, &si) in s.iter().enumerate() {
        // Exactly zero sensitivity is flat even when the lower median is 0.
        if si < eps_flat * median || si == 0.0 {
            flat.push(i);
        } else if si < eps_soft * max {
            soft.push(i);
        } else {
            active.push(i);
        }
    }
    (flat, soft, active)
}

pub fn run_precheck(problem: &Problem, config: &PrecheckConfig) -> Result<PrecheckReport> {
    if !(config.eps_flat > 0.0 && config.eps_flat < config.eps_soft) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < eps_flat < eps_soft, got {} and {}",
            config.eps_flat, config.eps_soft
        )));
    }
    let bounds = problem.bounds();
    let d = problem.dim();
    let center = bounds.center();
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(center.clone());
    for i in 0..d {
        let half = 0.5 * bounds.width(i);
        let mut plus = center.clone();
        plus[i] += half;
        let mut minus = center.clone();
        minus[i] -= half;
        points.push(plus);
        points.push(minus);
    }
    let values = problem.evaluate_batch(&points);
    let l0 = values[0];
    if !l0.is_finite() {
        return Err(Error::CenterEvaluation(l0));
    }
    // A non-finite probe means the likelihood collapses towards that face:
    // as sensitive as it gets.
    let s: Vec<f64> = (0..d)
        .map(|i| {
            let diff = |v: f64| {
                if v.is_finite() {
                    (v - l0).abs()
                } else {
                    f64::INFINITY
                }
            };
            diff(values[1 + 2 * i]) + diff(values[2 + 2 * i])
        })
        .collect();
    if s.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateProblem);
    }
    let (flat_dims, soft_dims, active_dims) = classify(&s, config.eps_flat, config.eps_soft);

    let mut log_z_marginal = 0.0;
    for &i in &flat_dims {
        let width = bounds.width(i);
        log_z_marginal += if config.half_width_flat {
            (0.5 * width).ln()
        } else {
            width.ln()
        };
    }
    for &i in &soft_dims {
        let half = 0.5 * bounds.width(i);
        log_z_marginal += HALF_LN_2PI + (half / s[i].sqrt()).ln();
    }
    Ok(PrecheckReport {
        sensitivities: s,
        flat_dims,
        soft_dims,
        active_dims,
        log_z_marginal,
        center_logl: l0,
    })
}
