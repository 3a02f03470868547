//! Dimensional reduction from the eigenstructure of the negative Hessian at a
//! mode. Informative directions stay in a compact reduced likelihood; weak
//! ones are marginalized as Gaussians; flat ones contribute their chord
//! length through the box.

use std::sync::Arc;

use serde::Serialize;

use crate::density::{BoundsBox, LogDensity, Problem};
use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReductionConfig {
    /// Informative threshold as a fraction of the largest eigenvalue.
    pub eps_inform: f64,
    /// Nuisance threshold as a fraction of the largest eigenvalue.
    pub eps_nuisance: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            eps_inform: 1e-6,
            eps_nuisance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionReport {
    /// `rotation[k]` is the unit eigenvector for `eigenvalues[k]`.
    pub rotation: Vec<Vec<f64>>,
    /// Eigenvalues of `-H`, ascending.
    pub eigenvalues: Vec<f64>,
    pub informative: Vec<usize>,
    pub nuisance: Vec<usize>,
    pub degenerate: Vec<usize>,
    pub d_eff: usize,
    pub log_z_nuisance: f64,
    pub log_z_degen: f64,
    pub eps_inform: f64,
    pub eps_nuisance: f64,
    /// Bounds of the reduced coordinates: chord ranges through the mode.
    pub reduced_lower: Vec<f64>,
    pub reduced_upper: Vec<f64>,
}

struct ReducedDensity {
    inner: Arc<dyn LogDensity>,
    anchor: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

impl LogDensity for ReducedDensity {
    fn dim(&self) -> usize {
        self.basis.len()
    }
    fn log_density(&self, phi: &[f64]) -> f64 {
        let mut theta = self.anchor.clone();
        for (v, p) in self.basis.iter().zip(phi) {
            for (t, vi) in theta.iter_mut().zip(v) {
                *t += p * vi;
            }
        }
        self.inner.log_density(&theta)
    }
}

/// Classifies eigen-directions of `-hessian` with absolute thresholds and
/// builds `φ ↦ ℓ(θ* + V_info φ)`. Returns `None` for the reduced problem when
/// no direction is informative.
pub fn reduce(
    problem: &Problem,
    location: &[f64],
    hessian: &SymMatrix,
    eps_inform: f64,
    eps_nuisance: f64,
) -> Result<(ReductionReport, Option<Problem>)> {
    if !(eps_nuisance > 0.0 && eps_nuisance < eps_inform) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < eps_nuisance < eps_inform, got {eps_nuisance} and {eps_inform}"
        )));
    }
    let d = problem.dim();
    if hessian.dim() != d || location.len() != d {
        return Err(Error::InvalidParameter(
            "hessian and location must match the problem".into(),
        ));
    }
    let eig = linalg::eig_symmetric(&hessian.scaled(-1.0))?;
    let bounds = problem.bounds();
    let mut informative = vec![];
    let mut nuisance = vec![];
    let mut degenerate = vec![];
    let mut log_z_nuisance = 0.0;
    let mut log_z_degen = 0.0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -eps_nuisance {
            return Err(Error::SaddleDirection {
                index: k,
                value: lam,
            });
        }
        if lam > eps_inform {
            informative.push(k);
        } else if lam > eps_nuisance {
            nuisance.push(k);
            log_z_nuisance += HALF_LN_2PI - 0.5 * lam.ln();
        } else {
            degenerate.push(k);
            log_z_degen += bounds.chord_length(location, &eig.eigenvectors[k]).ln();
        }
    }
    let basis: Vec<Vec<f64>> = informative
        .iter()
        .map(|&k| eig.eigenvectors[k].clone())
        .collect();
    let (reduced_lower, reduced_upper): (Vec<f64>, Vec<f64>) = basis
        .iter()
        .map(|v| bounds.chord_range(location, v))
        .unzip();
    let reduced = if basis.is_empty() {
        None
    } else {
        let rb = BoundsBox::new(reduced_lower.clone(), reduced_upper.clone())?;
        Some(Problem::new(
            format!("{}-reduced", problem.name()),
            rb,
            Arc::new(ReducedDensity {
                inner: problem.density().clone(),
                anchor: location.to_vec(),
                basis: basis.clone(),
            }),
        )?)
    };
    let report = ReductionReport {
        d_eff: informative.len(),
        rotation: eig.eigenvectors,
        eigenvalues: eig.eigenvalues,
        informative,
        nuisance,
        degenerate,
        log_z_nuisance,
        log_z_degen,
        eps_inform,
        eps_nuisance,
        reduced_lower,
        reduced_upper,
    };
    Ok((report, reduced))
}

/// As [`reduce`], with thresholds relative to the largest eigenvalue of `-H`.
pub fn reduce_relative(
    problem: &Problem,
    location: &[f64],
    hessian: &SymMatrix,
    config: &ReductionConfig,
) -> Result<(ReductionReport, Option<Problem>)> {
    let eig = linalg::eig_symmetric(&hessian.scaled(-1.0))?;
    let lmax = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return Err(Error::SaddleDirection {
            index: eig.eigenvalues.len().saturating_sub(1),
            value: lmax,
        });
    }
    reduce(
        problem,
        location,
        hessian,
        config.eps_inform * lmax,
        config.eps_nuisance * lmax,
    )
}
