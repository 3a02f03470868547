//! End-to-end evidence computation: precheck, discovery, refinement,
//! Laplace evidence, diagnostics and optional reduction.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::density::Problem;
use crate::discovery::{self, DiscoveryConfig, RayBankSummary, ScaleEstimate};
use crate::error::{Error, Result, Stage};
use crate::laplace::{
    self, HessianChoice, HessianKind, LaplaceConfig, PerpReference, RotationVerdict,
};
use crate::lbfgs::LbfgsConfig;
use crate::linalg::SymMatrix;
use crate::precheck::{self, PrecheckConfig, PrecheckReport};
use crate::reduce::{self, ReductionConfig, ReductionReport};
use crate::refine::{self, RefineConfig, SeedMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fast,
    Slow,
    Conservative,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Fast, Preset::Slow, Preset::Conservative];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fast => "fast",
            Preset::Slow => "slow",
            Preset::Conservative => "conservative",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Preset::Fast),
            "slow" => Ok(Preset::Slow),
            "conservative" => Ok(Preset::Conservative),
            other => Err(Error::InvalidParameter(format!(
                "unknown preset `{other}` (expected fast, slow or conservative)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub n_oscillations: usize,
    pub fast_refine: bool,

    pub stick_grad: f64,
    pub refine_grad: f64,
    pub grad_filter: f64,
    pub eps_flat: f64,
    pub eps_soft: f64,
    pub eps_rot: f64,
    pub eps_rot_low: f64,
    pub probe_threshold: f64,
    pub dedup_radius: f64,

    pub n_coarse: usize,
    pub delta: f64,
    pub n_converge: usize,
    pub n_anticonverge: usize,
    pub n_cloud: usize,
    pub k_smooth: usize,
    pub lbfgs_memory: usize,
    pub random_probes: usize,

    pub half_width_flat: bool,
    pub hessian: HessianChoice,
    pub perp_reference: PerpReference,
    pub reduce: bool,
    pub reduction: ReductionConfig,
    /// Record per-stage wall time. Off by default so results are
    /// byte-for-byte reproducible.
    pub timing: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Conservative, 0)
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let d = DiscoveryConfig::default();
        let r = RefineConfig::default();
        let l = LaplaceConfig::default();
        let p = PrecheckConfig::default();
        let (n_oscillations, fast_refine) = match preset {
            Preset::Fast => (1, true),
            Preset::Slow => (1, false),
            Preset::Conservative => (3, false),
        };
        Self {
            preset: Some(preset),
            seed,
            n_oscillations,
            fast_refine,
            stick_grad: d.stick_grad,
            refine_grad: r.tolerance,
            grad_filter: r.grad_filter,
            eps_flat: p.eps_flat,
            eps_soft: p.eps_soft,
            eps_rot: l.eps_rot,
            eps_rot_low: l.eps_rot_low,
            probe_threshold: l.probe_threshold,
            dedup_radius: d.dedup_radius,
            n_coarse: d.n_coarse,
            delta: d.delta,
            n_converge: d.n_converge,
            n_anticonverge: d.n_anticonverge,
            n_cloud: d.n_cloud,
            k_smooth: d.k_smooth,
            lbfgs_memory: LbfgsConfig::default().memory,
            random_probes: l.random_probes,
            half_width_flat: p.half_width_flat,
            hessian: l.hessian,
            perp_reference: l.reference,
            reduce: false,
            reduction: ReductionConfig::default(),
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stick_grad", self.stick_grad),
            ("refine_grad", self.refine_grad),
            ("grad_filter", self.grad_filter),
            ("eps_flat", self.eps_flat),
            ("eps_soft", self.eps_soft),
            ("eps_rot", self.eps_rot),
            ("eps_rot_low", self.eps_rot_low),
            ("probe_threshold", self.probe_threshold),
            ("dedup_radius", self.dedup_radius),
            ("delta", self.delta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.n_oscillations == 0 {
            return Err(Error::InvalidParameter("n_oscillations must be ≥ 1".into()));
        }
        if self.lbfgs_memory == 0 || self.n_converge == 0 || self.k_smooth == 0 {
            return Err(Error::InvalidParameter("budgets must be positive".into()));
        }
        if self.eps_rot_low > self.eps_rot {
            return Err(Error::InvalidParameter(
                "eps_rot_low must not exceed eps_rot".into(),
            ));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: self.lbfgs_memory,
            ..Default::default()
        }
    }

    pub fn precheck_config(&self) -> PrecheckConfig {
        PrecheckConfig {
            eps_flat: self.eps_flat,
            eps_soft: self.eps_soft,
            half_width_flat: self.half_width_flat,
        }
    }

    pub fn discovery_config(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            n_coarse: self.n_coarse,
            delta: self.delta,
            n_oscillations: self.n_oscillations,
            n_converge: self.n_converge,
            n_anticonverge: self.n_anticonverge,
            n_cloud: self.n_cloud,
            k_smooth: self.k_smooth,
            stick_grad: self.stick_grad,
            dedup_radius: self.dedup_radius,
            lbfgs: self.lbfgs(),
            ..Default::default()
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            mode: if self.fast_refine {
                SeedMode::Fast
            } else {
                SeedMode::Default
            },
            tolerance: self.refine_grad,
            grad_filter: self.grad_filter,
            dedup_radius: self.dedup_radius,
            lbfgs: self.lbfgs(),
        }
    }

    pub fn laplace_config(&self) -> LaplaceConfig {
        LaplaceConfig {
            eps_rot: self.eps_rot,
            eps_rot_low: self.eps_rot_low,
            probe_threshold: self.probe_threshold,
            random_probes: self.random_probes,
            reference: self.perp_reference,
            hessian: self.hessian,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub precheck: u64,
    pub discovery: u64,
    pub refinement: u64,
    pub evidence: u64,
    pub diagnostics: u64,
    pub reduction: u64,
    pub total: u64,
}

impl EvalCounts {
    pub fn stage_sum(&self) -> u64 {
        self.precheck
            + self.discovery
            + self.refinement
            + self.evidence
            + self.diagnostics
            + self.reduction
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub precheck_ms: f64,
    pub discovery_ms: f64,
    pub refinement_ms: f64,
    pub evidence_ms: f64,
    pub diagnostics_ms: f64,
    pub reduction_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    /// Full-dimensional location; inactive coordinates sit at the box center.
    pub location: Vec<f64>,
    pub logl: f64,
    pub log_z: f64,
    pub hessian_kind: HessianKind,
    pub log_det_neg_h: f64,
    pub condition_number: f64,
    pub rotation: RotationVerdict,
    /// Mean ratio of observed to Gaussian-predicted drop at ±3σ.
    pub tail_ratio: Option<f64>,
    pub on_boundary: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscoverySummary {
    pub scales: ScaleEstimate,
    pub n_seeds: usize,
    pub coarse_peaks: usize,
    pub peak_counts: Vec<usize>,
    pub raybank: RayBankSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvidenceResult {
    pub problem: String,
    pub dim: usize,
    pub active_dim: usize,
    pub log_z: f64,
    pub log_z_vs_prior: f64,
    pub modes: Vec<ModeReport>,
    pub precheck: PrecheckReport,
    pub discovery: DiscoverySummary,
    pub refinement_rejections: usize,
    pub eval_counts: EvalCounts,
    pub warnings: Vec<String>,
    pub unreliable: bool,
    pub reduction: Option<ReductionReport>,
    pub config_echo: PipelineConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl EvidenceResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

pub const WARN_HEAVY_TAIL: &str = "heavy-tail geometry detected";
pub const WARN_SADDLE: &str = "saddle-dominated geometry";
pub const WARN_BOUNDARY: &str = "mode on prior boundary";
pub const WARN_ILL_CONDITIONED: &str = "ill-conditioned mode";

const TAIL_RATIO: f64 = 0.8;
const BOUNDARY_FRACTION: f64 = 1e-3;
const MAX_CONDITION: f64 = 1e8;

fn stream(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Mean of `(ℓ* - ℓ(θ* ± 3σ_i e_i)) / 4.5` over axis probes inside the box.
fn tail_ratio(problem: &Problem, location: &[f64], logl: f64, width: &[f64]) -> Option<f64> {
    let bounds = problem.bounds();
    let mut pts = vec![];
    for i in 0..location.len() {
        for sign in [1.0, -1.0] {
            let mut p = location.to_vec();
            p[i] += sign * 3.0 * width[i];
            if bounds.contains(&p) {
                pts.push(p);
            }
        }
    }
    if pts.is_empty() {
        return None;
    }
    let vals = problem.evaluate_batch(&pts);
    let ratios: Vec<f64> = vals
        .iter()
        .map(|v| (logl - v) / 4.5)
        .filter(|r| r.is_finite())
        .collect();
    if ratios.is_empty() {
        return None;
    }
    Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn push_unique(warnings: &mut Vec<String>, w: &str) {
    if !warnings.iter().any(|x| x == w) {
        warnings.push(w.to_string());
    }
}

pub fn run(problem: &Problem, config: &PipelineConfig) -> Result<EvidenceResult> {
    config.validate()?;
    let start_count = problem.eval_count();
    let mut counts = EvalCounts::default();
    let mut timing = Timing::default();
    let mut mark = problem.eval_count();
    let mut clock = Instant::now();
    let lap =
        |counts_field: &mut u64, time_field: &mut f64, mark: &mut u64, clock: &mut Instant| {
            let now = problem.eval_count();
            *counts_field += now - *mark;
            *mark = now;
            *time_field += clock.elapsed().as_secs_f64() * 1e3;
            *clock = Instant::now();
        };
    let mut warnings: Vec<String> = vec![];
    let mut unreliable = false;

    let pre = precheck::run_precheck(problem, &config.precheck_config())
        .map_err(|e| e.at(Stage::Precheck))?;
    lap(
        &mut counts.precheck,
        &mut timing.precheck_ms,
        &mut mark,
        &mut clock,
    );

    let center = problem.bounds().center();
    let active = if pre.active_dims.len() == problem.dim() {
        problem.clone()
    } else {
        problem
            .restrict(&pre.active_dims, &center)
            .map_err(|e| e.at(Stage::Precheck))?
    };

    let disc = discovery::discover(&active, &config.discovery_config(), config.seed)
        .map_err(|e| e.at(Stage::Discovery))?;
    warnings.extend(disc.warnings.iter().cloned());
    lap(
        &mut counts.discovery,
        &mut timing.discovery_ms,
        &mut mark,
        &mut clock,
    );

    let mut rng = stream(config.seed, 2);
    let refined = refine::refine(
        &active,
        &disc.peaks,
        disc.scales.lambda_fine,
        &config.refine_config(),
        &mut rng,
    )
    .map_err(|e| e.at(Stage::Refinement))?;
    lap(
        &mut counts.refinement,
        &mut timing.refinement_ms,
        &mut mark,
        &mut clock,
    );

    let lcfg = config.laplace_config();
    let mut evidences = vec![];
    let mut rejected = vec![];
    for (k, peak) in refined.peaks.iter().enumerate() {
        let probe_seed = config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1));
        match laplace::mode_evidence(&active, peak, &refined.trajectories, &lcfg, probe_seed) {
            Ok(ev) => evidences.push((k, ev)),
            Err(e @ (Error::NotPositiveDefinite { .. } | Error::HessianFailed(_))) => {
                push_unique(&mut warnings, WARN_SADDLE);
                rejected.push(format!("mode {k}: {e}"));
            }
            Err(e) => return Err(e.at(Stage::Evidence)),
        }
    }
    lap(
        &mut counts.evidence,
        &mut timing.evidence_ms,
        &mut mark,
        &mut clock,
    );
    if evidences.is_empty() {
        return Err(Error::NoValidMaxima { reasons: rejected }.at(Stage::Evidence));
    }

    let mut modes = vec![];
    for (k, ev) in &evidences {
        let peak = &refined.peaks[*k];
        let width: Vec<f64> = match &ev.hessian {
            Some(h) => h.diagonal().iter().map(|v| 1.0 / (-v).sqrt()).collect(),
            None => peak.width.clone(),
        };
        let ratio = tail_ratio(&active, &peak.location, peak.logl, &width);
        if ratio.is_some_and(|r| r < TAIL_RATIO) {
            push_unique(&mut warnings, WARN_HEAVY_TAIL);
        }
        let on_boundary =
            active.bounds().relative_face_distance(&peak.location) < BOUNDARY_FRACTION;
        if on_boundary {
            push_unique(&mut warnings, WARN_BOUNDARY);
            unreliable = true;
        }
        if !(ev.condition_number <= MAX_CONDITION) {
            push_unique(&mut warnings, WARN_ILL_CONDITIONED);
            unreliable = true;
        }
        let mut location = center.clone();
        for (&i, v) in pre.active_dims.iter().zip(&peak.location) {
            location[i] = *v;
        }
        modes.push(ModeReport {
            location,
            logl: ev.logl,
            log_z: ev.log_z,
            hessian_kind: ev.hessian_kind,
            log_det_neg_h: ev.log_det_neg_h,
            condition_number: ev.condition_number,
            rotation: ev.rotation.clone(),
            tail_ratio: ratio,
            on_boundary,
        });
    }
    lap(
        &mut counts.diagnostics,
        &mut timing.diagnostics_ms,
        &mut mark,
        &mut clock,
    );

    let log_zs: Vec<f64> = modes.iter().map(|m| m.log_z).collect();
    let combined = laplace::combine(&log_zs, pre.log_z_marginal, problem.bounds())
        .map_err(|e| e.at(Stage::Evidence))?;

    let reduction = if config.reduce {
        let (k, best) = evidences
            .iter()
            .max_by(|a, b| a.1.log_z.total_cmp(&b.1.log_z).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        let h = match &best.hessian {
            Some(h) => h.clone(),
            None => SymMatrix::from_diagonal(&refined.peaks[*k].diag_hessian),
        };
        let (report, _) = reduce::reduce_relative(&active, &best.location, &h, &config.reduction)
            .map_err(|e| e.at(Stage::Reduction))?;
        Some(report)
    } else {
        None
    };
    lap(
        &mut counts.reduction,
        &mut timing.reduction_ms,
        &mut mark,
        &mut clock,
    );
    counts.total = problem.eval_count() - start_count;

    Ok(EvidenceResult {
        problem: problem.name().to_string(),
        dim: problem.dim(),
        active_dim: pre.active_dims.len(),
        log_z: combined.log_z,
        log_z_vs_prior: combined.log_z_vs_prior,
        modes,
        discovery: DiscoverySummary {
            scales: disc.scales,
            n_seeds: disc.n_seeds,
            coarse_peaks: disc.peaks.len(),
            peak_counts: disc.peak_counts.clone(),
            raybank: disc.raybank_summary.clone(),
        },
        precheck: pre,
        refinement_rejections: refined.rejections.len(),
        eval_counts: counts,
        warnings,
        unreliable,
        reduction,
        config_echo: config.clone(),
        seed: config.seed,
        timing: config.timing.then_some(timing),
    })
}
