//! Mode discovery.
//!
//! Rays of four geometries are sampled in two passes, characteristic length
//! scales are read off the sampled profiles, and the best samples are driven
//! through repeated converge / stick / reseed / smooth / repel cycles.

use std::io::{self, Read, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::density::{BoundsBox, Problem};
use crate::error::{Error, Result};
use crate::lbfgs::{self, BatchState, LbfgsConfig, SampleStatus, StepConfig};
use crate::linalg::{self, norm_inf};

const LN_TENTH: f64 = -std::f64::consts::LN_10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RayKind {
    #[serde(rename = "v2v")]
    VertexToVertex,
    #[serde(rename = "v2e")]
    VertexToEdge,
    #[serde(rename = "w2w")]
    WallToWall,
    #[serde(rename = "sunburst")]
    Sunburst,
}

impl RayKind {
    fn code(self) -> u8 {
        match self {
            RayKind::VertexToVertex => 0,
            RayKind::VertexToEdge => 1,
            RayKind::WallToWall => 2,
            RayKind::Sunburst => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => RayKind::VertexToVertex,
            1 => RayKind::VertexToEdge,
            2 => RayKind::WallToWall,
            3 => RayKind::Sunburst,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ray {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub kind: RayKind,
}

impl Ray {
    pub fn point(&self, t: f64) -> Vec<f64> {
        self.start
            .iter()
            .zip(&self.end)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    pub fn length(&self) -> f64 {
        linalg::norm2(
            &self
                .start
                .iter()
                .zip(&self.end)
                .map(|(a, b)| b - a)
                .collect::<Vec<_>>(),
        )
    }
}

/// `⌈10 + log₂ d⌉`.
pub fn rays_per_kind(dim: usize) -> usize {
    (10.0 + (dim as f64).log2()).ceil() as usize
}

fn random_vertex(bounds: &BoundsBox, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..bounds.dim())
        .map(|i| {
            if rng.random::<bool>() {
                bounds.upper()[i]
            } else {
                bounds.lower()[i]
            }
        })
        .collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = linalg::norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `n` rays of each kind (`4n` total). In 1D there are no edges distinct
/// from vertices, so the vertex-to-edge share goes to sunburst rays.
pub fn generate_rays(bounds: &BoundsBox, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = bounds.dim();
    let n = rays_per_kind(d);
    let center = bounds.center();
    let mut rays = Vec::with_capacity(4 * n);

    for _ in 0..n {
        let a = random_vertex(bounds, &mut rng);
        let mut b = random_vertex(bounds, &mut rng);
        if a == b {
            let k = rng.random_range(0..d);
            b[k] = if a[k] == bounds.lower()[k] {
                bounds.upper()[k]
            } else {
                bounds.lower()[k]
            };
        }
        rays.push(Ray {
            start: a,
            end: b,
            kind: RayKind::VertexToVertex,
        });
    }
    let n_edge = if d == 1 { 0 } else { n };
    for _ in 0..n_edge {
        let a = random_vertex(bounds, &mut rng);
        let mut m = random_vertex(bounds, &mut rng);
        let k = rng.random_range(0..d);
        m[k] = center[k];
        rays.push(Ray {
            start: a,
            end: m,
            kind: RayKind::VertexToEdge,
        });
    }
    for _ in 0..n {
        let k = rng.random_range(0..d);
        let mut a: Vec<f64> = (0..d)
            .map(|i| rng.random_range(bounds.lower()[i]..=bounds.upper()[i]))
            .collect();
        a[k] = bounds.lower()[k];
        let mut b = a.clone();
        b[k] = bounds.upper()[k];
        rays.push(Ray {
            start: a,
            end: b,
            kind: RayKind::WallToWall,
        });
    }
    for _ in 0..(n + n - n_edge) {
        let u = random_unit(d, &mut rng);
        let (_, t_hi) = bounds.chord_range(&center, &u);
        let mut end: Vec<f64> = center.iter().zip(&u).map(|(c, v)| c + t_hi * v).collect();
        bounds.clip(&mut end);
        rays.push(Ray {
            start: center.clone(),
            end,
            kind: RayKind::Sunburst,
        });
    }
    rays
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplePass {
    Coarse,
    Refined,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub logls: Vec<f64>,
    pub passes: Vec<SamplePass>,
    /// Every coarse sample was non-finite.
    pub dead: bool,
}

/// All ray geometry and ray evaluations of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RayBank {
    pub rays: Vec<Ray>,
    pub samples: Vec<RaySamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayBankSummary {
    pub rays: usize,
    pub dead_rays: usize,
    pub samples: usize,
    pub finite_samples: usize,
    pub best_logl: f64,
}

impl std::fmt::Display for RayBankSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} rays ({} dead), {} samples ({} finite), best ray logl {}",
            self.rays, self.dead_rays, self.samples, self.finite_samples, self.best_logl
        )
    }
}

const SIDECAR_MAGIC: &[u8; 8] = b"RAYBANK\0";
const SIDECAR_VERSION: u32 = 1;

impl RayBank {
    pub fn n_samples(&self) -> usize {
        self.samples.iter().map(|s| s.ts.len()).sum()
    }

    pub fn max_logl(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.logls.iter().copied())
            .filter(|v| v.is_finite())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Every finite sample as `(position, logl)`.
    pub fn finite_points(&self) -> Vec<(Vec<f64>, f64)> {
        let mut out = vec![];
        for (ray, s) in self.rays.iter().zip(&self.samples) {
            for (t, l) in s.ts.iter().zip(&s.logls) {
                if l.is_finite() {
                    out.push((ray.point(*t), *l));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> RayBankSummary {
        RayBankSummary {
            rays: self.rays.len(),
            dead_rays: self.samples.iter().filter(|s| s.dead).count(),
            samples: self.n_samples(),
            finite_samples: self
                .samples
                .iter()
                .flat_map(|s| s.logls.iter())
                .filter(|v| v.is_finite())
                .count(),
            best_logl: self.max_logl(),
        }
    }

    /// Binary sidecar: magic, `u32` version, `u32` dim, `u64` ray count, then
    /// per ray a kind byte, start and end coordinates, `u8` dead flag, `u64`
    /// sample count and `(t, logl, pass)` triples. Little-endian `f64`.
    pub fn write_sidecar(&self, mut w: impl Write) -> io::Result<()> {
        let dim = self.rays.first().map_or(0, |r| r.start.len());
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&SIDECAR_VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.rays.len() as u64).to_le_bytes())?;
        for (ray, s) in self.rays.iter().zip(&self.samples) {
            w.write_all(&[ray.kind.code()])?;
            for v in ray.start.iter().chain(&ray.end) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&[s.dead as u8])?;
            w.write_all(&(s.ts.len() as u64).to_le_bytes())?;
            for k in 0..s.ts.len() {
                w.write_all(&s.ts[k].to_le_bytes())?;
                w.write_all(&s.logls[k].to_le_bytes())?;
                w.write_all(&[(s.passes[k] == SamplePass::Refined) as u8])?;
            }
        }
        Ok(())
    }

    pub fn read_sidecar(mut r: impl Read) -> io::Result<Self> {
        fn bad(msg: &str) -> io::Error {
            io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
        }
        fn u8_(r: &mut impl Read) -> io::Result<u8> {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            Ok(b[0])
        }
        fn u32_(r: &mut impl Read) -> io::Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_(r: &mut impl Read) -> io::Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        fn f64_(r: &mut impl Read) -> io::Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SIDECAR_MAGIC {
            return Err(bad("not a ray bank sidecar"));
        }
        if u32_(&mut r)? != SIDECAR_VERSION {
            return Err(bad("unsupported sidecar version"));
        }
        let dim = u32_(&mut r)? as usize;
        let n = u64_(&mut r)? as usize;
        let mut bank = RayBank::default();
        for _ in 0..n {
            let kind = RayKind::from_code(u8_(&mut r)?).ok_or_else(|| bad("bad ray kind"))?;
            let start = (0..dim)
                .map(|_| f64_(&mut r))
                .collect::<io::Result<Vec<_>>>()?;
            let end = (0..dim)
                .map(|_| f64_(&mut r))
                .collect::<io::Result<Vec<_>>>()?;
            let dead = u8_(&mut r)? != 0;
            let m = u64_(&mut r)? as usize;
            let mut s = RaySamples {
                dead,
                ..Default::default()
            };
            for _ in 0..m {
                s.ts.push(f64_(&mut r)?);
                s.logls.push(f64_(&mut r)?);
                s.passes.push(if u8_(&mut r)? != 0 {
                    SamplePass::Refined
                } else {
                    SamplePass::Coarse
                });
            }
            bank.rays.push(Ray { start, end, kind });
            bank.samples.push(s);
        }
        Ok(bank)
    }
}

/// `n` uniform parameters on `[0, 1]`, endpoints included.
pub fn coarse_ts(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// Second-pass parameters: deterministic quantiles `(j + ½)/n` of the
/// piecewise-constant density `∝ exp(ℓ - ℓ_max)` over cells around coarse
/// samples with `ℓ > ℓ_max - delta`.
pub fn refinement_ts(ts: &[f64], logls: &[f64], n: usize, delta: f64) -> Vec<f64> {
    let lmax = logls
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() || n == 0 {
        return vec![];
    }
    let m = ts.len();
    let mut cells = vec![];
    for k in 0..m {
        let l = logls[k];
        if !(l.is_finite() && l > lmax - delta) {
            continue;
        }
        let lo = if k == 0 {
            ts[0]
        } else {
            0.5 * (ts[k - 1] + ts[k])
        };
        let hi = if k + 1 == m {
            ts[m - 1]
        } else {
            0.5 * (ts[k] + ts[k + 1])
        };
        if hi > lo {
            cells.push((lo, hi, (l - lmax).exp() * (hi - lo)));
        }
    }
    let total: f64 = cells.iter().map(|c| c.2).sum();
    if cells.is_empty() || !(total > 0.0) {
        return vec![];
    }
    let mut out = Vec::with_capacity(n);
    let mut cell = 0;
    let mut acc = 0.0;
    for j in 0..n {
        let target = (j as f64 + 0.5) / n as f64 * total;
        while cell + 1 < cells.len() && acc + cells[cell].2 < target {
            acc += cells[cell].2;
            cell += 1;
        }
        let (lo, hi, w) = cells[cell];
        let frac = ((target - acc) / w).clamp(0.0, 1.0);
        out.push(lo + frac * (hi - lo));
    }
    out
}

/// Coarse pass over all rays in one batch, then refinement pass in one batch.
pub fn two_pass_sample(problem: &Problem, rays: &[Ray], n_coarse: usize, delta: f64) -> RayBank {
    let ts = coarse_ts(n_coarse);
    let points: Vec<Vec<f64>> = rays
        .iter()
        .flat_map(|r| ts.iter().map(move |&t| r.point(t)))
        .collect();
    let values = problem.evaluate_batch(&points);
    let mut samples: Vec<RaySamples> = values
        .chunks(n_coarse)
        .map(|ls| RaySamples {
            ts: ts.clone(),
            logls: ls.to_vec(),
            passes: vec![SamplePass::Coarse; n_coarse],
            dead: ls.iter().all(|v| !v.is_finite()),
        })
        .collect();

    let refined: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            if s.dead {
                vec![]
            } else {
                refinement_ts(&s.ts, &s.logls, n_coarse, delta)
            }
        })
        .collect();
    let points: Vec<Vec<f64>> = rays
        .iter()
        .zip(&refined)
        .flat_map(|(r, rts)| rts.iter().map(move |&t| r.point(t)))
        .collect();
    let values = problem.evaluate_batch(&points);
    let mut offset = 0;
    for (s, rts) in samples.iter_mut().zip(&refined) {
        let n = rts.len();
        s.ts.extend_from_slice(rts);
        s.logls.extend_from_slice(&values[offset..offset + n]);
        s.passes.extend(std::iter::repeat_n(SamplePass::Refined, n));
        offset += n;
    }
    RayBank {
        rays: rays.to_vec(),
        samples,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScaleEstimate {
    pub lambda_fine: f64,
    pub lambda_mid: f64,
    pub lambda_coarse: f64,
    pub transitions: usize,
    /// Too few samples; scales are fixed fractions of the mean box width.
    pub fallback: bool,
}

impl ScaleEstimate {
    pub fn fallback(mean_width: f64) -> Self {
        Self {
            lambda_fine: 1e-3 * mean_width,
            lambda_mid: 1e-2 * mean_width,
            lambda_coarse: 1e-1 * mean_width,
            transitions: 0,
            fallback: true,
        }
    }
}

/// A sampled 1D profile: arc length along the ray and log-likelihood, sorted.
#[derive(Debug, Clone)]
pub struct Profile {
    pub s: Vec<f64>,
    pub logl: Vec<f64>,
}

impl Profile {
    pub fn new(mut pts: Vec<(f64, f64)>) -> Self {
        pts.retain(|p| p.1.is_finite());
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        Self {
            s: pts.iter().map(|p| p.0).collect(),
            logl: pts.iter().map(|p| p.1).collect(),
        }
    }

    fn nearest(&self, x: f64) -> usize {
        let k = self.s.partition_point(|&v| v < x);
        if k == 0 {
            0
        } else if k == self.s.len() || x - self.s[k - 1] <= self.s[k] - x {
            k - 1
        } else {
            k
        }
    }

    /// `max_t |ℓ''|` at skip length `h`, from nearest-sample triples whose
    /// actual spacings are within a factor 1.5 of `h`.
    pub fn curvature(&self, h: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        for j in 0..self.s.len() {
            let a = self.nearest(self.s[j] - h);
            let b = self.nearest(self.s[j] + h);
            let ha = self.s[j] - self.s[a];
            let hb = self.s[b] - self.s[j];
            if !(ha >= 0.5 * h && ha <= 1.5 * h && hb >= 0.5 * h && hb <= 1.5 * h) {
                continue;
            }
            let d2 = 2.0
                * ((self.logl[b] - self.logl[j]) / hb - (self.logl[j] - self.logl[a]) / ha)
                / (ha + hb);
            let v = d2.abs();
            if v.is_finite() {
                best = Some(best.map_or(v, |m: f64| m.max(v)));
            }
        }
        best
    }

    fn median_spacing(&self) -> f64 {
        let mut gaps: Vec<f64> = self.s.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    }
}

const N_SKIP_LENGTHS: usize = 32;
const TRANSITION_SLOPE: f64 = -1.0;

/// Characteristic scales from `κ(h) = max over rays and positions of |ℓ''|`
/// on log-spaced skip lengths. Scales sit where `log κ` falls fastest
/// against `log h`; without such a drop all three equal `1/√κ`.
pub fn singlewhip_from_profiles(profiles: &[Profile], mean_width: f64) -> ScaleEstimate {
    let usable: Vec<&Profile> = profiles.iter().filter(|p| p.s.len() >= 8).collect();
    if usable.is_empty() {
        return ScaleEstimate::fallback(mean_width);
    }
    let h_lo = usable
        .iter()
        .map(|p| p.median_spacing())
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let h_hi = usable
        .iter()
        .map(|p| 0.25 * (p.s[p.s.len() - 1] - p.s[0]))
        .fold(0.0, f64::max);
    if !(h_lo.is_finite() && h_hi > h_lo) {
        return ScaleEstimate::fallback(mean_width);
    }
    let mut curve: Vec<(f64, f64)> = vec![];
    for k in 0..N_SKIP_LENGTHS {
        let h = h_lo * (h_hi / h_lo).powf(k as f64 / (N_SKIP_LENGTHS - 1) as f64);
        let kappa = usable
            .iter()
            .filter_map(|p| p.curvature(h))
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
        if let Some(kappa) = kappa {
            if kappa > 0.0 {
                curve.push((h, kappa));
            }
        }
    }
    if curve.is_empty() {
        return ScaleEstimate::fallback(mean_width);
    }
    let mut slopes: Vec<(f64, f64)> = curve
        .windows(2)
        .map(|w| {
            let slope = (w[1].1.ln() - w[0].1.ln()) / (w[1].0.ln() - w[0].0.ln());
            ((w[0].0 * w[1].0).sqrt(), slope)
        })
        .filter(|(_, s)| *s < TRANSITION_SLOPE)
        .collect();
    slopes.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    slopes.truncate(3);
    let mut hs: Vec<f64> = slopes.iter().map(|s| s.0).collect();
    hs.sort_by(f64::total_cmp);
    let transitions = hs.len();
    let scales = match hs.len() {
        0 => {
            let mut ks: Vec<f64> = curve.iter().map(|c| c.1).collect();
            ks.sort_by(f64::total_cmp);
            let l = 1.0 / ks[(ks.len() - 1) / 2].sqrt();
            [l, l, l]
        }
        1 => [hs[0], hs[0], hs[0]],
        2 => [hs[0], hs[1], hs[1]],
        _ => [hs[0], hs[1], hs[2]],
    };
    let lo = 1e-6 * mean_width;
    let hi = 0.5 * mean_width;
    ScaleEstimate {
        lambda_fine: scales[0].clamp(lo, hi),
        lambda_mid: scales[1].clamp(lo, hi),
        lambda_coarse: scales[2].clamp(lo, hi),
        transitions,
        fallback: false,
    }
}

/// Scale detection over the stored ray samples; no new evaluations.
pub fn singlewhip_scales(bank: &RayBank, mean_width: f64) -> ScaleEstimate {
    let profiles: Vec<Profile> = bank
        .rays
        .iter()
        .zip(&bank.samples)
        .map(|(r, s)| {
            let len = r.length();
            Profile::new(
                s.ts.iter()
                    .zip(&s.logls)
                    .map(|(t, l)| (t * len, *l))
                    .collect(),
            )
        })
        .collect();
    singlewhip_from_profiles(&profiles, mean_width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscoveryConfig {
    pub n_coarse: usize,
    pub delta: f64,
    pub n_oscillations: usize,
    pub n_converge: usize,
    pub n_anticonverge: usize,
    pub n_cloud: usize,
    pub k_smooth: usize,
    pub stick_grad: f64,
    pub momentum: f64,
    /// L∞ merge radius as a fraction of the mean box width.
    pub dedup_radius: f64,
    pub min_seeds: usize,
    pub lbfgs: LbfgsConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            delta: 20.0,
            n_oscillations: 3,
            n_converge: 15,
            n_anticonverge: 10,
            n_cloud: 5,
            k_smooth: 8,
            stick_grad: 1e-6,
            momentum: 0.9,
            dedup_radius: 1e-4,
            min_seeds: 32,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_oscillations == 0 {
            return Err(Error::InvalidParameter("n_oscillations must be ≥ 1".into()));
        }
        if self.n_coarse < 4 {
            return Err(Error::InvalidParameter("n_coarse must be ≥ 4".into()));
        }
        if !(self.delta > 0.0 && self.stick_grad > 0.0 && self.dedup_radius > 0.0) {
            return Err(Error::InvalidParameter(
                "tolerances must be positive".into(),
            ));
        }
        if self.k_smooth == 0 || self.n_converge == 0 {
            return Err(Error::InvalidParameter("budgets must be positive".into()));
        }
        Ok(())
    }

    fn step_config(&self) -> StepConfig {
        StepConfig {
            n_iters: self.n_converge,
            tolerance_linf: self.stick_grad,
            relative: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoarsePeak {
    pub location: Vec<f64>,
    pub logl: f64,
    pub width: f64,
    pub stuck_at_oscillation: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ChisaoStats {
    pub oscillations: usize,
    pub repulse_monkey_rounds: usize,
    pub golden_rooster_rounds: usize,
    pub random_reseed_rounds: usize,
    pub reseeded_samples: usize,
    pub dropped_below_threshold: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Discovery {
    pub peaks: Vec<CoarsePeak>,
    pub scales: ScaleEstimate,
    pub n_seeds: usize,
    pub stats: ChisaoStats,
    /// Peak count after each oscillation.
    pub peak_counts: Vec<usize>,
    #[serde(skip)]
    pub raybank: RayBank,
    pub raybank_summary: RayBankSummary,
    pub warnings: Vec<String>,
}

/// Top `q` finite ray samples by `ℓ` after greedy L∞ thinning at `radius`.
pub fn select_seeds(bank: &RayBank, q: usize, radius: f64) -> Vec<Vec<f64>> {
    let pts = bank.finite_points();
    let positions: Vec<Vec<f64>> = pts.iter().map(|p| p.0.clone()).collect();
    let scores: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let dd = linalg::dedup_linf(&positions, &scores, radius);
    dd.kept
        .iter()
        .take(q)
        .map(|&i| positions[i].clone())
        .collect()
}

/// Smoothed-likelihood gradients `(1/K) Σ_k ∇ℓ(θ + σ∘z_k)`, one batch.
pub fn smoothed_gradients(
    problem: &Problem,
    points: &[Vec<f64>],
    sigma: &[f64],
    draws: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let d = problem.dim();
    let k = draws.len();
    let mut probes = Vec::with_capacity(points.len() * k);
    for p in points {
        for z in draws {
            probes.push(
                p.iter()
                    .zip(sigma)
                    .zip(z)
                    .map(|((x, s), z)| x + s * z)
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let steps: Vec<Vec<f64>> = probes.iter().map(|p| lbfgs::fd_steps(p, None)).collect();
    let g = lbfgs::fd_gradient(problem, &probes, &steps);
    (0..points.len())
        .map(|n| {
            let mut acc = vec![0.0; d];
            for gk in &g.grads[n * k..(n + 1) * k] {
                for i in 0..d {
                    acc[i] += gk[i];
                }
            }
            acc.iter().map(|v| v / k as f64).collect()
        })
        .collect()
}

/// The oscillating converge / stick / reseed / smooth / repel cycle.
pub fn chisao(
    problem: &Problem,
    seeds: Vec<Vec<f64>>,
    scales: &ScaleEstimate,
    config: &DiscoveryConfig,
    initial_lmax: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<CoarsePeak>, ChisaoStats, Vec<usize>)> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::NoModesFound {
            best_location: None,
            best_logl: f64::NEG_INFINITY,
            summary: "no finite seeds".into(),
        });
    }
    let bounds = problem.bounds().clone();
    let d = problem.dim();
    let n = seeds.len();
    let radius = config.dedup_radius * bounds.mean_width();
    let step_cfg = config.step_config();
    let mut state = BatchState::initialize(problem, seeds, vec![None; n], config.lbfgs.memory);
    let mut lmax = state.logls.iter().copied().fold(initial_lmax, f64::max);
    let mut stuck = vec![false; n];
    let mut stuck_at = vec![0usize; n];
    let mut stats = ChisaoStats::default();
    let mut peak_counts = vec![];
    let mut rooster_enabled = true;
    let mut rooster_baseline: Option<usize> = None;

    for osc in 0..config.n_oscillations {
        stats.oscillations += 1;
        for i in 0..n {
            state.frozen[i] = state.status[i] == SampleStatus::Failed;
        }
        lbfgs::step_batch(&mut state, problem, &step_cfg, &config.lbfgs);
        lmax = state.logls.iter().copied().fold(lmax, f64::max);

        let threshold = lmax + LN_TENTH;
        let mut lost = vec![];
        let mut candidates = vec![];
        for i in 0..n {
            if state.status[i] == SampleStatus::Failed {
                stuck[i] = false;
                lost.push(i);
                continue;
            }
            let converged = state.grad_linf(i) < step_cfg.threshold(state.logls[i]);
            if converged && state.logls[i] >= threshold {
                if !stuck[i] {
                    stuck_at[i] = osc;
                }
                candidates.push(i);
            } else if converged {
                // A local maximum too low to keep.
                stuck[i] = false;
                lost.push(i);
            } else {
                stuck[i] = false;
            }
        }
        let pos: Vec<Vec<f64>> = candidates
            .iter()
            .map(|&i| state.positions[i].clone())
            .collect();
        let sc: Vec<f64> = candidates.iter().map(|&i| state.logls[i]).collect();
        let dd = linalg::dedup_linf(&pos, &sc, radius);
        let mut keep = vec![false; candidates.len()];
        for &k in &dd.kept {
            keep[k] = true;
        }
        for (k, &i) in candidates.iter().enumerate() {
            stuck[i] = keep[k];
            if !keep[k] {
                lost.push(i);
            }
        }
        lost.sort_unstable();
        let n_peaks = stuck.iter().filter(|s| **s).count();
        peak_counts.push(n_peaks);
        if let Some(base) = rooster_baseline.take() {
            if n_peaks <= base {
                rooster_enabled = false;
            }
        }

        if osc + 1 == config.n_oscillations {
            break;
        }

        // Reseed lost slots.
        let unconverged: Vec<usize> = (0..n)
            .filter(|&i| !stuck[i] && !lost.contains(&i))
            .collect();
        let peaks: Vec<usize> = (0..n).filter(|&i| stuck[i]).collect();
        if !lost.is_empty() {
            if unconverged.len() >= 5 {
                stats.repulse_monkey_rounds += 1;
                for &slot in &lost {
                    let src = *unconverged.choose(rng).expect("non-empty");
                    let u = random_unit(d, rng);
                    let dist = if scales.lambda_coarse > scales.lambda_mid {
                        rng.random_range(scales.lambda_mid..scales.lambda_coarse)
                    } else {
                        scales.lambda_mid
                    };
                    let mut x: Vec<f64> = state.positions[src]
                        .iter()
                        .zip(&u)
                        .map(|(a, b)| a + dist * b)
                        .collect();
                    bounds.clip(&mut x);
                    state.positions[slot] = x;
                }
            } else if rooster_enabled && !peaks.is_empty() {
                stats.golden_rooster_rounds += 1;
                rooster_baseline = Some(n_peaks);
                let r = d.min(lost.len());
                let raw: Vec<Vec<f64>> = (0..r)
                    .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
                    .collect();
                let dirs = linalg::orthonormalize(&raw);
                for (k, &slot) in lost.iter().enumerate() {
                    let peak = &state.positions[peaks[k % peaks.len()]];
                    let dir = &dirs[k % dirs.len()];
                    // Alternate sides once every direction has been used.
                    let sign = if (k / dirs.len()).is_multiple_of(2) {
                        1.0
                    } else {
                        -1.0
                    };
                    let mut x: Vec<f64> = peak
                        .iter()
                        .zip(dir)
                        .map(|(a, b)| a + sign * scales.lambda_coarse * b)
                        .collect();
                    bounds.clip(&mut x);
                    state.positions[slot] = x;
                }
            } else {
                stats.random_reseed_rounds += 1;
                for &slot in &lost {
                    state.positions[slot] = (0..d)
                        .map(|i| rng.random_range(bounds.lower()[i]..=bounds.upper()[i]))
                        .collect();
                }
            }
            stats.reseeded_samples += lost.len();
        }

        let moving: Vec<usize> = (0..n).filter(|&i| !stuck[i]).collect();
        if moving.is_empty() {
            continue;
        }
        for &i in &moving {
            state.frozen[i] = false;
        }

        // Smoothed ascent.
        let sigma: Vec<f64> = if moving.len() >= 2 {
            (0..d)
                .map(|j| {
                    let m = moving.iter().map(|&i| state.positions[i][j]).sum::<f64>()
                        / moving.len() as f64;
                    let v = moving
                        .iter()
                        .map(|&i| (state.positions[i][j] - m).powi(2))
                        .sum::<f64>()
                        / (moving.len() - 1) as f64;
                    v.sqrt().max(scales.lambda_fine)
                })
                .collect()
        } else {
            vec![scales.lambda_mid; d]
        };
        for _ in 0..config.n_cloud {
            let draws: Vec<Vec<f64>> = (0..config.k_smooth)
                .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            let pts: Vec<Vec<f64>> = moving.iter().map(|&i| state.positions[i].clone()).collect();
            let grads = smoothed_gradients(problem, &pts, &sigma, &draws);
            for (&i, g) in moving.iter().zip(grads) {
                let m = norm_inf(&g);
                if !(m > 0.0) || !m.is_finite() {
                    continue;
                }
                let scale = (scales.lambda_mid / m).min(1.0);
                for j in 0..d {
                    state.positions[i][j] += scale * g[j];
                }
                bounds.clip(&mut state.positions[i]);
            }
        }

        // Momentum descent away from the maxima just found.
        state.refresh(problem, &moving);
        let alpha = 0.5 * scales.lambda_fine;
        let mut velocity = vec![vec![0.0; d]; moving.len()];
        for step in 0..config.n_anticonverge {
            if step > 0 {
                let pts: Vec<Vec<f64>> =
                    moving.iter().map(|&i| state.positions[i].clone()).collect();
                let steps: Vec<Vec<f64>> = pts.iter().map(|p| lbfgs::fd_steps(p, None)).collect();
                let g = lbfgs::fd_gradient(problem, &pts, &steps);
                for (&i, gi) in moving.iter().zip(g.grads) {
                    state.grads[i] = gi;
                }
            }
            for (k, &i) in moving.iter().enumerate() {
                for j in 0..d {
                    velocity[k][j] = config.momentum * velocity[k][j] - alpha * state.grads[i][j];
                    state.positions[i][j] += velocity[k][j];
                }
                bounds.clip(&mut state.positions[i]);
            }
        }
        state.refresh(problem, &moving);
        lmax = state.logls.iter().copied().fold(lmax, f64::max);
    }

    let threshold = lmax + LN_TENTH;
    let mut peaks = vec![];
    for i in 0..n {
        if !stuck[i] {
            continue;
        }
        if state.logls[i] < threshold {
            stats.dropped_below_threshold += 1;
            continue;
        }
        let width = lbfgs::width_estimate(&state.histories[i])
            .ok()
            .filter(|g| g.is_finite() && *g > 0.0)
            .map(f64::sqrt)
            .unwrap_or(scales.lambda_fine)
            .max(1e-12 * bounds.mean_width());
        peaks.push(CoarsePeak {
            location: state.positions[i].clone(),
            logl: state.logls[i],
            width,
            stuck_at_oscillation: stuck_at[i],
        });
    }
    peaks.sort_by(|a, b| b.logl.total_cmp(&a.logl));
    if peaks.is_empty() {
        let best = (0..n)
            .filter(|&i| state.logls[i].is_finite())
            .max_by(|&a, &b| state.logls[a].total_cmp(&state.logls[b]).then(b.cmp(&a)));
        return Err(Error::NoModesFound {
            best_location: best.map(|i| state.positions[i].clone()),
            best_logl: best.map_or(f64::NEG_INFINITY, |i| state.logls[i]),
            summary: format!(
                "no sample converged above the stick threshold after {} oscillation(s)",
                config.n_oscillations
            ),
        });
    }
    Ok((peaks, stats, peak_counts))
}

/// Rays, scale detection and the oscillation cycle.
pub fn discover(problem: &Problem, config: &DiscoveryConfig, seed: u64) -> Result<Discovery> {
    config.validate()?;
    let bounds = problem.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let rays = generate_rays(bounds, seed);
    let bank = two_pass_sample(problem, &rays, config.n_coarse, config.delta);
    let summary = bank.summary();
    let scales = singlewhip_scales(&bank, bounds.mean_width());
    let mut warnings = vec![];
    if scales.fallback {
        warnings.push("scale detection fell back to fixed fractions of the box width".into());
    }
    let q = config.min_seeds.max(4 * rays_per_kind(problem.dim()));
    let seeds = select_seeds(&bank, q, scales.lambda_fine);
    if seeds.is_empty() {
        return Err(Error::NoModesFound {
            best_location: None,
            best_logl: f64::NEG_INFINITY,
            summary: summary.to_string(),
        });
    }
    let n_seeds = seeds.len();
    let (peaks, stats, peak_counts) =
        chisao(problem, seeds, &scales, config, bank.max_logl(), &mut rng).map_err(
            |e| match e {
                Error::NoModesFound {
                    best_location,
                    best_logl,
                    summary: s,
                } => Error::NoModesFound {
                    best_location,
                    best_logl,
                    summary: format!("{s}; {summary}"),
                },
                e => e,
            },
        )?;
    Ok(Discovery {
        peaks,
        scales,
        n_seeds,
        stats,
        peak_counts,
        raybank: bank,
        raybank_summary: summary,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(dim: usize) -> Problem {
        Problem::from_fn("g", BoundsBox::cube(dim, -10.0, 10.0).unwrap(), |x| {
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        })
        .unwrap()
    }

    #[test]
    fn ray_counts() {
        assert_eq!(rays_per_kind(2), 11);
        assert_eq!(rays_per_kind(1024), 20);
        assert_eq!(rays_per_kind(1), 10);
        let b = BoundsBox::cube(2, -1.0, 1.0).unwrap();
        assert_eq!(generate_rays(&b, 1).len(), 44);
        let b1 = BoundsBox::cube(1, -1.0, 1.0).unwrap();
        let r1 = generate_rays(&b1, 1);
        assert_eq!(r1.len(), 40);
        assert!(r1.iter().all(|r| r.kind != RayKind::VertexToEdge));
        assert_eq!(
            r1.iter().filter(|r| r.kind == RayKind::Sunburst).count(),
            20
        );
    }

    #[test]
    fn ray_geometry_invariants() {
        let b = BoundsBox::new(vec![-1.0, 0.0, 2.0], vec![1.0, 5.0, 3.0]).unwrap();
        let center = b.center();
        for r in generate_rays(&b, 9) {
            assert!(b.contains(&r.start) && b.contains(&r.end), "{r:?}");
            match r.kind {
                RayKind::WallToWall => {
                    let diff: Vec<usize> = (0..3).filter(|&i| r.start[i] != r.end[i]).collect();
                    assert_eq!(diff.len(), 1);
                    let k = diff[0];
                    assert_eq!(r.start[k], b.lower()[k]);
                    assert_eq!(r.end[k], b.upper()[k]);
                }
                RayKind::Sunburst => assert_eq!(r.start, center),
                _ => {}
            }
        }
        assert_eq!(generate_rays(&b, 9), generate_rays(&b, 9));
    }

    #[test]
    fn flat_profile_refines_uniformly() {
        let ts = coarse_ts(64);
        let r = refinement_ts(&ts, &vec![0.0; 64], 64, 20.0);
        assert_eq!(r.len(), 64);
        for (j, t) in r.iter().enumerate() {
            assert!((t - (j as f64 + 0.5) / 64.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bump_concentrates_refinement() {
        let ts = coarse_ts(64);
        let ls: Vec<f64> = ts
            .iter()
            .map(|t| -0.5 * ((t - 0.5) / 0.05).powi(2))
            .collect();
        let r = refinement_ts(&ts, &ls, 64, 10.0);
        // Active region: coarse samples above ℓmax - 10, with their cells.
        let active: Vec<f64> = ts
            .iter()
            .zip(&ls)
            .filter(|(_, l)| **l > -10.0)
            .map(|(t, _)| *t)
            .collect();
        let lo = active[0] - 0.5 / 63.0;
        let hi = active[active.len() - 1] + 0.5 / 63.0;
        assert!(lo < 0.5 && hi > 0.5);
        let inside = r.iter().filter(|t| **t >= lo && **t <= hi).count();
        assert!(inside as f64 >= 0.8 * 64.0);
    }

    #[test]
    fn dead_ray_gets_no_refinement() {
        let p = Problem::from_fn("dead", BoundsBox::cube(2, -1.0, 1.0).unwrap(), |_| {
            f64::NEG_INFINITY
        })
        .unwrap();
        let rays = generate_rays(p.bounds(), 3);
        let bank = two_pass_sample(&p, &rays[..2], 16, 20.0);
        assert!(bank.samples.iter().all(|s| s.dead && s.ts.len() == 16));
        assert_eq!(p.eval_count(), 32);
        let sc = singlewhip_scales(&bank, 2.0);
        assert!(sc.fallback);
        assert_eq!(sc.lambda_fine, 2e-3);
    }

    #[test]
    fn constant_curvature_has_no_transition() {
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|k| {
                let t = -5.0 + 10.0 * k as f64 / 199.0;
                (t, -0.5 * t * t)
            })
            .collect();
        let sc = singlewhip_from_profiles(&[Profile::new(pts)], 20.0);
        assert_eq!(sc.transitions, 0);
        assert!((sc.lambda_fine - 1.0).abs() < 1e-6);
        assert_eq!(sc.lambda_fine, sc.lambda_mid);
        assert_eq!(sc.lambda_mid, sc.lambda_coarse);
    }

    #[test]
    fn ripple_produces_transition_near_wavelength() {
        let pts: Vec<(f64, f64)> = (0..2001)
            .map(|k| {
                let t = k as f64 / 2000.0;
                (
                    t,
                    -0.5 * t * t + (2.0 * std::f64::consts::PI * t / 0.01).sin(),
                )
            })
            .collect();
        let sc = singlewhip_from_profiles(&[Profile::new(pts)], 1.0);
        assert!(sc.transitions >= 1);
        assert!(
            sc.lambda_fine > 0.01 / 3.0 && sc.lambda_fine < 0.03,
            "{sc:?}"
        );
    }

    #[test]
    fn sidecar_round_trip() {
        let p = gaussian(3);
        let rays = generate_rays(p.bounds(), 5);
        let bank = two_pass_sample(&p, &rays, 8, 20.0);
        let mut buf = vec![];
        bank.write_sidecar(&mut buf).unwrap();
        let back = RayBank::read_sidecar(&buf[..]).unwrap();
        assert_eq!(back, bank);
        assert!(RayBank::read_sidecar(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn isotropic_gaussian_single_peak() {
        let p = gaussian(3);
        let cfg = DiscoveryConfig {
            n_oscillations: 1,
            ..Default::default()
        };
        let d = discover(&p, &cfg, 7).unwrap();
        assert_eq!(d.peaks.len(), 1, "{:?}", d.peaks);
        assert!(norm_inf(&d.peaks[0].location) < 1e-4);
    }

    #[test]
    fn low_bump_is_not_stuck() {
        // Global max ℓ = 0 at -3, local bump at +3 with height log(0.05).
        let p = Problem::from_fn("b", BoundsBox::cube(1, -10.0, 10.0).unwrap(), |x| {
            let a = -0.5 * (x[0] + 3.0).powi(2);
            let b = 0.05f64.ln() - 0.5 * (x[0] - 3.0).powi(2);
            a.max(b) + (-(a - b).abs()).exp().ln_1p()
        })
        .unwrap();
        let cfg = DiscoveryConfig {
            n_oscillations: 2,
            ..Default::default()
        };
        let d = discover(&p, &cfg, 1).unwrap();
        assert_eq!(d.peaks.len(), 1);
        assert!((d.peaks[0].location[0] + 3.0).abs() < 1e-3);
    }

    #[test]
    fn symmetric_bimodal_finds_both() {
        let p = Problem::from_fn("bi", BoundsBox::cube(2, -10.0, 10.0).unwrap(), |x| {
            let a = -0.5 * ((x[0] - 4.0).powi(2) + (x[1] - 4.0).powi(2));
            let b = -0.5 * ((x[0] + 4.0).powi(2) + (x[1] + 4.0).powi(2));
            a.max(b) + (-(a - b).abs()).exp().ln_1p()
        })
        .unwrap();
        let d = discover(&p, &DiscoveryConfig::default(), 11).unwrap();
        assert_eq!(d.peaks.len(), 2, "{:?}", d.peaks);
    }

    #[test]
    fn smoothing_with_zero_sigma_is_plain_gradient() {
        let p = gaussian(2);
        let x = vec![vec![1.0, -2.0]];
        let g = smoothed_gradients(&p, &x, &[0.0, 0.0], &[vec![0.0, 0.0]]);
        let plain = lbfgs::fd_gradient(&p, &x, &[lbfgs::fd_steps(&x[0], None)]);
        assert_eq!(g[0], plain.grads[0]);
    }
}
