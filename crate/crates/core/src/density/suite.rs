//! Built-in test functions. Likelihoods are unnormalized; each comes with an
//! independently derived `log ∫ exp ℓ`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{AnalyticTarget, BoundsBox, LogDensity, Problem, Tag};
use crate::error::{Error, Result};
use crate::linalg::{self, SymMatrix};
use crate::quad;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const DEFAULT_HALF_WIDTH: f64 = 10.0;

/// Every name accepted by [`by_name`].
pub const PROBLEM_NAMES: &[&str] = &[
    "gaussian",
    "cigar",
    "correlated",
    "rotated-cigar",
    "mixture4",
    "student-t-3",
    "cauchy",
    "skew-normal-5",
    "exp-power-0.5",
    "exp-power-1",
    "banana-0.1",
    "banana-0.5",
    "twisted",
    "eggbox",
    "funnel-3",
    "ring",
    "bimodal-asym",
];

/// Looks up a registered test function.
pub fn by_name(name: &str, dim: usize) -> Result<(Problem, AnalyticTarget)> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be positive".into()));
    }
    match name {
        "gaussian" => make_gaussian(dim, &vec![0.0; dim], &vec![1.0; dim]),
        "cigar" => make_cigar(dim),
        "correlated" => make_correlated(dim, 0.5),
        "rotated-cigar" => make_rotated_cigar(dim),
        "mixture4" => make_mixture4(dim),
        "student-t-3" => make_student_t(dim, 3.0),
        "cauchy" => make_student_t(dim, 1.0),
        "skew-normal-5" => make_skew_normal(dim, 5.0),
        "exp-power-0.5" => make_exp_power(dim, 0.5),
        "exp-power-1" => make_exp_power(dim, 1.0),
        "banana-0.1" => make_banana(dim, 0.1),
        "banana-0.5" => make_banana(dim, 0.5),
        "twisted" => make_twisted(dim),
        "eggbox" => make_eggbox(dim),
        "funnel-3" => make_funnel(dim, 3.0),
        "ring" => make_ring(dim, 3.0, 0.3),
        "bimodal-asym" => make_bimodal_asym(dim),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
    .map(|(p, mut t)| {
        t.name = name.to_string();
        (renamed(p, name), t)
    })
}

fn renamed(p: Problem, name: &str) -> Problem {
    Problem {
        name: name.to_string(),
        ..p
    }
}

fn default_box(dim: usize) -> BoundsBox {
    BoundsBox::cube(dim, -DEFAULT_HALF_WIDTH, DEFAULT_HALF_WIDTH).expect("valid cube")
}

/// `[-10, 10]^d`, widened where needed so every coordinate keeps ±10σ.
fn gaussian_box(mean: &[f64], sd: &[f64]) -> BoundsBox {
    let lower = mean
        .iter()
        .zip(sd)
        .map(|(m, s)| (-DEFAULT_HALF_WIDTH).min(m - 10.0 * s))
        .collect();
    let upper = mean
        .iter()
        .zip(sd)
        .map(|(m, s)| DEFAULT_HALF_WIDTH.max(m + 10.0 * s))
        .collect();
    BoundsBox::new(lower, upper).expect("valid gaussian box")
}

// ---------------------------------------------------------------------------
// Gaussian family
// ---------------------------------------------------------------------------

struct DiagGaussian {
    mean: Vec<f64>,
    inv_var: Vec<f64>,
}

impl LogDensity for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            s += d * d * self.inv_var[i];
        }
        -0.5 * s
    }
}

struct FullGaussian {
    mean: Vec<f64>,
    precision: SymMatrix,
}

impl LogDensity for FullGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        -0.5 * self.precision.quad_form(&d)
    }
}

/// `ℓ(θ) = -½ Σ (θ_i - μ_i)² / σ_i²`.
pub fn make_gaussian(
    dim: usize,
    mean: &[f64],
    variances: &[f64],
) -> Result<(Problem, AnalyticTarget)> {
    if mean.len() != dim || variances.len() != dim || dim == 0 {
        return Err(Error::InvalidParameter(
            "mean/variances must have length dim".into(),
        ));
    }
    if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "variance {v} is not positive"
        )));
    }
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let bounds = gaussian_box(mean, &sd);
    let density = DiagGaussian {
        mean: mean.to_vec(),
        inv_var: variances.iter().map(|v| 1.0 / v).collect(),
    };
    let true_log_integral =
        0.5 * dim as f64 * LN_2PI + 0.5 * variances.iter().map(|v| v.ln()).sum::<f64>();
    let vmax = variances.iter().copied().fold(0.0, f64::max);
    let vmin = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let mut tags = vec![Tag::Gaussian];
    if vmax / vmin > 10.0 {
        tags.push(Tag::Anisotropic);
    }
    Ok((
        Problem::new("gaussian", bounds, Arc::new(density))?,
        AnalyticTarget {
            name: "gaussian".into(),
            true_log_integral,
            known_modes: vec![mean.to_vec()],
            tags,
        },
    ))
}

/// `ℓ(θ) = -½ θᵀ Σ⁻¹ θ` for symmetric positive definite `Σ`.
pub fn make_rotated_gaussian(
    dim: usize,
    covariance: &SymMatrix,
) -> Result<(Problem, AnalyticTarget)> {
    if covariance.dim() != dim || dim == 0 {
        return Err(Error::InvalidParameter(
            "covariance must be dim × dim".into(),
        ));
    }
    let log_det = linalg::log_det_pd(covariance)
        .map_err(|e| Error::InvalidParameter(format!("covariance: {e}")))?;
    let eig = linalg::eig_symmetric(covariance)?;
    let precision = eig.reconstruct_with(|l| 1.0 / l);
    let mean = vec![0.0; dim];
    let sd: Vec<f64> = covariance.diagonal().iter().map(|v| v.sqrt()).collect();
    let bounds = gaussian_box(&mean, &sd);
    let lmin = eig.eigenvalues[0];
    let lmax = eig.eigenvalues[dim - 1];
    let mut tags = vec![Tag::Gaussian, Tag::Rotated];
    if lmax / lmin > 10.0 {
        tags.push(Tag::Anisotropic);
    }
    Ok((
        Problem::new(
            "rotated-gaussian",
            bounds,
            Arc::new(FullGaussian {
                mean: mean.clone(),
                precision,
            }),
        )?,
        AnalyticTarget {
            name: "rotated-gaussian".into(),
            true_log_integral: 0.5 * dim as f64 * LN_2PI + 0.5 * log_det,
            known_modes: vec![mean],
            tags,
        },
    ))
}

/// Variances spaced log-uniformly from 1 down to 10⁻⁶.
pub fn cigar_spectrum(dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![1.0];
    }
    (0..dim)
        .map(|i| 10f64.powf(-6.0 * i as f64 / (dim - 1) as f64))
        .collect()
}

/// Axis-aligned Gaussian with a 10⁶:1 variance ratio.
pub fn make_cigar(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    make_gaussian(dim, &vec![0.0; dim], &cigar_spectrum(dim))
}

/// Unit variances with uniform pairwise correlation `rho`.
pub fn make_correlated(dim: usize, rho: f64) -> Result<(Problem, AnalyticTarget)> {
    let mut cov = SymMatrix::identity(dim);
    for i in 0..dim {
        for j in 0..i {
            cov.set(i, j, rho);
        }
    }
    make_rotated_gaussian(dim, &cov)
}

/// Seeded random orthonormal basis (columns of Q from a Gaussian matrix).
pub fn random_rotation(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    linalg::orthonormalize(&raw)
}

/// The cigar spectrum under a fixed random rotation.
pub fn make_rotated_cigar(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    let spectrum = cigar_spectrum(dim);
    let basis = random_rotation(dim, 0x5eed_0000 + dim as u64);
    let mut rows = vec![vec![0.0; dim]; dim];
    for (k, u) in basis.iter().enumerate() {
        for i in 0..dim {
            for j in 0..dim {
                rows[i][j] += u[i] * spectrum[k] * u[j];
            }
        }
    }
    let cov = SymMatrix::from_rows_symmetrized(&rows)?;
    make_rotated_gaussian(dim, &cov)
}

// ---------------------------------------------------------------------------
// Mixtures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

struct Mixture {
    dim: usize,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    inv_vars: Vec<Vec<f64>>,
}

impl LogDensity for Mixture {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut terms = [0.0f64; 16];
        let mut heap;
        let buf: &mut [f64] = if self.means.len() <= terms.len() {
            &mut terms[..self.means.len()]
        } else {
            heap = vec![0.0; self.means.len()];
            &mut heap
        };
        for (k, slot) in buf.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..self.dim {
                let d = x[i] - self.means[k][i];
                s += d * d * self.inv_vars[k][i];
            }
            *slot = self.log_weights[k] - 0.5 * s;
        }
        let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + buf.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

/// `ℓ(θ) = log Σ_k w_k exp(-½ Σ_i (θ_i - μ_ki)² / σ_ki²)`.
pub fn make_mixture(
    dim: usize,
    components: &[MixtureComponent],
) -> Result<(Problem, AnalyticTarget)> {
    if components.is_empty() {
        return Err(Error::InvalidParameter(
            "mixture needs at least one component".into(),
        ));
    }
    for c in components {
        if !(c.weight > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight {} is not positive",
                c.weight
            )));
        }
        if c.mean.len() != dim || c.variances.len() != dim {
            return Err(Error::InvalidParameter(
                "component has wrong dimension".into(),
            ));
        }
        if c.variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(
                "non-positive component variance".into(),
            ));
        }
    }
    let component_logs: Vec<f64> = components
        .iter()
        .map(|c| {
            c.weight.ln()
                + 0.5 * dim as f64 * LN_2PI
                + 0.5 * c.variances.iter().map(|v| v.ln()).sum::<f64>()
        })
        .collect();
    let true_log_integral = linalg::logsumexp(&component_logs)?;

    let mut lower = vec![-DEFAULT_HALF_WIDTH; dim];
    let mut upper = vec![DEFAULT_HALF_WIDTH; dim];
    for c in components {
        for i in 0..dim {
            let s = c.variances[i].sqrt();
            lower[i] = lower[i].min(c.mean[i] - 10.0 * s);
            upper[i] = upper[i].max(c.mean[i] + 10.0 * s);
        }
    }
    let density = Mixture {
        dim,
        log_weights: components.iter().map(|c| c.weight.ln()).collect(),
        means: components.iter().map(|c| c.mean.clone()).collect(),
        inv_vars: components
            .iter()
            .map(|c| c.variances.iter().map(|v| 1.0 / v).collect())
            .collect(),
    };
    let mut tags = vec![Tag::Gaussian];
    if components.len() > 1 {
        tags.push(Tag::Multimodal);
    }
    Ok((
        Problem::new("mixture", BoundsBox::new(lower, upper)?, Arc::new(density))?,
        AnalyticTarget {
            name: "mixture".into(),
            true_log_integral,
            known_modes: components.iter().map(|c| c.mean.clone()).collect(),
            tags,
        },
    ))
}

/// Two orthonormal directions spread over all coordinates: `u` covers the
/// first ⌈d/2⌉ coordinates, `v` the rest.
fn split_directions(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = dim.div_ceil(2);
    let mut u = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    for i in 0..dim {
        if i < half {
            u[i] = 1.0 / (half as f64).sqrt();
        } else {
            v[i] = 1.0 / ((dim - half) as f64).sqrt();
        }
    }
    (u, v)
}

/// Side length of the mixture4 square, in units of the component σ.
///
/// In 2D the modes sit at the quadrant centers of the prior box (10σ apart);
/// from 3D on the spacing is 3.5σ at 4D and grows like √d.
pub fn mixture4_spacing(dim: usize) -> f64 {
    if dim <= 2 {
        DEFAULT_HALF_WIDTH
    } else {
        3.5 * (dim as f64 / 4.0).sqrt()
    }
}

/// Four equal-weight unit-variance Gaussians on the corners of a square.
pub fn make_mixture4(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    if dim < 2 {
        return Err(Error::UnsupportedDimension {
            name: "mixture4".into(),
            dim,
        });
    }
    let (u, v) = split_directions(dim);
    let h = 0.5 * mixture4_spacing(dim);
    let components: Vec<MixtureComponent> = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
        .iter()
        .map(|(a, b)| MixtureComponent {
            weight: 0.25,
            mean: (0..dim).map(|i| h * (a * u[i] + b * v[i])).collect(),
            variances: vec![1.0; dim],
        })
        .collect();
    make_mixture(dim, &components)
}

/// 90%/10% pair of unit Gaussians, 6σ apart along the diagonal.
pub fn make_bimodal_asym(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    let s = 3.0 / (dim as f64).sqrt();
    make_mixture(
        dim,
        &[
            MixtureComponent {
                weight: 0.9,
                mean: vec![-s; dim],
                variances: vec![1.0; dim],
            },
            MixtureComponent {
                weight: 0.1,
                mean: vec![s; dim],
                variances: vec![1.0; dim],
            },
        ],
    )
}

/// Pads `inner` with `n_flat` extra coordinates the likelihood ignores.
/// The target integrates those coordinates over the padded box widths.
pub fn make_with_flat_dims(
    inner: (Problem, AnalyticTarget),
    n_flat: usize,
    half_width: f64,
) -> Result<(Problem, AnalyticTarget)> {
    let (p, t) = inner;
    let d = p.dim();
    let mut lower = p.bounds().lower().to_vec();
    let mut upper = p.bounds().upper().to_vec();
    lower.extend(std::iter::repeat_n(-half_width, n_flat));
    upper.extend(std::iter::repeat_n(half_width, n_flat));
    let bounds = BoundsBox::new(lower, upper)?;
    let density = Padded {
        inner: p.density().clone(),
        inner_dim: d,
        total: d + n_flat,
    };
    let name = format!("{}+{}flat", p.name(), n_flat);
    Ok((
        Problem::new(name.clone(), bounds, Arc::new(density))?,
        AnalyticTarget {
            name,
            true_log_integral: t.true_log_integral + n_flat as f64 * (2.0 * half_width).ln(),
            known_modes: vec![],
            tags: t.tags,
        },
    ))
}

struct Padded {
    inner: Arc<dyn LogDensity>,
    inner_dim: usize,
    total: usize,
}

impl LogDensity for Padded {
    fn dim(&self) -> usize {
        self.total
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.inner.log_density(&x[..self.inner_dim])
    }
}

// ---------------------------------------------------------------------------
// Non-Gaussian targets
// ---------------------------------------------------------------------------

struct StudentT {
    dim: usize,
    nu: f64,
}

impl LogDensity for StudentT {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * (self.nu + self.dim as f64) * (r2 / self.nu).ln_1p()
    }
}

/// Multivariate Student-t kernel `(1 + r²/ν)^{-(ν+d)/2}`.
pub fn make_student_t(dim: usize, nu: f64) -> Result<(Problem, AnalyticTarget)> {
    if !(nu > 0.0) {
        return Err(Error::InvalidParameter(
            "degrees of freedom must be positive".into(),
        ));
    }
    let d = dim as f64;
    let true_log_integral =
        quad::ln_gamma(0.5 * nu) + 0.5 * d * (nu * PI).ln() - quad::ln_gamma(0.5 * (nu + d));
    Ok((
        Problem::new(
            "student-t",
            default_box(dim),
            Arc::new(StudentT { dim, nu }),
        )?,
        AnalyticTarget {
            name: "student-t".into(),
            true_log_integral,
            known_modes: vec![vec![0.0; dim]],
            tags: vec![Tag::HeavyTail],
        },
    ))
}

struct SkewNormal {
    dim: usize,
    alpha: f64,
}

impl LogDensity for SkewNormal {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|&v| -0.5 * v * v + quad::log_ndtr(self.alpha * v))
            .sum()
    }
}

/// Mode of `exp(-x²/2) Φ(αx)`, by bisection on the score.
pub fn skew_normal_mode(alpha: f64) -> f64 {
    let score = |x: f64| {
        let z = alpha * x;
        let log_phi = -0.5 * z * z - 0.5 * LN_2PI;
        -x + alpha * (log_phi - quad::log_ndtr(z)).exp()
    };
    let (mut lo, mut hi) = if alpha >= 0.0 {
        (0.0, 5.0)
    } else {
        (-5.0, 0.0)
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Product of skew-normal kernels `exp(-x²/2) Φ(αx)`; each integrates to
/// `√(2π)/2`.
pub fn make_skew_normal(dim: usize, alpha: f64) -> Result<(Problem, AnalyticTarget)> {
    let mode = skew_normal_mode(alpha);
    Ok((
        Problem::new(
            "skew-normal",
            default_box(dim),
            Arc::new(SkewNormal { dim, alpha }),
        )?,
        AnalyticTarget {
            name: "skew-normal".into(),
            true_log_integral: dim as f64 * (0.5 * LN_2PI - std::f64::consts::LN_2),
            known_modes: vec![vec![mode; dim]],
            tags: vec![],
        },
    ))
}

struct ExpPower {
    dim: usize,
    beta: f64,
}

impl LogDensity for ExpPower {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        -x.iter().map(|v| v.abs().powf(self.beta)).sum::<f64>()
    }
}

/// Product of `exp(-|x|^β)` kernels.
pub fn make_exp_power(dim: usize, beta: f64) -> Result<(Problem, AnalyticTarget)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter("beta must be positive".into()));
    }
    let per_dim = std::f64::consts::LN_2 + quad::ln_gamma(1.0 + 1.0 / beta);
    let mut tags = vec![];
    if beta < 1.0 + 1e-12 {
        tags.push(Tag::HeavyTail);
    }
    Ok((
        Problem::new(
            "exp-power",
            default_box(dim),
            Arc::new(ExpPower { dim, beta }),
        )?,
        AnalyticTarget {
            name: "exp-power".into(),
            true_log_integral: dim as f64 * per_dim,
            known_modes: vec![vec![0.0; dim]],
            tags,
        },
    ))
}

struct Banana {
    dim: usize,
    b: f64,
}

const BANANA_LEAD_VAR: f64 = 4.0;

impl LogDensity for Banana {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut i = 0;
        while i + 1 < self.dim {
            let a = x[i];
            let c = x[i + 1] + self.b * a * a;
            s += a * a / BANANA_LEAD_VAR + c * c;
            i += 2;
        }
        if i < self.dim {
            s += x[i] * x[i];
        }
        -0.5 * s
    }
}

/// Coordinates paired as `(a, c)` with `ℓ = -½[a²/4 + (c + b·a²)²]`; an odd
/// trailing coordinate is standard normal. The shear has unit Jacobian, so
/// the integral is Gaussian.
pub fn make_banana(dim: usize, b: f64) -> Result<(Problem, AnalyticTarget)> {
    let pairs = dim / 2;
    Ok((
        Problem::new("banana", default_box(dim), Arc::new(Banana { dim, b }))?,
        AnalyticTarget {
            name: "banana".into(),
            true_log_integral: 0.5 * dim as f64 * LN_2PI
                + pairs as f64 * 0.5 * BANANA_LEAD_VAR.ln(),
            known_modes: vec![vec![0.0; dim]],
            tags: vec![],
        },
    ))
}

struct Twisted {
    dim: usize,
    amplitude: f64,
}

impl LogDensity for Twisted {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut i = 0;
        while i + 1 < self.dim {
            let c = x[i + 1] - self.amplitude * x[i].sin();
            s += x[i] * x[i] + c * c;
            i += 2;
        }
        if i < self.dim {
            s += x[i] * x[i];
        }
        -0.5 * s
    }
}

/// Pairs `(a, c)` with `ℓ = -½[a² + (c - sin a)²]`.
pub fn make_twisted(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    Ok((
        Problem::new(
            "twisted",
            default_box(dim),
            Arc::new(Twisted {
                dim,
                amplitude: 1.0,
            }),
        )?,
        AnalyticTarget {
            name: "twisted".into(),
            true_log_integral: 0.5 * dim as f64 * LN_2PI,
            known_modes: vec![vec![0.0; dim]],
            tags: vec![Tag::Rotated],
        },
    ))
}

struct EggBox;

impl LogDensity for EggBox {
    fn dim(&self) -> usize {
        2
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        5.0 * (2.0 + (0.5 * x[0]).cos() * (0.5 * x[1]).cos()).ln()
    }
}

const EGGBOX_EXTENT: f64 = 10.0 * PI;

/// `∫_0^{10π} cos^k(x/2) dx` by quadrature.
pub fn eggbox_cos_power_integral(k: u32) -> f64 {
    quad::integrate(
        |x| (0.5 * x).cos().powi(k as i32),
        0.0,
        EGGBOX_EXTENT,
        1e-13,
    )
    .value
}

/// `ℓ = 5 log(2 + cos(x/2) cos(y/2))` on `[0, 10π]²`. The target is the
/// integral over the box (the function is periodic).
pub fn make_eggbox(dim: usize) -> Result<(Problem, AnalyticTarget)> {
    if dim != 2 {
        return Err(Error::UnsupportedDimension {
            name: "eggbox".into(),
            dim,
        });
    }
    // (2 + ab)^5 = Σ_k C(5,k) 2^{5-k} a^k b^k and the box is a product.
    let binom = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];
    let total: f64 = (0..=5u32)
        .map(|k| {
            let i = eggbox_cos_power_integral(k);
            binom[k as usize] * 2f64.powi(5 - k as i32) * i * i
        })
        .sum();
    let mut modes = vec![];
    for &(start, step) in &[(0.0, 4.0 * PI), (2.0 * PI, 4.0 * PI)] {
        let mut x = start;
        while x <= EGGBOX_EXTENT + 1e-9 {
            let mut y = start;
            while y <= EGGBOX_EXTENT + 1e-9 {
                modes.push(vec![x, y]);
                y += step;
            }
            x += step;
        }
    }
    Ok((
        Problem::new(
            "eggbox",
            BoundsBox::cube(2, 0.0, EGGBOX_EXTENT)?,
            Arc::new(EggBox),
        )?,
        AnalyticTarget {
            name: "eggbox".into(),
            true_log_integral: total.ln(),
            known_modes: modes,
            tags: vec![Tag::Multimodal],
        },
    ))
}

struct Funnel {
    dim: usize,
    sigma: f64,
}

impl LogDensity for Funnel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let v = x[0];
        let mut s = -0.5 * v * v / (self.sigma * self.sigma);
        let inv = (-v).exp();
        for &xi in &x[1..] {
            s -= 0.5 * (xi * xi * inv + v);
        }
        s
    }
}

/// Neal's funnel: `v ~ N(0, σ²)`, `x_i | v ~ N(0, e^v)` with normalized
/// conditionals. The stationary point sits at `v = -σ²(d-1)/2`.
pub fn make_funnel(dim: usize, sigma: f64) -> Result<(Problem, AnalyticTarget)> {
    if dim < 2 {
        return Err(Error::UnsupportedDimension {
            name: "funnel".into(),
            dim,
        });
    }
    let bounds = default_box(dim);
    let v_star = -0.5 * sigma * sigma * (dim as f64 - 1.0);
    let mut mode = vec![0.0; dim];
    mode[0] = v_star;
    let known_modes = if bounds.contains(&mode) {
        vec![mode]
    } else {
        vec![]
    };
    Ok((
        Problem::new("funnel", bounds, Arc::new(Funnel { dim, sigma }))?,
        AnalyticTarget {
            name: "funnel".into(),
            true_log_integral: 0.5 * LN_2PI + sigma.ln() + 0.5 * (dim as f64 - 1.0) * LN_2PI,
            known_modes,
            tags: vec![Tag::Funnel],
        },
    ))
}

struct Ring {
    dim: usize,
    radius: f64,
    width: f64,
}

impl LogDensity for Ring {
    fn dim(&self) -> usize {
        self.dim
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = (r - self.radius) / self.width;
        -0.5 * d * d
    }
}

/// `log ∫_{ℝ^d} exp(-(‖θ‖-R)²/(2w²)) dθ` via the radial integral.
pub fn ring_log_integral(dim: usize, radius: f64, width: f64) -> f64 {
    let k = dim as f64 - 1.0;
    let log_kernel = |r: f64| {
        let d = (r - radius) / width;
        k * r.ln() - 0.5 * d * d
    };
    // Radial peak: k/r = (r - R)/w² → r² - R r - k w² = 0.
    let r_peak = 0.5 * (radius + (radius * radius + 4.0 * k * width * width).sqrt());
    let shift = if k > 0.0 { log_kernel(r_peak) } else { 0.0 };
    let hi = r_peak + 40.0 * width;
    let res = quad::integrate(
        |r| {
            if r <= 0.0 {
                return if k == 0.0 {
                    (log_kernel(0.0_f64.max(r)) - shift).exp()
                } else {
                    0.0
                };
            }
            (log_kernel(r) - shift).exp()
        },
        0.0,
        hi,
        1e-12,
    );
    quad::ln_unit_sphere_area(dim) + shift + res.value.ln()
}

/// Gaussian shell of radius `R` and width `w`; no point mode.
pub fn make_ring(dim: usize, radius: f64, width: f64) -> Result<(Problem, AnalyticTarget)> {
    if dim < 2 {
        return Err(Error::UnsupportedDimension {
            name: "ring".into(),
            dim,
        });
    }
    Ok((
        Problem::new(
            "ring",
            default_box(dim),
            Arc::new(Ring { dim, radius, width }),
        )?,
        AnalyticTarget {
            name: "ring".into(),
            true_log_integral: ring_log_integral(dim, radius, width),
            known_modes: vec![],
            tags: vec![Tag::Saddle],
        },
    ))
}

/// The non-Gaussian suite; the egg-box is included only in 2D.
pub fn make_failure_suite(dim: usize) -> Result<Vec<(Problem, AnalyticTarget)>> {
    if dim < 2 {
        return Err(Error::UnsupportedDimension {
            name: "failure suite".into(),
            dim,
        });
    }
    let mut names = vec![
        "student-t-3",
        "cauchy",
        "skew-normal-5",
        "exp-power-0.5",
        "exp-power-1",
        "banana-0.1",
        "banana-0.5",
        "twisted",
    ];
    if dim == 2 {
        names.push("eggbox");
    }
    names.extend(["funnel-3", "ring", "bimodal-asym"]);
    names.into_iter().map(|n| by_name(n, dim)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln_2pi() -> f64 {
        (2.0 * PI).ln()
    }

    #[test]
    fn gaussian_targets() {
        let (_, t) = make_gaussian(2, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((t.true_log_integral - 1.837_877).abs() < 1e-6);
        let (_, t) = make_gaussian(1, &[0.0], &[4.0]).unwrap();
        assert!((t.true_log_integral - (0.5 * ln_2pi() + 0.5 * 4f64.ln())).abs() < 1e-15);
        assert!(make_gaussian(1, &[0.0], &[0.0]).is_err());
        assert!(make_gaussian(2, &[0.0, 0.0], &[1.0, -1.0]).is_err());
        let (_, t) = make_cigar(16).unwrap();
        assert!(t.true_log_integral.is_finite());
    }

    #[test]
    fn rotated_two_by_two() {
        let cov = SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let (p, t) = make_rotated_gaussian(2, &cov).unwrap();
        assert!((t.true_log_integral - (ln_2pi() + 0.5 * 0.75f64.ln())).abs() < 1e-14);
        // ℓ at (1, 0) = -½ (Σ⁻¹)₀₀ = -½ · 4/3
        assert!((p.evaluate(&[1.0, 0.0]) + 2.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn rotated_identity_matches_diagonal() {
        let (p1, t1) = make_rotated_gaussian(2, &SymMatrix::identity(2)).unwrap();
        let (p2, t2) = make_gaussian(2, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t1.true_log_integral, t2.true_log_integral);
        for x in [[0.3, -1.2], [4.0, 2.0]] {
            assert!((p1.evaluate(&x) - p2.evaluate(&x)).abs() < 1e-15);
        }
    }

    #[test]
    fn rotated_rejects_indefinite() {
        let cov = SymMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            make_rotated_gaussian(2, &cov),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn rotated_cigar_target_matches_eigenvalue_sum() {
        let (_, t) = make_rotated_cigar(8).unwrap();
        let want = 4.0 * ln_2pi() + 0.5 * cigar_spectrum(8).iter().map(|v| v.ln()).sum::<f64>();
        assert!((t.true_log_integral - want).abs() < 1e-10);
    }

    #[test]
    fn mixture_reduces_to_gaussian() {
        let (p, t) = make_mixture(
            3,
            &[MixtureComponent {
                weight: 1.0,
                mean: vec![0.5, 0.0, -1.0],
                variances: vec![1.0, 2.0, 0.5],
            }],
        )
        .unwrap();
        let (g, tg) = make_gaussian(3, &[0.5, 0.0, -1.0], &[1.0, 2.0, 0.5]).unwrap();
        assert!((t.true_log_integral - tg.true_log_integral).abs() < 1e-14);
        let x = [0.1, 0.7, -2.0];
        assert!((p.evaluate(&x) - g.evaluate(&x)).abs() < 1e-14);
        assert!(make_mixture(3, &[]).is_err());
    }

    #[test]
    fn mixture4_layout() {
        let (_, t) = make_mixture4(2).unwrap();
        let mut modes = t.known_modes.clone();
        modes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(modes[0], vec![-5.0, -5.0]);
        assert_eq!(modes[3], vec![5.0, 5.0]);
        let (_, t) = make_mixture4(4).unwrap();
        let gap = linalg::norm2(
            &t.known_modes[0]
                .iter()
                .zip(&t.known_modes[1])
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        assert!((gap - 3.5).abs() < 1e-12);
        assert!((t.true_log_integral - 2.0 * ln_2pi()).abs() < 1e-12);
    }

    #[test]
    fn student_t_closed_form_matches_radial_quadrature() {
        for (dim, nu) in [(2usize, 3.0f64), (5, 3.0), (3, 1.0)] {
            let (_, t) = make_student_t(dim, nu).unwrap();
            let k = dim as f64 - 1.0;
            let r = quad::integrate(
                |r| (k * r.ln() - 0.5 * (nu + dim as f64) * (r * r / nu).ln_1p()).exp(),
                0.0,
                f64::INFINITY,
                1e-12,
            );
            let want = quad::ln_unit_sphere_area(dim) + r.value.ln();
            assert!((t.true_log_integral - want).abs() < 1e-9, "{dim} {nu}");
        }
    }

    #[test]
    fn skew_normal_per_dim_integral() {
        let r = quad::integrate(
            |x| (-0.5 * x * x + quad::log_ndtr(5.0 * x)).exp(),
            f64::NEG_INFINITY,
            f64::INFINITY,
            1e-12,
        );
        assert!((r.value - 0.5 * (2.0 * PI).sqrt()).abs() < 1e-10);
        let m = skew_normal_mode(5.0);
        assert!(m > 0.3 && m < 0.8, "{m}");
    }

    #[test]
    fn exp_power_per_dim_integral() {
        for beta in [0.5, 1.0, 2.0] {
            let r = quad::integrate(
                |x: f64| (-x.abs().powf(beta)).exp(),
                f64::NEG_INFINITY,
                f64::INFINITY,
                1e-12,
            );
            let (_, t) = make_exp_power(1, beta).unwrap();
            assert!(
                (r.value.ln() - t.true_log_integral).abs() < 1e-9,
                "beta {beta}"
            );
        }
    }

    #[test]
    fn banana_and_twisted_targets_by_quadrature() {
        // 2D: integrate the inner coordinate numerically for each outer value,
        // over a ±15 window around the conditional ridge.
        type Pair = (
            &'static str,
            Box<dyn Fn(f64, f64) -> f64>,
            Box<dyn Fn(f64) -> f64>,
        );
        let cases: Vec<Pair> = vec![
            (
                "banana",
                Box::new(|a: f64, c: f64| -0.5 * (a * a / 4.0 + (c + 0.5 * a * a).powi(2))),
                Box::new(|a: f64| -0.5 * a * a),
            ),
            (
                "twisted",
                Box::new(|a: f64, c: f64| -0.5 * (a * a + (c - a.sin()).powi(2))),
                Box::new(|a: f64| a.sin()),
            ),
        ];
        for (name, f, ridge) in cases {
            let outer = quad::integrate(
                |a| {
                    let r = ridge(a);
                    quad::integrate(|c| f(a, c).exp(), r - 15.0, r + 15.0, 1e-13).value
                },
                -40.0,
                40.0,
                1e-12,
            );
            let t = if name == "banana" {
                make_banana(2, 0.5).unwrap().1
            } else {
                make_twisted(2).unwrap().1
            };
            assert!(
                (outer.value.ln() - t.true_log_integral).abs() < 1e-9,
                "{name}"
            );
        }
    }

    #[test]
    fn eggbox_integral_matches_closed_form() {
        for k in 0..=5u32 {
            let q = eggbox_cos_power_integral(k);
            let want = if k % 2 == 1 {
                0.0
            } else {
                let kk = k as usize;
                let c = (1..=kk).product::<usize>() as f64
                    / ((1..=kk / 2).product::<usize>() as f64).powi(2);
                EGGBOX_EXTENT * c / 2f64.powi(k as i32)
            };
            assert!((q - want).abs() < 1e-9, "k={k}: {q} vs {want}");
        }
        assert!(matches!(
            make_eggbox(4),
            Err(Error::UnsupportedDimension { .. })
        ));
        let (_, t) = make_eggbox(2).unwrap();
        assert_eq!(t.known_modes.len(), 18);
    }

    #[test]
    fn funnel_target_and_mode() {
        let (p, t) = make_funnel(2, 3.0).unwrap();
        assert_eq!(t.known_modes, vec![vec![-4.5, 0.0]]);
        assert!(
            (t.true_log_integral - (ln_2pi() + 3f64.ln())).abs() < 1e-14,
            "{}",
            t.true_log_integral
        );
        // Integrate x analytically check: ∫ exp ℓ dx at fixed v = √(2π) exp(-v²/18).
        let v = 1.3;
        let r = quad::integrate(
            |x| p.evaluate(&[v, x]).exp(),
            f64::NEG_INFINITY,
            f64::INFINITY,
            1e-12,
        );
        assert!((r.value - (2.0 * PI).sqrt() * (-v * v / 18.0f64).exp()).abs() < 1e-10);
        let (_, t4) = make_funnel(4, 3.0).unwrap();
        assert!(t4.known_modes.is_empty());
    }

    #[test]
    fn ring_two_dim_by_cartesian_quadrature() {
        let (p, t) = make_ring(2, 3.0, 0.3).unwrap();
        let outer = quad::integrate(
            |x| quad::integrate(|y| p.density().log_density(&[x, y]).exp(), -5.0, 5.0, 1e-12).value,
            -5.0,
            5.0,
            1e-11,
        );
        assert!((outer.value.ln() - t.true_log_integral).abs() < 1e-8);
    }

    #[test]
    fn failure_suite_contents() {
        let two = make_failure_suite(2).unwrap();
        assert_eq!(two.len(), 12);
        let eight = make_failure_suite(8).unwrap();
        assert_eq!(eight.len(), 11);
        assert!(eight.iter().all(|(_, t)| t.name != "eggbox"));
        assert!(make_failure_suite(1).is_err());
    }

    #[test]
    fn registry_covers_every_name() {
        for name in PROBLEM_NAMES {
            let dim = if *name == "eggbox" { 2 } else { 4 };
            let (p, t) = by_name(name, dim).unwrap();
            assert_eq!(p.name(), *name);
            assert!(t.true_log_integral.is_finite(), "{name}");
        }
        assert!(matches!(by_name("nope", 2), Err(Error::UnknownProblem(_))));
    }
}
