//! Dense numerics: symmetric eigendecomposition (cyclic Jacobi), Cholesky,
//! stable log-sum-exp and greedy L∞ deduplication.
//!
//! Everything here is a pure function of its inputs with a fixed operation
//! order, so results are bit-reproducible for a given input.

use crate::error::{Error, Result};

/// Dense symmetric matrix, stored row-major and kept exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * m.dim + i] = v;
        }
        m
    }

    /// Builds from an arbitrary square row-major matrix, averaging the two
    /// triangles.
    pub fn from_rows_symmetrized(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidParameter("matrix must be square".into()));
        }
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..=i {
                let v = 0.5 * (rows[i][j] + rows[j][i]);
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    /// Builds from a square matrix that must already be exactly symmetric.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidParameter("matrix must be square".into()));
            }
            for j in 0..i {
                if r[j] != rows[j][i] {
                    return Err(Error::InvalidParameter(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data
            .chunks(self.dim.max(1))
            .map(|r| r.to_vec())
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.dim).map(|row| dot(row, x)).collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.data
            .chunks(self.dim.max(1))
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[k]` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

impl EigenResult {
    /// Rebuilds `V f(Λ) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.eigenvalues.len();
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = (0..n)
                    .map(|k| {
                        self.eigenvectors[k][i] * f(self.eigenvalues[k]) * self.eigenvectors[k][j]
                    })
                    .sum();
                m.set(i, j, v);
            }
        }
        m
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// Cyclic Jacobi eigendecomposition with a fixed `(p, q)` sweep order.
pub fn eig_symmetric(a: &SymMatrix) -> Result<EigenResult> {
    if !a.is_finite() {
        return Err(Error::NumericInput("matrix has non-finite entries".into()));
    }
    let n = a.dim();
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.norm_frobenius();
    let tol = JACOBI_REL_TOL * scale;
    let mut sweeps = 0;

    while sweeps < JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_infinite() {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
                m[p * n + p] = app - t * apq;
                m[q * n + q] = aqq + t * apq;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].total_cmp(&m[j * n + j]).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&k| m[k * n + k]).collect();
    let eigenvectors = order
        .iter()
        .map(|&k| (0..n).map(|i| v[i * n + k]).collect())
        .collect();
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

/// Lower Cholesky factor, row-major.
pub fn cholesky(a: &SymMatrix) -> Result<Vec<f64>> {
    let n = a.dim();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// `log det A` for positive definite `A`, via Cholesky.
pub fn log_det_pd(a: &SymMatrix) -> Result<f64> {
    let n = a.dim();
    let l = cholesky(a)?;
    Ok(2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>())
}

/// `log Σ exp(x)`, shifted by the maximum. An all-`-∞` input gives `-∞`.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidParameter(
            "logsumexp of an empty slice".into(),
        ));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Ok(f64::NAN);
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return Ok(m);
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dedup {
    /// Surviving indices, in the order they were accepted (descending score).
    pub kept: Vec<usize>,
    /// `survivor[i]` is the kept index that absorbed `i` (itself if kept).
    pub survivor: Vec<usize>,
}

/// Greedy L∞ deduplication.
///
/// Points are visited in descending score (ties by lowest index, NaN last);
/// a point is dropped when it lies within `radius` of an already-kept point.
pub fn dedup_linf(points: &[Vec<f64>], scores: &[f64], radius: f64) -> Dedup {
    dedup_linf_scaled(points, scores, radius, None)
}

/// As [`dedup_linf`], measuring coordinate `i` in units of `scales[i]`.
pub fn dedup_linf_scaled(
    points: &[Vec<f64>],
    scores: &[f64],
    radius: f64,
    scales: Option<&[f64]>,
) -> Dedup {
    assert_eq!(points.len(), scores.len());
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (scores[i], scores[j]);
        match (a.is_nan(), b.is_nan()) {
            (true, true) => i.cmp(&j),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => b.total_cmp(&a).then(i.cmp(&j)),
        }
    });
    let mut kept: Vec<usize> = Vec::new();
    let mut survivor = vec![usize::MAX; points.len()];
    for &i in &order {
        let hit = kept.iter().copied().find(|&k| {
            let dist = match scales {
                Some(s) => linf_distance_scaled(&points[i], &points[k], s),
                None => linf_distance(&points[i], &points[k]),
            };
            dist <= radius
        });
        match hit {
            Some(k) => survivor[i] = k,
            None => {
                survivor[i] = i;
                kept.push(i);
            }
        }
    }
    Dedup { kept, survivor }
}

/// Orthonormalizes the given vectors (modified Gram-Schmidt, two passes).
/// Vectors that become numerically dependent are dropped.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        let norm0 = norm2(&w);
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&w, b);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= c * bi;
                }
            }
        }
        let norm = norm2(&w);
        if norm > 1e-10 * norm0.max(f64::MIN_POSITIVE) {
            w.iter_mut().for_each(|x| *x /= norm);
            basis.push(w);
        }
    }
    basis
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[inline]
pub fn linf_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[inline]
pub fn linf_distance_scaled(a: &[f64], b: &[f64], scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(scales)
        .fold(0.0, |m, ((x, y), s)| m.max((x - y).abs() / s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_eigen(a: &SymMatrix, e: &EigenResult) {
        let n = a.dim();
        for i in 0..n {
            for j in 0..n {
                let g = dot(&e.eigenvectors[i], &e.eigenvectors[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() <= 1e-10, "VᵀV[{i}][{j}] = {g}");
            }
        }
        let scale = a.norm_inf().max(f64::MIN_POSITIVE);
        for (k, vec) in e.eigenvectors.iter().enumerate() {
            let av = a.mul_vec(vec);
            for i in 0..n {
                let r = av[i] - e.eigenvalues[k] * vec[i];
                assert!(r.abs() <= 1e-8 * scale, "residual {r}");
            }
        }
    }

    #[test]
    fn eig_identity() {
        let a = SymMatrix::identity(3);
        let e = eig_symmetric(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        check_eigen(&a, &e);
    }

    #[test]
    fn eig_two_by_two() {
        let a = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = eig_symmetric(&a).unwrap();
        assert!((e.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 3.0).abs() < 1e-14);
        check_eigen(&a, &e);
    }

    #[test]
    fn eig_diagonal_is_exact() {
        let a = SymMatrix::from_diagonal(&[1e6, 1e-6]);
        let e = eig_symmetric(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![1e-6, 1e6]);
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn eig_rejects_nan() {
        let mut a = SymMatrix::identity(2);
        a.set(0, 1, f64::NAN);
        assert!(matches!(eig_symmetric(&a), Err(Error::NumericInput(_))));
    }

    #[test]
    fn eig_dense_reconstructs() {
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                (0..7)
                    .map(|j| ((i * 7 + j) as f64 * 0.37).sin() + ((j * 7 + i) as f64 * 0.37).sin())
                    .collect()
            })
            .collect();
        let a = SymMatrix::from_rows_symmetrized(&rows).unwrap();
        let e = eig_symmetric(&a).unwrap();
        check_eigen(&a, &e);
        let tr: f64 = e.eigenvalues.iter().sum();
        assert!((tr - a.trace()).abs() < 1e-9 * a.norm_inf());
    }

    #[test]
    fn log_det_examples() {
        assert_eq!(log_det_pd(&SymMatrix::identity(4)).unwrap(), 0.0);
        assert!((log_det_pd(&SymMatrix::from_diagonal(&[3.0])).unwrap() - 3f64.ln()).abs() < 1e-15);
        let a = SymMatrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert!((log_det_pd(&a).unwrap() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_det_reports_pivot() {
        let a = SymMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 2.0],
            vec![0.0, 2.0, 1.0],
        ])
        .unwrap();
        match log_det_pd(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln());
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 5.0]).unwrap(), 5.0);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn dedup_examples() {
        let d = dedup_linf(&[vec![0.0, 0.0], vec![1e-9, 0.0]], &[1.0, 2.0], 1e-6);
        assert_eq!(d.kept, vec![1]);
        assert_eq!(d.survivor, vec![1, 1]);

        let d = dedup_linf(&[vec![0.0, 0.0], vec![1.0, 1.0]], &[1.0, 1.0], 0.5);
        assert_eq!(d.kept, vec![0, 1]);

        let d = dedup_linf(&[vec![0.0], vec![0.4], vec![0.8]], &[3.0, 1.0, 2.0], 0.5);
        let mut kept = d.kept.clone();
        kept.sort();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(d.survivor, vec![0, 0, 2]);

        let d = dedup_linf(&[], &[], 1.0);
        assert!(d.kept.is_empty());
    }

    #[test]
    fn dedup_ties_prefer_lowest_index() {
        let d = dedup_linf(&[vec![0.0], vec![0.1]], &[1.0, 1.0], 0.5);
        assert_eq!(d.kept, vec![0]);
    }

    #[test]
    fn orthonormalize_drops_dependent() {
        let q = orthonormalize(&[
            vec![1.0, 1.0, 0.0],
            vec![2.0, 2.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ]);
        assert_eq!(q.len(), 2);
        assert!(dot(&q[0], &q[1]).abs() < 1e-15);
    }
}
