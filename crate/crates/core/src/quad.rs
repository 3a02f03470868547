//! Adaptive Gauss–Kronrod (7/15) quadrature and the few special functions
//! the test-function suite needs.
//!
//! Used to build reference integrals for targets without a closed form; it
//! shares no code with the evidence pipeline.

use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
}

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let x = h * XGK[k];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[k] * s;
        if k % 2 == 1 {
            gauss += WG[k / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive integration of `f` over `[a, b]`; either end may be
/// infinite. Bisects the worst segment until the summed error estimate is
/// below `rel_tol · |value|`.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> QuadResult {
    if a == b {
        return QuadResult {
            value: 0.0,
            abs_error: 0.0,
            intervals: 0,
        };
    }
    if a > b {
        let r = integrate(f, b, a, rel_tol);
        return QuadResult {
            value: -r.value,
            ..r
        };
    }
    match (a.is_finite(), b.is_finite()) {
        (true, true) => adaptive(&f, a, b, rel_tol),
        // x = a + t / (1 - t), t in [0, 1)
        (true, false) => adaptive(
            &|t: f64| {
                if t >= 1.0 {
                    return 0.0;
                }
                let u = 1.0 - t;
                f(a + t / u) / (u * u)
            },
            0.0,
            1.0,
            rel_tol,
        ),
        // x = b - t / (1 - t)
        (false, true) => adaptive(
            &|t: f64| {
                if t >= 1.0 {
                    return 0.0;
                }
                let u = 1.0 - t;
                f(b - t / u) / (u * u)
            },
            0.0,
            1.0,
            rel_tol,
        ),
        // x = t / (1 - t²), t in (-1, 1)
        (false, false) => adaptive(
            &|t: f64| {
                if t.abs() >= 1.0 {
                    return 0.0;
                }
                let u = 1.0 - t * t;
                f(t / u) * (1.0 + t * t) / (u * u)
            },
            -1.0,
            1.0,
            rel_tol,
        ),
    }
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> QuadResult {
    const MAX_SEGMENTS: usize = 5000;
    let (v, e) = gk15(f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Segment {
        a,
        b,
        value: v,
        error: e,
    });
    let mut total = v;
    let mut error = e;
    while error > rel_tol * total.abs() && heap.len() < MAX_SEGMENTS {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk15(f, worst.a, mid);
        let (v2, e2) = gk15(f, mid, worst.b);
        total += v1 + v2 - worst.value;
        error += e1 + e2 - worst.error;
        heap.push(Segment {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
    // Re-sum to avoid drift from the running updates.
    let mut segs: Vec<Segment> = heap.into_vec();
    segs.sort_by(|x, y| x.a.total_cmp(&y.a));
    QuadResult {
        value: segs.iter().map(|s| s.value).sum(),
        abs_error: segs.iter().map(|s| s.error).sum(),
        intervals: segs.len(),
    }
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// `log Φ(z)` for the standard normal CDF, accurate far into the lower tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z > 6.0 {
        // Φ(z) = 1 - Φ(-z); Φ(-z) is tiny.
        return (-0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)).ln_1p();
    }
    if z > -20.0 {
        return (0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)).ln();
    }
    // Asymptotic expansion: Φ(z) ≈ φ(z)/|z| · Σ (-1)^k (2k-1)!! / z^{2k}
    let z2 = z * z;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=8 {
        term *= -((2 * k - 1) as f64) / z2;
        sum += term;
    }
    -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + sum.ln()
}

/// Surface area of the unit sphere `S^{d-1}`, in log form.
pub fn ln_unit_sphere_area(d: usize) -> f64 {
    let h = 0.5 * d as f64;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn gaussian_over_real_line() {
        let r = integrate(
            |x| (-0.5 * x * x).exp(),
            f64::NEG_INFINITY,
            f64::INFINITY,
            1e-12,
        );
        assert!((r.value - (2.0 * PI).sqrt()).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn radial_moment_matches_gamma() {
        // ∫_0^∞ r^{d-1} e^{-r²/2} dr = 2^{d/2-1} Γ(d/2)
        for d in [1usize, 2, 5, 16] {
            let r = integrate(
                |x| x.powi(d as i32 - 1) * (-0.5 * x * x).exp(),
                0.0,
                f64::INFINITY,
                1e-12,
            );
            let want = ((d as f64 / 2.0 - 1.0) * 2f64.ln() + ln_gamma(d as f64 / 2.0)).exp();
            assert!(
                (r.value / want - 1.0).abs() < 1e-10,
                "d={d}: {} vs {want}",
                r.value
            );
        }
    }

    #[test]
    fn finite_interval_polynomial() {
        let r = integrate(|x| x.powi(5) - 3.0 * x, -1.0, 2.0, 1e-14);
        let want = (64.0 - 1.0) / 6.0 - 1.5 * (4.0 - 1.0);
        assert!((r.value - want).abs() < 1e-12);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let a = integrate(|x| x.exp(), 0.0, 1.0, 1e-12).value;
        let b = integrate(|x| x.exp(), 1.0, 0.0, 1e-12).value;
        assert_eq!(a, -b);
    }

    #[test]
    fn log_ndtr_matches_reference_values() {
        assert!((log_ndtr(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Φ(-10) = 7.619853024160527e-24
        let want = 7.619_853_024_160_527e-24f64.ln();
        assert!((log_ndtr(-10.0) / want - 1.0).abs() < 1e-11);
        // continuity at the asymptotic switch
        let a = log_ndtr(-20.0 + 1e-9);
        let b = log_ndtr(-20.0 - 1e-9);
        assert!((a - b).abs() < 1e-6);
        assert!(log_ndtr(-200.0).is_finite());
        assert!(log_ndtr(10.0) < 0.0 && log_ndtr(10.0) > -1e-22);
    }

    #[test]
    fn sphere_area() {
        assert!((ln_unit_sphere_area(2) - (2.0 * PI).ln()).abs() < 1e-14);
        assert!((ln_unit_sphere_area(3) - (4.0 * PI).ln()).abs() < 1e-14);
    }
}
