//! Small numerical kernels shared across modules: zeta sums, Poisson
//! weights, Gauss–Legendre rules, least-squares fits and interval estimates.

use statrs::distribution::{Beta, ContinuousCDF, Normal};
use std::sync::OnceLock;

const BERNOULLI_2J: [f64; 10] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
];

/// Hurwitz zeta `Σ_{k≥0} (k+a)^{-s}` for `s > 1`, `a > 0`, by Euler–Maclaurin.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    debug_assert!(s > 1.0 && a > 0.0);
    let shift = if a >= 12.0 { 0 } else { (12.0 - a).ceil() as usize };
    let mut sum = 0.0;
    for k in 0..shift {
        sum += (a + k as f64).powf(-s);
    }
    let b = a + shift as f64;
    sum += b.powf(1.0 - s) / (s - 1.0) + 0.5 * b.powf(-s);
    // rising factorial s(s+1)...(s+2j-2) / (2j)!
    let mut coeff = s / 2.0;
    let mut pow = b.powf(-s - 1.0);
    for (j, b2j) in BERNOULLI_2J.iter().enumerate() {
        if j > 0 {
            let m = 2.0 * j as f64;
            coeff *= (s + m - 1.0) * (s + m) / ((m + 1.0) * (m + 2.0));
            pow /= b * b;
        }
        let term = b2j * coeff * pow;
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// `Σ_{k≥from} k^{-s}` for integer `from ≥ 1`.
pub fn zeta_tail(s: f64, from: u64) -> f64 {
    hurwitz_zeta(s, from as f64)
}

/// Riemann zeta for `s > 1`.
pub fn zeta(s: f64) -> f64 {
    hurwitz_zeta(s, 1.0)
}

/// Poisson(`mean`) weights truncated on the right so that the dropped mass
/// is below `tol`. Returned vector starts at k = 0; left-tail entries may be 0.
pub fn poisson_weights(mean: f64, tol: f64) -> Vec<f64> {
    if mean <= 0.0 {
        return vec![1.0];
    }
    let ln_mean = mean.ln();
    let mut weights = Vec::with_capacity((mean + 10.0 * mean.sqrt() + 40.0) as usize);
    let mut ln_w = -mean;
    let mut total = 0.0;
    let mut k = 0u64;
    loop {
        let w = ln_w.exp();
        weights.push(w);
        total += w;
        if k as f64 > mean && 1.0 - total <= tol {
            break;
        }
        k += 1;
        ln_w += ln_mean - (k as f64).ln();
        if k as f64 > mean + 40.0 * mean.sqrt() + 200.0 {
            break;
        }
    }
    weights
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Cached 20-point rule.
pub fn gl20() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(20))
}

/// Integrate `f` over `[a, b]` with `panels` equal panels of the 20-point rule.
pub fn integrate_panels(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let (x, w) = gl20();
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            s += wi * f(mid + 0.5 * h * xi);
        }
        total += 0.5 * h * s;
    }
    total
}

/// Ordinary least squares `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Standard error of the slope from the residual variance (0 for exact fits
    /// or fewer than three points).
    pub slope_se: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    fit_line_weighted(x, y, &vec![1.0; x.len()])
}

/// Weighted least squares; weights are inverse variances. With non-unit
/// weights the slope SE is the model-based `1/sqrt(Σw (x-x̄)²)`.
pub fn fit_line_weighted(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    let n = x.len();
    assert!(n >= 2 && y.len() == n && w.len() == n);
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        sxx += w[i] * (x[i] - xm).powi(2);
        sxy += w[i] * (x[i] - xm) * (y[i] - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let unit = w.iter().all(|&v| v == 1.0);
    let slope_se = if unit {
        if n > 2 {
            let rss: f64 = (0..n)
                .map(|i| (y[i] - intercept - slope * x[i]).powi(2))
                .sum();
            (rss / (n as f64 - 2.0) / sxx).sqrt()
        } else {
            0.0
        }
    } else {
        (1.0 / sxx).sqrt()
    };
    LineFit {
        intercept,
        slope,
        slope_se,
    }
}

/// Leading coefficient of the least-squares quadratic through `(x, y)`.
pub fn quadratic_curvature(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    // centred monomials for conditioning
    let (mut s2, mut s3, mut s4, mut sy, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        let u = xi - xm;
        s2 += u * u;
        s3 += u * u * u;
        s4 += u * u * u * u;
        sy += yi;
        sy1 += u * yi;
        sy2 += u * u * yi;
    }
    // normal equations for a + b u + c u²; s1 = 0 by centring
    let m = [[n, 0.0, s2], [0.0, s2, s3], [s2, s3, s4]];
    let r = [sy, sy1, sy2];
    let det3 = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det3(m);
    let mut mc = m;
    for i in 0..3 {
        mc[i][2] = r[i];
    }
    det3(mc) / d
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Two-sided Clopper–Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    let a = 1.0 - confidence;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64)
            .unwrap()
            .inverse_cdf(a / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64)
            .unwrap()
            .inverse_cdf(1.0 - a / 2.0)
    };
    (lo, hi)
}

/// Empirical quantile (lower order statistic) of an already sorted sample.
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Distribution-free confidence interval for the `p`-quantile from order
/// statistics (normal approximation to the binomial index).
pub fn quantile_ci(sorted: &[f64], p: f64, confidence: f64) -> (f64, f64) {
    let n = sorted.len() as f64;
    let z = normal_quantile(0.5 + confidence / 2.0);
    let half = z * (n * p * (1.0 - p)).sqrt();
    let lo = ((n * p - half).floor() as isize).clamp(1, sorted.len() as isize) as usize - 1;
    let hi = ((n * p + half).ceil() as isize).clamp(1, sorted.len() as isize) as usize - 1;
    (sorted[lo], sorted[hi])
}

/// Mean and standard error with a fixed-order sum.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
