//! Densities of symmetric α-stable laws and their coordinatewise products.
//!
//! For a constant symbol the limit process moves each coordinate as an
//! independent one-dimensional symmetric stable process, so its transition
//! density is a product of 1-D stable densities with characteristic function
//! `exp(-σ t |ξ|^α)`.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::kernel_model::ModelSpec;
use crate::lattice_generator::DensityGrid;
use crate::numerics::gl20;

/// `e^{-U^α}` is below this at the quadrature cut-off.
const DECAY_EXPONENT: f64 = 42.0;
const MAX_PANELS: usize = 400_000;

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::InvalidArgument(format!("alpha must be in (0, 2], got {alpha}")));
    }
    Ok(())
}

/// `∫₀^∞ w(u) e^{-u^α} du` for an oscillating weight with frequency `freq`.
fn fourier_integral(alpha: f64, freq: f64, weight: impl Fn(f64) -> f64) -> Result<f64> {
    let (nodes, weights) = gl20();
    let u_max = DECAY_EXPONENT.powf(1.0 / alpha);
    let osc = if freq > 0.0 { PI / freq } else { f64::INFINITY };
    let first = osc.min(0.5).min(u_max);
    let mut edges = Vec::with_capacity(128);
    // geometric grading towards the cusp of u^α at 0
    for j in (1..=48).rev() {
        edges.push(first * 0.5f64.powi(j));
    }
    edges.push(first);
    let mut u = first;
    while u < u_max {
        let width = osc.min(0.25 * u.max(1.0)).min(u_max - u);
        u += width;
        edges.push(u);
        if edges.len() > MAX_PANELS {
            return Err(Error::Quadrature(format!(
                "more than {MAX_PANELS} panels needed (alpha = {alpha}, frequency = {freq})"
            )));
        }
    }
    let mut acc = 0.0;
    let mut lo = 0.0;
    for &hi in &edges {
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        let mut panel = 0.0;
        for (x, w) in nodes.iter().zip(weights) {
            let v = mid + half * x;
            panel += w * weight(v) * (-v.powf(alpha)).exp();
        }
        acc += half * panel;
        lo = hi;
    }
    Ok(acc)
}

/// Standard density `g(z) = (1/π)∫₀^∞ cos(uz) e^{-u^α} du` by quadrature.
fn standard_density_quadrature(alpha: f64, z: f64) -> Result<f64> {
    let z = z.abs();
    Ok(fourier_integral(alpha, z, |u| (u * z).cos())? / PI)
}

/// Large-`|z|` series `(1/π) Σ (-1)^{k+1} Γ(αk+1)/k! sin(παk/2) |z|^{-αk-1}`;
/// `None` when it cannot reach the requested accuracy.
fn standard_density_series(alpha: f64, z: f64) -> Option<f64> {
    series(alpha, z.abs(), |k| gamma(alpha * k + 1.0), 1.0).map(|s| s / PI)
}

fn series(alpha: f64, z: f64, coeff: impl Fn(f64) -> f64, extra: f64) -> Option<f64> {
    if z <= 0.0 {
        return None;
    }
    let ln_z = z.ln();
    let mut sum = 0.0;
    let mut largest = 0.0f64;
    let mut ln_fact = 0.0;
    for k in 1..200 {
        let kf = k as f64;
        ln_fact += kf.ln();
        let c = coeff(kf);
        if !c.is_finite() {
            return None;
        }
        let mag = (c.ln() - ln_fact - (alpha * kf + extra) * ln_z).exp();
        let term = if k % 2 == 1 { 1.0 } else { -1.0 } * mag * (PI * alpha * kf / 2.0).sin();
        sum += term;
        largest = largest.max(mag);
        if mag < 1e-15 * sum.abs().max(1e-300) || mag < 1e-18 {
            return (largest * 1e-15 < 1e-11).then_some(sum);
        }
        if alpha > 1.0 && k > 3 && mag > largest * 0.999 && mag > 1e-12 {
            // asymptotic series started to diverge before converging
            return None;
        }
    }
    None
}

/// Density of the symmetric stable law with characteristic function
/// `exp(-τ|ξ|^α)` at `x`.
pub fn stable_1d_density(alpha: f64, tau: f64, x: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    if alpha == 1.0 {
        return Ok(tau / (PI * (tau * tau + x * x)));
    }
    if alpha == 2.0 {
        return Ok((-x * x / (4.0 * tau)).exp() / (4.0 * PI * tau).sqrt());
    }
    let scale = tau.powf(1.0 / alpha);
    let z = x / scale;
    let g = if z.abs() > 4.0 {
        match standard_density_series(alpha, z) {
            Some(v) => v,
            None => standard_density_quadrature(alpha, z)?,
        }
    } else {
        standard_density_quadrature(alpha, z)?
    };
    Ok(g / scale)
}

/// Same density always evaluated by quadrature (for cross-checks).
pub fn stable_1d_density_quadrature(alpha: f64, tau: f64, x: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    let scale = tau.powf(1.0 / alpha);
    Ok(standard_density_quadrature(alpha, x / scale)? / scale)
}

/// Distribution function of the same law.
pub fn stable_1d_cdf(alpha: f64, tau: f64, x: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_tau(tau)?;
    if alpha == 1.0 {
        return Ok(0.5 + (x / tau).atan() / PI);
    }
    let z = x / tau.powf(1.0 / alpha);
    if z == 0.0 {
        return Ok(0.5);
    }
    let a = z.abs();
    let upper = if alpha == 2.0 {
        0.5 * statrs::function::erf::erfc(a / 2.0)
    } else {
        // 1 - F(a) = (1/π) Σ (-1)^{k+1} Γ(αk)/k! sin(παk/2) a^{-αk}
        let tail = if a > 4.0 {
            series(alpha, a, |k| gamma(alpha * k), 0.0).map(|s| s / PI)
        } else {
            None
        };
        match tail {
            Some(v) => v,
            None => 0.5 - fourier_integral(alpha, a, |u| (u * a).sin() / u)? / PI,
        }
    };
    Ok(if z > 0.0 { 1.0 - upper } else { upper })
}

/// `P(a ≤ X_τ < b)` for the 1-D law.
pub fn stable_1d_interval(alpha: f64, tau: f64, a: f64, b: f64) -> Result<f64> {
    Ok(stable_1d_cdf(alpha, tau, b)? - stable_1d_cdf(alpha, tau, a)?)
}

/// `g(0) = Γ(1 + 1/α)/π`: peak of the standard density.
pub fn standard_peak(alpha: f64) -> f64 {
    gamma(1.0 + 1.0 / alpha) / PI
}

/// Oracle for the constant-symbol limit; `sigma` converts chain time to the
/// standard stable clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub alpha: f64,
    pub d: usize,
    pub sigma: f64,
}

impl OracleSpec {
    pub fn new(alpha: f64, d: usize, sigma: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(sigma > 0.0 && sigma.is_finite()) || d == 0 {
            return Err(Error::InvalidArgument(format!("need sigma > 0 and d ≥ 1, got {sigma}, {d}")));
        }
        Ok(OracleSpec { alpha, d, sigma })
    }

    /// Oracle for a model; only constant symbols have one.
    pub fn for_model(spec: &ModelSpec, sigma: f64) -> Result<Self> {
        if !spec.symbol.is_constant() {
            return Err(Error::OracleInvalid);
        }
        Self::new(spec.alpha, spec.d, sigma)
    }
}

/// `Π_i stable_1d_density(α, σt, y_i - x_i)`.
pub fn product_density(oracle: &OracleSpec, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != oracle.d || y.len() != oracle.d {
        return Err(Error::InvalidArgument("point dimension differs from oracle d".into()));
    }
    let tau = oracle.sigma * t;
    let mut p = 1.0;
    for (a, b) in x.iter().zip(y) {
        p *= stable_1d_density(oracle.alpha, tau, b - a)?;
    }
    Ok(p)
}

/// `σ` making the oracle's on-diagonal density equal `p` at time `t`.
pub fn sigma_from_peak(alpha: f64, d: usize, t: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && t > 0.0) {
        return Err(Error::InvalidArgument(format!("need p > 0 and t > 0, got {p}, {t}")));
    }
    Ok((standard_peak(alpha).powi(d as i32) / p).powf(alpha / d as f64) / t)
}

/// One-scalar clock calibration from the on-diagonal value of a lattice
/// density at its own time. A single data point makes the least-squares fit
/// exact.
pub fn calibrate_sigma(spec: &ModelSpec, reference: &DensityGrid) -> Result<f64> {
    if !spec.symbol.is_constant() {
        return Err(Error::OracleInvalid);
    }
    let p = reference
        .at(&reference.source.coords)
        .ok_or_else(|| Error::InvalidArgument("reference does not contain its source".into()))?;
    sigma_from_peak(spec.alpha, spec.d, reference.t, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_model::LatticeSite;
    use crate::lattice_generator::{
        build_generator, heat_kernel, BoundaryMode, GeneratorParams, RateConvention, Window,
    };
    use crate::numerics::fit_line;

    #[test]
    fn cauchy_peak() {
        assert!((stable_1d_density(1.0, 1.0, 0.0).unwrap() - 1.0 / PI).abs() < 1e-15);
        let o = OracleSpec::new(1.0, 2, 1.0).unwrap();
        let p = product_density(&o, 1.0, &[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert!((p - 1.0 / (PI * PI)).abs() < 1e-15);
        assert!(stable_1d_density(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn closed_form_matches_quadrature() {
        for tau in [0.1, 0.5, 1.0, 3.0, 10.0] {
            for i in 0..=100 {
                let x = -50.0 + i as f64;
                let a = stable_1d_density(1.0, tau, x).unwrap();
                let b = stable_1d_density_quadrature(1.0, tau, x).unwrap();
                assert!((a - b).abs() < 1e-8, "tau={tau} x={x}: {a} vs {b}");
            }
        }
        for x in [0.0, 0.5, 2.0, 7.0] {
            let a = stable_1d_density(2.0, 0.7, x).unwrap();
            let b = stable_1d_density_quadrature(2.0, 0.7, x).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn series_and_quadrature_agree() {
        for alpha in [0.6, 0.8, 1.3, 1.7] {
            for z in [4.5, 6.0, 10.0, 30.0] {
                if let Some(s) = standard_density_series(alpha, z) {
                    let q = standard_density_quadrature(alpha, z).unwrap();
                    assert!((s - q).abs() < 1e-9, "alpha={alpha} z={z}: {s} vs {q}");
                }
            }
        }
    }

    #[test]
    fn symmetric_and_normalized() {
        for alpha in [0.7, 1.0, 1.5] {
            for x in [0.1, 1.3, 9.0] {
                let a = stable_1d_density(alpha, 1.2, x).unwrap();
                let b = stable_1d_density(alpha, 1.2, -x).unwrap();
                assert_eq!(a, b);
            }
            // trapezoid on |x| ≤ X plus the power tail c·X^{-α}
            let x_max = 200.0;
            let h = 0.01;
            let steps = (x_max / h) as usize;
            let mut integral = 0.5 * stable_1d_density(alpha, 1.0, 0.0).unwrap();
            for i in 1..steps {
                integral += stable_1d_density(alpha, 1.0, i as f64 * h).unwrap();
            }
            integral += 0.5 * stable_1d_density(alpha, 1.0, x_max).unwrap();
            integral *= 2.0 * h;
            // two leading terms of the power tail
            let c1 = gamma(1.0 + alpha) * (PI * alpha / 2.0).sin() / PI;
            let c2 = gamma(1.0 + 2.0 * alpha) * (PI * alpha).sin() / (2.0 * PI);
            let tail = 2.0 * (c1 * x_max.powf(-alpha) / alpha - c2 * x_max.powf(-2.0 * alpha) / (2.0 * alpha));
            assert!((integral + tail - 1.0).abs() < 1e-6, "alpha={alpha}: {}", integral + tail);
        }
    }

    #[test]
    fn cdf_matches_density() {
        for alpha in [0.8, 1.0, 1.5] {
            let f0 = stable_1d_cdf(alpha, 1.0, -1.0).unwrap();
            let f1 = stable_1d_cdf(alpha, 1.0, 1.5).unwrap();
            let (nodes, weights) = crate::numerics::gauss_legendre(60);
            let integral: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(x, w)| 1.25 * w * stable_1d_density(alpha, 1.0, 0.25 + 1.25 * x).unwrap())
                .sum();
            assert!((f1 - f0 - integral).abs() < 1e-8, "alpha={alpha}");
            let far = stable_1d_cdf(alpha, 1.0, 20.0).unwrap();
            assert!((far + stable_1d_cdf(alpha, 1.0, -20.0).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn chapman_kolmogorov() {
        for alpha in [1.0, 1.5] {
            let (t1, t2, x) = (0.4, 0.9, 0.7);
            // convolution by Gauss–Legendre panels on [-60, 60] plus tail
            let (nodes, weights) = crate::numerics::gauss_legendre(40);
            let mut conv = 0.0;
            let panels = 240;
            let h = 120.0 / panels as f64;
            for p in 0..panels {
                let mid = -60.0 + (p as f64 + 0.5) * h;
                for (u, w) in nodes.iter().zip(&weights) {
                    let y = mid + 0.5 * h * u;
                    conv += 0.5 * h * w
                        * stable_1d_density(alpha, t1, y).unwrap()
                        * stable_1d_density(alpha, t2, x - y).unwrap();
                }
            }
            let direct = stable_1d_density(alpha, t1 + t2, x).unwrap();
            assert!((conv - direct).abs() < 2e-4 * direct, "alpha={alpha}: {conv} vs {direct}");
        }
    }

    #[test]
    fn tail_exponent() {
        for alpha in [0.8, 1.0, 1.5] {
            let xs: Vec<f64> = (0..=20).map(|i| 10f64.powf(1.0 + 0.1 * i as f64)).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| stable_1d_density(alpha, 1.0, x).unwrap().ln())
                .collect();
            let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
            let fit = fit_line(&lx, &ys);
            assert!((fit.slope + 1.0 + alpha).abs() < 0.05, "alpha={alpha}: {}", fit.slope);
        }
    }

    #[test]
    fn oracle_rejects_variable_symbol() {
        let spec = ModelSpec::checkerboard(1, 1.0, 1.0, 2.0).unwrap();
        assert!(matches!(OracleSpec::for_model(&spec, 1.0), Err(Error::OracleInvalid)));
        let grid = DensityGrid {
            t: 1.0,
            source: LatticeSite::origin(1, 1),
            window: Window::new(1, 1, 0),
            values: vec![0.3],
            mode: BoundaryMode::Killed,
            convention: RateConvention::UnitRate,
        };
        assert_eq!(
            calibrate_sigma(&spec, &grid).unwrap_err().to_string(),
            "oracle invalid for variable c"
        );
    }

    #[test]
    fn calibration_round_trip() {
        for (alpha, d) in [(1.0, 2usize), (1.5, 1)] {
            let spec = ModelSpec::constant(d, alpha, 1.0).unwrap();
            let truth = OracleSpec::new(alpha, d, 2.7).unwrap();
            // the oracle discretized on a lattice window
            let window = Window::new(d, 8, 16);
            let values: Vec<f64> = (0..window.len())
                .map(|i| product_density(&truth, 1.5, &vec![0.0; d], &window.real(i)).unwrap())
                .collect();
            let grid = DensityGrid {
                t: 1.5,
                source: LatticeSite::origin(d, 8),
                window,
                values,
                mode: BoundaryMode::Killed,
                convention: RateConvention::FormRate,
            };
            let sigma = calibrate_sigma(&spec, &grid).unwrap();
            assert!((sigma / 2.7 - 1.0).abs() < 0.01);
        }
    }

    fn lattice_sigma(c0: f64, t: f64) -> f64 {
        let spec = ModelSpec::constant(1, 1.0, c0).unwrap();
        let params = GeneratorParams::new(16, 32.0, BoundaryMode::Killed, RateConvention::FormRate);
        let g = build_generator(&spec, &params).unwrap();
        let grid = heat_kernel(&g, t, &LatticeSite::origin(1, 16)).unwrap();
        calibrate_sigma(&spec, &grid).unwrap()
    }

    #[test]
    fn lattice_calibration_is_linear_in_c_and_stable_in_time() {
        let s1 = lattice_sigma(1.0, 1.0);
        let s2 = lattice_sigma(2.0, 1.0);
        assert!((s2 / s1 / 2.0 - 1.0).abs() < 0.02, "{s1} {s2}");
        let later = lattice_sigma(1.0, 2.0);
        assert!((later / s1 - 1.0).abs() < 0.05, "{s1} {later}");
        // form normalization: σ → 2πc for α = 1
        assert!((s1 / (2.0 * PI) - 1.0).abs() < 0.05, "{s1}");
    }
}
