//! Exact and Monte Carlo checks of the heat-kernel, exit-time and
//! regularity estimates for the rescaled chain `V`.
//!
//! Exact checks use killed-window densities and carry a window certificate:
//! the same quantities recomputed on the half-size window must agree to
//! `window_tol`. Monte Carlo checks carry confidence intervals, and a band
//! check passes only if the interval overlaps the band and is no wider than
//! it.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chain_sim::{Ball, BallNorm, Walker};
use crate::error::{Error, Result};
use crate::kernel_model::{total_conductance, JumpSampler, LatticeSite, ModelSpec};
use crate::lattice_generator::{
    build_generator, expected_exit_times, heat_kernel, heat_kernel_at, occupation_row, window_size_heuristic,
    BoundaryMode, GeneratorParams, RateConvention, SurvivalCurve, Window,
};
use crate::numerics::{
    clopper_pearson, fit_line, fit_line_weighted, mean_se, quadratic_curvature, quantile_ci, sorted_quantile,
    zeta, zeta_tail,
};
use crate::rng::RngStream;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;
const CONFIDENCE: f64 = 0.95;
/// Largest window side used when a radius is picked automatically.
const AUTO_SIDE_CAP: f64 = 2048.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fitted {
    pub name: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
}

/// Plot data attached to a report; written to TSV by the runner.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub(crate) fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_tsv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", self.columns.join("\t"))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.10e}")).collect();
            writeln!(out, "{}", cells.join("\t"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub parameters: Map<String, Value>,
    pub fitted: Vec<Fitted>,
    pub tolerances: BTreeMap<String, f64>,
    pub gates: Vec<Gate>,
    pub pass: bool,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub tables: Vec<Table>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl CheckReport {
    pub fn fitted(&self, name: &str) -> Option<&Fitted> {
        self.fitted.iter().find(|f| f.name == name)
    }

    pub fn gate(&self, name: &str) -> Option<bool> {
        self.gates.iter().find(|g| g.name == name).map(|g| g.pass)
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        let failed: Vec<&str> = self
            .gates
            .iter()
            .filter(|g| !g.pass)
            .map(|g| g.name.as_str())
            .collect();
        let status = if self.pass { "PASS" } else { "FAIL" };
        if failed.is_empty() {
            format!("{status} {}", self.check_name)
        } else {
            format!("{status} {} (failed: {})", self.check_name, failed.join(", "))
        }
    }
}

pub(crate) struct Builder {
    report: CheckReport,
    start: Instant,
}

impl Builder {
    pub(crate) fn new<P: Serialize>(name: &str, spec: &ModelSpec, params: &P) -> Self {
        let mut parameters = Map::new();
        parameters.insert("model".into(), serde_json::to_value(spec).unwrap_or(Value::Null));
        if let Ok(Value::Object(p)) = serde_json::to_value(params) {
            parameters.extend(p);
        }
        Builder {
            report: CheckReport {
                check_name: name.to_string(),
                parameters,
                fitted: Vec::new(),
                tolerances: BTreeMap::new(),
                gates: Vec::new(),
                pass: false,
                notes: Vec::new(),
                tables: Vec::new(),
                runtime_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub(crate) fn param(&mut self, key: &str, value: impl Serialize) {
        self.report
            .parameters
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub(crate) fn fit(&mut self, name: impl Into<String>, value: f64, ci: Option<(f64, f64)>, method: &str) {
        self.report.fitted.push(Fitted {
            name: name.into(),
            value,
            ci,
            method: method.to_string(),
        });
    }

    pub(crate) fn tol(&mut self, name: &str, value: f64) {
        self.report.tolerances.insert(name.to_string(), value);
    }

    pub(crate) fn gate(&mut self, name: impl Into<String>, pass: bool) {
        self.report.gates.push(Gate { name: name.into(), pass });
    }

    pub(crate) fn note(&mut self, note: impl Into<String>) {
        self.report.notes.push(note.into());
    }

    pub(crate) fn table(&mut self, table: Table) {
        self.report.tables.push(table);
    }

    pub(crate) fn finish(mut self) -> CheckReport {
        self.report.pass = !self.report.gates.is_empty() && self.report.gates.iter().all(|g| g.pass);
        self.report.runtime_secs = self.start.elapsed().as_secs_f64();
        self.report
    }

    /// Report without gates (simulation and density runs); always passes.
    pub(crate) fn finish_descriptive(mut self) -> CheckReport {
        self.report.pass = self.report.gates.iter().all(|g| g.pass);
        self.report.runtime_secs = self.start.elapsed().as_secs_f64();
        self.report
    }
}

/// `ci` overlaps `[lo, hi]` and is no wider than it.
pub fn band_pass(ci: (f64, f64), lo: f64, hi: f64) -> bool {
    ci.0 <= hi && ci.1 >= lo && (ci.1 - ci.0) <= (hi - lo)
}

pub(crate) fn normal_ci(est: f64, se: f64) -> (f64, f64) {
    (est - Z95 * se, est + Z95 * se)
}

fn cis_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// One closure call per path on its own RNG stream; order-preserving.
pub(crate) fn run_paths<T, F>(n: usize, seed: u64, block: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> T + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| f(&mut RngStream::child(seed, block, i).rng()))
        .collect()
}

fn check_scale(rho: u32) -> Result<()> {
    if rho == 0 {
        return Err(Error::InvalidArgument("rho must be a positive integer".into()));
    }
    Ok(())
}

fn check_paths(paths: usize) -> Result<()> {
    if paths < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 paths, got {paths}")));
    }
    Ok(())
}

fn check_times_above(times: &[f64], rho: u32, alpha: f64) -> Result<()> {
    let floor = (rho as f64).powf(-alpha);
    if times.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    for &t in times {
        if !(t.is_finite() && t >= floor * (1.0 - 1e-12)) {
            return Err(Error::InvalidArgument(format!("time {t} below rho^-alpha = {floor}")));
        }
    }
    Ok(())
}

fn auto_radius(spec: &ModelSpec, rho: u32, t_max: f64) -> f64 {
    (16.0 * t_max.powf(1.0 / spec.alpha)).min(AUTO_SIDE_CAP / 2.0 / rho as f64)
}

/// Killed-window densities `p(t, x0, y)` at the given targets, certified by
/// recomputation on the half-size window. Returns values per time and the
/// largest relative change.
#[allow(clippy::too_many_arguments)]
fn certified_densities(
    spec: &ModelSpec,
    rho: u32,
    lambda: Option<f64>,
    radius: f64,
    times: &[f64],
    x0: &LatticeSite,
    targets: &[Vec<i64>],
    window_tol: f64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let half_window = Window::from_radius(spec.d, rho, radius / 2.0);
    if !half_window.contains(&x0.coords) || targets.iter().any(|y| !half_window.contains(y)) {
        return Err(Error::InvalidArgument(format!(
            "source and targets must lie within half the window radius {radius}"
        )));
    }
    let densities = |r: f64| -> Result<Vec<Vec<f64>>> {
        let mut params = GeneratorParams::new(rho, r, BoundaryMode::Killed, RateConvention::UnitRate);
        if let Some(l) = lambda {
            params = params.truncated(l);
        }
        let g = build_generator(spec, &params)?;
        heat_kernel_at(&g, times, x0, targets)
    };
    let full = densities(radius)?;
    let half = densities(radius / 2.0)?;
    let mut cert: f64 = 0.0;
    for (a, b) in full.iter().flatten().zip(half.iter().flatten()) {
        if *a > 1e-300 {
            cert = cert.max((a - b).abs() / a);
        }
    }
    if cert > window_tol {
        return Err(Error::WindowTooSmall {
            what: "relative change under window halving".into(),
            value: cert,
            tol: window_tol,
        });
    }
    Ok((full, cert))
}

fn default_window_tol() -> f64 {
    5e-3
}

// ---------------------------------------------------------------------------
// on-diagonal upper bound

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OndiagParams {
    pub rho: u32,
    pub rho_alt: u32,
    pub t_grid: Vec<f64>,
    pub radius: Option<f64>,
    pub window_tol: f64,
    /// Slope band half-width in units of `d/α`.
    pub slope_tol: f64,
    pub c1_ratio_max: f64,
}

impl Default for OndiagParams {
    fn default() -> Self {
        OndiagParams {
            rho: 8,
            rho_alt: 4,
            t_grid: vec![1.0, 2.0, 4.0, 8.0],
            radius: None,
            window_tol: default_window_tol(),
            slope_tol: 0.08,
            c1_ratio_max: 2.0,
        }
    }
}

pub fn check_ondiag_upper(spec: &ModelSpec, p: &OndiagParams) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_scale(p.rho_alt)?;
    check_times_above(&p.t_grid, p.rho.max(p.rho_alt), spec.alpha)?;
    let mut b = Builder::new("ondiag_upper", spec, p);
    let d_over_a = spec.d as f64 / spec.alpha;
    let t_max = p.t_grid.iter().cloned().fold(0.0, f64::max);
    let mut table = Table::new("ondiag", &["rho", "t", "p", "p_scaled"]);
    let mut c1 = Vec::new();
    let mut slope = 0.0;
    for (k, &rho) in [p.rho, p.rho_alt].iter().enumerate() {
        let radius = p.radius.unwrap_or_else(|| auto_radius(spec, rho, t_max));
        let origin = LatticeSite::origin(spec.d, rho);
        let (dens, cert) = certified_densities(
            spec,
            rho,
            None,
            radius,
            &p.t_grid,
            &origin,
            &[origin.coords.clone()],
            p.window_tol,
        )?;
        let values: Vec<f64> = dens.iter().map(|v| v[0]).collect();
        let mut c = 0.0f64;
        for (&t, &v) in p.t_grid.iter().zip(&values) {
            let scaled = v * t.powf(d_over_a).max(1.0);
            c = c.max(scaled);
            table.rows.push(vec![rho as f64, t, v, scaled]);
        }
        b.fit(format!("c1_rho{rho}"), c, None, "max of p(t,0,0)·max(t^{d/α},1) over t_grid");
        b.fit(format!("window_certificate_rho{rho}"), cert, None, "relative change under window halving");
        b.param(&format!("radius_rho{rho}"), radius);
        c1.push(c);
        if k == 0 {
            let lx: Vec<f64> = p.t_grid.iter().map(|t| t.ln()).collect();
            let ly: Vec<f64> = values.iter().map(|v| v.ln()).collect();
            slope = fit_line(&lx, &ly).slope;
        }
    }
    let tol = p.slope_tol * d_over_a;
    b.fit("slope", slope, None, "least squares of log p(t,0,0) on log t, exact densities");
    b.tol("slope_halfwidth", tol);
    b.tol("c1_ratio_max", p.c1_ratio_max);
    b.tol("window_tol", p.window_tol);
    let ratio = c1[0].max(c1[1]) / c1[0].min(c1[1]);
    b.fit("c1_ratio", ratio, None, "max/min of c1 over the two scales");
    b.gate("slope", (slope + d_over_a).abs() <= tol);
    b.gate("c1_stable", ratio <= p.c1_ratio_max);
    b.gate("small_t_probability", c1.iter().all(|c| c.is_finite()));
    if p.t_grid.len() > 1 && t_max / p.t_grid.iter().cloned().fold(f64::INFINITY, f64::min) < 10.0 {
        b.note("time grid spans less than a decade");
    }
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// near-diagonal lower bound

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NearDiagParams {
    pub rho: u32,
    pub t_grid: Vec<f64>,
    pub radius: Option<f64>,
    pub window_tol: f64,
    pub c_floor: f64,
    pub max_variation: f64,
    pub norm: BallNorm,
}

impl Default for NearDiagParams {
    fn default() -> Self {
        NearDiagParams {
            rho: 8,
            t_grid: vec![1.0, 2.0, 4.0, 8.0],
            radius: None,
            window_tol: default_window_tol(),
            c_floor: 0.005,
            max_variation: 4.0,
            norm: BallNorm::Euclidean,
        }
    }
}

/// Sources used for the lower bound: the origin, plus a few shifted sources
/// when the symbol varies in space.
fn lower_bound_sources(spec: &ModelSpec) -> Vec<Vec<i64>> {
    let n = if spec.symbol.is_constant() { 1 } else { 4 };
    (0..n)
        .map(|j| {
            let mut c = vec![0; spec.d];
            c[0] = j;
            c
        })
        .collect()
}

fn near_targets(window: &Window, x: &[i64], reach: f64, norm: BallNorm) -> Vec<Vec<i64>> {
    let ball = Ball::new(
        x.iter().map(|&c| c as f64 / window.scale as f64).collect(),
        reach,
        norm,
    );
    let k = (reach * window.scale as f64).ceil() as i64;
    let d = x.len();
    let mut out = Vec::new();
    let mut offset = vec![-k; d];
    loop {
        let y: Vec<i64> = x.iter().zip(&offset).map(|(a, o)| a + o).collect();
        let real: Vec<f64> = y.iter().map(|&c| c as f64 / window.scale as f64).collect();
        if ball.distance(&real) < reach {
            out.push(y);
        }
        let mut i = 0;
        loop {
            if i == d {
                return out;
            }
            offset[i] += 1;
            if offset[i] <= k {
                break;
            }
            offset[i] = -k;
            i += 1;
        }
    }
}

pub fn check_near_diag_lower(spec: &ModelSpec, p: &NearDiagParams) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_times_above(&p.t_grid, p.rho, spec.alpha)?;
    let mut b = Builder::new("near_diag_lower", spec, p);
    let d_over_a = spec.d as f64 / spec.alpha;
    let t_max = p.t_grid.iter().cloned().fold(0.0, f64::max);
    let radius = p.radius.unwrap_or_else(|| auto_radius(spec, p.rho, t_max));
    let window = Window::from_radius(spec.d, p.rho, radius);
    let mut m = vec![f64::INFINITY; p.t_grid.len()];
    let mut cert: f64 = 0.0;
    for src in lower_bound_sources(spec) {
        let reach_max = 2.0 * t_max.powf(1.0 / spec.alpha);
        let targets = near_targets(&window, &src, reach_max, p.norm);
        let x0 = LatticeSite::new(src.clone(), p.rho);
        let (dens, c) = certified_densities(spec, p.rho, None, radius, &p.t_grid, &x0, &targets, p.window_tol)?;
        cert = cert.max(c);
        let x_real = x0.real();
        let ball_at = |t: f64| Ball::new(x_real.clone(), 2.0 * t.powf(1.0 / spec.alpha), p.norm);
        for (ti, &t) in p.t_grid.iter().enumerate() {
            let ball = ball_at(t);
            for (y, v) in targets.iter().zip(&dens[ti]) {
                let yr: Vec<f64> = y.iter().map(|&c| c as f64 / p.rho as f64).collect();
                if ball.distance(&yr) < ball.radius {
                    m[ti] = m[ti].min(v * t.powf(d_over_a));
                }
            }
        }
    }
    let mut table = Table::new("near_diag", &["t", "m"]);
    for (&t, &v) in p.t_grid.iter().zip(&m) {
        table.rows.push(vec![t, v]);
        b.fit(format!("m(t={t})"), v, None, "min of p·t^{d/α} over |x-y| < 2t^{1/α}, exact densities");
    }
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(0.0, f64::max);
    b.fit("m_min", lo, None, "min over t_grid");
    b.fit("m_variation", hi / lo, None, "max/min over t_grid");
    b.fit("window_certificate", cert, None, "relative change under window halving");
    b.param("radius_used", radius);
    b.tol("c_floor", p.c_floor);
    b.tol("max_variation", p.max_variation);
    b.tol("window_tol", p.window_tol);
    b.gate("floor", lo >= p.c_floor);
    b.gate("variation", hi / lo <= p.max_variation);
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// truncated off-diagonal decay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncatedParams {
    pub rho: u32,
    pub lambda: f64,
    pub t: f64,
    /// Far-field range `[y_min, y_max]` along the first axis; `None` means `[2λ, 6λ]`.
    pub y_range: Option<(f64, f64)>,
    pub decay_slack: f64,
    pub mass_loss_tol: f64,
    pub contrast: bool,
    /// Log-log range for the untruncated contrast; `None` means `[4λ, 16λ]`.
    pub contrast_range: Option<(f64, f64)>,
    pub contrast_tol: f64,
    pub window_tol: f64,
    pub small_t: f64,
    pub small_t_tol: f64,
}

impl Default for TruncatedParams {
    fn default() -> Self {
        TruncatedParams {
            rho: 4,
            lambda: 2.0,
            t: 1.0,
            y_range: None,
            decay_slack: 0.15,
            mass_loss_tol: 1e-8,
            contrast: true,
            contrast_range: None,
            contrast_tol: 0.1,
            window_tol: default_window_tol(),
            small_t: 1e-3,
            small_t_tol: 0.05,
        }
    }
}

fn axis_points(rho: u32, d: usize, lo: f64, hi: f64) -> Vec<Vec<i64>> {
    let a = (lo * rho as f64 - 1e-9).ceil() as i64;
    let z = (hi * rho as f64 + 1e-9).floor() as i64;
    (a.max(1)..=z)
        .map(|k| {
            let mut c = vec![0; d];
            c[0] = k;
            c
        })
        .collect()
}

/// Rate of the unit-rate chain `V` at scale `rho` from base site `x` to base site `y`.
fn unit_rate_to(spec: &ModelSpec, rho: u32, x: &[i64], y: &[i64], g_x: f64) -> f64 {
    let k: u64 = x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).sum();
    (rho as f64).powf(spec.alpha) * spec.symbol.value(x, y, 1) * (k as f64).powf(-spec.exponent()) / g_x
}

pub fn check_truncated_offdiag(spec: &ModelSpec, p: &TruncatedParams) -> Result<CheckReport> {
    check_scale(p.rho)?;
    if !(p.lambda > 0.0 && p.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive and finite, got {}", p.lambda)));
    }
    check_times_above(&[p.t], p.rho, spec.alpha)?;
    if !(p.small_t > 0.0 && p.small_t < p.t) {
        return Err(Error::InvalidArgument("small_t must lie in (0, t)".into()));
    }
    let mut b = Builder::new("truncated_offdiag", spec, p);
    let (y_lo, y_hi) = p.y_range.unwrap_or((2.0 * p.lambda, 6.0 * p.lambda));
    let radius = window_size_heuristic(spec, RateConvention::UnitRate, p.t, Some(p.lambda), p.mass_loss_tol)
        .max(y_hi + 2.0 * p.lambda);
    let params = GeneratorParams::new(p.rho, radius, BoundaryMode::Killed, RateConvention::UnitRate)
        .truncated(p.lambda);
    let g = build_generator(spec, &params)?;
    let origin = LatticeSite::origin(spec.d, p.rho);
    let grid = heat_kernel(&g, p.t, &origin)?;
    let loss = (1.0 - grid.mass()).max(0.0);
    b.param("radius_used", radius);
    b.fit("mass_loss", loss, None, "1 - killed mass at time t");
    b.tol("mass_loss_tol", p.mass_loss_tol);
    if loss > p.mass_loss_tol {
        return Err(Error::WindowTooSmall {
            what: "killed mass loss".into(),
            value: loss,
            tol: p.mass_loss_tol,
        });
    }

    let mut far = Table::new("truncated_far_field", &["y", "p"]);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for y in axis_points(p.rho, spec.d, y_lo, y_hi) {
        let v = grid.at(&y).unwrap_or(0.0);
        let yr = y[0] as f64 / p.rho as f64;
        far.rows.push(vec![yr, v]);
        if v > 1e-300 {
            xs.push(yr);
            ys.push(v.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("fewer than three far-field densities above 1e-300".into()));
    }
    let fit = fit_line(&xs, &ys);
    let curvature = quadratic_curvature(&xs, &ys);
    let bound = -(1.0 - p.decay_slack) / p.lambda;
    b.fit("decay_slope", fit.slope, None, "least squares of log p^λ(t,0,y) on |y|, exact densities");
    b.fit("curvature", curvature, None, "leading coefficient of a quadratic fit to the same points");
    b.tol("decay_bound", bound);
    b.gate("exponential_decay", fit.slope <= bound);
    b.gate("no_upward_curvature", curvature <= 0.0);
    b.table(far);

    // single-jump regime
    let small = heat_kernel(&g, p.small_t, &origin)?;
    let g0 = total_conductance(&LatticeSite::origin(spec.d, 1), spec, 1e-12);
    let mu = small.window.site_measure();
    let mut worst: f64 = 0.0;
    for y in axis_points(p.rho, spec.d, 0.0, p.lambda) {
        let prob = small.at(&y).unwrap_or(0.0) * mu;
        let rate = unit_rate_to(spec, p.rho, &origin.coords, &y, g0);
        worst = worst.max((prob / p.small_t / rate - 1.0).abs());
    }
    b.fit("small_t_max_rel_dev", worst, None, "max |P(t,0,y)/(t·rate(0,y)) - 1| over one-jump-reachable y");
    b.tol("small_t_tol", p.small_t_tol);
    b.gate("single_jump_limit", worst <= p.small_t_tol);

    if p.contrast {
        let (c_lo, c_hi) = p.contrast_range.unwrap_or((4.0 * p.lambda, 16.0 * p.lambda));
        let c_radius = (4.0 * c_hi).max(auto_radius(spec, p.rho, p.t)).min(AUTO_SIDE_CAP / 2.0 / p.rho as f64);
        let targets = axis_points(p.rho, spec.d, c_lo, c_hi);
        let (dens, cert) =
            certified_densities(spec, p.rho, None, c_radius, &[p.t], &origin, &targets, p.window_tol)?;
        let mut table = Table::new("untruncated_far_field", &["y", "p"]);
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        for (y, v) in targets.iter().zip(&dens[0]) {
            let yr = y[0] as f64 / p.rho as f64;
            table.rows.push(vec![yr, *v]);
            if *v > 1e-300 {
                lx.push(yr.ln());
                ly.push(v.ln());
            }
        }
        let s = fit_line(&lx, &ly).slope;
        b.fit("contrast_loglog_slope", s, None, "least squares of log p(t,0,y) on log |y|, untruncated");
        b.fit("contrast_window_certificate", cert, None, "relative change under window halving");
        b.param("contrast_radius", c_radius);
        b.tol("contrast_tol", p.contrast_tol);
        b.gate("polynomial_contrast", (s + 1.0 + spec.alpha).abs() <= p.contrast_tol);
        b.table(table);
    }
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// exit times

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitTimeParams {
    pub rho: u32,
    pub a: f64,
    pub b: f64,
    pub radii: Vec<f64>,
    pub paths: usize,
    pub slope_tol: f64,
    pub norm: BallNorm,
    pub censor_limit: f64,
    /// Simulation horizon in multiples of the exact mean exit time of the max-norm ball.
    pub horizon_factor: f64,
}

impl Default for ExitTimeParams {
    fn default() -> Self {
        ExitTimeParams {
            rho: 8,
            a: 1.0,
            b: 0.5,
            radii: vec![0.5, 1.0, 2.0, 5.0],
            paths: 100_000,
            slope_tol: 0.15,
            norm: BallNorm::Max,
            censor_limit: 0.01,
            horizon_factor: 40.0,
        }
    }
}

/// Exact mean and median exit time of the max-norm ball of radius `r` from the origin.
fn exit_oracle(spec: &ModelSpec, rho: u32, r: f64) -> Result<(f64, f64)> {
    let params = GeneratorParams::new(rho, r, BoundaryMode::Killed, RateConvention::UnitRate);
    let g = build_generator(spec, &params)?;
    let origin = LatticeSite::origin(spec.d, rho);
    let mean = expected_exit_times(&g)?
        .at(&origin.coords)
        .ok_or(Error::EmptyWindow)?;
    let median = SurvivalCurve::new(&g, &origin)?.quantile(0.5, mean);
    Ok((mean, median))
}

struct ExitSample {
    times: Vec<f64>,
    censored: usize,
}

fn exit_samples(
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rho: u32,
    ball: &Ball,
    horizon: f64,
    paths: usize,
    seed: u64,
    block: u64,
) -> ExitSample {
    let out = run_paths(paths, seed, block, |rng| {
        let start = vec![0i64; spec.d];
        let mut w = Walker::rescaled(spec, sampler, rho, f64::INFINITY, &start);
        while w.next_jump(horizon, rng).is_some() {
            if !ball.contains_coords(&w.coords, rho) {
                return (w.t, false);
            }
        }
        (horizon, true)
    });
    ExitSample {
        censored: out.iter().filter(|o| o.1).count(),
        times: out.into_iter().map(|o| o.0).collect(),
    }
}

pub fn check_exit_time(spec: &ModelSpec, p: &ExitTimeParams, seed: u64) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_paths(p.paths)?;
    if p.radii.len() < 2 || p.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidArgument("need at least two positive radii".into()));
    }
    if !(p.a > 0.0 && p.b > 0.0 && p.b < 1.0) {
        return Err(Error::InvalidArgument("need a > 0 and 0 < b < 1".into()));
    }
    let mut b = Builder::new("exit_time", spec, p);
    let sampler = JumpSampler::new(spec);
    let mut table = Table::new(
        "exit_time",
        &["r", "median", "median_lo", "median_hi", "mean", "mean_se", "oracle_mean", "oracle_median"],
    );
    let (mut lx, mut ly, mut lw) = (Vec::new(), Vec::new(), Vec::new());
    let mut means = Vec::new();
    let mut oracle_ok = true;
    let mut gamma_lo = f64::INFINITY;
    let run = |r: f64, block: u64| -> Result<(ExitSample, f64, f64)> {
        let (o_mean, o_median) = exit_oracle(spec, p.rho, r)?;
        let ball = Ball::new(vec![0.0; spec.d], r, p.norm);
        let horizon = p.horizon_factor * o_mean;
        let mut s = exit_samples(spec, &sampler, p.rho, &ball, horizon, p.paths, seed, block);
        let rate = s.censored as f64 / p.paths as f64;
        if rate > p.censor_limit {
            return Err(Error::Censoring { rate, limit: p.censor_limit });
        }
        s.times.sort_by(f64::total_cmp);
        Ok((s, o_mean, o_median))
    };
    for (i, &r) in p.radii.iter().enumerate() {
        let (s, o_mean, o_median) = run(r, 2 * i as u64)?;
        let median = sorted_quantile(&s.times, 0.5);
        let (m_lo, m_hi) = quantile_ci(&s.times, 0.5, CONFIDENCE);
        let (mean, se) = mean_se(&s.times);
        table.rows.push(vec![r, median, m_lo, m_hi, mean, se, o_mean, o_median]);
        b.fit(format!("median(r={r})"), median, Some((m_lo, m_hi)), "order statistics of MC exit times");
        b.fit(format!("mean(r={r})"), mean, Some(normal_ci(mean, se)), "MC sample mean");
        if p.norm == BallNorm::Max {
            b.fit(format!("oracle_mean(r={r})"), o_mean, None, "absorbing solve on the killed ball");
            oracle_ok &= (mean - o_mean).abs() <= 3.0 * se;
        }
        means.push(mean);
        let log_se = ((m_hi.ln() - m_lo.ln()) / (2.0 * Z95)).max(1e-12);
        lx.push(r.ln());
        ly.push(median.ln());
        lw.push(1.0 / (log_se * log_se));

        // γ̂(R) from exits of B(0, aR)
        let big = if (p.a - 1.0).abs() < 1e-15 {
            s
        } else {
            run(p.a * r, 2 * i as u64 + 1)?.0
        };
        let scale = r.powf(spec.alpha);
        let g_hat = sorted_quantile(&big.times, p.b) / scale;
        let (g_lo, g_hi) = quantile_ci(&big.times, p.b, CONFIDENCE);
        b.fit(format!("gamma_hat(R={r})"), g_hat, Some((g_lo / scale, g_hi / scale)), "b-quantile of τ/R^α");
        if r >= 1.0 || p.radii.iter().all(|&x| x < 1.0) {
            gamma_lo = gamma_lo.min(g_lo / scale);
        }
    }
    let fit = fit_line_weighted(&lx, &ly, &lw);
    let ci = normal_ci(fit.slope, fit.slope_se);
    b.fit("median_slope", fit.slope, Some(ci), "weighted least squares of log median on log r");
    let tol = p.slope_tol * spec.alpha;
    b.tol("slope_halfwidth", tol);
    b.tol("censor_limit", p.censor_limit);
    b.gate("gamma_positive", gamma_lo > 0.0);
    b.gate("median_slope", band_pass(ci, spec.alpha - tol, spec.alpha + tol));
    b.gate("mean_monotone", means.windows(2).all(|w| w[1] > w[0]));
    if p.norm == BallNorm::Max {
        b.gate("oracle_agreement", oracle_ok);
    } else {
        b.note("oracle cross-check skipped for Euclidean balls");
    }
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// Lévy system

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyFunction {
    /// Support of `g` (indicator); `None` means `g ≡ 1`.
    #[serde(default)]
    pub g: Option<Ball>,
    #[serde(default)]
    pub h: Option<Ball>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevyParams {
    pub rho: u32,
    pub horizon: f64,
    pub paths: usize,
    pub functions: Vec<LevyFunction>,
    pub rel_tol: f64,
}

impl Default for LevyParams {
    fn default() -> Self {
        LevyParams {
            rho: 4,
            horizon: 1.0,
            paths: 100_000,
            functions: vec![
                LevyFunction { g: None, h: None, delta: 1.0 },
                LevyFunction {
                    g: Some(Ball::new(vec![0.0], 1.0, BallNorm::Max)),
                    h: Some(Ball::new(vec![0.5], 1.0, BallNorm::Max)),
                    delta: 0.5,
                },
            ],
            rel_tol: 0.05,
        }
    }
}

/// `Σ_y f(x, y)·rate(x, y)` for the unit-rate convention, with `G_x` cached.
struct LevyIntensity<'a> {
    spec: &'a ModelSpec,
    rho: u32,
    f: &'a LevyFunction,
    k_min: u64,
    g_cache: Mutex<HashMap<Vec<i64>, f64>>,
}

impl<'a> LevyIntensity<'a> {
    fn new(spec: &'a ModelSpec, rho: u32, f: &'a LevyFunction) -> Self {
        LevyIntensity {
            spec,
            rho,
            f,
            k_min: ((f.delta * rho as f64 - 1e-9).ceil().max(1.0)) as u64,
            g_cache: Mutex::new(HashMap::new()),
        }
    }

    fn real(&self, x: &[i64]) -> Vec<f64> {
        x.iter().map(|&c| c as f64 / self.rho as f64).collect()
    }

    fn indicator(ball: &Option<Ball>, x: &[f64]) -> f64 {
        match ball {
            Some(b) if !b.contains(x) => 0.0,
            _ => 1.0,
        }
    }

    fn total(&self, x: &[i64]) -> f64 {
        let key = if self.spec.symbol.is_constant() { Vec::new() } else { x.to_vec() };
        if let Some(v) = self.g_cache.lock().unwrap().get(&key) {
            return *v;
        }
        let v = total_conductance(&LatticeSite::new(x.to_vec(), 1), self.spec, 1e-12);
        self.g_cache.lock().unwrap().insert(key, v);
        v
    }

    /// `f(x, y)` for sites at scale `rho`.
    fn value(&self, x: &[i64], y: &[i64]) -> f64 {
        let k: u64 = x.iter().zip(y).map(|(a, b)| a.abs_diff(*b)).sum();
        if k < self.k_min {
            return 0.0;
        }
        Self::indicator(&self.f.g, &self.real(x)) * Self::indicator(&self.f.h, &self.real(y))
    }

    fn rate_sum(&self, x: &[i64]) -> f64 {
        if Self::indicator(&self.f.g, &self.real(x)) == 0.0 {
            return 0.0;
        }
        let spec = self.spec;
        let s = spec.exponent();
        let g_x = self.total(x);
        let mut y = x.to_vec();
        let mut sum = 0.0;
        match &self.f.h {
            None => {
                // everything beyond k_min: total minus the short jumps
                let mut short = 0.0;
                for axis in 0..spec.d {
                    for dir in [-1i64, 1] {
                        for k in 1..self.k_min {
                            y[axis] = x[axis] + dir * k as i64;
                            short += spec.symbol.value(x, &y, 1) * (k as f64).powf(-s);
                        }
                        y[axis] = x[axis];
                    }
                }
                sum = g_x - short;
            }
            Some(h) => {
                for axis in 0..spec.d {
                    let c = h.center.get(axis).copied().unwrap_or(0.0) * self.rho as f64;
                    let reach = h.radius * self.rho as f64;
                    let lo = (c - reach - 1e-9).ceil() as i64;
                    let hi = (c + reach + 1e-9).floor() as i64;
                    for yc in lo..=hi {
                        let k = yc.abs_diff(x[axis]);
                        if k < self.k_min {
                            continue;
                        }
                        y[axis] = yc;
                        if h.contains(&self.real(&y)) {
                            sum += spec.symbol.value(x, &y, 1) * (k as f64).powf(-s);
                        }
                    }
                    y[axis] = x[axis];
                }
            }
        }
        (self.rho as f64).powf(spec.alpha) * sum.max(0.0) / g_x
    }
}

fn levy_ball_dims(f: &LevyFunction, d: usize) -> Result<()> {
    for b in [&f.g, &f.h].into_iter().flatten() {
        if b.center.len() != d {
            return Err(Error::InvalidArgument(format!(
                "ball centre {:?} has dimension {} but d = {d}",
                b.center,
                b.center.len()
            )));
        }
    }
    if !(f.delta > 0.0) {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    Ok(())
}

/// Per-path `(Σ_{s≤T} f(V_{s-}, V_s), ∫₀^T Σ_y f(V_s, y)·rate(V_s, y) ds)`.
fn levy_path(
    spec: &ModelSpec,
    sampler: &JumpSampler,
    intensity: &LevyIntensity,
    horizon: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let start = vec![0i64; spec.d];
    let mut w = Walker::rescaled(spec, sampler, intensity.rho, f64::INFINITY, &start);
    let (mut lhs, mut rhs) = (0.0, 0.0);
    let mut prev = start;
    let mut t_prev = 0.0;
    loop {
        let jumped = w.next_jump(horizon, rng).is_some();
        rhs += (w.t - t_prev) * intensity.rate_sum(&prev);
        if !jumped {
            break;
        }
        lhs += intensity.value(&prev, &w.coords);
        prev.copy_from_slice(&w.coords);
        t_prev = w.t;
    }
    (lhs, rhs)
}

pub fn check_levy_system(spec: &ModelSpec, p: &LevyParams, seed: u64) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_paths(p.paths)?;
    if !(p.horizon > 0.0 && p.horizon.is_finite()) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    if p.functions.is_empty() {
        return Err(Error::InvalidArgument("no test functions given".into()));
    }
    let mut b = Builder::new("levy_system", spec, p);
    let sampler = JumpSampler::new(spec);
    let mut table = Table::new("levy_system", &["choice", "lhs", "lhs_se", "rhs", "rhs_se"]);
    b.tol("rel_tol", p.rel_tol);
    for (i, f) in p.functions.iter().enumerate() {
        levy_ball_dims(f, spec.d)?;
        let intensity = LevyIntensity::new(spec, p.rho, f);
        let out = run_paths(p.paths, seed, i as u64, |rng| levy_path(spec, &sampler, &intensity, p.horizon, rng));
        let l: Vec<f64> = out.iter().map(|o| o.0).collect();
        let r: Vec<f64> = out.iter().map(|o| o.1).collect();
        if l.iter().all(|&v| v == 0.0) && r.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidArgument(format!("test function {i} vanishes on every path")));
        }
        let (lm, ls) = mean_se(&l);
        let (rm, rs) = mean_se(&r);
        let (lci, rci) = (normal_ci(lm, ls), normal_ci(rm, rs));
        b.fit(format!("lhs[{i}]"), lm, Some(lci), "MC mean of Σ f(V_{s-}, V_s)");
        b.fit(format!("rhs[{i}]"), rm, Some(rci), "MC mean of the compensator integral");
        let rel = (lm - rm).abs() / rm.abs();
        b.fit(format!("rel_diff[{i}]"), rel, None, "|lhs - rhs|/rhs");
        b.gate(format!("relative[{i}]"), rel <= p.rel_tol);
        b.gate(format!("ci_overlap[{i}]"), cis_overlap(lci, rci));
        table.rows.push(vec![i as f64, lm, ls, rm, rs]);
    }
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// hitting a far slab

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HitParams {
    pub rho: u32,
    pub t: f64,
    /// Exponent `e` in the distance threshold `κ t^e`; `None` means `1/α`.
    pub dist_exponent: Option<f64>,
    pub kappas: Vec<f64>,
    pub delta: f64,
    pub paths: usize,
    pub window_tol: f64,
}

impl Default for HitParams {
    fn default() -> Self {
        HitParams {
            rho: 4,
            t: 1.0,
            dist_exponent: None,
            kappas: vec![0.5, 1.0, 2.0, 4.0],
            delta: 0.01,
            paths: 200_000,
            window_tol: default_window_tol(),
        }
    }
}

pub fn check_hit_bound(spec: &ModelSpec, p: &HitParams, seed: u64) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_paths(p.paths)?;
    check_times_above(&[p.t], p.rho, spec.alpha)?;
    if p.kappas.is_empty() || p.kappas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("kappas must be nonempty and increasing".into()));
    }
    let mut b = Builder::new("hit_bound", spec, p);
    let e = p.dist_exponent.unwrap_or(1.0 / spec.alpha);
    b.param("dist_exponent_used", e);
    let rho_f = p.rho as f64;
    // A_κ = {z : z_1 > κ t^e}; entered iff the running max of the first coordinate exceeds it
    let thresholds: Vec<i64> = p
        .kappas
        .iter()
        .map(|k| (k * p.t.powf(e) * rho_f + 1e-9).floor() as i64)
        .collect();
    let sampler = JumpSampler::new(spec);
    let out = run_paths(p.paths, seed, 0, |rng| {
        let start = vec![0i64; spec.d];
        let mut w = Walker::rescaled(spec, &sampler, p.rho, f64::INFINITY, &start);
        let mut max0 = 0i64;
        while w.next_jump(p.t, rng).is_some() {
            max0 = max0.max(w.coords[0]);
        }
        (max0, w.coords.iter().all(|&c| c == 0))
    });
    let n = p.paths as u64;
    let scale = p.t.powf(spec.d as f64 / spec.alpha) * rho_f.powi(spec.d as i32);
    let mut table = Table::new("hit_bound", &["kappa", "estimate", "lo", "hi"]);
    let mut est = Vec::new();
    let mut last_hi = f64::INFINITY;
    for (k, &th) in p.kappas.iter().zip(&thresholds) {
        let count = out.iter().filter(|o| o.1 && o.0 > th).count() as u64;
        let (lo, hi) = clopper_pearson(count, n, CONFIDENCE);
        let v = count as f64 / n as f64 * scale;
        b.fit(
            format!("scaled_prob(kappa={k})"),
            v,
            Some((lo * scale, hi * scale)),
            "MC frequency with Clopper-Pearson interval",
        );
        table.rows.push(vec![*k, v, lo * scale, hi * scale]);
        est.push(v);
        last_hi = hi * scale;
    }
    b.tol("delta", p.delta);
    b.gate("monotone", est.windows(2).all(|w| w[1] <= w[0]));
    b.gate("below_delta", last_hi < p.delta);

    // unconstrained return probability against the exact density
    let back = out.iter().filter(|o| o.1).count() as f64 / n as f64;
    let radius = auto_radius(spec, p.rho, p.t);
    let origin = LatticeSite::origin(spec.d, p.rho);
    let (dens, _) = certified_densities(spec, p.rho, None, radius, &[p.t], &origin, &[origin.coords.clone()], p.window_tol)?;
    let exact = dens[0][0] * rho_f.powi(-(spec.d as i32));
    let se = (exact * (1.0 - exact) / n as f64).sqrt();
    b.fit("return_prob", back, Some(normal_ci(back, se)), "MC frequency of V_t = y");
    b.fit("return_prob_exact", exact, None, "killed-window density times site measure");
    b.gate("total_probability", (back - exact).abs() <= 3.0 * se);
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// constrained lower bound

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstrainedParams {
    pub rho: u32,
    pub t: f64,
    /// Ball radius; `None` removes the constraint.
    pub r: Option<f64>,
    /// Minimum ratio `r·θ / t^{1/α}`.
    pub theta: f64,
    pub c_floor: f64,
    pub paths: usize,
    pub norm: BallNorm,
}

impl Default for ConstrainedParams {
    fn default() -> Self {
        ConstrainedParams {
            rho: 8,
            t: 1.0,
            r: Some(4.0),
            theta: 0.5,
            c_floor: 0.005,
            paths: 100_000,
            norm: BallNorm::Max,
        }
    }
}

pub fn check_constrained_lower(spec: &ModelSpec, p: &ConstrainedParams, seed: u64) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_paths(p.paths)?;
    check_times_above(&[p.t], p.rho, spec.alpha)?;
    let spread = p.t.powf(1.0 / spec.alpha);
    if let Some(r) = p.r {
        if !(r * p.theta >= spread * (1.0 - 1e-12)) {
            return Err(Error::InvalidArgument(format!("need r ≥ t^(1/α)/θ = {}", spread / p.theta)));
        }
    }
    let mut b = Builder::new("constrained_lower", spec, p);
    let rho_f = p.rho as f64;
    let h_steps = (0.5 * spread * rho_f).floor() as i64;
    let offsets = [-h_steps, 0, h_steps];
    let ball = p.r.map(|r| Ball::new(vec![0.0; spec.d], r, p.norm));
    let in_gamma = |c: &[i64]| c.iter().all(|&v| v >= 0 && (v as f64) <= spread * rho_f + 1e-9);
    let gamma_sites = ((spread * rho_f + 1e-9).floor() + 1.0).powi(spec.d as i32);
    let eps = gamma_sites * rho_f.powi(-(spec.d as i32)) * spread.powf(-(spec.d as f64));
    let scale = p.t.powf(spec.d as f64 / spec.alpha) * rho_f.powi(spec.d as i32);
    let sampler = JumpSampler::new(spec);
    let n = p.paths as u64;

    let exact_g = match (p.r, p.norm) {
        (Some(r), BallNorm::Max) => Some(build_generator(
            spec,
            &GeneratorParams::new(p.rho, r, BoundaryMode::Killed, RateConvention::UnitRate),
        )?),
        _ => None,
    };
    if exact_g.is_none() {
        b.note("exact killed-ball cross-check needs a finite max-norm ball; skipped");
    }

    let mut table = Table::new("constrained_lower", &["x", "y", "estimate", "lo", "hi", "exact"]);
    let (mut floor_ok, mut exact_ok, mut gamma_ok) = (true, true, true);
    for (xi, &xo) in offsets.iter().enumerate() {
        let mut start = vec![0i64; spec.d];
        start[0] = xo;
        let out = run_paths(p.paths, seed, xi as u64, |rng| {
            let mut w = Walker::rescaled(spec, &sampler, p.rho, f64::INFINITY, &start);
            while w.next_jump(p.t, rng).is_some() {
                if let Some(ball) = &ball {
                    if !ball.contains_coords(&w.coords, p.rho) {
                        return None;
                    }
                }
            }
            Some(w.coords)
        });
        let exact_row = match &exact_g {
            Some(g) => {
                let targets: Vec<Vec<i64>> = offsets
                    .iter()
                    .map(|&yo| {
                        let mut y = vec![0i64; spec.d];
                        y[0] = yo;
                        y
                    })
                    .collect();
                let x0 = LatticeSite::new(start.clone(), p.rho);
                let dens = heat_kernel_at(g, &[p.t], &x0, &targets)?;
                Some(dens[0].iter().map(|v| v * g.window.site_measure()).collect::<Vec<f64>>())
            }
            None => None,
        };
        for (yi, &yo) in offsets.iter().enumerate() {
            let count = out
                .iter()
                .filter(|o| {
                    o.as_ref()
                        .is_some_and(|c| c[0] == yo && c[1..].iter().all(|&v| v == 0))
                })
                .count() as u64;
            let (lo, hi) = clopper_pearson(count, n, CONFIDENCE);
            let freq = count as f64 / n as f64;
            let x_real = xo as f64 / rho_f;
            let y_real = yo as f64 / rho_f;
            b.fit(
                format!("scaled_prob(x={x_real},y={y_real})"),
                freq * scale,
                Some((lo * scale, hi * scale)),
                "MC frequency with Clopper-Pearson interval",
            );
            floor_ok &= lo * scale >= p.c_floor;
            let ex = exact_row.as_ref().map(|r| r[yi]).unwrap_or(f64::NAN);
            if let Some(r) = &exact_row {
                let se = (r[yi] * (1.0 - r[yi]) / n as f64).sqrt();
                exact_ok &= (freq - r[yi]).abs() <= 3.0 * se;
            }
            table.rows.push(vec![x_real, y_real, freq * scale, lo * scale, hi * scale, ex * scale]);
        }
        let in_g = out
            .iter()
            .filter(|o| o.as_ref().is_some_and(|c| in_gamma(c)))
            .count() as u64;
        let (lo, hi) = clopper_pearson(in_g, n, CONFIDENCE);
        b.fit(
            format!("gamma_ratio(x={})", xo as f64 / rho_f),
            in_g as f64 / n as f64 / eps,
            Some((lo / eps, hi / eps)),
            "MC P(V_t ∈ Γ, no exit)/ε with Clopper-Pearson interval",
        );
        gamma_ok &= lo / eps >= p.c_floor;
    }
    b.param("epsilon", eps);
    b.tol("c_floor", p.c_floor);
    b.gate("floor", floor_ok);
    b.gate("corollary_quarter_ball", gamma_ok);
    if exact_g.is_some() {
        b.gate("exact_agreement", exact_ok);
    }
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// landing position at the exit of a space-time box

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpacetimeParams {
    pub rho: u32,
    pub r: f64,
    pub s_grid: Vec<f64>,
    /// Box duration in units of `r^α`.
    pub gamma: f64,
    pub paths: usize,
    pub slope_tol: f64,
    pub norm: BallNorm,
}

impl Default for SpacetimeParams {
    fn default() -> Self {
        SpacetimeParams {
            rho: 4,
            r: 1.0,
            s_grid: vec![4.0, 8.0, 16.0],
            gamma: 1.0,
            paths: 100_000,
            slope_tol: 0.2,
            norm: BallNorm::Max,
        }
    }
}

/// Exact `P(V_τ ∉ B(0, s))` for a constant symbol and max-norm balls, from the
/// occupation measure of the killed ball and the rate of jumps past `s`.
fn spacetime_exact(spec: &ModelSpec, p: &SpacetimeParams) -> Result<Vec<f64>> {
    let g = build_generator(
        spec,
        &GeneratorParams::new(p.rho, p.r, BoundaryMode::Killed, RateConvention::UnitRate),
    )?;
    let origin = LatticeSite::origin(spec.d, p.rho);
    let occ = occupation_row(&g, &origin, p.gamma * p.r.powf(spec.alpha))?;
    let s_exp = spec.exponent();
    let per_dir = (p.rho as f64).powf(spec.alpha) / (2.0 * spec.d as f64 * zeta(s_exp));
    Ok(p.s_grid
        .iter()
        .map(|&s| {
            let edge = (s * p.rho as f64 + 1e-9).floor() as i64;
            (0..g.len())
                .map(|i| {
                    let z = g.window.coords(i);
                    let rate: f64 = z
                        .iter()
                        .map(|&c| {
                            per_dir * (zeta_tail(s_exp, (edge - c + 1) as u64) + zeta_tail(s_exp, (edge + c + 1) as u64))
                        })
                        .sum();
                    occ[i] * rate
                })
                .sum()
        })
        .collect())
}

pub fn check_spacetime_exit(spec: &ModelSpec, p: &SpacetimeParams, seed: u64) -> Result<CheckReport> {
    check_scale(p.rho)?;
    check_paths(p.paths)?;
    if !(p.r > 0.0 && p.gamma > 0.0) {
        return Err(Error::InvalidArgument("need r > 0 and gamma > 0".into()));
    }
    if p.s_grid.len() < 2 || p.s_grid.iter().any(|&s| !(s > 2.0 * p.r)) {
        return Err(Error::InvalidArgument("need at least two s values, all above 2r".into()));
    }
    let mut b = Builder::new("spacetime_exit", spec, p);
    let sampler = JumpSampler::new(spec);
    let ball = Ball::new(vec![0.0; spec.d], p.r, p.norm);
    let duration = p.gamma * p.r.powf(spec.alpha);
    let landing = run_paths(p.paths, seed, 0, |rng| {
        let start = vec![0i64; spec.d];
        let mut w = Walker::rescaled(spec, &sampler, p.rho, f64::INFINITY, &start);
        while w.next_jump(duration, rng).is_some() {
            if !ball.contains_coords(&w.coords, p.rho) {
                let real: Vec<f64> = w.coords.iter().map(|&c| c as f64 / p.rho as f64).collect();
                return Some(Ball::new(vec![0.0; spec.d], 0.0, p.norm).distance(&real));
            }
        }
        None
    });
    let exact = if spec.symbol.is_constant() && p.norm == BallNorm::Max {
        Some(spacetime_exact(spec, p)?)
    } else {
        b.note("exact cross-check needs a constant symbol and max-norm balls; skipped");
        None
    };
    let n = p.paths as u64;
    let mut table = Table::new("spacetime_exit", &["s", "prob", "lo", "hi", "exact"]);
    let (mut lx, mut ly, mut lw) = (Vec::new(), Vec::new(), Vec::new());
    let mut exact_ok = true;
    for (i, &s) in p.s_grid.iter().enumerate() {
        let count = landing.iter().filter(|l| l.is_some_and(|d| d > s + 1e-12)).count() as u64;
        let (lo, hi) = clopper_pearson(count, n, CONFIDENCE);
        let prob = count as f64 / n as f64;
        b.fit(format!("prob(s={s})"), prob, Some((lo, hi)), "MC frequency with Clopper-Pearson interval");
        let ex = exact.as_ref().map(|e| e[i]).unwrap_or(f64::NAN);
        if let Some(e) = &exact {
            b.fit(format!("prob_exact(s={s})"), e[i], None, "occupation measure times far-jump rate");
            exact_ok &= (prob - e[i]).abs() <= 3.0 * (e[i] * (1.0 - e[i]) / n as f64).sqrt();
        }
        table.rows.push(vec![s, prob, lo, hi, ex]);
        if count > 0 {
            lx.push(s.ln());
            ly.push(prob.ln());
            lw.push(count as f64 / (1.0 - prob));
        }
    }
    let tol = p.slope_tol * spec.alpha;
    b.tol("slope_halfwidth", tol);
    if lx.len() >= 2 {
        let fit = fit_line_weighted(&lx, &ly, &lw);
        let ci = normal_ci(fit.slope, fit.slope_se);
        b.fit("slope", fit.slope, Some(ci), "weighted least squares of log probability on log s");
        b.gate("slope", band_pass(ci, -spec.alpha - tol, -spec.alpha + tol));
    } else {
        b.note("fewer than two nonzero probabilities; slope not fitted");
        b.gate("slope", false);
    }
    if exact.is_some() {
        b.gate("exact_agreement", exact_ok);
    }
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// Hölder modulus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HolderParams {
    pub rho: u32,
    pub t0: f64,
    pub n_times: usize,
    pub spacing: f64,
    pub probe_radius: f64,
    pub beta_grid: Vec<f64>,
    pub stability_factor: f64,
    pub radius: Option<f64>,
    pub window_tol: f64,
}

impl Default for HolderParams {
    fn default() -> Self {
        HolderParams {
            rho: 8,
            t0: 2.0,
            n_times: 5,
            spacing: 0.25,
            probe_radius: 1.0,
            beta_grid: (1..=10).map(|i| i as f64 / 10.0).collect(),
            stability_factor: 2.0,
            radius: None,
            window_tol: default_window_tol(),
        }
    }
}

/// `(t, y, p)` samples on one resolution.
fn holder_samples(spec: &ModelSpec, p: &HolderParams, rho: u32, n_times: usize, spacing: f64) -> Result<(Vec<(f64, Vec<f64>, f64)>, f64)> {
    let times: Vec<f64> = (0..n_times)
        .map(|i| p.t0 / 2.0 + p.t0 / 2.0 * i as f64 / (n_times - 1) as f64)
        .collect();
    check_times_above(&times, rho, spec.alpha)?;
    let step = (spacing * rho as f64).round() as i64;
    if step < 1 || ((spacing * rho as f64) - step as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("probe spacing {spacing} is not a multiple of 1/{rho}")));
    }
    let k = (p.probe_radius / spacing + 1e-9).floor() as i64;
    let targets: Vec<Vec<i64>> = (-k..=k)
        .map(|j| {
            let mut y = vec![0i64; spec.d];
            y[0] = j * step;
            y
        })
        .collect();
    let radius = p.radius.unwrap_or_else(|| auto_radius(spec, rho, p.t0));
    let origin = LatticeSite::origin(spec.d, rho);
    let (dens, cert) = certified_densities(spec, rho, None, radius, &times, &origin, &targets, p.window_tol)?;
    let mut out = Vec::new();
    for (ti, &t) in times.iter().enumerate() {
        for (y, v) in targets.iter().zip(&dens[ti]) {
            out.push((t, y.iter().map(|&c| c as f64 / rho as f64).collect(), *v));
        }
    }
    Ok((out, cert))
}

/// `M(β)`: max over pairs with denominator in `(0, 1)`.
pub fn holder_modulus(samples: &[(f64, Vec<f64>, f64)], alpha: f64, d: usize, beta: f64) -> f64 {
    let mut m: f64 = 0.0;
    for (i, a) in samples.iter().enumerate() {
        for b in &samples[i + 1..] {
            let dy: f64 = a.1.iter().zip(&b.1).map(|(u, v)| (u - v).abs()).sum();
            let den = (a.0 - b.0).abs().powf(1.0 / alpha) + dy;
            if !(den > 0.0 && den < 1.0) {
                continue;
            }
            let tmin = a.0.min(b.0);
            m = m.max((a.2 - b.2).abs() * tmin.powf((d as f64 + beta) / alpha) * den.powf(-beta));
        }
    }
    m
}

pub fn estimate_holder(spec: &ModelSpec, p: &HolderParams) -> Result<CheckReport> {
    check_scale(p.rho)?;
    if p.n_times < 2 || p.beta_grid.is_empty() {
        return Err(Error::InvalidArgument("need n_times ≥ 2 and a nonempty beta grid".into()));
    }
    let mut b = Builder::new("holder", spec, p);
    let (coarse, c1) = holder_samples(spec, p, p.rho, p.n_times, p.spacing)?;
    let (fine, c2) = holder_samples(spec, p, 2 * p.rho, 2 * p.n_times - 1, p.spacing / 2.0)?;
    b.fit("window_certificate", c1.max(c2), None, "relative change under window halving");
    let mut table = Table::new("holder", &["beta", "m_coarse", "m_fine", "ratio"]);
    let mut best: Option<f64> = None;
    for &beta in &p.beta_grid {
        let mc = holder_modulus(&coarse, spec.alpha, spec.d, beta);
        let mf = holder_modulus(&fine, spec.alpha, spec.d, beta);
        let ratio = mf / mc;
        table.rows.push(vec![beta, mc, mf, ratio]);
        let stable = ratio.is_finite() && ratio <= p.stability_factor && ratio >= 1.0 / p.stability_factor;
        if stable && beta > 0.0 {
            best = Some(best.map_or(beta, |x: f64| x.max(beta)));
        }
    }
    b.fit("beta", best.unwrap_or(0.0), None, "largest β with M(β) stable under one grid refinement");
    b.tol("stability_factor", p.stability_factor);
    b.gate("beta_positive", best.is_some());
    b.table(table);
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cauchy() -> ModelSpec {
        ModelSpec::constant(1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn band_pass_needs_overlap_and_width() {
        assert!(band_pass((0.9, 1.1), 0.85, 1.15));
        assert!(band_pass((1.1, 1.2), 0.85, 1.15));
        assert!(!band_pass((1.2, 1.3), 0.85, 1.15));
        assert!(!band_pass((0.0, 2.0), 0.85, 1.15));
    }

    #[test]
    fn modulus_skips_coincident_pairs_and_grows_with_beta() {
        let s = vec![(1.0, vec![0.0], 0.3), (1.0, vec![0.0], 0.3), (1.0, vec![0.5], 0.2)];
        let m1 = holder_modulus(&s, 1.0, 1, 0.2);
        let m2 = holder_modulus(&s, 1.0, 1, 0.8);
        assert!(m1.is_finite() && m1 > 0.0);
        assert!(m2 >= m1);
    }

    #[test]
    fn levy_zero_function_gives_zero_both_sides() {
        let spec = cauchy();
        let sampler = JumpSampler::new(&spec);
        let f = LevyFunction {
            g: Some(Ball::new(vec![100.0], 0.1, BallNorm::Max)),
            h: None,
            delta: 1.0,
        };
        let intensity = LevyIntensity::new(&spec, 4, &f);
        let mut rng = RngStream::new(1, 0).rng();
        for _ in 0..100 {
            assert_eq!(levy_path(&spec, &sampler, &intensity, 1.0, &mut rng), (0.0, 0.0));
        }
        let p = LevyParams {
            functions: vec![f],
            paths: 200,
            ..LevyParams::default()
        };
        assert!(check_levy_system(&spec, &p, 1).is_err());
    }

    #[test]
    fn levy_tail_intensity_matches_closed_form() {
        let spec = cauchy();
        let f = LevyFunction { g: None, h: None, delta: 1.0 };
        let intensity = LevyIntensity::new(&spec, 4, &f);
        let closed = crate::lattice_generator::constant_tail_rate(&spec, 4, 0.75);
        assert!((intensity.rate_sum(&[3]) - closed).abs() < 1e-10 * closed);
    }

    #[test]
    fn ondiag_small_scale_report_is_consistent() {
        let p = OndiagParams {
            rho: 4,
            rho_alt: 2,
            t_grid: vec![1.0, 2.0, 4.0],
            ..OndiagParams::default()
        };
        let r = check_ondiag_upper(&cauchy(), &p).unwrap();
        let slope = r.fitted("slope").unwrap().value;
        assert!((slope + 1.0).abs() < 0.15, "slope {slope}");
        assert!(!r.tables.is_empty());
        let json = serde_json::to_string(&r).unwrap();
        assert!(!json.contains("runtime"));
    }

    #[test]
    fn ondiag_rejects_tiny_times() {
        let p = OndiagParams {
            t_grid: vec![0.001, 1.0],
            ..OndiagParams::default()
        };
        assert!(matches!(check_ondiag_upper(&cauchy(), &p), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn certificate_rejects_tiny_window() {
        let spec = cauchy();
        let origin = LatticeSite::origin(1, 4);
        let err = certified_densities(&spec, 4, None, 2.0, &[4.0], &origin, &[vec![0]], 1e-6);
        assert!(matches!(err, Err(Error::WindowTooSmall { .. })));
    }

    #[test]
    fn spacetime_exact_matches_mc_small() {
        let spec = cauchy();
        let p = SpacetimeParams {
            paths: 20_000,
            ..SpacetimeParams::default()
        };
        let r = check_spacetime_exit(&spec, &p, 3).unwrap();
        assert_eq!(r.gate("exact_agreement"), Some(true), "{:?}", r.fitted);
    }

    #[test]
    fn checks_are_reproducible() {
        let spec = cauchy();
        let p = HitParams {
            paths: 5_000,
            ..HitParams::default()
        };
        let a = serde_json::to_string(&check_hit_bound(&spec, &p, 9).unwrap()).unwrap();
        let b = serde_json::to_string(&check_hit_bound(&spec, &p, 9).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
