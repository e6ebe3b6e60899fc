//! Grid hierarchy `S_n = n⁻¹ℤ^d`, restriction and multilinear extension, and
//! the convergence studies: resolvent Cauchy sequence, energy identity,
//! annulus hypothesis, and semigroup/fdd comparison with the stable oracle.

use serde::{Deserialize, Serialize};

use crate::bound_checks::{normal_ci, run_paths, Builder, CheckReport, Table};
use crate::chain_sim::Walker;
use crate::error::{Error, Result};
use crate::kernel_model::{JumpSampler, LatticeSite, ModelSpec, Symbol};
use crate::lattice_generator::{
    build_generator, heat_kernel, heat_kernel_at, resolvent, semigroup_apply, semigroup_at,
    window_size_heuristic, BoundaryMode, GeneratorParams, GridFunction, RateConvention, Window,
};
use crate::numerics::{integrate_panels, sorted_quantile};
use crate::stable_oracle::{sigma_from_peak, stable_1d_density, stable_1d_interval, OracleSpec};

const SNAP: f64 = 1e-9;

/// `exp(1 - 1/(1 - r²))` on `|r| < 1`, peak 1 at the origin.
fn bump(r: f64) -> f64 {
    if r.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

/// Smooth compactly supported functions of product form `Π_j φ_j(x_j)`,
/// supported in the max-norm box of `radius` around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    Bump { center: Vec<f64>, radius: f64 },
    GaussianBump { center: Vec<f64>, width: f64, radius: f64 },
    WindowedCosine { center: Vec<f64>, frequency: f64, radius: f64 },
}

impl TestFunction {
    pub fn bump(center: Vec<f64>, radius: f64) -> Self {
        TestFunction::Bump { center, radius }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            TestFunction::Bump { center, .. }
            | TestFunction::GaussianBump { center, .. }
            | TestFunction::WindowedCosine { center, .. } => center,
        }
    }

    pub fn radius(&self) -> f64 {
        match *self {
            TestFunction::Bump { radius, .. }
            | TestFunction::GaussianBump { radius, .. }
            | TestFunction::WindowedCosine { radius, .. } => radius,
        }
    }

    pub fn dim(&self) -> usize {
        self.center().len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "test function has dimension {} but the model has d = {d}",
                self.dim()
            )));
        }
        if !(self.radius() > 0.0 && self.radius().is_finite()) {
            return Err(Error::InvalidArgument("test function radius must be positive".into()));
        }
        match *self {
            TestFunction::GaussianBump { width, .. } if !(width > 0.0) => {
                Err(Error::InvalidArgument("gaussian width must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// One-coordinate factor.
    pub fn factor(&self, j: usize, x: f64) -> f64 {
        let c = self.center()[j];
        let r = (x - c) / self.radius();
        match *self {
            TestFunction::Bump { .. } => bump(r),
            TestFunction::GaussianBump { width, .. } => {
                (-(x - c) * (x - c) / (2.0 * width * width)).exp() * bump(r)
            }
            TestFunction::WindowedCosine { frequency, .. } => (frequency * (x - c)).cos() * bump(r),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        x.iter().enumerate().map(|(j, &v)| self.factor(j, v)).product()
    }

    /// Support interval of factor `j`.
    pub fn support(&self, j: usize) -> (f64, f64) {
        (self.center()[j] - self.radius(), self.center()[j] + self.radius())
    }
}

/// Scales `n` (strictly increasing) sharing one box `[-box_radius, box_radius]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridHierarchy {
    pub levels: Vec<u32>,
    pub box_radius: f64,
    pub spec: ModelSpec,
}

impl GridHierarchy {
    pub fn new(levels: Vec<u32>, box_radius: f64, spec: ModelSpec) -> Result<Self> {
        if levels.is_empty() || levels[0] == 0 || levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "levels must be positive and strictly increasing, got {levels:?}"
            )));
        }
        if !(box_radius > 0.0) {
            return Err(Error::InvalidArgument("box radius must be positive".into()));
        }
        Ok(GridHierarchy { levels, box_radius, spec })
    }

    pub fn window(&self, n: u32, padding: f64) -> Window {
        Window::from_radius(self.spec.d, n, self.box_radius + padding)
    }
}

/// `[x]_n`: coordinatewise `floor(n x_i)/n`, with values within `1e-9` of a
/// grid point snapped onto it.
pub fn grid_embed(x: &[f64], n: u32) -> LatticeSite {
    let coords = x
        .iter()
        .map(|&v| {
            let s = v * n as f64;
            let r = s.round();
            if (s - r).abs() <= SNAP * s.abs().max(1.0) {
                r as i64
            } else {
                s.floor() as i64
            }
        })
        .collect();
    LatticeSite::new(coords, n)
}

/// `R_n f`: pointwise evaluation on the window sites.
pub fn restrict(f: &TestFunction, window: Window) -> GridFunction {
    GridFunction::from_fn(window, |x| f.eval(x))
}

/// `E_n u`: multilinear interpolation on the cells `Q_n(x)`.
#[derive(Debug, Clone, Copy)]
pub struct Extension<'a> {
    u: &'a GridFunction,
}

pub fn extend(u: &GridFunction) -> Extension<'_> {
    Extension { u }
}

impl Extension<'_> {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let w = &self.u.window;
        if x.len() != w.d {
            return Err(Error::OutsideGrid(x.to_vec()));
        }
        let n = w.scale as f64;
        let mut base = Vec::with_capacity(w.d);
        let mut frac = Vec::with_capacity(w.d);
        for &v in x {
            let s = v * n;
            let r = s.round();
            let (i0, f) = if (s - r).abs() <= SNAP * s.abs().max(1.0) {
                (r as i64, 0.0)
            } else {
                (s.floor() as i64, s - s.floor())
            };
            if i0 < -w.half || i0 > w.half || (f > 0.0 && i0 + 1 > w.half) {
                return Err(Error::OutsideGrid(x.to_vec()));
            }
            base.push(i0);
            frac.push(f);
        }
        let mut acc = 0.0;
        let mut corner = base.clone();
        for mask in 0..(1usize << w.d) {
            let mut weight = 1.0;
            for j in 0..w.d {
                let up = mask >> j & 1 == 1;
                if up && frac[j] == 0.0 {
                    weight = 0.0;
                    break;
                }
                corner[j] = base[j] + up as i64;
                weight *= if up { frac[j] } else { 1.0 - frac[j] };
            }
            if weight != 0.0 {
                acc += weight * self.u.at(&corner).ok_or_else(|| Error::OutsideGrid(x.to_vec()))?;
            }
        }
        Ok(acc)
    }
}

fn check_constant(spec: &ModelSpec) -> Result<f64> {
    match spec.symbol {
        Symbol::Constant { c0 } => Ok(c0),
        _ => Err(Error::OracleInvalid),
    }
}

// ---------------------------------------------------------------------------
// resolvents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventParams {
    pub levels: Vec<u32>,
    pub lambda: f64,
    pub box_radius: f64,
    /// Padding around the box; `None` uses the window heuristic, capped.
    pub padding: Option<f64>,
    pub padding_cap: f64,
    pub f: Option<TestFunction>,
    pub probes_per_axis: Option<usize>,
    pub probe_offset: f64,
    pub max_ratio: f64,
    pub deltas: Vec<f64>,
    /// Tolerance on `sup_n ω_n(δ_min)` relative to `sup_n ‖u_n‖_∞`.
    pub modulus_tol: f64,
    pub energy_tol: f64,
}

impl Default for ResolventParams {
    fn default() -> Self {
        ResolventParams {
            levels: vec![2, 4, 8, 16],
            lambda: 1.0,
            box_radius: 2.0,
            padding: None,
            padding_cap: 14.0,
            f: None,
            probes_per_axis: None,
            probe_offset: 0.013,
            max_ratio: 0.35,
            deltas: (0..=5).map(|k| 0.5f64.powi(k)).collect(),
            modulus_tol: 0.05,
            energy_tol: 1e-8,
        }
    }
}

impl ResolventParams {
    fn test_function(&self, d: usize) -> TestFunction {
        self.f.clone().unwrap_or_else(|| TestFunction::GaussianBump {
            center: vec![0.0; d],
            width: std::f64::consts::FRAC_1_SQRT_2,
            radius: self.box_radius,
        })
    }

    fn padding(&self, spec: &ModelSpec) -> f64 {
        self.padding.unwrap_or_else(|| {
            window_size_heuristic(spec, RateConvention::FormRate, 1.0 / self.lambda, None, 1e-6)
                .min(self.padding_cap)
        })
    }
}

/// Output of [`resolvent_sequence`]: one solve per level plus one extra level
/// `2·n_last` for the last Cauchy gap.
#[derive(Debug, Clone)]
pub struct ResolventSequence {
    pub levels: Vec<u32>,
    pub lambda: f64,
    pub padding: f64,
    pub f: TestFunction,
    pub probes: Vec<Vec<f64>>,
    /// `E_n u_n` at the probes, per level.
    pub probe_values: Vec<Vec<f64>>,
    pub solutions: Vec<GridFunction>,
    pub rhs: Vec<GridFunction>,
    /// `e_n = sup |E_n u_n − E_{2n} u_{2n}|` over the probes.
    pub gaps: Vec<f64>,
}

fn probe_grid(d: usize, lo: f64, hi: f64, per_axis: usize, offset: f64) -> Vec<Vec<f64>> {
    let line: Vec<f64> = (0..per_axis)
        .map(|i| lo + (hi - lo) * i as f64 / (per_axis - 1).max(1) as f64 + offset)
        .filter(|&v| v <= hi)
        .collect();
    let mut out = vec![Vec::new()];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p| {
                line.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn resolvent_sequence(spec: &ModelSpec, p: &ResolventParams) -> Result<ResolventSequence> {
    if !(p.lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", p.lambda)));
    }
    let hierarchy = GridHierarchy::new(p.levels.clone(), p.box_radius, spec.clone())?;
    let f = p.test_function(spec.d);
    f.validate(spec.d)?;
    let padding = p.padding(spec);
    let mut levels = hierarchy.levels.clone();
    levels.push(2 * levels[levels.len() - 1]);
    let per_axis = p.probes_per_axis.unwrap_or(if spec.d == 1 { 161 } else { 41 });
    let probes = probe_grid(spec.d, -p.box_radius, p.box_radius, per_axis, p.probe_offset);
    let (mut solutions, mut rhs, mut probe_values) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &levels {
        let window = hierarchy.window(n, padding);
        let g = build_generator(
            spec,
            &GeneratorParams::new(n, window.radius(), BoundaryMode::Restricted, RateConvention::FormRate),
        )?;
        let rn = restrict(&f, g.window);
        let (u, _) = resolvent(&g, p.lambda, &rn)?;
        let ext = extend(&u);
        probe_values.push(probes.iter().map(|x| ext.eval(x)).collect::<Result<Vec<f64>>>()?);
        solutions.push(u);
        rhs.push(rn);
    }
    let gaps = (0..levels.len() - 1)
        .map(|i| {
            probe_values[i]
                .iter()
                .zip(&probe_values[i + 1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(ResolventSequence {
        levels,
        lambda: p.lambda,
        padding,
        f,
        probes,
        probe_values,
        solutions,
        rhs,
        gaps,
    })
}

/// `ω_n(δ) = max |E_n u_n(x) − E_n u_n(y)|` over probe pairs with `|x − y|_∞ ≤ δ`,
/// one row per level, one column per `δ`.
pub fn equicontinuity_modulus(seq: &ResolventSequence, deltas: &[f64]) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..seq.probes.len()).collect();
    order.sort_by(|&a, &b| seq.probes[a][0].total_cmp(&seq.probes[b][0]));
    let d_max = deltas.iter().cloned().fold(0.0, f64::max);
    seq.probe_values
        .iter()
        .map(|vals| {
            let mut omega = vec![0.0f64; deltas.len()];
            for (ai, &a) in order.iter().enumerate() {
                for &b in &order[ai + 1..] {
                    if seq.probes[b][0] - seq.probes[a][0] > d_max {
                        break;
                    }
                    let dist = seq.probes[a]
                        .iter()
                        .zip(&seq.probes[b])
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    let diff = (vals[a] - vals[b]).abs();
                    for (k, &dl) in deltas.iter().enumerate() {
                        if dist <= dl {
                            omega[k] = omega[k].max(diff);
                        }
                    }
                }
            }
            omega
        })
        .collect()
}

fn min_probe_spacing(probes: &[Vec<f64>]) -> f64 {
    let mut xs: Vec<f64> = probes.iter().map(|p| p[0]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

pub fn resolvent_report(spec: &ModelSpec, p: &ResolventParams, seq: &ResolventSequence) -> CheckReport {
    let mut b = Builder::new("resolvent_convergence", spec, p);
    b.param("padding_used", seq.padding);
    b.param("test_function", &seq.f);
    let mut table = Table::new("resolvent", &["n", "e_n", "sup_u", "sup_f_over_lambda", "l2_lambda_u", "l2_f"]);
    let (mut sup_ok, mut l2_ok) = (true, true);
    for (i, &n) in seq.levels.iter().enumerate() {
        let u = &seq.solutions[i];
        let f = &seq.rhs[i];
        let sup_u = u.sup();
        let sup_bound = f.sup() / seq.lambda;
        let l2_u = seq.lambda * u.norm2();
        let l2_f = f.norm2();
        // solver precision only
        sup_ok &= sup_u <= sup_bound * (1.0 + 1e-9);
        l2_ok &= l2_u <= l2_f * (1.0 + 1e-9);
        let e = seq.gaps.get(i).copied().unwrap_or(f64::NAN);
        table.rows.push(vec![n as f64, e, sup_u, sup_bound, l2_u, l2_f]);
        if i < seq.gaps.len() {
            b.fit(format!("e(n={n})"), e, None, "sup over probes of |E_n u_n - E_2n u_2n|");
        }
    }
    let first = seq.gaps[0];
    let last = seq.gaps[seq.gaps.len() - 1];
    b.fit("gap_ratio", last / first, None, "e_last/e_first");
    b.tol("max_ratio", p.max_ratio);
    b.gate("gaps_decreasing", seq.gaps.windows(2).all(|w| w[1] < w[0]));
    b.gate("gap_ratio", last / first <= p.max_ratio);
    b.gate("sup_contraction", sup_ok);
    b.gate("l2_contraction", l2_ok);

    let omega = equicontinuity_modulus(seq, &p.deltas);
    let mut cols = vec!["n".to_string()];
    cols.extend(p.deltas.iter().map(|d| format!("delta={d}")));
    let mut mtable = Table {
        name: "equicontinuity".into(),
        columns: cols,
        rows: Vec::new(),
    };
    for (n, row) in seq.levels.iter().zip(&omega) {
        let mut r = vec![*n as f64];
        r.extend(row);
        mtable.rows.push(r);
    }
    if let Some((k_min, _)) = p
        .deltas
        .iter()
        .enumerate()
        .min_by(|a, c| a.1.total_cmp(c.1))
    {
        let scale = seq.solutions.iter().map(|u| u.sup()).fold(0.0, f64::max).max(1e-300);
        let worst = omega.iter().map(|r| r[k_min]).fold(0.0, f64::max) / scale;
        let spacing = min_probe_spacing(&seq.probes);
        if p.deltas[k_min] < spacing {
            b.note(format!("δ_min = {} is below the probe spacing {spacing}; no pairs", p.deltas[k_min]));
        }
        let shrinking = omega.iter().all(|r| {
            let mut by_delta: Vec<(f64, f64)> = p.deltas.iter().cloned().zip(r.iter().cloned()).collect();
            by_delta.sort_by(|x, y| x.0.total_cmp(&y.0));
            by_delta.windows(2).all(|w| w[0].1 <= w[1].1)
        });
        b.gate("modulus_monotone", shrinking);
        b.fit("modulus_at_min_delta", worst, None, "sup_n ω_n(δ_min)/sup_n ‖u_n‖_∞");
        b.tol("modulus_tol", p.modulus_tol);
        b.gate("equicontinuity", worst <= p.modulus_tol && p.deltas[k_min] >= spacing);
    }
    b.table(table);
    b.table(mtable);
    b.finish()
}

pub fn check_resolvent_convergence(spec: &ModelSpec, p: &ResolventParams) -> Result<CheckReport> {
    let seq = resolvent_sequence(spec, p)?;
    Ok(resolvent_report(spec, p, &seq))
}

/// Terms of `E^n(u,u) = (f,u)_n − λ‖u‖²_{2,n}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTerms {
    pub form: f64,
    pub inner: f64,
    pub norm2: f64,
    pub rel_err: f64,
}

/// Ordered-pair form `Σ_x Σ_y (u(x) − u(y))² C_n(x,y) n^{-1-d}` over axis pairs
/// of the window, assembled directly from the symbol.
pub fn dirichlet_form(spec: &ModelSpec, u: &GridFunction) -> f64 {
    let w = u.window;
    let n = w.scale as f64;
    let s = spec.exponent();
    let mut y = vec![0i64; w.d];
    let mut total = 0.0;
    for i in 0..w.len() {
        let x = w.coords(i);
        let ux = u.values[i];
        for axis in 0..w.d {
            y.copy_from_slice(&x);
            for yc in -w.half..=w.half {
                if yc == x[axis] {
                    continue;
                }
                y[axis] = yc;
                let k = yc.abs_diff(x[axis]) as f64;
                let j = w.index(&y).expect("axis neighbour inside the window");
                let c = spec.symbol.value(&x, &y, w.scale) * (k / n).powf(-s);
                total += (ux - u.values[j]).powi(2) * c;
            }
        }
    }
    total * n.powf(-1.0 - w.d as f64)
}

pub fn energy_identity(spec: &ModelSpec, u: &GridFunction, f: &GridFunction, lambda: f64) -> EnergyTerms {
    let form = dirichlet_form(spec, u);
    let inner = f.inner(u);
    let norm2 = u.inner(u);
    let rhs = inner - lambda * norm2;
    let scale = form.abs().max(inner.abs()).max(lambda * norm2);
    EnergyTerms {
        form,
        inner,
        norm2,
        rel_err: if scale == 0.0 { 0.0 } else { (form - rhs).abs() / scale },
    }
}

pub fn energy_report(spec: &ModelSpec, p: &ResolventParams, seq: &ResolventSequence) -> CheckReport {
    let mut b = Builder::new("energy_identity", spec, p);
    let mut table = Table::new("energy_identity", &["n", "form", "inner", "lambda_norm2", "rel_err"]);
    let sup_f2 = seq.rhs.iter().map(|f| f.inner(f)).fold(0.0, f64::max);
    let (mut ok, mut bounded) = (true, true);
    for (i, &n) in seq.levels.iter().enumerate() {
        let e = energy_identity(spec, &seq.solutions[i], &seq.rhs[i], seq.lambda);
        b.fit(format!("rel_err(n={n})"), e.rel_err, None, "|E - (f,u) + λ‖u‖²| / max term");
        table.rows.push(vec![n as f64, e.form, e.inner, seq.lambda * e.norm2, e.rel_err]);
        ok &= e.rel_err <= p.energy_tol;
        bounded &= e.form <= 2.0 / seq.lambda * sup_f2;
    }
    b.tol("energy_tol", p.energy_tol);
    b.gate("identity", ok);
    b.gate("form_bound", bounded);
    b.table(table);
    b.finish()
}

pub fn energy_identity_check(spec: &ModelSpec, p: &ResolventParams) -> Result<CheckReport> {
    let seq = resolvent_sequence(spec, p)?;
    Ok(energy_report(spec, p, &seq))
}

// ---------------------------------------------------------------------------
// annulus hypothesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypothesisParams {
    pub levels: Vec<u32>,
    pub annulus: f64,
    /// Pairs `(f, g)` with `φ(x, y) = f(x) g(y)`; `None` uses two default pairs.
    pub test_functions: Option<Vec<(TestFunction, TestFunction)>>,
    pub halving_tol: f64,
    pub panels: usize,
}

impl Default for HypothesisParams {
    fn default() -> Self {
        HypothesisParams {
            levels: vec![8, 16, 32, 64],
            annulus: 4.0,
            test_functions: None,
            halving_tol: 0.25,
            panels: 96,
        }
    }
}

fn default_pairs(d: usize) -> Vec<(TestFunction, TestFunction)> {
    let mut shifted = vec![0.0; d];
    shifted[0] = 0.5;
    vec![
        (TestFunction::bump(vec![0.0; d], 2.0), TestFunction::bump(shifted.clone(), 2.0)),
        (
            TestFunction::GaussianBump { center: vec![0.0; d], width: 1.0, radius: 2.0 },
            TestFunction::WindowedCosine { center: shifted, frequency: 1.0, radius: 2.0 },
        ),
    ]
}

/// `Σ_{x,y ∈ S_n} φ(x,y) C_n(x,y) 1{1/N ≤ |x−y| ≤ N} n^{-1-d}` over axis pairs.
fn pair_sum(spec: &ModelSpec, f: &TestFunction, g: &TestFunction, n: u32, big_n: f64) -> f64 {
    let d = spec.d;
    let nf = n as f64;
    let s = spec.exponent();
    let lo: Vec<i64> = (0..d).map(|j| (f.support(j).0 * nf).floor() as i64).collect();
    let hi: Vec<i64> = (0..d).map(|j| (f.support(j).1 * nf).ceil() as i64).collect();
    let k_min = (nf / big_n - SNAP).ceil().max(1.0) as i64;
    let k_max = (nf * big_n + SNAP).floor() as i64;
    let mut x = lo.clone();
    let mut y = vec![0i64; d];
    let mut total = 0.0;
    loop {
        let xr: Vec<f64> = x.iter().map(|&c| c as f64 / nf).collect();
        let fx = f.eval(&xr);
        if fx != 0.0 {
            for axis in 0..d {
                // g factors off the axis are fixed along the line
                let rest: f64 = (0..d).filter(|&j| j != axis).map(|j| g.factor(j, xr[j])).product();
                if rest == 0.0 {
                    continue;
                }
                y.copy_from_slice(&x);
                for dir in [-1i64, 1] {
                    for k in k_min..=k_max {
                        y[axis] = x[axis] + dir * k;
                        let gy = g.factor(axis, y[axis] as f64 / nf);
                        if gy == 0.0 {
                            continue;
                        }
                        let c = spec.symbol.value(&x, &y, n) * (k as f64 / nf).powf(-s);
                        total += fx * rest * gy * c;
                    }
                }
            }
        }
        let mut j = 0;
        loop {
            if j == d {
                return total * nf.powf(-1.0 - d as f64);
            }
            x[j] += 1;
            if x[j] <= hi[j] {
                break;
            }
            x[j] = lo[j];
            j += 1;
        }
    }
}

/// `∫∫ φ(x,y) J(x,y) 1{1/N ≤ |x−y| ≤ N}` with axis measure, constant `c`,
/// by Gauss–Legendre panels on the product structure.
fn continuum_integral(
    spec: &ModelSpec,
    c0: f64,
    f: &TestFunction,
    g: &TestFunction,
    big_n: f64,
    panels: usize,
) -> f64 {
    let d = spec.d;
    let s = spec.exponent();
    let overlap = |j: usize| {
        let (a, b) = f.support(j);
        integrate_panels(|x| f.factor(j, x) * g.factor(j, x), a, b, panels)
    };
    let mut total = 0.0;
    for axis in 0..d {
        let others: f64 = (0..d).filter(|&j| j != axis).map(overlap).product();
        if others == 0.0 {
            continue;
        }
        let (fa, fb) = f.support(axis);
        let (ga, gb) = g.support(axis);
        let line = integrate_panels(
            |x| {
                let fx = f.factor(axis, x);
                if fx == 0.0 {
                    return 0.0;
                }
                let mut inner = 0.0;
                for (a, b) in [(-big_n, -1.0 / big_n), (1.0 / big_n, big_n)] {
                    let lo = a.max(ga - x);
                    let hi = b.min(gb - x);
                    if hi > lo {
                        inner += integrate_panels(|h| g.factor(axis, x + h) * h.abs().powf(-s), lo, hi, panels);
                    }
                }
                fx * inner
            },
            fa,
            fb,
            panels,
        );
        total += others * line;
    }
    c0 * total
}

pub fn hypothesis_check(spec: &ModelSpec, p: &HypothesisParams) -> Result<CheckReport> {
    let c0 = check_constant(spec)?;
    GridHierarchy::new(p.levels.clone(), 1.0, spec.clone())?;
    if !(p.annulus >= 1.0) {
        return Err(Error::InvalidArgument(format!("annulus N must be ≥ 1, got {}", p.annulus)));
    }
    let pairs = p.test_functions.clone().unwrap_or_else(|| default_pairs(spec.d));
    let mut b = Builder::new("hypothesis", spec, p);
    let mut table = Table::new("hypothesis", &["pair", "n", "sum", "integral", "gap"]);
    let (lo, hi) = (0.5 * (1.0 - p.halving_tol), 0.5 * (1.0 + p.halving_tol));
    let mut ok = true;
    for (i, (f, g)) in pairs.iter().enumerate() {
        f.validate(spec.d)?;
        g.validate(spec.d)?;
        let integral = continuum_integral(spec, c0, f, g, p.annulus, p.panels);
        if !integral.is_finite() {
            return Err(Error::Quadrature(format!("non-finite integral for pair {i}")));
        }
        b.fit(format!("integral[{i}]"), integral, None, "Gauss-Legendre panels on the axis integrals");
        let mut gaps = Vec::new();
        for &n in &p.levels {
            let sum = pair_sum(spec, f, g, n, p.annulus);
            let gap = if integral == 0.0 {
                sum.abs()
            } else {
                ((sum - integral) / integral).abs()
            };
            table.rows.push(vec![i as f64, n as f64, sum, integral, gap]);
            b.fit(format!("gap[{i}](n={n})"), gap, None, "relative gap of the pair sum");
            gaps.push(gap);
        }
        if integral == 0.0 && gaps.iter().all(|&x| x == 0.0) {
            b.note(format!("pair {i} vanishes identically"));
            continue;
        }
        for w in gaps.windows(2) {
            let r = w[1] / w[0];
            ok &= r >= lo && r <= hi;
        }
    }
    b.tol("halving_ratio_lo", lo);
    b.tol("halving_ratio_hi", hi);
    b.gate("gap_halving", ok);
    b.table(table);
    Ok(b.finish())
}

// ---------------------------------------------------------------------------
// semigroup and fdd

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FddParams {
    pub t1: f64,
    pub t2: f64,
    pub paths: usize,
    /// Half-open intervals `[a, b)` for the first coordinate at each time.
    pub intervals: Vec<(f64, f64)>,
    /// Fixed intervals for the remaining coordinates at `t1` and `t2`.
    pub side_intervals: ((f64, f64), (f64, f64)),
}

impl Default for FddParams {
    fn default() -> Self {
        FddParams {
            t1: 0.5,
            t2: 1.0,
            paths: 100_000,
            intervals: vec![(-4.0, 4.0), (0.0, 4.0), (-2.0, 2.0), (2.0, 8.0), (-8.0, -1.0)],
            side_intervals: ((-4.0, 4.0), (-2.0, 2.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemigroupParams {
    pub levels: Vec<u32>,
    pub t: f64,
    pub t_calibration: f64,
    pub window_radius: f64,
    pub probe_radius: f64,
    pub probe_spacing: f64,
    pub f: Option<TestFunction>,
    pub max_rel_err: f64,
    pub panels: usize,
    pub fdd: Option<FddParams>,
}

impl Default for SemigroupParams {
    fn default() -> Self {
        SemigroupParams {
            levels: vec![2, 4, 8, 16],
            t: 1.0,
            t_calibration: 2.0,
            window_radius: 32.0,
            probe_radius: 2.0,
            probe_spacing: 0.5,
            f: None,
            max_rel_err: 0.10,
            panels: 64,
            fdd: Some(FddParams::default()),
        }
    }
}

fn form_killed(spec: &ModelSpec, n: u32, radius: f64) -> Result<crate::lattice_generator::GeneratorMatrix> {
    build_generator(
        spec,
        &GeneratorParams::new(n, radius, BoundaryMode::Killed, RateConvention::FormRate),
    )
}

/// `(P_t f)(x)` for the oracle: product of 1-D convolutions.
fn oracle_semigroup(oracle: &OracleSpec, t: f64, f: &TestFunction, x: &[f64], panels: usize) -> Result<f64> {
    if t == 0.0 {
        return Ok(f.eval(x));
    }
    let tau = oracle.sigma * t;
    let mut prod = 1.0;
    for (j, &xj) in x.iter().enumerate() {
        let (a, b) = f.support(j);
        let mut err = None;
        let v = integrate_panels(
            |y| match stable_1d_density(oracle.alpha, tau, y - xj) {
                Ok(p) => f.factor(j, y) * p,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            },
            a,
            b,
            panels,
        );
        if let Some(e) = err {
            return Err(e);
        }
        prod *= v;
    }
    Ok(prod)
}

/// `P(X_{t1} ∈ A, X_{t2} ∈ B)` for the 1-D oracle started at 0.
fn oracle_two_time(oracle: &OracleSpec, t1: f64, t2: f64, a: (f64, f64), bi: (f64, f64), panels: usize) -> Result<f64> {
    let (tau1, tau2) = (oracle.sigma * t1, oracle.sigma * (t2 - t1));
    let mut err = None;
    let v = integrate_panels(
        |y| {
            let r = stable_1d_density(oracle.alpha, tau1, y)
                .and_then(|p| Ok(p * stable_1d_interval(oracle.alpha, tau2, bi.0 - y, bi.1 - y)?));
            r.unwrap_or_else(|e| {
                err.get_or_insert(e);
                0.0
            })
        },
        a.0,
        a.1,
        panels,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// The same probability for the 1-D lattice chain at scale `n`, exactly.
fn lattice_two_time(
    spec1: &ModelSpec,
    n: u32,
    radius: f64,
    t1: f64,
    t2: f64,
    pairs: &[((f64, f64), (f64, f64))],
) -> Result<Vec<f64>> {
    let g = form_killed(spec1, n, radius)?;
    let origin = LatticeSite::origin(1, n);
    let first = heat_kernel(&g, t1, &origin)?;
    let mu = g.window.site_measure();
    let inside = |x: f64, iv: (f64, f64)| x >= iv.0 - SNAP && x < iv.1 - SNAP;
    let mut out = Vec::with_capacity(pairs.len());
    let mut cache: Vec<((f64, f64), Vec<f64>)> = Vec::new();
    for &(a, bi) in pairs {
        let second = match cache.iter().find(|c| c.0 == bi) {
            Some(c) => c.1.clone(),
            None => {
                let ind: Vec<f64> = (0..g.len())
                    .map(|i| inside(g.window.real(i)[0], bi) as u8 as f64)
                    .collect();
                let v = semigroup_apply(&g, t2 - t1, &ind)?;
                cache.push((bi, v.clone()));
                v
            }
        };
        let p: f64 = (0..g.len())
            .filter(|&i| inside(g.window.real(i)[0], a))
            .map(|i| first.values[i] * mu * second[i])
            .sum();
        out.push(p);
    }
    Ok(out)
}

pub fn semigroup_convergence(spec: &ModelSpec, p: &SemigroupParams, seed: u64) -> Result<CheckReport> {
    let c0 = check_constant(spec)?;
    let hierarchy = GridHierarchy::new(p.levels.clone(), p.probe_radius, spec.clone())?;
    if !(p.t >= 0.0 && p.t_calibration > 0.0) {
        return Err(Error::InvalidArgument("need t ≥ 0 and t_calibration > 0".into()));
    }
    let f = p.f.clone().unwrap_or_else(|| TestFunction::bump(vec![0.0; spec.d], 1.0));
    f.validate(spec.d)?;
    let mut b = Builder::new("semigroup_convergence", spec, p);
    let finest = *hierarchy.levels.last().unwrap();

    // one-time clock calibration from the on-diagonal density at t_calibration
    let gf = form_killed(spec, finest, p.window_radius)?;
    let origin = LatticeSite::origin(spec.d, finest);
    let peak = heat_kernel_at(&gf, &[p.t_calibration], &origin, &[origin.coords.clone()])?[0][0];
    let sigma = sigma_from_peak(spec.alpha, spec.d, p.t_calibration, peak)?;
    drop(gf);
    let oracle = OracleSpec::for_model(spec, sigma)?;
    b.fit("sigma", sigma, None, "on-diagonal calibration at t_calibration on the finest level");

    let k = (p.probe_radius / p.probe_spacing + SNAP).floor() as i64;
    let line: Vec<f64> = (-k..=k).map(|i| i as f64 * p.probe_spacing).collect();
    let mut probes: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..spec.d {
        probes = probes
            .into_iter()
            .flat_map(|q| {
                line.iter().map(move |&v| {
                    let mut r = q.clone();
                    r.push(v);
                    r
                })
            })
            .collect();
    }
    let exact: Vec<f64> = probes
        .iter()
        .map(|x| oracle_semigroup(&oracle, p.t, &f, x, p.panels))
        .collect::<Result<_>>()?;
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut table = Table::new("semigroup", &["n", "sup_rel_err", "fdd_lattice_err"]);
    let mut errs = Vec::new();
    for &n in &hierarchy.levels {
        let g = form_killed(spec, n, p.window_radius)?;
        let fvec = restrict(&f, g.window);
        let sites: Vec<Vec<i64>> = probes.iter().map(|x| grid_embed(x, n).coords).collect();
        let lat = if p.t == 0.0 {
            sites.iter().map(|s| fvec.at(s).unwrap_or(0.0)).collect()
        } else {
            semigroup_at(&g, p.t, &fvec.values, &sites)?
        };
        let err = lat
            .iter()
            .zip(&exact)
            .map(|(a, e)| (a - e).abs())
            .fold(0.0, f64::max)
            / scale;
        b.fit(format!("sup_rel_err(n={n})"), err, None, "sup over probes of |P^n_t R_n f - P_t f| / sup P_t f");
        errs.push(err);
    }
    b.tol("max_rel_err", p.max_rel_err);
    b.gate("errors_decreasing", errs.windows(2).all(|w| w[1] < w[0]));
    b.gate("final_error", *errs.last().unwrap() <= p.max_rel_err);

    let mut fdd_errs = vec![f64::NAN; errs.len()];
    if let Some(fp) = &p.fdd {
        fdd_errs = fdd_study(spec, c0, &oracle, p, fp, seed, &mut b)?;
    }
    for ((n, e), fe) in hierarchy.levels.iter().zip(&errs).zip(&fdd_errs) {
        table.rows.push(vec![*n as f64, *e, *fe]);
    }
    b.table(table);
    Ok(b.finish())
}

/// MC fdd of the chain at the finest level against the oracle, plus the
/// exact lattice fdd error per level. Returns the per-level lattice errors.
fn fdd_study(
    spec: &ModelSpec,
    c0: f64,
    oracle: &OracleSpec,
    p: &SemigroupParams,
    fp: &FddParams,
    seed: u64,
    b: &mut Builder,
) -> Result<Vec<f64>> {
    if !(fp.t1 > 0.0 && fp.t2 > fp.t1) {
        return Err(Error::InvalidArgument("need 0 < t1 < t2".into()));
    }
    if fp.paths < 2 || fp.intervals.is_empty() {
        return Err(Error::InvalidArgument("fdd needs paths ≥ 2 and at least one interval".into()));
    }
    let spec1 = ModelSpec::constant(1, spec.alpha, c0)?;
    let oracle1 = OracleSpec::new(spec.alpha, 1, oracle.sigma)?;
    // events: first coordinate (A at t1, B at t2), others fixed
    let pairs: Vec<((f64, f64), (f64, f64))> = fp
        .intervals
        .iter()
        .flat_map(|&a| fp.intervals.iter().map(move |&bi| (a, bi)))
        .collect();
    let side = fp.side_intervals;
    let side_or = if spec.d > 1 {
        oracle_two_time(&oracle1, fp.t1, fp.t2, side.0, side.1, p.panels)?.powi(spec.d as i32 - 1)
    } else {
        1.0
    };
    let or: Vec<f64> = pairs
        .iter()
        .map(|&(a, bi)| Ok(oracle_two_time(&oracle1, fp.t1, fp.t2, a, bi, p.panels)? * side_or))
        .collect::<Result<_>>()?;

    let mut level_errs = Vec::new();
    let mut lattice_finest = Vec::new();
    for &n in &p.levels {
        let lat = lattice_two_time(&spec1, n, p.window_radius, fp.t1, fp.t2, &pairs)?;
        let side_lat = if spec.d > 1 {
            lattice_two_time(&spec1, n, p.window_radius, fp.t1, fp.t2, &[side])?[0].powi(spec.d as i32 - 1)
        } else {
            1.0
        };
        let lat: Vec<f64> = lat.iter().map(|v| v * side_lat).collect();
        let e = lat.iter().zip(&or).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
        b.fit(format!("fdd_lattice_err(n={n})"), e, None, "max over events of |exact lattice - oracle|");
        level_errs.push(e);
        lattice_finest = lat;
    }
    b.gate("fdd_discretization_trend", level_errs.windows(2).all(|w| w[1] < w[0]));

    let n = *p.levels.last().unwrap();
    let sampler = JumpSampler::new(spec);
    let inside = |c: i64, iv: (f64, f64)| {
        let x = c as f64 / n as f64;
        x >= iv.0 - SNAP && x < iv.1 - SNAP
    };
    let paths = run_paths(fp.paths, seed, 0, |rng| {
        let start = vec![0i64; spec.d];
        let mut w = Walker::form_rate(spec, &sampler, n, &start);
        let mut max_jump = 0u64;
        let mut step = |w: &mut Walker, horizon: f64| {
            while let Some(j) = w.next_jump(horizon, rng) {
                max_jump = max_jump.max(j.steps.unsigned_abs());
            }
        };
        step(&mut w, fp.t1);
        let x1 = w.coords.clone();
        step(&mut w, fp.t2);
        (x1, w.coords.clone(), max_jump)
    });
    let side_ok = |x1: &[i64], x2: &[i64]| {
        x1[1..].iter().all(|&c| inside(c, side.0)) && x2[1..].iter().all(|&c| inside(c, side.1))
    };
    let m = fp.paths as f64;
    let mut all_ok = true;
    let mut worst: f64 = 0.0;
    for (k, &(a, bi)) in pairs.iter().enumerate() {
        let count = paths
            .iter()
            .filter(|(x1, x2, _)| inside(x1[0], a) && inside(x2[0], bi) && side_ok(x1, x2))
            .count() as f64;
        let est = count / m;
        let se = (or[k] * (1.0 - or[k]) / m).sqrt();
        let disc = (lattice_finest[k] - or[k]).abs();
        let (lo, hi) = normal_ci(est, se);
        // CI widened by the exact discretization error at this level
        let ok = lo - disc <= or[k] && or[k] <= hi + disc;
        all_ok &= ok;
        worst = worst.max((est - or[k]).abs());
        b.fit(
            format!("fdd[{a:?}->{bi:?}]"),
            est,
            Some((lo, hi)),
            "MC frequency at the finest level",
        );
    }
    b.fit("fdd_mc_max_abs_err", worst, None, "max over events of |MC - oracle|");
    b.gate("fdd_within_ci", all_ok);
    let mut jumps: Vec<f64> = paths.iter().map(|p| p.2 as f64 / n as f64).collect();
    jumps.sort_by(f64::total_cmp);
    b.fit("max_jump_median", sorted_quantile(&jumps, 0.5), None, "descriptive, not gated");
    b.fit("max_jump_q95", sorted_quantile(&jumps, 0.95), None, "descriptive, not gated");
    Ok(level_errs)
}

// ---------------------------------------------------------------------------
// combined study

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Resolvent,
    Energy,
    Hypothesis,
    Semigroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeParams {
    pub studies: Vec<Study>,
    pub resolvent: ResolventParams,
    pub hypothesis: HypothesisParams,
    pub semigroup: SemigroupParams,
}

impl Default for ConvergeParams {
    fn default() -> Self {
        ConvergeParams {
            studies: vec![Study::Resolvent, Study::Energy, Study::Hypothesis, Study::Semigroup],
            resolvent: ResolventParams::default(),
            hypothesis: HypothesisParams::default(),
            semigroup: SemigroupParams::default(),
        }
    }
}

/// Runs every selected study and returns the reports with a combined
/// per-level table `(n, e_n, hypothesis_gap, semigroup_err)`.
pub fn run_converge(spec: &ModelSpec, p: &ConvergeParams, seed: u64) -> Result<(Vec<CheckReport>, Table)> {
    if p.studies.is_empty() {
        return Err(Error::Config("converge: `studies` is empty".into()));
    }
    let has = |s: Study| p.studies.contains(&s);
    let seq = if has(Study::Resolvent) || has(Study::Energy) {
        Some(resolvent_sequence(spec, &p.resolvent)?)
    } else {
        None
    };
    let mut reports = Vec::new();
    let mut levels: Vec<u32> = Vec::new();
    if let Some(seq) = &seq {
        if has(Study::Resolvent) {
            reports.push(resolvent_report(spec, &p.resolvent, seq));
            levels.extend_from_slice(&seq.levels[..seq.gaps.len()]);
        }
        if has(Study::Energy) {
            reports.push(energy_report(spec, &p.resolvent, seq));
        }
    }
    if has(Study::Hypothesis) {
        reports.push(hypothesis_check(spec, &p.hypothesis)?);
        levels.extend_from_slice(&p.hypothesis.levels);
    }
    if has(Study::Semigroup) {
        reports.push(semigroup_convergence(spec, &p.semigroup, seed)?);
        levels.extend_from_slice(&p.semigroup.levels);
    }
    levels.sort_unstable();
    levels.dedup();
    let lookup = |r: &CheckReport, key: String| r.fitted(&key).map(|f| f.value).unwrap_or(f64::NAN);
    let find = |name: &str| reports.iter().find(|r| r.check_name == name);
    let (res, hyp, semi) = (find("resolvent_convergence"), find("hypothesis"), find("semigroup_convergence"));
    let mut table = Table::new("convergence", &["n", "e_n", "hypothesis_gap", "semigroup_err"]);
    for n in levels {
        table.rows.push(vec![
            n as f64,
            res.map_or(f64::NAN, |r| lookup(r, format!("e(n={n})"))),
            hyp.map_or(f64::NAN, |r| lookup(r, format!("gap[0](n={n})"))),
            semi.map_or(f64::NAN, |r| lookup(r, format!("sup_rel_err(n={n})"))),
        ]);
    }
    Ok((reports, table))
}
