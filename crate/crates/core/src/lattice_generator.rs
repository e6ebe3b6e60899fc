//! Jump-rate generators on finite lattice windows, with transition densities by
//! uniformization and resolvents by conjugate gradients.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::kernel_model::{total_conductance, LatticeSite, ModelSpec, DEFAULT_TAIL_TOL};
use crate::numerics::{poisson_weights, zeta, zeta_tail};

/// Total-variation tolerance for uniformization.
pub const UNIFORMIZATION_TOL: f64 = 1e-10;

/// Default cap on stored matrix entries (dense 1-D blocks or CSR nonzeros).
pub const DEFAULT_BUDGET: usize = 60_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Jumps leaving the window are deleted.
    Restricted,
    /// Jumps leaving the window kill the chain.
    Killed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateConvention {
    /// `ρ^α·C(ρx, ρy)/G_{ρx}`: the time-changed unit-rate chain `V`.
    UnitRate,
    /// `(2/n)·C_n(x, y)`: quadratic form equals the ordered-pair Dirichlet form.
    FormRate,
}

impl fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryMode::Restricted => "restricted",
            BoundaryMode::Killed => "killed",
        })
    }
}

impl fmt::Display for RateConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateConvention::UnitRate => "unit_rate",
            RateConvention::FormRate => "form_rate",
        })
    }
}

/// Box `{x ∈ n⁻¹ℤ^d : |x|_∞ ≤ half/n}` centred at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub d: usize,
    pub scale: u32,
    pub half: i64,
}

impl Window {
    pub fn new(d: usize, scale: u32, half: i64) -> Self {
        Window { d, scale, half }
    }

    /// Largest box of real radius at most `radius`.
    pub fn from_radius(d: usize, scale: u32, radius: f64) -> Self {
        let half = (radius * scale as f64 + 1e-9).floor().max(-1.0) as i64;
        Window { d, scale, half }
    }

    pub fn radius(&self) -> f64 {
        self.half as f64 / self.scale as f64
    }

    pub fn side(&self) -> usize {
        (2 * self.half + 1).max(0) as usize
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.half < 0 || self.d == 0
    }

    pub fn contains(&self, coords: &[i64]) -> bool {
        coords.iter().all(|c| c.abs() <= self.half)
    }

    /// Row-major index; axis 0 varies slowest.
    pub fn index(&self, coords: &[i64]) -> Option<usize> {
        if coords.len() != self.d || !self.contains(coords) {
            return None;
        }
        let side = self.side();
        Some(
            coords
                .iter()
                .fold(0usize, |acc, &c| acc * side + (c + self.half) as usize),
        )
    }

    pub fn coords(&self, mut index: usize) -> Vec<i64> {
        let side = self.side();
        let mut out = vec![0i64; self.d];
        for i in (0..self.d).rev() {
            out[i] = (index % side) as i64 - self.half;
            index /= side;
        }
        out
    }

    pub fn real(&self, index: usize) -> Vec<f64> {
        self.coords(index)
            .into_iter()
            .map(|c| c as f64 / self.scale as f64)
            .collect()
    }

    /// Stride of `axis` in the row-major layout.
    fn stride(&self, axis: usize) -> usize {
        self.side().pow((self.d - 1 - axis) as u32)
    }

    /// Site measure `n^{-d}`.
    pub fn site_measure(&self) -> f64 {
        (self.scale as f64).powi(-(self.d as i32))
    }
}

#[derive(Debug, Clone)]
enum Storage {
    /// `L = Σ_i I⊗…⊗A⊗…⊗I` with one symmetric dense axis block `A`.
    Separable { side: usize, block: Vec<f64> },
    /// Off-diagonal rates in CSR form plus the diagonal.
    Csr {
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        vals: Vec<f64>,
        diag: Vec<f64>,
    },
}

/// Immutable generator of a chain on a window.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    pub window: Window,
    pub mode: BoundaryMode,
    pub convention: RateConvention,
    pub lambda: Option<f64>,
    pub alpha: f64,
    storage: Storage,
    /// Detailed-balance weights `w` with `w_x·L(x,y) = w_y·L(y,x)`.
    weights: Vec<f64>,
    /// Uniformization rate: max exit rate (per axis block when separable).
    unif_rate: f64,
}

/// Parameters for [`build_generator`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorParams {
    /// `ρ` for unit_rate, `n` for form_rate.
    pub scale: u32,
    pub lambda: Option<f64>,
    /// Real half-width of the window.
    pub radius: f64,
    pub mode: BoundaryMode,
    pub convention: RateConvention,
    pub budget: usize,
}

impl GeneratorParams {
    pub fn new(scale: u32, radius: f64, mode: BoundaryMode, convention: RateConvention) -> Self {
        GeneratorParams {
            scale,
            lambda: None,
            radius,
            mode,
            convention,
            budget: DEFAULT_BUDGET,
        }
    }

    pub fn truncated(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }
}

/// Rate model shared by both storages: `rate = prefactor(x)·c(x,y)·k^{-s}`.
struct RateModel<'a> {
    spec: &'a ModelSpec,
    scale: u32,
    convention: RateConvention,
    max_steps: Option<u64>,
}

impl RateModel<'_> {
    /// Symbol coordinates and scale: `V` evaluates `c` at `ρx`, i.e. the raw
    /// integer coordinates on the base lattice.
    fn symbol_scale(&self) -> u32 {
        match self.convention {
            RateConvention::UnitRate => 1,
            RateConvention::FormRate => self.scale,
        }
    }

    fn prefactor(&self, coords: &[i64]) -> f64 {
        let a = (self.scale as f64).powf(self.spec.alpha);
        match self.convention {
            RateConvention::UnitRate => {
                a / total_conductance(&LatticeSite::new(coords.to_vec(), 1), self.spec, DEFAULT_TAIL_TOL)
            }
            RateConvention::FormRate => 2.0 * a,
        }
    }

    /// Total exit rate of the chain on the whole lattice from `coords`.
    fn full_exit_rate(&self, coords: &[i64], prefactor: f64) -> f64 {
        let s = self.spec.exponent();
        match self.max_steps {
            None => match self.convention {
                RateConvention::UnitRate => (self.scale as f64).powf(self.spec.alpha),
                RateConvention::FormRate => {
                    let g = total_conductance(
                        &LatticeSite::new(coords.to_vec(), self.scale),
                        self.spec,
                        DEFAULT_TAIL_TOL,
                    );
                    prefactor * g / (self.scale as f64).powf(s)
                }
            },
            Some(m) => {
                let mut y = coords.to_vec();
                let mut acc = 0.0;
                for axis in 0..self.spec.d {
                    for k in 1..=m as i64 {
                        for dir in [-1, 1] {
                            y[axis] = coords[axis] + dir * k;
                            acc += self.spec.symbol.value(coords, &y, self.symbol_scale())
                                * (k as f64).powf(-s);
                        }
                    }
                    y[axis] = coords[axis];
                }
                prefactor * acc
            }
        }
    }
}

/// Assembles the generator of the chain on `params.radius`-box.
pub fn build_generator(spec: &ModelSpec, params: &GeneratorParams) -> Result<GeneratorMatrix> {
    if params.scale == 0 {
        return Err(Error::InvalidArgument("scale must be a positive integer".into()));
    }
    let window = Window::from_radius(spec.d, params.scale, params.radius);
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let max_steps = match params.lambda {
        None => None,
        Some(l) if !(l > 0.0) => {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {l}")))
        }
        Some(l) if l.is_infinite() => None,
        Some(l) => {
            let m = (l * params.scale as f64 * (1.0 + 1e-12)).floor() as u64;
            if m == 0 {
                return Err(Error::InvalidArgument(format!(
                    "lambda = {l} is below the grid spacing 1/{}; no jumps possible",
                    params.scale
                )));
            }
            Some(m)
        }
    };
    let model = RateModel {
        spec,
        scale: params.scale,
        convention: params.convention,
        max_steps,
    };
    let side = window.side();
    let s = spec.exponent();
    let lambda = params.lambda.filter(|l| l.is_finite());

    if spec.symbol.is_constant() {
        if side * side > params.budget {
            return Err(Error::WindowTooLarge {
                sites: window.len(),
                nonzeros: side * side,
                budget: params.budget,
            });
        }
        let origin = vec![0i64; spec.d];
        let pre = model.prefactor(&origin);
        let c0 = spec.symbol.value(&origin, &origin, 1);
        let mut block = vec![0.0; side * side];
        for a in 0..side {
            let mut row_sum = 0.0;
            for b in 0..side {
                let k = a.abs_diff(b) as u64;
                if k == 0 || max_steps.is_some_and(|m| k > m) {
                    continue;
                }
                let r = pre * c0 * (k as f64).powf(-s);
                block[a * side + b] = r;
                row_sum += r;
            }
            block[a * side + a] = match params.mode {
                BoundaryMode::Restricted => -row_sum,
                BoundaryMode::Killed => -model.full_exit_rate(&origin, pre) / spec.d as f64,
            };
        }
        let unif_rate = (0..side)
            .map(|a| -block[a * side + a])
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        return Ok(GeneratorMatrix {
            window,
            mode: params.mode,
            convention: params.convention,
            lambda,
            alpha: spec.alpha,
            storage: Storage::Separable { side, block },
            weights: vec![1.0; window.len()],
            unif_rate,
        });
    }

    let n_sites = window.len();
    let per_row = spec.d * match max_steps {
        Some(m) => (2 * m as usize).min(side - 1),
        None => side - 1,
    };
    let nnz = n_sites.saturating_mul(per_row);
    if nnz > params.budget {
        return Err(Error::WindowTooLarge {
            sites: n_sites,
            nonzeros: nnz,
            budget: params.budget,
        });
    }
    let mut row_ptr = Vec::with_capacity(n_sites + 1);
    let mut cols = Vec::with_capacity(nnz);
    let mut vals = Vec::with_capacity(nnz);
    let mut diag = Vec::with_capacity(n_sites);
    let mut weights = Vec::with_capacity(n_sites);
    let sym_scale = model.symbol_scale();
    row_ptr.push(0);
    let mut y = vec![0i64; spec.d];
    for idx in 0..n_sites {
        let x = window.coords(idx);
        let pre = model.prefactor(&x);
        let mut row_sum = 0.0;
        y.copy_from_slice(&x);
        for axis in 0..spec.d {
            let stride = window.stride(axis) as i64;
            for other in -window.half..=window.half {
                let k = (other - x[axis]).unsigned_abs();
                if k == 0 || max_steps.is_some_and(|m| k > m) {
                    continue;
                }
                y[axis] = other;
                let r = pre * spec.symbol.value(&x, &y, sym_scale) * (k as f64).powf(-s);
                let j = idx as i64 + (other - x[axis]) * stride;
                cols.push(j as u32);
                vals.push(r);
                row_sum += r;
            }
            y[axis] = x[axis];
        }
        row_ptr.push(cols.len());
        diag.push(match params.mode {
            BoundaryMode::Restricted => -row_sum,
            BoundaryMode::Killed => -model.full_exit_rate(&x, pre),
        });
        weights.push(1.0 / pre);
    }
    let unif_rate = diag.iter().map(|v| -v).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    Ok(GeneratorMatrix {
        window,
        mode: params.mode,
        convention: params.convention,
        lambda,
        alpha: spec.alpha,
        storage: Storage::Csr {
            row_ptr,
            cols,
            vals,
            diag,
        },
        weights,
        unif_rate,
    })
}

impl GeneratorMatrix {
    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn scale(&self) -> u32 {
        self.window.scale
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.storage, Storage::Separable { .. })
    }

    /// Detailed-balance weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Entry `L(x, y)` by site index.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.storage {
            Storage::Separable { side, block } => {
                let (xi, xj) = (self.window.coords(i), self.window.coords(j));
                let differing: Vec<usize> = (0..self.window.d).filter(|&a| xi[a] != xj[a]).collect();
                let at = |a: i64, b: i64| {
                    block[(a + self.window.half) as usize * side + (b + self.window.half) as usize]
                };
                match differing.as_slice() {
                    [] => xi.iter().map(|&a| at(a, a)).sum(),
                    [axis] => at(xi[*axis], xj[*axis]),
                    _ => 0.0,
                }
            }
            Storage::Csr {
                row_ptr,
                cols,
                vals,
                diag,
            } => {
                if i == j {
                    return diag[i];
                }
                (row_ptr[i]..row_ptr[i + 1])
                    .find(|&p| cols[p] as usize == j)
                    .map_or(0.0, |p| vals[p])
            }
        }
    }

    /// Off-diagonal entries of row `i` as `(j, rate)`.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.storage {
            Storage::Separable { side, block } => {
                let x = self.window.coords(i);
                let mut out = Vec::new();
                for axis in 0..self.window.d {
                    let stride = self.window.stride(axis) as i64;
                    let a = (x[axis] + self.window.half) as usize;
                    for b in 0..*side {
                        if b != a && block[a * side + b] != 0.0 {
                            out.push(((i as i64 + (b as i64 - a as i64) * stride) as usize, block[a * side + b]));
                        }
                    }
                }
                out
            }
            Storage::Csr {
                row_ptr, cols, vals, ..
            } => (row_ptr[i]..row_ptr[i + 1])
                .map(|p| (cols[p] as usize, vals[p]))
                .collect(),
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.entry(i, i) + self.row(i).iter().map(|(_, r)| r).sum::<f64>()
    }

    /// `out = L·v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        match &self.storage {
            Storage::Separable { side, block } => {
                out.fill(0.0);
                let mut line = vec![0.0; *side];
                for axis in 0..self.window.d {
                    let stride = self.window.stride(axis);
                    for_each_line(self.window.len(), *side, stride, |base| {
                        for (a, l) in line.iter_mut().enumerate() {
                            *l = v[base + a * stride];
                        }
                        for a in 0..*side {
                            let row = &block[a * side..(a + 1) * side];
                            out[base + a * stride] += dot(row, &line);
                        }
                    });
                }
            }
            Storage::Csr {
                row_ptr,
                cols,
                vals,
                diag,
            } => {
                for i in 0..diag.len() {
                    let mut acc = diag[i] * v[i];
                    for p in row_ptr[i]..row_ptr[i + 1] {
                        acc += vals[p] * v[cols[p] as usize];
                    }
                    out[i] = acc;
                }
            }
        }
    }

    /// `out = vᵀ·L` (row vector times generator).
    pub fn apply_left(&self, v: &[f64], out: &mut [f64]) {
        match &self.storage {
            // the axis block is symmetric
            Storage::Separable { .. } => self.apply(v, out),
            Storage::Csr {
                row_ptr,
                cols,
                vals,
                diag,
            } => {
                for i in 0..diag.len() {
                    out[i] = diag[i] * v[i];
                }
                for i in 0..diag.len() {
                    let vi = v[i];
                    if vi == 0.0 {
                        continue;
                    }
                    for p in row_ptr[i]..row_ptr[i + 1] {
                        out[cols[p] as usize] += vals[p] * vi;
                    }
                }
            }
        }
    }

    /// Largest exit rate of the full generator.
    pub fn full_uniformization_rate(&self) -> f64 {
        match self.storage {
            Storage::Separable { .. } => self.unif_rate * self.window.d as f64,
            Storage::Csr { .. } => self.unif_rate,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Calls `f(base)` for the first index of every line along an axis with `stride`.
fn for_each_line(len: usize, side: usize, stride: usize, mut f: impl FnMut(usize)) {
    let block = side * stride;
    for outer in (0..len).step_by(block) {
        for inner in 0..stride {
            f(outer + inner);
        }
    }
}

/// Successive powers `v_k = v_0 (I + L/Λ)^k` of the uniformized jump matrix,
/// applied from the left (`left = true`) or the right.
struct PowerSequence<'a> {
    generator: &'a GeneratorMatrix,
    current: Vec<f64>,
    scratch: Vec<f64>,
    rate: f64,
    left: bool,
}

impl<'a> PowerSequence<'a> {
    fn new(generator: &'a GeneratorMatrix, start: Vec<f64>, left: bool) -> Self {
        let n = start.len();
        PowerSequence {
            generator,
            current: start,
            scratch: vec![0.0; n],
            rate: generator.full_uniformization_rate(),
            left,
        }
    }

    fn advance(&mut self) {
        if self.left {
            self.generator.apply_left(&self.current, &mut self.scratch);
        } else {
            self.generator.apply(&self.current, &mut self.scratch);
        }
        let inv = 1.0 / self.rate;
        for (c, s) in self.current.iter_mut().zip(&self.scratch) {
            *c += s * inv;
        }
    }
}

/// Uniformization of a 1-D dense symmetric block: `row(t) = e_a·exp(tA)` at
/// several times.
fn block_rows(block: &[f64], side: usize, rate: f64, start: usize, times: &[f64]) -> Vec<Vec<f64>> {
    let weights: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| poisson_weights(rate * t, UNIFORMIZATION_TOL))
        .collect();
    let k_max = weights.iter().map(Vec::len).max().unwrap_or(1);
    let mut out = vec![vec![0.0; side]; times.len()];
    let mut v = vec![0.0; side];
    v[start] = 1.0;
    let mut next = vec![0.0; side];
    for k in 0..k_max {
        for (acc, w) in out.iter_mut().zip(&weights) {
            if let Some(&wk) = w.get(k) {
                if wk > 0.0 {
                    for (a, x) in acc.iter_mut().zip(&v) {
                        *a += wk * x;
                    }
                }
            }
        }
        if k + 1 == k_max {
            break;
        }
        for a in 0..side {
            next[a] = v[a] + dot(&block[a * side..(a + 1) * side], &v) / rate;
        }
        std::mem::swap(&mut v, &mut next);
    }
    out
}

/// Transition density at one time on the window.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub t: f64,
    pub source: LatticeSite,
    pub window: Window,
    /// Density with respect to the site measure `n^{-d}`.
    pub values: Vec<f64>,
    pub mode: BoundaryMode,
    pub convention: RateConvention,
}

impl DensityGrid {
    pub fn at(&self, coords: &[i64]) -> Option<f64> {
        self.window.index(coords).map(|i| self.values[i])
    }

    /// `Σ values·μ`; 1 for restricted windows, the survival mass when killed.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.window.site_measure()
    }

    pub fn write_tsv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "# t={} rho={} mode={} convention={}",
            self.t, self.window.scale, self.mode, self.convention
        )?;
        write_grid_rows(out, &self.window, &self.values)
    }
}

fn write_grid_rows<W: Write>(out: &mut W, window: &Window, values: &[f64]) -> Result<()> {
    for i in 1..=window.d {
        write!(out, "coord_{i}\t")?;
    }
    writeln!(out, "value")?;
    for (idx, v) in values.iter().enumerate() {
        for c in window.real(idx) {
            write!(out, "{c}\t")?;
        }
        writeln!(out, "{v:e}")?;
    }
    Ok(())
}

fn check_times(times: &[f64]) -> Result<()> {
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!("time must be finite and nonnegative, got {t}")));
    }
    Ok(())
}

fn source_index(g: &GeneratorMatrix, x0: &LatticeSite) -> Result<usize> {
    if x0.scale != g.scale() {
        return Err(Error::IncompatibleGrids(x0.scale, g.scale()));
    }
    g.window
        .index(&x0.coords)
        .ok_or_else(|| Error::InvalidArgument(format!("source {x0} lies outside the window")))
}

/// Rows of `exp(tL)` from `x0` at several times, as densities.
pub fn heat_kernels(g: &GeneratorMatrix, times: &[f64], x0: &LatticeSite) -> Result<Vec<DensityGrid>> {
    check_times(times)?;
    let src = source_index(g, x0)?;
    let mu = g.window.site_measure();
    let rows: Vec<Vec<f64>> = match &g.storage {
        Storage::Separable { side, block } => {
            let axis_rows: Vec<Vec<Vec<f64>>> = x0
                .coords
                .iter()
                .map(|&c| block_rows(block, *side, g.unif_rate, (c + g.window.half) as usize, times))
                .collect();
            (0..times.len())
                .map(|ti| {
                    (0..g.len())
                        .map(|idx| {
                            let mut rem = idx;
                            let mut p = 1.0;
                            for axis in (0..g.window.d).rev() {
                                p *= axis_rows[axis][ti][rem % side];
                                rem /= side;
                            }
                            p
                        })
                        .collect()
                })
                .collect()
        }
        Storage::Csr { .. } => {
            let mut start = vec![0.0; g.len()];
            start[src] = 1.0;
            uniformize(g, start, true, times)
        }
    };
    Ok(rows
        .into_iter()
        .zip(times)
        .map(|(row, &t)| DensityGrid {
            t,
            source: x0.clone(),
            window: g.window,
            values: row.into_iter().map(|p| p.max(0.0) / mu).collect(),
            mode: g.mode,
            convention: g.convention,
        })
        .collect())
}

/// Row of `exp(tL)` from `x0`, as a density.
pub fn heat_kernel(g: &GeneratorMatrix, t: f64, x0: &LatticeSite) -> Result<DensityGrid> {
    Ok(heat_kernels(g, &[t], x0)?.remove(0))
}

/// `Σ_k w_k(t)·v_k` for every `t` simultaneously.
fn uniformize(g: &GeneratorMatrix, start: Vec<f64>, left: bool, times: &[f64]) -> Vec<Vec<f64>> {
    let weights: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| poisson_weights(g.full_uniformization_rate() * t, UNIFORMIZATION_TOL))
        .collect();
    let k_max = weights.iter().map(Vec::len).max().unwrap_or(1);
    let n = start.len();
    let mut out = vec![vec![0.0; n]; times.len()];
    let mut seq = PowerSequence::new(g, start, left);
    for k in 0..k_max {
        for (acc, w) in out.iter_mut().zip(&weights) {
            if let Some(&wk) = w.get(k) {
                if wk > 0.0 {
                    for (a, x) in acc.iter_mut().zip(&seq.current) {
                        *a += wk * x;
                    }
                }
            }
        }
        if k + 1 < k_max {
            seq.advance();
        }
    }
    out
}

/// Densities `p(t, x0, y)` for targets `y` only. Cheap for separable
/// generators in any dimension.
pub fn heat_kernel_at(
    g: &GeneratorMatrix,
    times: &[f64],
    x0: &LatticeSite,
    targets: &[Vec<i64>],
) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    source_index(g, x0)?;
    let mut target_idx = Vec::with_capacity(targets.len());
    for y in targets {
        target_idx.push(g.window.index(y).ok_or_else(|| {
            Error::InvalidArgument(format!("target {y:?} lies outside the window"))
        })?);
    }
    let mu = g.window.site_measure();
    match &g.storage {
        Storage::Separable { side, block } => {
            let mut cache: HashMap<i64, Vec<Vec<f64>>> = HashMap::new();
            for &c in &x0.coords {
                cache
                    .entry(c)
                    .or_insert_with(|| block_rows(block, *side, g.unif_rate, (c + g.window.half) as usize, times));
            }
            Ok((0..times.len())
                .map(|ti| {
                    targets
                        .iter()
                        .map(|y| {
                            let p: f64 = x0
                                .coords
                                .iter()
                                .zip(y)
                                .map(|(&a, &b)| cache[&a][ti][(b + g.window.half) as usize])
                                .product();
                            p.max(0.0) / mu
                        })
                        .collect()
                })
                .collect())
        }
        Storage::Csr { .. } => {
            let grids = heat_kernels(g, times, x0)?;
            Ok(grids
                .iter()
                .map(|grid| target_idx.iter().map(|&i| grid.values[i]).collect())
                .collect())
        }
    }
}

/// `(P_t f)(x) = Σ_y P_t(x, y) f(y)` on the whole window.
pub fn semigroup_apply(g: &GeneratorMatrix, t: f64, f: &[f64]) -> Result<Vec<f64>> {
    check_times(&[t])?;
    if f.len() != g.len() {
        return Err(Error::InvalidArgument("function length does not match window".into()));
    }
    Ok(uniformize(g, f.to_vec(), false, &[t]).remove(0))
}

/// Cache of 1-D uniformized rows for a separable generator at fixed times.
pub struct AxisRowCache<'a> {
    g: &'a GeneratorMatrix,
    times: Vec<f64>,
    rows: HashMap<i64, Vec<Vec<f64>>>,
}

impl<'a> AxisRowCache<'a> {
    pub fn new(g: &'a GeneratorMatrix, times: &[f64]) -> Result<Self> {
        check_times(times)?;
        if !g.is_separable() {
            return Err(Error::InvalidArgument("axis rows need a separable generator".into()));
        }
        Ok(AxisRowCache {
            g,
            times: times.to_vec(),
            rows: HashMap::new(),
        })
    }

    /// `P_{t_i}(a, ·)` of the axis block as probabilities (not densities).
    pub fn row(&mut self, time_index: usize, coord: i64) -> &[f64] {
        let g = self.g;
        let times = &self.times;
        let rows = self.rows.entry(coord).or_insert_with(|| match &g.storage {
            Storage::Separable { side, block } => {
                block_rows(block, *side, g.unif_rate, (coord + g.window.half) as usize, times)
            }
            Storage::Csr { .. } => unreachable!(),
        });
        &rows[time_index]
    }
}

/// `(P_t f)(x)` at probe sites, with `f` given on the window.
pub fn semigroup_at(g: &GeneratorMatrix, t: f64, f: &[f64], probes: &[Vec<i64>]) -> Result<Vec<f64>> {
    if f.len() != g.len() {
        return Err(Error::InvalidArgument("function length does not match window".into()));
    }
    let mut idx = Vec::with_capacity(probes.len());
    for p in probes {
        idx.push(g.window.index(p).ok_or_else(|| {
            Error::InvalidArgument(format!("probe {p:?} lies outside the window"))
        })?);
    }
    if !g.is_separable() {
        let full = semigroup_apply(g, t, f)?;
        return Ok(idx.iter().map(|&i| full[i]).collect());
    }
    let mut cache = AxisRowCache::new(g, &[t])?;
    let side = g.window.side();
    let d = g.window.d;
    let support: Vec<usize> = (0..f.len()).filter(|&i| f[i] != 0.0).collect();
    let mut out = Vec::with_capacity(probes.len());
    for p in probes {
        let rows: Vec<Vec<f64>> = p.iter().map(|&c| cache.row(0, c).to_vec()).collect();
        let mut acc = 0.0;
        for &i in &support {
            let mut rem = i;
            let mut w = 1.0;
            for axis in (0..d).rev() {
                w *= rows[axis][rem % side];
                rem /= side;
            }
            acc += w * f[i];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Result of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `(shift - L) u = f` by preconditioned CG on the symmetrized system
/// `W(shift - L) u = W f`.
fn solve_shifted(g: &GeneratorMatrix, shift: f64, f: &[f64], tol: f64) -> Result<(Vec<f64>, SolveReport)> {
    let n = g.len();
    if f.len() != n {
        return Err(Error::InvalidArgument("function length does not match window".into()));
    }
    let w = &g.weights;
    let diag: Vec<f64> = (0..n).map(|i| w[i] * (shift - g.entry_diag(i))).collect();
    let mut lu = vec![0.0; n];
    let op = |u: &[f64], out: &mut [f64], lu: &mut Vec<f64>| {
        g.apply(u, lu);
        for i in 0..n {
            out[i] = w[i] * (shift * u[i] - lu[i]);
        }
    };
    let b: Vec<f64> = (0..n).map(|i| w[i] * f[i]).collect();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((
            u,
            SolveReport {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let max_iter = 20 * n + 1000;
    for it in 1..=max_iter {
        op(&p, &mut ap, &mut lu);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = dot(&r, &r).sqrt() / b_norm;
        if res <= tol * 0.1 || it == max_iter {
            // confirm with a true residual
            op(&u, &mut ap, &mut lu);
            let true_res = ap
                .iter()
                .zip(&b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                / b_norm;
            if true_res <= tol {
                return Ok((
                    u,
                    SolveReport {
                        iterations: it,
                        relative_residual: true_res,
                    },
                ));
            }
            if it == max_iter {
                return Err(Error::SolverDiverged {
                    iterations: it,
                    residual: true_res,
                });
            }
            r = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    unreachable!()
}

impl GeneratorMatrix {
    fn entry_diag(&self, i: usize) -> f64 {
        match &self.storage {
            Storage::Csr { diag, .. } => diag[i],
            Storage::Separable { .. } => self.entry(i, i),
        }
    }
}

/// Real values on the sites of a window, with measure weight `n^{-d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub window: Window,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(window: Window, values: Vec<f64>) -> Result<Self> {
        if values.len() != window.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a window of {} sites",
                values.len(),
                window.len()
            )));
        }
        Ok(GridFunction { window, values })
    }

    pub fn from_fn(window: Window, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..window.len()).map(|i| f(&window.real(i))).collect();
        GridFunction { window, values }
    }

    pub fn scale(&self) -> u32 {
        self.window.scale
    }

    pub fn at(&self, coords: &[i64]) -> Option<f64> {
        self.window.index(coords).map(|i| self.values[i])
    }

    /// `(f, g)_n = Σ f g n^{-d}`.
    pub fn inner(&self, other: &GridFunction) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            * self.window.site_measure()
    }

    pub fn norm2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn write_tsv<W: Write>(&self, out: &mut W, header: &str) -> Result<()> {
        writeln!(out, "# {header}")?;
        write_grid_rows(out, &self.window, &self.values)
    }
}

/// `u = (λ - L)⁻¹ f` to relative residual 1e-10 (in the symmetrized norm).
pub fn resolvent(g: &GeneratorMatrix, lambda: f64, f: &GridFunction) -> Result<(GridFunction, SolveReport)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if f.window != g.window {
        return Err(Error::InvalidArgument("grid function and generator windows differ".into()));
    }
    let (u, report) = solve_shifted(g, lambda, &f.values, 1e-10)?;
    Ok((GridFunction::new(g.window, u)?, report))
}

/// `E^x τ` for the exit time of the window, from every site; needs a killed
/// generator.
pub fn expected_exit_times(g: &GeneratorMatrix) -> Result<GridFunction> {
    if g.mode != BoundaryMode::Killed {
        return Err(Error::InvalidArgument("exit times need a killed generator".into()));
    }
    let (u, _) = solve_shifted(g, 0.0, &vec![1.0; g.len()], 1e-12)?;
    GridFunction::new(g.window, u)
}

/// `P^{x0}(τ_window > t)` for a killed generator, for any `t`, from stored
/// uniformized masses.
pub struct SurvivalCurve<'a> {
    seq: PowerSequence<'a>,
    masses: Vec<f64>,
}

impl<'a> SurvivalCurve<'a> {
    pub fn new(g: &'a GeneratorMatrix, x0: &LatticeSite) -> Result<Self> {
        if g.mode != BoundaryMode::Killed {
            return Err(Error::InvalidArgument("survival needs a killed generator".into()));
        }
        let src = source_index(g, x0)?;
        let mut start = vec![0.0; g.len()];
        start[src] = 1.0;
        Ok(SurvivalCurve {
            masses: vec![1.0],
            seq: PowerSequence::new(g, start, true),
        })
    }

    pub fn survival(&mut self, t: f64) -> f64 {
        let w = poisson_weights(self.seq.rate * t, UNIFORMIZATION_TOL);
        while self.masses.len() < w.len() {
            self.seq.advance();
            self.masses.push(self.seq.current.iter().sum());
        }
        w.iter().zip(&self.masses).map(|(w, m)| w * m).sum::<f64>().clamp(0.0, 1.0)
    }

    /// Smallest `t` with survival ≤ `1 - p` (the `p`-quantile of the exit time).
    pub fn quantile(&mut self, p: f64, t_hint: f64) -> f64 {
        let target = 1.0 - p;
        let mut hi = t_hint.max(1e-6);
        while self.survival(hi) > target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.survival(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Expected occupation `∫₀^T P^{x0}(X_u = y) du` of every site (killed or not).
pub fn occupation_row(g: &GeneratorMatrix, x0: &LatticeSite, horizon: f64) -> Result<Vec<f64>> {
    check_times(&[horizon])?;
    let src = source_index(g, x0)?;
    let rate = g.full_uniformization_rate();
    let weights = poisson_weights(rate * horizon, UNIFORMIZATION_TOL);
    // ∫₀^T Poisson_k(Λu) du = P(N_{ΛT} ≥ k+1)/Λ
    let mut tail = 1.0 - weights[0];
    let mut start = vec![0.0; g.len()];
    start[src] = 1.0;
    let mut seq = PowerSequence::new(g, start, true);
    let mut out = vec![0.0; g.len()];
    let mut k = 0usize;
    while tail > UNIFORMIZATION_TOL * 1e-2 || k < weights.len() {
        let c = tail.max(0.0) / rate;
        for (o, v) in out.iter_mut().zip(&seq.current) {
            *o += c * v;
        }
        k += 1;
        tail -= weights.get(k).copied().unwrap_or(0.0);
        if k >= weights.len() {
            break;
        }
        seq.advance();
    }
    Ok(out)
}

/// Upper bound `A` on the rate of jumps longer than `r`: `A·r^{-α}`.
pub fn tail_rate_bound(spec: &ModelSpec, convention: RateConvention) -> f64 {
    match convention {
        RateConvention::UnitRate => crate::kernel_model::unit_rate_tail_coefficient(spec),
        RateConvention::FormRate => crate::kernel_model::form_rate_tail_coefficient(spec),
    }
}

/// Window radius `M` (real units) such that the mass escaping the box by time
/// `t` is at most `tol`, by a union bound. Untruncated: the rate of a jump
/// longer than `M/2` is at most `A (M/2)^{-α}`; the box is also kept at least
/// four typical displacements `t^{1/α}` wide. Truncated: exponential
/// Chernoff bound at `θ = 1/λ` per axis and sign.
pub fn window_size_heuristic(
    spec: &ModelSpec,
    convention: RateConvention,
    t: f64,
    lambda: Option<f64>,
    tol: f64,
) -> f64 {
    let alpha = spec.alpha;
    let a = tail_rate_bound(spec, convention);
    let spread = 4.0 * t.max(0.0).powf(1.0 / alpha);
    match lambda.filter(|l| l.is_finite()) {
        None => (2.0 * (t * a / tol).powf(1.0 / alpha)).max(spread),
        Some(l) => {
            // small-jump second moment ∫_{|z|≤λ} z² ν(dz) ≤ a·α λ^{2-α}/(2-α)
            let m2 = a * alpha * l.powf(2.0 - alpha) / (2.0 - alpha);
            let cosh_gain = (1f64.cosh() - 1.0) * m2 / (l * l);
            let chernoff = l * ((2.0 * spec.d as f64 / tol).ln() + t * cosh_gain);
            chernoff.max(spread.min(chernoff)).max(l)
        }
    }
}

/// Rate of jumps longer than `r` of the unit-rate chain at scale `rho` for a
/// constant symbol (exact).
pub fn constant_tail_rate(spec: &ModelSpec, rho: u32, r: f64) -> f64 {
    let s = spec.exponent();
    let k = (r * rho as f64 * (1.0 + 1e-12)).floor() as u64;
    (rho as f64).powf(spec.alpha) * zeta_tail(s, k + 1) / zeta(s)
}
