//! Path samplers for the embedded chain, the unit-rate chain `Y`, the rescaled
//! chain `V_t = ρ⁻¹ Y_{ρ^α t}`, its truncation `V^λ`, and the form-normalized
//! chain on `S_n`.

use rand::Rng;
use rand_distr::Exp1;
use std::io::Write;

use crate::error::{Error, Result};
use crate::kernel_model::{AxisJump, JumpSampler, LatticeSite, ModelSpec};
use crate::numerics::zeta;

/// Event-sparse trajectory: only jump events are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticePath {
    pub start: LatticeSite,
    pub horizon: f64,
    times: Vec<f64>,
    coords: Vec<i64>,
}

impl LatticePath {
    fn new(start: LatticeSite, horizon: f64) -> Self {
        LatticePath {
            start,
            horizon,
            times: Vec::new(),
            coords: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, coords: &[i64]) {
        self.times.push(t);
        self.coords.extend_from_slice(coords);
    }

    pub fn dim(&self) -> usize {
        self.start.dim()
    }

    pub fn scale(&self) -> u32 {
        self.start.scale
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn event_coords(&self, i: usize) -> &[i64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn event(&self, i: usize) -> (f64, LatticeSite) {
        (
            self.times[i],
            LatticeSite::new(self.event_coords(i).to_vec(), self.scale()),
        )
    }

    pub fn events(&self) -> impl Iterator<Item = (f64, LatticeSite)> + '_ {
        (0..self.len()).map(|i| self.event(i))
    }

    /// Integer coordinates of the state at time `t` (right-continuous).
    pub fn coords_at(&self, t: f64) -> &[i64] {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            &self.start.coords
        } else {
            self.event_coords(k - 1)
        }
    }

    pub fn site_at(&self, t: f64) -> LatticeSite {
        LatticeSite::new(self.coords_at(t).to_vec(), self.scale())
    }

    /// Largest jump length in real units.
    pub fn max_jump(&self) -> f64 {
        let mut prev = self.start.coords.as_slice();
        let mut best = 0u64;
        for i in 0..self.len() {
            let cur = self.event_coords(i);
            let step = prev
                .iter()
                .zip(cur)
                .map(|(a, b)| b.abs_diff(*a))
                .max()
                .unwrap_or(0);
            best = best.max(step);
            prev = cur;
        }
        best as f64 / self.scale() as f64
    }
}

/// How the holding clock and the jump law are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Clock {
    /// Holding rate `rate`, jumps from `C(x, ·)/G_x`.
    Embedded { rate: f64 },
    /// Proposals at rate `rate`, each kept with probability `c/c_max`:
    /// jump rates proportional to `C(x, y)` itself.
    Thinned { rate: f64 },
}

/// Streaming sampler; yields one jump at a time without storing the path.
#[derive(Debug)]
pub struct Walker<'a> {
    spec: &'a ModelSpec,
    sampler: &'a JumpSampler,
    clock: Clock,
    symbol_scale: u32,
    max_steps: Option<u64>,
    pub coords: Vec<i64>,
    pub t: f64,
    scratch: Vec<i64>,
}

impl<'a> Walker<'a> {
    /// Unit-rate chain `Y` in base lattice coordinates.
    pub fn unit_rate(spec: &'a ModelSpec, sampler: &'a JumpSampler, start: &[i64]) -> Self {
        Self::with_clock(spec, sampler, start, Clock::Embedded { rate: 1.0 }, 1)
    }

    /// `V` (or `V^λ` when `lambda` is finite) at integer scale `rho`:
    /// coordinates are those of `Y`, time runs `ρ^α` times faster.
    pub fn rescaled(
        spec: &'a ModelSpec,
        sampler: &'a JumpSampler,
        rho: u32,
        lambda: f64,
        start: &[i64],
    ) -> Self {
        let rate = (rho as f64).powf(spec.alpha);
        let mut w = Self::with_clock(spec, sampler, start, Clock::Embedded { rate }, 1);
        w.max_steps = truncation_steps(lambda, rho);
        w
    }

    /// Form-normalized chain on `S_n`: rate `2 n^α c(x, y) k^{-s}` to the
    /// site `k` steps away.
    pub fn form_rate(spec: &'a ModelSpec, sampler: &'a JumpSampler, n: u32, start: &[i64]) -> Self {
        let rate = 2.0
            * (n as f64).powf(spec.alpha)
            * sampler.c_max()
            * 2.0
            * spec.d as f64
            * zeta(spec.exponent());
        Self::with_clock(spec, sampler, start, Clock::Thinned { rate }, n)
    }

    fn with_clock(
        spec: &'a ModelSpec,
        sampler: &'a JumpSampler,
        start: &[i64],
        clock: Clock,
        symbol_scale: u32,
    ) -> Self {
        Walker {
            spec,
            sampler,
            clock,
            symbol_scale,
            max_steps: None,
            coords: start.to_vec(),
            t: 0.0,
            scratch: Vec::with_capacity(start.len()),
        }
    }

    /// Advance to the next realized jump before `horizon`. Returns `None`
    /// (leaving `t = horizon`) if the clock passes the horizon first.
    pub fn next_jump<R: Rng + ?Sized>(&mut self, horizon: f64, rng: &mut R) -> Option<AxisJump> {
        let rate = match self.clock {
            Clock::Embedded { rate } | Clock::Thinned { rate } => rate,
        };
        loop {
            let e: f64 = rng.sample(Exp1);
            let t_next = self.t + e / rate;
            if !(t_next <= horizon) {
                self.t = horizon;
                return None;
            }
            self.t = t_next;
            let jump = match self.clock {
                Clock::Embedded { .. } => Some(self.sampler.sample(
                    self.spec,
                    &self.coords,
                    self.symbol_scale,
                    rng,
                    &mut self.scratch,
                )),
                Clock::Thinned { .. } => self.sampler.propose(
                    self.spec,
                    &self.coords,
                    self.symbol_scale,
                    rng,
                    &mut self.scratch,
                ),
            };
            let Some(jump) = jump else { continue };
            if let Some(m) = self.max_steps {
                if jump.steps.unsigned_abs() > m {
                    continue;
                }
            }
            self.coords[jump.axis] = self.coords[jump.axis].saturating_add(jump.steps);
            return Some(jump);
        }
    }

    fn run<R: Rng + ?Sized>(mut self, start: LatticeSite, horizon: f64, rng: &mut R) -> LatticePath {
        let mut path = LatticePath::new(start, horizon);
        while self.next_jump(horizon, rng).is_some() {
            path.push(self.t, &self.coords);
        }
        path
    }
}

/// Largest admissible `|steps|` for jumps of length at most `lambda` at scale `rho`.
fn truncation_steps(lambda: f64, rho: u32) -> Option<u64> {
    if lambda.is_finite() {
        Some((lambda * rho as f64 * (1.0 + 1e-12)).floor() as u64)
    } else {
        None
    }
}

/// One step of the embedded chain from `C(x, ·)/G_x`.
pub fn step_discrete<R: Rng + ?Sized>(
    x: &LatticeSite,
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rng: &mut R,
) -> LatticeSite {
    let mut scratch = Vec::with_capacity(x.dim());
    x.shifted(sampler.sample(spec, &x.coords, 1, rng, &mut scratch))
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "horizon must be finite and nonnegative, got {horizon}"
        )));
    }
    Ok(())
}

fn check_base(x0: &LatticeSite, spec: &ModelSpec) -> Result<()> {
    if x0.dim() != spec.d {
        return Err(Error::InvalidArgument(format!(
            "start has dimension {}, model has d = {}",
            x0.dim(),
            spec.d
        )));
    }
    Ok(())
}

/// Unit-rate continuous-time chain `Y` on `ℤ^d` up to `horizon`.
pub fn sample_path_y<R: Rng + ?Sized>(
    x0: &LatticeSite,
    horizon: f64,
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rng: &mut R,
) -> Result<LatticePath> {
    check_horizon(horizon)?;
    check_base(x0, spec)?;
    if x0.scale != 1 {
        return Err(Error::IncompatibleGrids(x0.scale, 1));
    }
    Ok(Walker::unit_rate(spec, sampler, &x0.coords).run(x0.clone(), horizon, rng))
}

/// `V_t = ρ⁻¹ Y_{ρ^α t}`: samples `Y` to `ρ^α·horizon` and rescales.
pub fn sample_path_v<R: Rng + ?Sized>(
    rho: u32,
    x0: &LatticeSite,
    horizon: f64,
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rng: &mut R,
) -> Result<LatticePath> {
    sample_path_v_trunc(f64::INFINITY, rho, x0, horizon, spec, sampler, rng)
}

/// `V^λ`: jumps longer than `lambda` are suppressed (state kept, clock runs).
pub fn sample_path_v_trunc<R: Rng + ?Sized>(
    lambda: f64,
    rho: u32,
    x0: &LatticeSite,
    horizon: f64,
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rng: &mut R,
) -> Result<LatticePath> {
    check_horizon(horizon)?;
    check_base(x0, spec)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if rho == 0 || x0.scale != rho {
        return Err(Error::IncompatibleGrids(x0.scale, rho));
    }
    let time_factor = (rho as f64).powf(spec.alpha);
    let mut walker = Walker::unit_rate(spec, sampler, &x0.coords);
    walker.max_steps = truncation_steps(lambda, rho);
    let y = walker.run(LatticeSite::new(x0.coords.clone(), 1), horizon * time_factor, rng);
    let mut v = LatticePath::new(x0.clone(), horizon);
    for i in 0..y.len() {
        v.push((y.times[i] / time_factor).min(horizon), y.event_coords(i));
    }
    Ok(v)
}

/// Form-normalized chain on `S_n` (the chain whose generator is
/// `(2/n) Σ_y (f(y) - f(x)) C_n(x, y)`).
pub fn sample_path_form<R: Rng + ?Sized>(
    n: u32,
    x0: &LatticeSite,
    horizon: f64,
    spec: &ModelSpec,
    sampler: &JumpSampler,
    rng: &mut R,
) -> Result<LatticePath> {
    check_horizon(horizon)?;
    check_base(x0, spec)?;
    if x0.scale != n {
        return Err(Error::IncompatibleGrids(x0.scale, n));
    }
    Ok(Walker::form_rate(spec, sampler, n, &x0.coords).run(x0.clone(), horizon, rng))
}

/// First time the path is outside `region`; `(horizon, true)` if it never leaves.
pub fn exit_time(path: &LatticePath, region: impl Fn(&[f64]) -> bool) -> (f64, bool) {
    let scale = path.scale() as f64;
    let real = |c: &[i64]| c.iter().map(|&v| v as f64 / scale).collect::<Vec<_>>();
    if !region(&real(&path.start.coords)) {
        return (0.0, false);
    }
    for i in 0..path.len() {
        if !region(&real(path.event_coords(i))) {
            return (path.times[i], false);
        }
    }
    (path.horizon, true)
}

/// First time the path is inside `region`; `(horizon, true)` if never.
pub fn hitting_time(path: &LatticePath, region: impl Fn(&[f64]) -> bool) -> (f64, bool) {
    exit_time(path, |x| !region(x))
}

/// Norm used for balls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BallNorm {
    Max,
    Euclidean,
}

/// Closed ball `{x : |x - center| ≤ radius}`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
    pub norm: BallNorm,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64, norm: BallNorm) -> Self {
        Ball {
            center,
            radius,
            norm,
        }
    }

    pub fn distance(&self, x: &[f64]) -> f64 {
        let diffs = x.iter().zip(&self.center).map(|(a, b)| (a - b).abs());
        match self.norm {
            BallNorm::Max => diffs.fold(0.0, f64::max),
            BallNorm::Euclidean => diffs.map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance(x) <= self.radius * (1.0 + 1e-12)
    }

    /// Membership for integer coordinates at `scale`.
    pub fn contains_coords(&self, coords: &[i64], scale: u32) -> bool {
        let s = scale as f64;
        let mut acc = 0.0f64;
        for (c, z) in coords.iter().zip(&self.center) {
            let v = (*c as f64 / s - z).abs();
            acc = match self.norm {
                BallNorm::Max => acc.max(v),
                BallNorm::Euclidean => acc + v * v,
            };
        }
        let dist = match self.norm {
            BallNorm::Max => acc,
            BallNorm::Euclidean => acc.sqrt(),
        };
        dist <= self.radius * (1.0 + 1e-12)
    }
}

/// Writes `path_id  t  coord_1 .. coord_d` rows (real coordinates); the start
/// of each path is written as an event at `t = 0`.
pub fn write_paths_tsv<W: Write>(out: &mut W, paths: &[LatticePath]) -> Result<()> {
    let d = paths.first().map_or(0, |p| p.dim());
    write!(out, "path_id\tt")?;
    for i in 1..=d {
        write!(out, "\tcoord_{i}")?;
    }
    writeln!(out)?;
    for (id, p) in paths.iter().enumerate() {
        let scale = p.scale() as f64;
        let mut row = |t: f64, c: &[i64]| -> std::io::Result<()> {
            write!(out, "{id}\t{t}")?;
            for v in c {
                write!(out, "\t{}", *v as f64 / scale)?;
            }
            writeln!(out)
        };
        row(0.0, &p.start.coords)?;
        for i in 0..p.len() {
            row(p.times[i], p.event_coords(i))?;
        }
    }
    Ok(())
}
