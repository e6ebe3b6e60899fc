//! Conductance kernels supported on coordinate axes.
//!
//! A site of the grid `S_n = n⁻¹ℤ^d` is stored as integer coordinates plus the
//! scale `n`; scale 1 is the base lattice `ℤ^d`. Distances are always taken in
//! real units (`|steps| / n`), so the base lattice is the `n = 1` instance.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{hurwitz_zeta, zeta};

/// Default tail tolerance for total conductance sums.
pub const DEFAULT_TAIL_TOL: f64 = 1e-12;

/// Largest jump (in lattice steps) a sampler will realize; heavier draws are
/// clamped. The clamped event has probability at most `(4096 / 2^53)^α`.
pub const MAX_STEPS: u64 = 1 << 53;

/// Symmetric coefficient `c(x, y)` of the jump kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Symbol {
    Constant { c0: f64 },
    /// `low + (high - low)·[p(x) = 0]·[p(y) = 0]` with `p(z) = Σ⌊z_i⌋ mod 2`.
    Checkerboard { low: f64, high: f64 },
    /// `low + (high - low)(1 + sin(x₁ + y₁))/2`.
    SmoothOscillating { low: f64, high: f64 },
}

impl Symbol {
    pub fn name(&self) -> &'static str {
        match self {
            Symbol::Constant { .. } => "constant",
            Symbol::Checkerboard { .. } => "checkerboard",
            Symbol::SmoothOscillating { .. } => "smooth-oscillating",
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Symbol::Constant { .. })
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Symbol::Constant { c0 } => vec![c0],
            Symbol::Checkerboard { low, high } | Symbol::SmoothOscillating { low, high } => {
                vec![low, high]
            }
        }
    }

    /// Range of values taken by the symbol.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Symbol::Constant { c0 } => (c0, c0),
            Symbol::Checkerboard { low, high } | Symbol::SmoothOscillating { low, high } => {
                (low, high)
            }
        }
    }

    /// Evaluate at the real points `x / scale`, `y / scale`.
    pub fn value(&self, x: &[i64], y: &[i64], scale: u32) -> f64 {
        match *self {
            Symbol::Constant { c0 } => c0,
            Symbol::Checkerboard { low, high } => {
                let even = |z: &[i64]| {
                    z.iter()
                        .map(|c| c.div_euclid(scale as i64))
                        .sum::<i64>()
                        .rem_euclid(2)
                        == 0
                };
                if even(x) && even(y) {
                    high
                } else {
                    low
                }
            }
            Symbol::SmoothOscillating { low, high } => {
                let s = (x[0] as f64 + y[0] as f64) / scale as f64;
                low + (high - low) * (1.0 + s.sin()) / 2.0
            }
        }
    }

    /// Period in `k` of `k ↦ c(x, x + k e_axis)`, if periodic.
    fn axis_period(&self, axis: usize, scale: u32) -> Option<u64> {
        match self {
            Symbol::Constant { .. } => Some(1),
            Symbol::Checkerboard { .. } => Some(2 * scale as u64),
            Symbol::SmoothOscillating { .. } => (axis != 0).then_some(1),
        }
    }
}

/// Serialized form `{ name, params }`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SymbolSpec {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModelSpec {
    d: usize,
    alpha: f64,
    kappa1: f64,
    kappa2: f64,
    symbol: SymbolSpec,
}

/// Model parameters: dimension, stability index, symbol bounds and symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    pub d: usize,
    pub alpha: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub symbol: Symbol,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        let symbol = match raw.symbol.name.as_str() {
            "constant" => match raw.symbol.params.as_slice() {
                [] => Symbol::Constant { c0: raw.kappa1 },
                [c0] => Symbol::Constant { c0: *c0 },
                p => return Err(Error::InvalidModel(format!("constant takes 1 param, got {}", p.len()))),
            },
            "checkerboard" | "smooth-oscillating" => {
                let (low, high) = match raw.symbol.params.as_slice() {
                    [] => (raw.kappa1, raw.kappa2),
                    [a, b] => (*a, *b),
                    p => {
                        return Err(Error::InvalidModel(format!(
                            "{} takes 0 or 2 params, got {}",
                            raw.symbol.name,
                            p.len()
                        )))
                    }
                };
                if raw.symbol.name == "checkerboard" {
                    Symbol::Checkerboard { low, high }
                } else {
                    Symbol::SmoothOscillating { low, high }
                }
            }
            other => return Err(Error::InvalidModel(format!("unknown symbol `{other}`"))),
        };
        ModelSpec::new(raw.d, raw.alpha, raw.kappa1, raw.kappa2, symbol)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(m: ModelSpec) -> Self {
        RawModelSpec {
            d: m.d,
            alpha: m.alpha,
            kappa1: m.kappa1,
            kappa2: m.kappa2,
            symbol: SymbolSpec {
                name: m.symbol.name().to_string(),
                params: m.symbol.params(),
            },
        }
    }
}

impl ModelSpec {
    pub fn new(d: usize, alpha: f64, kappa1: f64, kappa2: f64, symbol: Symbol) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidModel("d must be a positive integer".into()));
        }
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::InvalidModel(format!(
                "alpha = {alpha} violates the constraint 0 < alpha < 2"
            )));
        }
        if !(kappa1 > 0.0 && kappa1 <= kappa2 && kappa2.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "need 0 < kappa1 <= kappa2 < inf, got kappa1 = {kappa1}, kappa2 = {kappa2}"
            )));
        }
        let (lo, hi) = symbol.bounds();
        if lo < kappa1 - 1e-12 || hi > kappa2 + 1e-12 || lo > hi {
            return Err(Error::InvalidModel(format!(
                "symbol range [{lo}, {hi}] not within [kappa1, kappa2] = [{kappa1}, {kappa2}]"
            )));
        }
        Ok(ModelSpec {
            d,
            alpha,
            kappa1,
            kappa2,
            symbol,
        })
    }

    /// Constant-symbol model with `c ≡ c0`.
    pub fn constant(d: usize, alpha: f64, c0: f64) -> Result<Self> {
        Self::new(d, alpha, c0, c0, Symbol::Constant { c0 })
    }

    pub fn checkerboard(d: usize, alpha: f64, kappa1: f64, kappa2: f64) -> Result<Self> {
        Self::new(
            d,
            alpha,
            kappa1,
            kappa2,
            Symbol::Checkerboard {
                low: kappa1,
                high: kappa2,
            },
        )
    }

    pub fn smooth_oscillating(d: usize, alpha: f64, kappa1: f64, kappa2: f64) -> Result<Self> {
        Self::new(
            d,
            alpha,
            kappa1,
            kappa2,
            Symbol::SmoothOscillating {
                low: kappa1,
                high: kappa2,
            },
        )
    }

    /// Exponent `1 + α` of the kernel.
    pub fn exponent(&self) -> f64 {
        1.0 + self.alpha
    }

    /// `G⁰ = 2d·ζ(1+α)`: total conductance of the `c ≡ 1` kernel on `ℤ^d`.
    pub fn unit_total_conductance(&self) -> f64 {
        2.0 * self.d as f64 * zeta(self.exponent())
    }
}

/// Point of `S_n = n⁻¹ℤ^d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeSite {
    pub coords: Vec<i64>,
    pub scale: u32,
}

impl LatticeSite {
    pub fn new(coords: Vec<i64>, scale: u32) -> Self {
        assert!(scale > 0, "scale must be positive");
        LatticeSite { coords, scale }
    }

    pub fn origin(d: usize, scale: u32) -> Self {
        Self::new(vec![0; d], scale)
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn real(&self) -> Vec<f64> {
        self.coords
            .iter()
            .map(|&c| c as f64 / self.scale as f64)
            .collect()
    }

    /// The axis jump taking `self` to `other`, if the two sites differ in
    /// exactly one coordinate.
    pub fn axis_jump_to(&self, other: &LatticeSite) -> Option<AxisJump> {
        if self.scale != other.scale || self.dim() != other.dim() {
            return None;
        }
        let mut found = None;
        for (axis, (a, b)) in self.coords.iter().zip(&other.coords).enumerate() {
            if a != b {
                if found.is_some() {
                    return None;
                }
                found = Some(AxisJump {
                    axis,
                    steps: b - a,
                });
            }
        }
        found
    }

    pub fn shifted(&self, jump: AxisJump) -> LatticeSite {
        let mut coords = self.coords.clone();
        coords[jump.axis] = coords[jump.axis].saturating_add(jump.steps);
        LatticeSite::new(coords, self.scale)
    }
}

impl fmt::Display for LatticeSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.real().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// `y - x = (steps / n)·e_axis`, `steps ≠ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AxisJump {
    pub axis: usize,
    pub steps: i64,
}

impl AxisJump {
    pub fn new(axis: usize, steps: i64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("axis jump must be nonzero".into()));
        }
        Ok(AxisJump { axis, steps })
    }

    pub fn length(&self, scale: u32) -> f64 {
        self.steps.unsigned_abs() as f64 / scale as f64
    }
}

/// `C(x, y) = c(x, y)/|y - x|^{1+α}` for axis pairs, 0 otherwise.
pub fn conductance(x: &LatticeSite, y: &LatticeSite, spec: &ModelSpec) -> Result<f64> {
    if x.scale != y.scale {
        return Err(Error::IncompatibleGrids(x.scale, y.scale));
    }
    Ok(match x.axis_jump_to(y) {
        Some(j) => {
            spec.symbol.value(&x.coords, &y.coords, x.scale) * j.length(x.scale).powf(-spec.exponent())
        }
        None => 0.0,
    })
}

/// `Σ_{k≥1} c(x, x + dir·k e_axis)·k^{-s}` in lattice units, with an error bound.
fn axis_sum(spec: &ModelSpec, x: &LatticeSite, axis: usize, dir: i64, tol: f64) -> (f64, f64) {
    let s = spec.exponent();
    let symbol = &spec.symbol;
    let mut y = x.coords.clone();
    let mut c_at = |k: u64| {
        y[axis] = x.coords[axis] + dir * k as i64;
        symbol.value(&x.coords, &y, x.scale)
    };
    if let Some(period) = symbol.axis_period(axis, x.scale) {
        // Σ_{r=1}^{P} c_r P^{-s} ζ(s, r/P)
        let p = period as f64;
        let total = (1..=period)
            .map(|r| c_at(r) * hurwitz_zeta(s, r as f64 / p))
            .sum::<f64>()
            * p.powf(-s);
        return (total, 0.0);
    }
    match *symbol {
        Symbol::SmoothOscillating { low, high } => {
            // mean part exact; oscillating part summed with an Abel bound
            let amp = 0.5 * (high - low);
            let mean = low + amp;
            let h = dir as f64 / x.scale as f64;
            let b = 2.0 * x.coords[0] as f64 / x.scale as f64;
            let abel = 1.0 / (0.5 / x.scale as f64).sin();
            let needed = (amp * abel / tol.max(1e-300)).powf(1.0 / s).ceil();
            let k_max = needed.clamp(64.0, (1u64 << 24) as f64) as u64;
            let mut osc = 0.0;
            for k in 1..=k_max {
                let kf = k as f64;
                osc += (b + kf * h).sin() * kf.powf(-s);
            }
            let bound = amp * abel * ((k_max + 1) as f64).powf(-s);
            (mean * zeta(s) + amp * osc, bound)
        }
        _ => unreachable!("periodic symbols handled above"),
    }
}

/// `G_x` together with a bound on the tail-truncation error.
pub fn total_conductance_bounded(x: &LatticeSite, spec: &ModelSpec, tail_tol: f64) -> (f64, f64) {
    let n_pow = (x.scale as f64).powf(spec.exponent());
    let per_direction = tail_tol / (2.0 * spec.d as f64 * n_pow);
    let mut total = 0.0;
    let mut bound = 0.0;
    for axis in 0..spec.d {
        for dir in [-1, 1] {
            let (v, b) = axis_sum(spec, x, axis, dir, per_direction);
            total += v;
            bound += b;
        }
    }
    (total * n_pow, bound * n_pow)
}

/// `G_x = Σ_y C(x, y)` in real units.
pub fn total_conductance(x: &LatticeSite, spec: &ModelSpec, tail_tol: f64) -> f64 {
    total_conductance_bounded(x, spec, tail_tol).0
}

/// `ρ^{α-d}·C(ρx, ρy)` for real points `x, y` on the `ρ`-grid.
pub fn rescaled_conductance(x: &[f64], y: &[f64], rho: f64, spec: &ModelSpec) -> Result<f64> {
    let to_base = |p: &[f64]| -> Result<LatticeSite> {
        let mut coords = Vec::with_capacity(p.len());
        for &v in p {
            let scaled = v * rho;
            let r = scaled.round();
            if (scaled - r).abs() > 1e-9 * scaled.abs().max(1.0) {
                return Err(Error::OffLattice(p.to_vec(), rho));
            }
            coords.push(r as i64);
        }
        Ok(LatticeSite::new(coords, 1))
    };
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let (bx, by) = (to_base(x)?, to_base(y)?);
    Ok(rho.powf(spec.alpha - spec.d as f64) * conductance(&bx, &by, spec)?)
}

/// The rescaled kernel with every jump longer than `lambda` removed.
pub fn truncated_conductance(
    x: &[f64],
    y: &[f64],
    rho: f64,
    lambda: f64,
    spec: &ModelSpec,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let dist = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist > lambda * (1.0 + 1e-12) {
        return Ok(0.0);
    }
    rescaled_conductance(x, y, rho, spec)
}

/// Exact sampler for `P(K = k) ∝ k^{-s}`, `k ≥ 1`: table inversion for the
/// head, Pareto envelope with an acceptance step for the tail.
#[derive(Debug, Clone)]
pub struct ZetaSampler {
    s: f64,
    alpha: f64,
    cdf: Vec<f64>,
}

const HEAD: usize = 4096;

impl ZetaSampler {
    pub fn new(s: f64) -> Self {
        let total = zeta(s);
        let mut cdf = Vec::with_capacity(HEAD);
        let mut acc = 0.0;
        for k in 1..=HEAD {
            acc += (k as f64).powf(-s);
            cdf.push(acc / total);
        }
        ZetaSampler {
            s,
            alpha: s - 1.0,
            cdf,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        if u < self.cdf[HEAD - 1] {
            return self.cdf.partition_point(|&c| c <= u) as u64 + 1;
        }
        let k0 = HEAD as f64;
        loop {
            let v = 1.0 - rng.random::<f64>();
            let x = k0 * v.powf(-1.0 / self.alpha);
            if !(x < MAX_STEPS as f64) {
                return MAX_STEPS;
            }
            let k = x.floor() + 1.0;
            let envelope = ((k - 1.0).powf(-self.alpha) - k.powf(-self.alpha)) / self.alpha;
            let accept = k.powf(-self.s) / envelope;
            if rng.random::<f64>() < accept {
                return k as u64;
            }
        }
    }
}

/// Jump law `C(x, x+z)/G_x` of the embedded chain at one site.
#[derive(Debug, Clone)]
pub struct JumpLaw<'a> {
    spec: &'a ModelSpec,
    site: LatticeSite,
    /// `G_x` in lattice units (`Σ c·k^{-s}`).
    norm: f64,
}

impl<'a> JumpLaw<'a> {
    pub fn mass(&self, jump: AxisJump) -> f64 {
        let y = self.site.shifted(jump);
        self.spec.symbol.value(&self.site.coords, &y.coords, self.site.scale)
            * (jump.steps.unsigned_abs() as f64).powf(-self.spec.exponent())
            / self.norm
    }

    /// Probability that the jump is longer than `max_steps` lattice steps.
    pub fn tail_mass(&self, max_steps: u64) -> f64 {
        let mut head = 0.0;
        for axis in 0..self.spec.d {
            for dir in [-1i64, 1] {
                for k in 1..=max_steps {
                    head += self.mass(AxisJump {
                        axis,
                        steps: dir * k as i64,
                    });
                }
            }
        }
        (1.0 - head).max(0.0)
    }

    pub fn site(&self) -> &LatticeSite {
        &self.site
    }
}

/// `C(x, ·)/G_x` at `x`; exact for every jump size.
pub fn jump_distribution<'a>(x: &LatticeSite, spec: &'a ModelSpec) -> JumpLaw<'a> {
    let s = spec.exponent();
    let norm = total_conductance(x, spec, DEFAULT_TAIL_TOL) / (x.scale as f64).powf(s);
    JumpLaw {
        spec,
        site: x.clone(),
        norm,
    }
}

/// Draws axis jumps from `C(x, ·)/G_x` without computing `G_x`: proposals
/// from the constant-symbol law, accepted with probability `c(x, y)/max c`.
#[derive(Debug, Clone)]
pub struct JumpSampler {
    zeta: ZetaSampler,
    c_max: f64,
    constant: bool,
}

impl JumpSampler {
    pub fn new(spec: &ModelSpec) -> Self {
        JumpSampler {
            zeta: ZetaSampler::new(spec.exponent()),
            c_max: spec.symbol.bounds().1,
            constant: spec.symbol.is_constant(),
        }
    }

    /// One proposal from `c_max·k^{-s}` (uniform axis and sign), kept with
    /// probability `c(x, y)/c_max`. Rejected proposals return `None`.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        spec: &ModelSpec,
        coords: &[i64],
        symbol_scale: u32,
        rng: &mut R,
        scratch: &mut Vec<i64>,
    ) -> Option<AxisJump> {
        let d = coords.len();
        let axis = if d == 1 { 0 } else { rng.random_range(0..d) };
        let k = self.zeta.sample(rng) as i64;
        let steps = if rng.random::<bool>() { k } else { -k };
        if self.constant {
            return Some(AxisJump { axis, steps });
        }
        scratch.clear();
        scratch.extend_from_slice(coords);
        scratch[axis] = scratch[axis].saturating_add(steps);
        let c = spec.symbol.value(coords, scratch, symbol_scale);
        (rng.random::<f64>() * self.c_max < c).then_some(AxisJump { axis, steps })
    }

    /// Sample a jump from `coords` (symbol evaluated at scale `symbol_scale`).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        spec: &ModelSpec,
        coords: &[i64],
        symbol_scale: u32,
        rng: &mut R,
        scratch: &mut Vec<i64>,
    ) -> AxisJump {
        loop {
            if let Some(j) = self.propose(spec, coords, symbol_scale, rng, scratch) {
                return j;
            }
        }
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }
}

/// Upper bound `A` such that the rate of jumps longer than `r` (real units)
/// is at most `A·r^{-α}` for the time-changed unit-rate chain on any grid.
pub fn unit_rate_tail_coefficient(spec: &ModelSpec) -> f64 {
    spec.kappa2 / (spec.kappa1 * spec.alpha * zeta(spec.exponent()))
}

/// Same bound for the form-normalized generator `(2/n)·C_n`.
pub fn form_rate_tail_coefficient(spec: &ModelSpec) -> f64 {
    4.0 * spec.d as f64 * spec.kappa2 / spec.alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn site(c: &[i64], n: u32) -> LatticeSite {
        LatticeSite::new(c.to_vec(), n)
    }

    #[test]
    fn conductance_examples() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        let v = conductance(&site(&[0], 1), &site(&[3], 1), &m).unwrap();
        assert!((v - 1.0 / 9.0).abs() < 1e-15);
        let m2 = ModelSpec::constant(2, 1.0, 1.0).unwrap();
        assert_eq!(conductance(&site(&[0, 0], 1), &site(&[1, 1], 1), &m2).unwrap(), 0.0);
        assert!(matches!(
            conductance(&site(&[0], 1), &site(&[1], 2), &m),
            Err(Error::IncompatibleGrids(1, 2))
        ));
    }

    #[test]
    fn conductance_uses_real_distance() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        // |y - x| = 1/4 on S_4
        let v = conductance(&site(&[0], 4), &site(&[1], 4), &m).unwrap();
        assert!((v - 16.0).abs() < 1e-12);
    }

    #[test]
    fn total_conductance_matches_series() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        let g = total_conductance(&site(&[0], 1), &m, 1e-12);
        assert!((g - PI * PI / 3.0).abs() < 1e-10);
        // brute-force partial sum plus integral tail
        let k = 200_000u64;
        let partial: f64 = (1..=k).map(|i| 2.0 / (i as f64).powi(2)).sum();
        assert!((partial + 2.0 / k as f64 - g).abs() < 1e-9);

        let m2 = ModelSpec::constant(2, 1.0, 1.0).unwrap();
        let g2 = total_conductance(&site(&[5, -3], 1), &m2, 1e-12);
        assert!((g2 - 2.0 * PI * PI / 3.0).abs() < 1e-10);
    }

    #[test]
    fn total_conductance_respects_symbol_bounds() {
        let base = ModelSpec::constant(2, 0.7, 1.0).unwrap();
        let g0 = total_conductance(&site(&[0, 0], 1), &base, 1e-12);
        for spec in [
            ModelSpec::checkerboard(2, 0.7, 1.0, 2.0).unwrap(),
            ModelSpec::smooth_oscillating(2, 0.7, 1.0, 2.0).unwrap(),
        ] {
            for c in [[0, 0], [1, 0], [3, 7], [-2, 5]] {
                let g = total_conductance(&site(&c, 1), &spec, 1e-12);
                assert!(g >= g0 - 1e-9 && g <= 2.0 * g0 + 1e-9, "{spec:?} {c:?} {g}");
            }
        }
    }

    #[test]
    fn checkerboard_total_matches_direct_sum() {
        let spec = ModelSpec::checkerboard(1, 1.5, 1.0, 2.0).unwrap();
        for (c, n) in [([0], 1), ([1], 1), ([3], 4), ([-5], 4)] {
            let x = site(&c, n);
            let g = total_conductance(&x, &spec, 1e-12);
            let kmax = 4_000_000i64;
            let mut direct = 0.0;
            for k in 1..=kmax {
                for dir in [-1, 1] {
                    let y = site(&[c[0] + dir * k], n);
                    direct += conductance(&x, &y, &spec).unwrap();
                }
            }
            // tail of the c≡2 majorant beyond kmax, times n^s
            let tail = 2.0 * 2.0 * (kmax as f64).powf(-0.5) / 0.5 * (n as f64).powf(2.5);
            assert!(g >= direct && g <= direct + tail, "{c:?}/{n}: {g} vs {direct}");
        }
    }

    #[test]
    fn smooth_oscillating_total_has_small_bound() {
        let spec = ModelSpec::smooth_oscillating(1, 1.0, 1.0, 2.0).unwrap();
        let (g, bound) = total_conductance_bounded(&site(&[2], 1), &spec, 1e-10);
        assert!(bound <= 1e-10, "bound {bound}");
        let direct: f64 = (1..=2_000_000i64)
            .flat_map(|k| [k, -k])
            .map(|k| conductance(&site(&[2], 1), &site(&[2 + k], 1), &spec).unwrap())
            .sum();
        assert!((g - direct).abs() < 2.0 * 2.0 / 2e6 + 1e-9);
    }

    #[test]
    fn jump_probabilities_examples() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        let law = jump_distribution(&site(&[0], 1), &m);
        let p1 = law.mass(AxisJump { axis: 0, steps: 1 }) + law.mass(AxisJump { axis: 0, steps: -1 });
        assert!((p1 - 6.0 / (PI * PI)).abs() < 1e-12);
        for k in 1..20 {
            assert_eq!(
                law.mass(AxisJump { axis: 0, steps: k }),
                law.mass(AxisJump { axis: 0, steps: -k })
            );
        }
    }

    #[test]
    fn jump_masses_sum_to_one() {
        for spec in [
            ModelSpec::constant(2, 1.3, 1.0).unwrap(),
            ModelSpec::checkerboard(2, 1.3, 1.0, 3.0).unwrap(),
        ] {
            for c in [[0, 0], [1, 0]] {
                let law = jump_distribution(&site(&c, 1), &spec);
                let kmax = 200_000u64;
                let head = 1.0 - law.tail_mass(kmax);
                // remaining tail bounded by the c_max majorant
                let tail = 2.0 * 2.0 * spec.kappa2 * (kmax as f64).powf(-1.3) / 1.3 / (law.norm);
                assert!(head <= 1.0 + 1e-9 && head + tail >= 1.0 - 1e-9, "{head} {tail}");
            }
        }
    }

    #[test]
    fn truncated_examples() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        let a = truncated_conductance(&[0.0], &[3.0], 1.0, f64::INFINITY, &m).unwrap();
        assert!((a - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(truncated_conductance(&[0.0], &[5.0], 1.0, 4.0, &m).unwrap(), 0.0);
        assert!(truncated_conductance(&[0.0], &[1.0], 1.0, 0.0, &m).is_err());
        // removed rate for λ = 4: 2 Σ_{k>4} k^{-2}
        let removed: f64 = 2.0 * (PI * PI / 6.0 - 1.0 - 0.25 - 1.0 / 9.0 - 1.0 / 16.0);
        let kept: f64 = (1..=4)
            .map(|k| 2.0 * truncated_conductance(&[0.0], &[k as f64], 1.0, 4.0, &m).unwrap())
            .sum();
        assert!((kept + removed - PI * PI / 3.0).abs() < 1e-12);
        assert!((removed - 0.4428).abs() < 2e-4);
    }

    #[test]
    fn rescaled_examples() {
        let m = ModelSpec::constant(1, 1.0, 1.0).unwrap();
        let v = rescaled_conductance(&[0.0], &[0.5], 2.0, &m).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(rescaled_conductance(&[0.0], &[0.3], 2.0, &m).is_err());
        let m2 = ModelSpec::constant(2, 1.0, 1.0).unwrap();
        let v2 = rescaled_conductance(&[0.0, 0.0], &[0.5, 0.0], 2.0, &m2).unwrap();
        assert!((v2 - 0.5).abs() < 1e-15);
        let same = rescaled_conductance(&[1.0, 2.0], &[1.0, 5.0], 1.0, &m2).unwrap();
        let direct = conductance(&site(&[1, 2], 1), &site(&[1, 5], 1), &m2).unwrap();
        assert_eq!(same, direct);
    }

    #[test]
    fn zeta_sampler_frequencies_within_four_sigma() {
        let sampler = ZetaSampler::new(2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400_000usize;
        let mut counts = [0usize; 6];
        let mut tail = 0usize;
        for _ in 0..n {
            let k = sampler.sample(&mut rng);
            if k <= 5 {
                counts[k as usize] += 1;
            }
            if k > 4096 {
                tail += 1;
            }
        }
        let z2 = PI * PI / 6.0;
        for k in 1..=5 {
            let p = 1.0 / (k * k) as f64 / z2;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[k] as f64 - n as f64 * p).abs() < 4.0 * sigma, "k={k}");
        }
        let p_tail = crate::numerics::zeta_tail(2.0, 4097) / z2;
        let sigma = (n as f64 * p_tail).sqrt();
        assert!((tail as f64 - n as f64 * p_tail).abs() < 4.0 * sigma + 1.0);
    }

    #[test]
    fn rejects_bad_models() {
        assert!(ModelSpec::constant(1, 2.5, 1.0).is_err());
        assert!(ModelSpec::constant(1, 0.0, 1.0).is_err());
        assert!(ModelSpec::new(1, 1.0, 2.0, 1.0, Symbol::Constant { c0: 1.5 }).is_err());
        assert!(ModelSpec::new(1, 1.0, 1.0, 2.0, Symbol::Constant { c0: 3.0 }).is_err());
    }

    #[test]
    fn model_spec_round_trips_through_toml() {
        let text = "d = 2\nalpha = 1.5\nkappa1 = 1.0\nkappa2 = 2.0\nsymbol = { name = \"checkerboard\" }\n";
        let m: ModelSpec = toml::from_str(text).unwrap();
        assert_eq!(m.symbol, Symbol::Checkerboard { low: 1.0, high: 2.0 });
        let back: ModelSpec = toml::from_str(&toml::to_string(&m).unwrap()).unwrap();
        assert_eq!(m, back);
        let bad = "d = 1\nalpha = 2.5\nkappa1 = 1.0\nkappa2 = 1.0\nsymbol = { name = \"constant\" }\n";
        let err = toml::from_str::<ModelSpec>(bad).unwrap_err().to_string();
        assert!(err.contains("0 < alpha < 2"), "{err}");
    }
}
