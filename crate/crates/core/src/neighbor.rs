//! Neighbor functions, their uncertainty intervals and combinations.
//!
//! A neighbor function `f` maps a nonnegative confidential value into a space
//! where two values are indistinguishable when they differ by at most a
//! distance `delta`. It must be strictly increasing, continuous, concave, and
//! `t -> f(exp(t))` must be convex (equivalently `x f'(x)` is nondecreasing).

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::dataset::{Attribute, EstablishmentRecord};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NeighborError {
    #[error("invalid parameter {what}: {value}")]
    Parameter { what: &'static str, value: f64 },
    #[error("function is not finite at x = {x}")]
    Malformed { x: f64 },
    #[error("not a neighbor function: {condition} fails near x = {witness:?} ({detail})")]
    Invalid {
        condition: Condition,
        witness: Vec<f64>,
        detail: String,
    },
    #[error("combined derivative is not integrable at 0; use a shifted log (log_shift with a > 0)")]
    NonIntegrable,
    #[error("validation grid needs at least 1000 points in (0, x_max], got {points} on ({x_min}, {x_max}]")]
    Grid { points: usize, x_min: f64, x_max: f64 },
    #[error("malformed piece list: {0}")]
    Pieces(String),
}

fn param(what: &'static str, value: f64) -> NeighborError {
    NeighborError::Parameter { what, value }
}

/// Elementary shape used by one piece of a piecewise function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "base", rename_all = "snake_case")]
pub enum Base {
    Linear,
    Sqrt { shift: f64 },
    Log { shift: f64 },
}

impl Base {
    fn eval(self, x: f64) -> f64 {
        match self {
            Base::Linear => x,
            Base::Sqrt { shift } => (x + shift).sqrt(),
            Base::Log { shift } => (x + shift).ln(),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        match self {
            Base::Linear => 1.0,
            Base::Sqrt { shift } => 0.5 / (x + shift).sqrt(),
            Base::Log { shift } => 1.0 / (x + shift),
        }
    }

    fn inv(self, z: f64) -> f64 {
        match self {
            Base::Linear => z,
            Base::Sqrt { shift } => z * z - shift,
            Base::Log { shift } => z.exp() - shift,
        }
    }
}

/// `f(x) = value_at_start + scale * (base(x) - base(start))` on `[start, next start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub start: f64,
    pub value_at_start: f64,
    pub scale: f64,
    #[serde(flatten)]
    pub base: Base,
}

impl Piece {
    fn eval(&self, x: f64) -> f64 {
        if x == self.start {
            return self.value_at_start;
        }
        self.value_at_start + self.scale * (self.base.eval(x) - self.base.eval(self.start))
    }

    fn deriv(&self, x: f64) -> f64 {
        self.scale * self.base.deriv(x)
    }

    fn inv(&self, y: f64) -> f64 {
        let z = self.base.eval(self.start) + (y - self.value_at_start) / self.scale;
        self.base.inv(z)
    }
}

/// Function defined by its derivative at positive grid points, with `f(0) = 0`.
///
/// Between nodes `x f'(x)` is interpolated linearly, so `f'(x) = a / x + b`
/// on each segment. A nonincreasing table with nondecreasing `x f'(x)` then
/// stays concave with convex `f(exp(t))` everywhere, not only at the nodes.
/// The derivative is held constant below the first node and above the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    xs: Vec<f64>,
    derivs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Tabulated {
    pub fn new(xs: Vec<f64>, derivs: Vec<f64>) -> Result<Self, NeighborError> {
        if xs.is_empty() || xs.len() != derivs.len() {
            return Err(NeighborError::Pieces(
                "grid and derivative tables must be non-empty and of equal length".into(),
            ));
        }
        if let Some(&x) = xs.iter().find(|x| !x.is_finite() || **x <= 0.0) {
            return Err(param("tabulation point", x));
        }
        if let Some(&d) = derivs.iter().find(|d| !d.is_finite()) {
            return Err(param("tabulated derivative", d));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NeighborError::Pieces(
                "tabulation points must be strictly increasing".into(),
            ));
        }
        let mut t = Self {
            cumulative: Vec::with_capacity(xs.len()),
            xs,
            derivs,
        };
        t.cumulative.push(t.xs[0] * t.derivs[0]);
        for k in 1..t.xs.len() {
            let inc = t.integral(k - 1, t.xs[k]);
            t.cumulative.push(t.cumulative[k - 1] + inc);
        }
        Ok(t)
    }

    pub fn points(&self) -> &[f64] {
        &self.xs
    }

    /// Coefficients `(a, b)` of `f'(x) = a / x + b` on segment `k`.
    fn coefficients(&self, k: usize) -> (f64, f64) {
        let (x0, x1) = (self.xs[k], self.xs[k + 1]);
        let (d0, d1) = (self.derivs[k], self.derivs[k + 1]);
        let h = x1 - x0;
        (x0 * x1 * (d0 - d1) / h, (x1 * d1 - x0 * d0) / h)
    }

    /// Integral of the derivative from node `k` to `x` within segment `k`.
    fn integral(&self, k: usize, x: f64) -> f64 {
        let (a, b) = self.coefficients(k);
        let x0 = self.xs[k];
        a * (x / x0).ln() + b * (x - x0)
    }

    /// Index k with xs[k] <= x < xs[k + 1]; only meaningful inside the table.
    fn segment(&self, x: f64) -> usize {
        self.xs.partition_point(|&p| p <= x).saturating_sub(1)
    }

    fn eval(&self, x: f64) -> f64 {
        let last = self.xs.len() - 1;
        if x <= self.xs[0] {
            return x * self.derivs[0];
        }
        if x >= self.xs[last] {
            return self.cumulative[last] + (x - self.xs[last]) * self.derivs[last];
        }
        let k = self.segment(x);
        self.cumulative[k] + self.integral(k, x)
    }

    fn deriv(&self, x: f64) -> f64 {
        let last = self.xs.len() - 1;
        if x <= self.xs[0] {
            return self.derivs[0];
        }
        if x >= self.xs[last] {
            return self.derivs[last];
        }
        let k = self.segment(x);
        let (a, b) = self.coefficients(k);
        a / x + b
    }

    fn inv(&self, y: f64) -> f64 {
        let last = self.xs.len() - 1;
        if y <= self.cumulative[0] {
            return y / self.derivs[0];
        }
        if y >= self.cumulative[last] {
            return self.xs[last] + (y - self.cumulative[last]) / self.derivs[last];
        }
        let k = self
            .cumulative
            .partition_point(|&c| c <= y)
            .saturating_sub(1)
            .min(last - 1);
        let target = y - self.cumulative[k];
        let (mut lo, mut hi) = (self.xs[k], self.xs[k + 1]);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.integral(k, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// An increasing transform of confidential values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NeighborFunction {
    /// `sqrt(x + shift)`
    SqrtShift { shift: f64 },
    /// `ln(x + shift)`; with `shift = 0`, `f(0) = -inf`.
    LogShift { shift: f64 },
    /// `x / d`
    Linear { d: f64 },
    /// Closed-form pieces, as produced by combining built-in functions.
    Piecewise { pieces: Vec<Piece> },
    /// Tabulated derivative.
    Tabulated(Tabulated),
}

impl NeighborFunction {
    pub fn sqrt() -> Self {
        NeighborFunction::SqrtShift { shift: 0.0 }
    }

    pub fn log() -> Self {
        NeighborFunction::LogShift { shift: 0.0 }
    }

    pub fn sqrt_shift(shift: f64) -> Result<Self, NeighborError> {
        if !(shift >= 0.0) || !shift.is_finite() {
            return Err(param("sqrt shift", shift));
        }
        Ok(NeighborFunction::SqrtShift { shift })
    }

    pub fn log_shift(shift: f64) -> Result<Self, NeighborError> {
        if !(shift >= 0.0) || !shift.is_finite() {
            return Err(param("log shift", shift));
        }
        Ok(NeighborFunction::LogShift { shift })
    }

    pub fn linear(d: f64) -> Result<Self, NeighborError> {
        if !(d > 0.0) || !d.is_finite() {
            return Err(param("linear divisor d", d));
        }
        Ok(NeighborFunction::Linear { d })
    }

    /// Piecewise function from explicit pieces. The first piece must start at
    /// 0 and starts must increase. No shape checks are made here; use
    /// [`validate`] for that.
    pub fn piecewise(pieces: Vec<Piece>) -> Result<Self, NeighborError> {
        if pieces.is_empty() {
            return Err(NeighborError::Pieces("no pieces".into()));
        }
        if pieces[0].start != 0.0 {
            return Err(NeighborError::Pieces("first piece must start at 0".into()));
        }
        if pieces.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(NeighborError::Pieces("piece starts must increase".into()));
        }
        for p in &pieces {
            if !p.scale.is_finite() || !p.value_at_start.is_finite() || !p.start.is_finite() {
                return Err(NeighborError::Pieces(format!("non-finite piece {p:?}")));
            }
            if let Base::Sqrt { shift } | Base::Log { shift } = p.base {
                if !(shift >= 0.0) {
                    return Err(param("piece shift", shift));
                }
            }
            if matches!(p.base, Base::Log { shift } if shift == 0.0) && p.start == 0.0 {
                return Err(NeighborError::NonIntegrable);
            }
        }
        Ok(NeighborFunction::Piecewise { pieces })
    }

    /// Continuous piecewise-linear function with `f(0) = 0` and the given
    /// slope from each breakpoint on.
    pub fn piecewise_linear(segments: &[(f64, f64)]) -> Result<Self, NeighborError> {
        let mut pieces: Vec<Piece> = Vec::with_capacity(segments.len());
        for &(start, slope) in segments {
            let value_at_start = match pieces.last() {
                Some(p) => p.eval(start),
                None => 0.0,
            };
            pieces.push(Piece {
                start,
                value_at_start,
                scale: slope,
                base: Base::Linear,
            });
        }
        Self::piecewise(pieces)
    }

    pub fn tabulated(xs: Vec<f64>, derivatives: Vec<f64>) -> Result<Self, NeighborError> {
        Ok(NeighborFunction::Tabulated(Tabulated::new(xs, derivatives)?))
    }

    fn piece_at(pieces: &[Piece], x: f64) -> &Piece {
        let k = pieces.partition_point(|p| p.start <= x).saturating_sub(1);
        &pieces[k]
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        match self {
            NeighborFunction::SqrtShift { shift } => (x + shift).sqrt(),
            NeighborFunction::LogShift { shift } => (x + shift).ln(),
            NeighborFunction::Linear { d } => x / d,
            NeighborFunction::Piecewise { pieces } => Self::piece_at(pieces, x).eval(x),
            NeighborFunction::Tabulated(t) => t.eval(x),
        }
    }

    /// Right derivative.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            NeighborFunction::SqrtShift { shift } => Base::Sqrt { shift: *shift }.deriv(x),
            NeighborFunction::LogShift { shift } => Base::Log { shift: *shift }.deriv(x),
            NeighborFunction::Linear { d } => 1.0 / d,
            NeighborFunction::Piecewise { pieces } => Self::piece_at(pieces, x).deriv(x),
            NeighborFunction::Tabulated(t) => t.deriv(x),
        }
    }

    /// Left derivative; differs from [`derivative`](Self::derivative) only at breakpoints.
    pub fn left_derivative(&self, x: f64) -> f64 {
        match self {
            NeighborFunction::Piecewise { pieces } => {
                let k = pieces.partition_point(|p| p.start < x).saturating_sub(1);
                pieces[k].deriv(x)
            }
            _ => self.derivative(x),
        }
    }

    /// Limit of `f` from the left; differs from `evaluate` only at jumps.
    pub fn left_limit(&self, x: f64) -> f64 {
        match self {
            NeighborFunction::Piecewise { pieces } => {
                let k = pieces.partition_point(|p| p.start < x).saturating_sub(1);
                pieces[k].eval(x)
            }
            _ => self.evaluate(x),
        }
    }

    /// Smallest `x >= 0` with `f(x) >= y`; values at or below `f(0)` map to 0.
    pub fn inverse(&self, y: f64) -> f64 {
        if y <= self.evaluate(0.0) {
            return 0.0;
        }
        let x = match self {
            NeighborFunction::SqrtShift { shift } => y * y - shift,
            NeighborFunction::LogShift { shift } => y.exp() - shift,
            NeighborFunction::Linear { d } => y * d,
            NeighborFunction::Piecewise { pieces } => {
                let k = pieces
                    .partition_point(|p| p.value_at_start <= y)
                    .saturating_sub(1);
                pieces[k].inv(y)
            }
            NeighborFunction::Tabulated(t) => t.inv(y),
        };
        x.max(0.0)
    }

    /// Points in `(0, inf)` where the closed form changes.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            NeighborFunction::Piecewise { pieces } => {
                pieces.iter().skip(1).map(|p| p.start).collect()
            }
            NeighborFunction::Tabulated(t) => {
                t.points().iter().copied().filter(|&x| x > 0.0).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Closed-form piece description, when one exists.
    fn closed_form(&self) -> Option<Vec<Piece>> {
        let single = |base: Base, scale: f64| {
            let value_at_start = scale * base.eval(0.0);
            vec![Piece {
                start: 0.0,
                value_at_start,
                scale,
                base,
            }]
        };
        match self {
            NeighborFunction::SqrtShift { shift } => Some(single(Base::Sqrt { shift: *shift }, 1.0)),
            NeighborFunction::LogShift { shift } => Some(single(Base::Log { shift: *shift }, 1.0)),
            NeighborFunction::Linear { d } => Some(single(Base::Linear, 1.0 / d)),
            NeighborFunction::Piecewise { pieces } => Some(pieces.clone()),
            NeighborFunction::Tabulated(_) => None,
        }
    }
}

impl fmt::Display for NeighborFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NeighborFunction::SqrtShift { shift } => write!(f, "sqrt_shift({shift})"),
            NeighborFunction::LogShift { shift } => write!(f, "log_shift({shift})"),
            NeighborFunction::Linear { d } => write!(f, "linear(d={d})"),
            NeighborFunction::Piecewise { pieces } => write!(f, "piecewise({} pieces)", pieces.len()),
            NeighborFunction::Tabulated(t) => write!(f, "tabulated({} points)", t.points().len()),
        }
    }
}

/// Per-attribute distance parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams([f64; 4]);

impl DistanceParams {
    pub fn new(deltas: [f64; 4]) -> Result<Self, NeighborError> {
        if let Some(&d) = deltas.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(param("distance parameter", d));
        }
        Ok(Self(deltas))
    }

    pub fn uniform(delta: f64) -> Result<Self, NeighborError> {
        Self::new([delta; 4])
    }

    pub fn get(&self, attribute: Attribute) -> f64 {
        self.0[attribute.index()]
    }

    /// Distances for a group of `m` records: each scaled by `m`.
    pub fn scaled(&self, m: f64) -> Self {
        Self(self.0.map(|d| d * m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyInterval {
    pub lower: f64,
    pub upper: f64,
}

impl UncertaintyInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn contains_interval(&self, other: &Self, tol: f64) -> bool {
        self.lower <= other.lower + tol && other.upper <= self.upper + tol
    }
}

/// Values indistinguishable from `x` at distance `delta`.
pub fn uncertainty_interval(f: &NeighborFunction, delta: f64, x: f64) -> UncertaintyInterval {
    if delta == 0.0 {
        return UncertaintyInterval { lower: x, upper: x };
    }
    let fx = f.evaluate(x);
    let lower = f.inverse(f.evaluate(0.0).max(fx - delta));
    let upper = f.inverse(fx + delta);
    UncertaintyInterval {
        lower: lower.min(x),
        upper: upper.max(x),
    }
}

/// `|f(a) - f(b)| <= delta`, treating equal values as close even where `f`
/// is infinite.
pub fn values_close(f: &NeighborFunction, delta: f64, a: f64, b: f64) -> bool {
    a == b || (f.evaluate(a) - f.evaluate(b)).abs() <= delta
}

/// Two records are close when their public attributes match and every
/// confidential attribute is within its distance under `f`.
pub fn is_close(
    r1: &EstablishmentRecord,
    r2: &EstablishmentRecord,
    f: &NeighborFunction,
    delta: &DistanceParams,
) -> bool {
    is_close_per_attribute(r1, r2, [f, f, f, f], delta)
}

/// Closeness with a separate function per attribute (attribute-wise conjunction).
pub fn is_close_per_attribute(
    r1: &EstablishmentRecord,
    r2: &EstablishmentRecord,
    fs: [&NeighborFunction; 4],
    delta: &DistanceParams,
) -> bool {
    r1.same_public_attributes(r2)
        && Attribute::ALL
            .iter()
            .all(|&a| values_close(fs[a.index()], delta.get(a), r1.value(a), r2.value(a)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pick {
    Min,
    Max,
}

/// Function whose unit-distance intervals contain both inputs' intervals:
/// integrates `min(fA'/deltaA, fB'/deltaB)` from 0. The distance of the
/// result is 1.
pub fn combine_protection(
    fa: &NeighborFunction,
    delta_a: f64,
    fb: &NeighborFunction,
    delta_b: f64,
) -> Result<NeighborFunction, NeighborError> {
    combine(fa, delta_a, fb, delta_b, Pick::Min)
}

/// Function whose unit-distance intervals are contained in both inputs'
/// intervals: integrates `max(fA'/deltaA, fB'/deltaB)` from 0.
pub fn compose_intersect(
    fa: &NeighborFunction,
    delta_a: f64,
    fb: &NeighborFunction,
    delta_b: f64,
) -> Result<NeighborFunction, NeighborError> {
    combine(fa, delta_a, fb, delta_b, Pick::Max)
}

const CROSSOVER_FLOOR: f64 = 1e-12;
const CROSSOVER_CEILING: f64 = 1e15;
const SAMPLES_PER_DECADE: f64 = 48.0;

fn combine(
    fa: &NeighborFunction,
    delta_a: f64,
    fb: &NeighborFunction,
    delta_b: f64,
    pick: Pick,
) -> Result<NeighborFunction, NeighborError> {
    for d in [delta_a, delta_b] {
        if !(d > 0.0) || !d.is_finite() {
            return Err(param("combination distance", d));
        }
    }
    match (fa.closed_form(), fb.closed_form()) {
        (Some(pa), Some(pb)) => combine_closed(&scale_pieces(pa, delta_a), &scale_pieces(pb, delta_b), pick),
        _ => combine_tabulated(fa, delta_a, fb, delta_b, pick),
    }
}

fn scale_pieces(pieces: Vec<Piece>, delta: f64) -> Vec<Piece> {
    pieces
        .into_iter()
        .map(|p| Piece {
            value_at_start: p.value_at_start / delta,
            scale: p.scale / delta,
            ..p
        })
        .collect()
}

fn choose(pick: Pick, da: f64, db: f64) -> bool {
    // true selects A; ties go to A.
    match pick {
        Pick::Min => da <= db,
        Pick::Max => da >= db,
    }
}

fn log_grid(lo: f64, hi: f64) -> Vec<f64> {
    let decades = (hi / lo).log10().max(0.0);
    let n = ((decades * SAMPLES_PER_DECADE).ceil() as usize).max(8);
    let step = (hi / lo).ln() / n as f64;
    let mut v: Vec<f64> = (0..=n).map(|i| lo * (step * i as f64).exp()).collect();
    v[n] = hi;
    v
}

fn crossovers(pa: &Piece, pb: &Piece, lo: f64, hi: f64) -> Vec<f64> {
    let a = lo.max(CROSSOVER_FLOOR);
    let b = hi.min(CROSSOVER_CEILING);
    if a >= b {
        return Vec::new();
    }
    let diff = |x: f64| pa.deriv(x) - pb.deriv(x);
    let grid = log_grid(a, b);
    let mut out = Vec::new();
    let mut prev_x = grid[0];
    let mut prev = diff(prev_x).signum();
    for &x in &grid[1..] {
        let s = diff(x).signum();
        if s != 0.0 && prev != 0.0 && s != prev {
            let (mut l, mut r) = (prev_x, x);
            for _ in 0..200 {
                let m = 0.5 * (l + r);
                if m <= l || m >= r {
                    break;
                }
                if diff(m).signum() == prev {
                    l = m;
                } else {
                    r = m;
                }
            }
            out.push(0.5 * (l + r));
        }
        if s != 0.0 {
            prev = s;
        }
        prev_x = x;
    }
    out
}

fn combine_closed(
    pa: &[Piece],
    pb: &[Piece],
    pick: Pick,
) -> Result<NeighborFunction, NeighborError> {
    let mut bounds: Vec<f64> = pa.iter().chain(pb.iter()).map(|p| p.start).collect();
    bounds.sort_by(f64::total_cmp);
    bounds.dedup();

    let mut out: Vec<Piece> = Vec::new();
    for (i, &lo) in bounds.iter().enumerate() {
        let hi = bounds.get(i + 1).copied().unwrap_or(f64::INFINITY);
        let a = NeighborFunction::piece_at(pa, lo);
        let b = NeighborFunction::piece_at(pb, lo);
        let mut cuts = vec![lo];
        cuts.extend(crossovers(a, b, lo, hi));
        for (j, &start) in cuts.iter().enumerate() {
            let end = cuts.get(j + 1).copied().unwrap_or(hi);
            let probe = if end.is_finite() {
                0.5 * (start + end)
            } else {
                (2.0 * start).max(start + 1.0)
            };
            let winner = if choose(pick, a.deriv(probe), b.deriv(probe)) { a } else { b };
            if let Some(prev) = out.last() {
                if prev.base == winner.base && prev.scale == winner.scale {
                    continue;
                }
            }
            let value_at_start = match out.last() {
                Some(prev) => prev.eval(start),
                None => 0.0,
            };
            out.push(Piece {
                start,
                value_at_start,
                scale: winner.scale,
                base: winner.base,
            });
        }
    }
    let first = out[0];
    if matches!(first.base, Base::Log { shift } if shift == 0.0) {
        return Err(NeighborError::NonIntegrable);
    }
    NeighborFunction::piecewise(out)
}

fn combine_tabulated(
    fa: &NeighborFunction,
    delta_a: f64,
    fb: &NeighborFunction,
    delta_b: f64,
    pick: Pick,
) -> Result<NeighborFunction, NeighborError> {
    let a_inf = !fa.evaluate(0.0).is_finite();
    let b_inf = !fb.evaluate(0.0).is_finite();
    let non_integrable = match pick {
        Pick::Min => a_inf && b_inf,
        Pick::Max => a_inf || b_inf,
    };
    if non_integrable {
        return Err(NeighborError::NonIntegrable);
    }
    let mut xs = log_grid(1e-9, 1e12);
    xs.extend(fa.breakpoints());
    xs.extend(fb.breakpoints());
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let derivs: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let da = fa.derivative(x) / delta_a;
            let db = fb.derivative(x) / delta_b;
            if choose(pick, da, db) { da } else { db }
        })
        .collect();
    if let Some(pos) = derivs.iter().position(|d| !d.is_finite()) {
        return Err(NeighborError::Malformed { x: xs[pos] });
    }
    NeighborFunction::tabulated(xs, derivs)
}

/// Sampling grid for [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: 2000,
            x_min: 1e-6,
            x_max: 1e9,
        }
    }
}

/// The four defining conditions, in checking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    StrictlyIncreasing,
    Continuous,
    Concave,
    LogConvex,
}

impl Condition {
    pub fn number(self) -> u8 {
        match self {
            Condition::StrictlyIncreasing => 1,
            Condition::Continuous => 2,
            Condition::Concave => 3,
            Condition::LogConvex => 4,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            Condition::StrictlyIncreasing => "strictly increasing",
            Condition::Continuous => "continuous",
            Condition::Concave => "concave",
            Condition::LogConvex => "f(exp(t)) convex",
        };
        write!(f, "condition ({}) {}", self.number(), text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum ValidityReport {
    Pass,
    Fail {
        condition: Condition,
        witness: Vec<f64>,
        detail: String,
    },
}

impl ValidityReport {
    pub fn is_pass(&self) -> bool {
        matches!(self, ValidityReport::Pass)
    }
}

const TIE_TOLERANCE: f64 = 1e-9;

fn tol(scale: f64) -> f64 {
    TIE_TOLERANCE * scale.abs().max(1.0)
}

/// Numerically checks the four conditions on a log-spaced grid plus the
/// function's breakpoints. A pass means no violation was found.
pub fn validate(f: &NeighborFunction, grid: &GridSpec) -> Result<ValidityReport, NeighborError> {
    if grid.points < 1000 || !(grid.x_min > 0.0) || !(grid.x_max > grid.x_min) {
        return Err(NeighborError::Grid {
            points: grid.points,
            x_min: grid.x_min,
            x_max: grid.x_max,
        });
    }
    let breaks: Vec<f64> = f
        .breakpoints()
        .into_iter()
        .filter(|&b| b <= grid.x_max)
        .collect();
    let mut xs = log_grid_n(grid.x_min, grid.x_max, grid.points);
    xs.extend(breaks.iter().copied());
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let values: Vec<f64> = xs.iter().map(|&x| f.evaluate(x)).collect();
    // One-sided derivative samples; breakpoints contribute left then right.
    let mut derivs: Vec<(f64, f64)> = Vec::with_capacity(xs.len() + breaks.len());
    for &x in &xs {
        if breaks.contains(&x) {
            derivs.push((x, f.left_derivative(x)));
        }
        derivs.push((x, f.derivative(x)));
    }
    for (&x, &v) in xs.iter().zip(&values) {
        if !v.is_finite() {
            return Err(NeighborError::Malformed { x });
        }
    }
    if let Some(&(x, _)) = derivs.iter().find(|(_, d)| !d.is_finite()) {
        return Err(NeighborError::Malformed { x });
    }

    let fail = |condition, witness: Vec<f64>, detail: String| {
        Ok(ValidityReport::Fail {
            condition,
            witness,
            detail,
        })
    };

    for k in 1..xs.len() {
        let step = values[k] - values[k - 1];
        if step < -TIE_TOLERANCE {
            return fail(
                Condition::StrictlyIncreasing,
                vec![xs[k - 1], xs[k]],
                format!("f({}) = {} >= f({}) = {}", xs[k - 1], values[k - 1], xs[k], values[k]),
            );
        }
    }
    if let Some(&(x, d)) = derivs.iter().find(|(_, d)| *d <= 0.0) {
        return fail(
            Condition::StrictlyIncreasing,
            vec![x],
            format!("derivative {d} is not positive"),
        );
    }

    for &b in &breaks {
        let jump = f.evaluate(b) - f.left_limit(b);
        if jump.abs() > tol(f.evaluate(b)) {
            return fail(Condition::Continuous, vec![b], format!("jump of {jump}"));
        }
    }

    for w in derivs.windows(2) {
        let ((x0, d0), (x1, d1)) = (w[0], w[1]);
        if d1 > d0 + tol(d0) {
            return fail(
                Condition::Concave,
                vec![x0, x1],
                format!("derivative rises from {d0} to {d1}"),
            );
        }
    }

    for w in derivs.windows(2) {
        let ((x0, d0), (x1, d1)) = (w[0], w[1]);
        let (e0, e1) = (x0 * d0, x1 * d1);
        if e1 < e0 - tol(e0) {
            return fail(
                Condition::LogConvex,
                vec![x0, x1],
                format!("x f'(x) falls from {e0} to {e1}"),
            );
        }
    }
    Ok(ValidityReport::Pass)
}

fn log_grid_n(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi / lo).ln() / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| lo * (step * i as f64).exp()).collect();
    v[n - 1] = hi;
    v
}

/// A neighbor function that passed [`validate`]. Mechanisms accept only this.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidNeighborFunction(NeighborFunction);

impl ValidNeighborFunction {
    pub fn new(f: NeighborFunction) -> Result<Self, NeighborError> {
        Self::with_grid(f, &GridSpec::default())
    }

    pub fn with_grid(f: NeighborFunction, grid: &GridSpec) -> Result<Self, NeighborError> {
        match validate(&f, grid)? {
            ValidityReport::Pass => Ok(Self(f)),
            ValidityReport::Fail {
                condition,
                witness,
                detail,
            } => Err(NeighborError::Invalid {
                condition,
                witness,
                detail,
            }),
        }
    }

    pub fn function(&self) -> &NeighborFunction {
        &self.0
    }

    pub fn into_inner(self) -> NeighborFunction {
        self.0
    }
}

impl Deref for ValidNeighborFunction {
    type Target = NeighborFunction;

    fn deref(&self) -> &NeighborFunction {
        &self.0
    }
}
