//! Noise mechanisms, de-transformation estimators and probably-no-clipping
//! (PNC) upper bounds.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupBySumQuery, QueryAnswerVector};
use crate::neighbor::{NeighborFunction, ValidNeighborFunction};
use crate::numerics::{normal_quantile, pairwise_sum, standard_normal, NumericsError, RngStream};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("{what} must be positive and finite, got {value}")]
    Parameter { what: &'static str, value: f64 },
    #[error("confidence gamma must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("group `{group}`: f({value}) is not finite")]
    Domain { group: String, value: f64 },
    #[error("estimate overflowed for released value {0}")]
    Overflow(f64),
    #[error("no unbiased estimator for {0}; only sqrt_shift, log_shift and linear are supported")]
    UnsupportedEstimator(String),
    #[error("answer for `{0}` is not in transformed space")]
    NotTransformed(String),
    #[error("`{0}` is not an identity-query group key")]
    NotIdentity(String),
    #[error("record `{0}` has no PNC bound")]
    MissingBound(String),
    #[error("empty group `{0}` has no usable fallback bound for this neighbor function")]
    NoFallback(String),
    #[error("unknown {what} `{value}`")]
    Unknown { what: &'static str, value: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn positive(what: &'static str, value: f64) -> Result<f64, MechanismError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(MechanismError::Parameter { what, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    Exact,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Raw,
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    EstabGaussian,
    Neighbor,
    Pnc,
}

macro_rules! string_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = MechanismError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(MechanismError::Unknown { what: $what, value: s.to_string() }),
                }
            }
        }
    };
}

string_enum!(VarianceKind, "variance kind", VarianceKind::Exact => "exact", VarianceKind::Estimated => "estimated");
string_enum!(Space, "space", Space::Raw => "raw", Space::Transformed => "transformed");
string_enum!(Mechanism, "mechanism", Mechanism::EstabGaussian => "estab_gaussian", Mechanism::Neighbor => "neighbor", Mechanism::Pnc => "pnc");

/// One released group value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyAnswer {
    pub group_key: String,
    pub value: f64,
    pub variance: f64,
    pub variance_kind: VarianceKind,
    pub mechanism: Mechanism,
    pub space: Space,
}

/// Adds `N(0, (sensitivity / mu)^2)` to every query value.
pub fn estab_gaussian(
    values: &QueryAnswerVector,
    sensitivity: f64,
    mu: f64,
    rng: &mut RngStream,
) -> Result<Vec<NoisyAnswer>, MechanismError> {
    let sd = positive("sensitivity", sensitivity)? / positive("mu", mu)?;
    Ok(values
        .entries
        .iter()
        .map(|(k, v)| NoisyAnswer {
            group_key: k.clone(),
            value: v + sd * standard_normal(rng),
            variance: sd * sd,
            variance_kind: VarianceKind::Exact,
            mechanism: Mechanism::EstabGaussian,
            space: Space::Raw,
        })
        .collect())
}

/// Releases `f(sum) + N(0, (delta / mu)^2)` per group. The variance is
/// exact in transformed space.
pub fn neighbor_mech(
    data: &Dataset,
    query: &GroupBySumQuery,
    f: &ValidNeighborFunction,
    delta: f64,
    mu: f64,
    rng: &mut RngStream,
) -> Result<Vec<NoisyAnswer>, MechanismError> {
    neighbor_mech_on(&data.answer_exact(query), f, delta, mu, rng)
}

/// [`neighbor_mech`] on precomputed group sums.
pub fn neighbor_mech_on(
    sums: &QueryAnswerVector,
    f: &ValidNeighborFunction,
    delta: f64,
    mu: f64,
    rng: &mut RngStream,
) -> Result<Vec<NoisyAnswer>, MechanismError> {
    let sd = positive("delta", delta)? / positive("mu", mu)?;
    sums.entries
        .iter()
        .map(|(k, v)| {
            let fx = f.evaluate(*v);
            if !fx.is_finite() {
                return Err(MechanismError::Domain {
                    group: k.clone(),
                    value: *v,
                });
            }
            Ok(NoisyAnswer {
                group_key: k.clone(),
                value: fx + sd * standard_normal(rng),
                variance: sd * sd,
                variance_kind: VarianceKind::Exact,
                mechanism: Mechanism::Neighbor,
                space: Space::Transformed,
            })
        })
        .collect()
}

/// Unbiased raw-space estimate with a releasable variance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub variance: f64,
    /// The variance formula went below its floor and was clamped.
    pub floored: bool,
}

/// Estimator for a square-root release: `y^2 - (delta/mu)^2`.
///
/// The variance estimate `2 s^2 (2 x + s^2)` with `s = delta/mu` is
/// floored at `s^4` because negative estimates cannot serve as weights.
pub fn estimate_sqrt(y: f64, delta: f64, mu: f64) -> Estimate {
    let s2 = (delta / mu).powi(2);
    let value = y * y - s2;
    let raw = 2.0 * s2 * (2.0 * value + s2);
    let floor = s2 * s2;
    Estimate {
        value,
        variance: raw.max(floor),
        floored: !(raw >= floor),
    }
}

/// True variance of [`estimate_sqrt`] at raw value `x`.
pub fn sqrt_estimator_variance(x: f64, delta: f64, mu: f64) -> f64 {
    let s2 = (delta / mu).powi(2);
    2.0 * s2 * (2.0 * x + s2)
}

/// Estimator for a log release: `exp(y - (delta/mu)^2 / 2)` with variance
/// estimate `x^2 (exp((delta/mu)^2) - 1)`.
pub fn estimate_log(y: f64, delta: f64, mu: f64) -> Result<Estimate, MechanismError> {
    let s2 = (delta / mu).powi(2);
    let value = (y - 0.5 * s2).exp();
    let variance = value * value * s2.exp_m1();
    if !value.is_finite() || !variance.is_finite() {
        return Err(MechanismError::Overflow(y));
    }
    Ok(Estimate {
        value,
        variance,
        floored: false,
    })
}

/// True variance of [`estimate_log`] at raw value `x`.
pub fn log_estimator_variance(x: f64, delta: f64, mu: f64) -> f64 {
    let s2 = (delta / mu).powi(2);
    x * x * s2.exp_m1()
}

/// Converts transformed-space neighbor answers to raw-space estimates.
///
/// Shifted functions estimate `x + shift` and subtract the shift. Linear
/// functions invert exactly, so their variance stays exact. Returns the
/// answers and the number of floored variance estimates.
pub fn detransform(
    answers: &[NoisyAnswer],
    f: &NeighborFunction,
    delta: f64,
    mu: f64,
) -> Result<(Vec<NoisyAnswer>, usize), MechanismError> {
    positive("delta", delta)?;
    positive("mu", mu)?;
    let mut floored = 0;
    let mut out = Vec::with_capacity(answers.len());
    for a in answers {
        if a.space != Space::Transformed {
            return Err(MechanismError::NotTransformed(a.group_key.clone()));
        }
        let (value, variance, kind) = match f {
            NeighborFunction::SqrtShift { shift } => {
                let e = estimate_sqrt(a.value, delta, mu);
                floored += e.floored as usize;
                (e.value - shift, e.variance, VarianceKind::Estimated)
            }
            NeighborFunction::LogShift { shift } => {
                let e = estimate_log(a.value, delta, mu)?;
                (e.value - shift, e.variance, VarianceKind::Estimated)
            }
            NeighborFunction::Linear { d } => {
                let sd = d * delta / mu;
                (a.value * d, sd * sd, VarianceKind::Exact)
            }
            other => return Err(MechanismError::UnsupportedEstimator(other.to_string())),
        };
        out.push(NoisyAnswer {
            group_key: a.group_key.clone(),
            value,
            variance,
            variance_kind: kind,
            mechanism: a.mechanism,
            space: Space::Raw,
        });
    }
    Ok((out, floored))
}

/// `tau = Phi^{-1}((1 - gamma)^{1/count})`, computed from the upper tail so
/// precision survives `count` in the thousands.
pub fn pnc_tau(gamma: f64, count: usize) -> Result<f64, MechanismError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(MechanismError::Gamma(gamma));
    }
    if count == 0 {
        return Err(MechanismError::Parameter {
            what: "bound count",
            value: 0.0,
        });
    }
    let upper_tail = -((-gamma).ln_1p() / count as f64).exp_m1();
    Ok(-normal_quantile(upper_tail)?)
}

/// Per-record public upper bounds for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PncBounds {
    pub gamma: f64,
    pub tau: f64,
    /// Distance and budget of the identity release the bounds came from.
    pub delta: f64,
    pub mu_identity: f64,
    /// Primary key to upper bound.
    pub bounds: BTreeMap<String, f64>,
}

pub const IDENTITY_PREFIX: &str = "id=";

/// Builds bounds `f^{-1}(y + delta tau / mu)` from transformed identity
/// answers. `attributes_bounded` is the number of attributes bounded
/// simultaneously, so coverage holds jointly across all of them.
pub fn pnc_bounds(
    identity: &[NoisyAnswer],
    f: &ValidNeighborFunction,
    delta: f64,
    mu_identity: f64,
    gamma: f64,
    attributes_bounded: usize,
) -> Result<PncBounds, MechanismError> {
    positive("delta", delta)?;
    positive("mu", mu_identity)?;
    let tau = pnc_tau(gamma, attributes_bounded.max(1) * identity.len().max(1))?;
    let lift = delta * tau / mu_identity;
    let mut bounds = BTreeMap::new();
    for a in identity {
        if a.space != Space::Transformed {
            return Err(MechanismError::NotTransformed(a.group_key.clone()));
        }
        let pk = a
            .group_key
            .strip_prefix(IDENTITY_PREFIX)
            .ok_or_else(|| MechanismError::NotIdentity(a.group_key.clone()))?;
        bounds.insert(pk.to_string(), f.inverse(a.value + lift));
    }
    Ok(PncBounds {
        gamma,
        tau,
        delta,
        mu_identity,
        bounds,
    })
}

/// `u - f^{-1}(max(f(0), f(u) - delta))`: the largest change a record at the
/// bound can make while staying within distance `delta`.
pub fn pnc_sensitivity(f: &NeighborFunction, delta: f64, upper: f64) -> f64 {
    let lower = f.inverse(f.evaluate(0.0).max(f.evaluate(upper) - delta));
    (upper - lower).max(0.0)
}

/// Sum of values clipped at the group's largest bound, plus Gaussian noise
/// scaled to that bound's sensitivity. Universe groups without records
/// release pure noise calibrated to the bound of a zero-valued record.
pub fn pnc_mech(
    data: &Dataset,
    query: &GroupBySumQuery,
    bounds: &PncBounds,
    f: &ValidNeighborFunction,
    delta: f64,
    mu: f64,
    universe: Option<&[String]>,
    rng: &mut RngStream,
) -> Result<Vec<NoisyAnswer>, MechanismError> {
    positive("delta", delta)?;
    positive("mu", mu)?;
    let mut groups: BTreeMap<String, Vec<usize>> = data.group_indices(&query.grouper);
    if let Some(u) = universe {
        for k in u {
            groups.entry(k.clone()).or_default();
        }
    }
    let records = data.records();
    let mut out = Vec::with_capacity(groups.len());
    for (key, members) in groups {
        let (upper, clipped_sum) = if members.is_empty() {
            let f0 = f.evaluate(0.0);
            if !f0.is_finite() {
                return Err(MechanismError::NoFallback(key));
            }
            (f.inverse(f0 + bounds.delta * bounds.tau / bounds.mu_identity), 0.0)
        } else {
            let mut upper = 0.0_f64;
            for &i in &members {
                let pk = &records[i].primary_key;
                let u = *bounds
                    .bounds
                    .get(pk)
                    .ok_or_else(|| MechanismError::MissingBound(pk.clone()))?;
                upper = upper.max(u);
            }
            let clipped: Vec<f64> = members
                .iter()
                .map(|&i| records[i].value(query.attribute).min(upper))
                .collect();
            (upper, pairwise_sum(&clipped))
        };
        let sd = pnc_sensitivity(f, delta, upper) / mu;
        out.push(NoisyAnswer {
            group_key: key,
            value: clipped_sum + sd * standard_normal(rng),
            variance: sd * sd,
            variance_kind: VarianceKind::Exact,
            mechanism: Mechanism::Pnc,
            space: Space::Raw,
        });
    }
    Ok(out)
}
