//! Special functions and reproducible samplers.
//!
//! Every random draw in the crate goes through an [`RngStream`], a ChaCha
//! generator keyed by `(seed, stream_id)`. Two streams with the same key
//! produce the same sequence regardless of which thread owns them, which is
//! what makes the Monte-Carlo harnesses reproducible under `rayon`.

use std::f64::consts::{PI, SQRT_2};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{what} is outside its domain: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("concentration vector must not be empty")]
    EmptyConcentration,
}

fn domain(what: &'static str, value: f64) -> NumericsError {
    NumericsError::Domain { what, value }
}

/// Deterministic random stream identified by a seed and a stream index.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream under the same seed, for nested keying such as
    /// `(query, attribute)` or `(trial, phase)`.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    /// Uniform draw on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            // 53 random bits, shifted half an ulp off zero.
            let u = ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 && u < 1.0 {
                return u;
            }
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Standard normal CDF. Saturates to 0 or 1 in the far tails.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Inverse of [`normal_cdf`].
///
/// Wichura's AS241 (PPND16) rational approximation followed by one Newton
/// step. The Newton correction is taken on the lower tail so it keeps full
/// relative precision for `p` close to 1.
pub fn normal_quantile(p: f64) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(domain("probability", p));
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    let x = ppnd16(p);
    if !x.is_finite() {
        return x;
    }
    let density = normal_pdf(x);
    if density > 0.0 {
        x - (normal_cdf(x) - p) / density
    } else {
        x
    }
}

#[allow(clippy::excessive_precision)]
fn ppnd16(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((r * 2509.0809287301226727 + 33430.575583588128105) * r
            + 67265.770927008700853)
            * r
            + 45921.953931549871457)
            * r
            + 13731.693765509461125)
            * r
            + 1971.5909503065514427)
            * r
            + 133.14166789178437745)
            * r
            + 3.387132872796366608;
        let den = ((((((r * 5226.495278852545925 + 28729.085735721942674) * r
            + 39307.89580009271061)
            * r
            + 21213.794301586595867)
            * r
            + 5394.1960214247511077)
            * r
            + 687.1870074920579083)
            * r
            + 42.313330701600911252)
            * r
            + 1.0;
        return q * num / den;
    }

    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((r * 7.7454501427834140764e-4 + 0.0227238449892691845833) * r
            + 0.24178072517745061177)
            * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734;
        let den = ((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r
            + 0.0151986665636164571966)
            * r
            + 0.14810397642748007459)
            * r
            + 0.68976733498510000455)
            * r
            + 1.6763848301838038494)
            * r
            + 2.05319162663775882187)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r
            + 0.0012426609473880784386)
            * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772;
        let den = ((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r
            + 1.8463183175100546818e-5)
            * r
            + 7.868691311456132591e-4)
            * r
            + 0.0148753612908506148525)
            * r
            + 0.13692988092273580531)
            * r
            + 0.59983220655588793769)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

pub fn sample_normal(rng: &mut RngStream, mean: f64, sd: f64) -> Result<f64, NumericsError> {
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(domain("standard deviation", sd));
    }
    if sd == 0.0 {
        return Ok(mean);
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(mean + sd * z)
}

/// Standard normal draw; infallible shorthand used in hot loops.
pub fn standard_normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma draw with the shape/scale parameterisation (mean `shape * scale`).
pub fn sample_gamma(rng: &mut RngStream, shape: f64, scale: f64) -> Result<f64, NumericsError> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(domain("gamma shape", shape));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(domain("gamma scale", scale));
    }
    let dist = Gamma::new(shape, scale).map_err(|_| domain("gamma shape", shape))?;
    Ok(dist.sample(rng))
}

/// Inverse-gamma draw `1 / Gamma(shape, rate = scale)`; mean `scale / (shape - 1)`.
///
/// Shapes at or below 2 are rejected: the distribution exists there, but its
/// variance does not, and the weighted least-squares bias analysis needs it.
pub fn sample_inverse_gamma(
    rng: &mut RngStream,
    shape: f64,
    scale: f64,
) -> Result<f64, NumericsError> {
    if !(shape > 2.0) || !shape.is_finite() {
        return Err(domain("inverse-gamma shape (must exceed 2)", shape));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(domain("inverse-gamma scale", scale));
    }
    Ok(1.0 / sample_gamma(rng, shape, 1.0 / scale)?)
}

/// Dirichlet draw, renormalised so the entries sum to one.
///
/// Gamma variates are generated in log space (`Gamma(a) = Gamma(a + 1) U^(1/a)`
/// for `a < 1`) so very small concentrations do not underflow to an all-zero
/// vector.
pub fn sample_dirichlet(
    rng: &mut RngStream,
    concentration: &[f64],
) -> Result<Vec<f64>, NumericsError> {
    if concentration.is_empty() {
        return Err(NumericsError::EmptyConcentration);
    }
    if let Some(&bad) = concentration
        .iter()
        .find(|&&a| !(a > 0.0) || !a.is_finite())
    {
        return Err(domain("dirichlet concentration", bad));
    }
    if concentration.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut logs = Vec::with_capacity(concentration.len());
    for &alpha in concentration {
        let log_g = if alpha < 1.0 {
            sample_gamma(rng, alpha + 1.0, 1.0)?.ln() + rng.uniform_open().ln() / alpha
        } else {
            sample_gamma(rng, alpha, 1.0)?.ln()
        };
        logs.push(log_g);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total = pairwise_sum(&p);
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// Pairwise (tree) summation. Order of operations depends only on the slice
/// length, so reductions are reproducible.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = pairwise_sum(values) / n as f64;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}
