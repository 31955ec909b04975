//! Bias and efficiency of inverse-variance weighting when variances are
//! estimated rather than known.
//!
//! Three small models have closed forms (known variances, independent
//! inverse-gamma variance estimates, variance tied to the value). The
//! ablation study replays the full pipeline on a two-level hierarchy of
//! identity, county and total queries.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mechanisms::{
    estimate_log, estimate_sqrt, log_estimator_variance, sqrt_estimator_variance, MechanismError,
};
use crate::microdata::{solve, Measurement, MicrodataError, ReconstructionProblem, SolveOptions};
use crate::numerics::{
    mean_and_se, pairwise_sum, sample_gamma, sample_inverse_gamma, standard_normal,
    NumericsError, RngStream,
};

#[derive(Debug, thiserror::Error)]
pub enum BiasSimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trial {trial}: {source}")]
    Solver {
        trial: usize,
        #[source]
        source: MicrodataError,
    },
    #[error("trial {trial}: {source}")]
    Estimator {
        trial: usize,
        #[source]
        source: MechanismError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn config_error(msg: impl Into<String>) -> BiasSimError {
    BiasSimError::Config(msg.into())
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let (mean, se) = mean_and_se(values);
        Self { mean, se }
    }
}

/// Inflation of the squared error when `n` equal-variance answers are
/// weighted by independent inverse-gamma variance estimates with
/// concentration `tau`: `n (3 + tau) / (1 + n (2 + tau))`.
pub fn case2_factor(n: usize, tau: f64) -> f64 {
    let n = n as f64;
    n * (3.0 + tau) / (1.0 + n * (2.0 + tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Case2Result {
    pub estimate: Stat,
    pub squared_error: Stat,
}

/// Monte-Carlo check of [`case2_factor`]. Each trial draws answers
/// `a_i ~ N(x, sigma^2)` and variance estimates `v_i ~ IG(2 + tau,
/// sigma^2 (1 + tau))`, and combines the answers with weights `1 / v_i`.
///
/// The weights are drawn directly as `Gamma(2 + tau, rate sigma^2 (1 + tau))`,
/// the distribution of `1 / v_i`, which also covers `tau = 0`.
pub fn case2_montecarlo(
    n: usize,
    tau: f64,
    sigma: f64,
    x: f64,
    trials: usize,
    seed: u64,
) -> Result<Case2Result, BiasSimError> {
    if n == 0 || trials == 0 {
        return Err(config_error("n and trials must be at least 1"));
    }
    if !(tau >= 0.0) || !(sigma > 0.0) {
        return Err(config_error("tau must be >= 0 and sigma > 0"));
    }
    let shape = 2.0 + tau;
    let scale = 1.0 / (sigma * sigma * (1.0 + tau));
    let estimates: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(seed, t as u64);
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..n {
                let a = x + sigma * standard_normal(&mut rng);
                let w = sample_gamma(&mut rng, shape, scale)?;
                num += w * a;
                den += w;
            }
            Ok(num / den)
        })
        .collect::<Result<_, NumericsError>>()?;
    let squared: Vec<f64> = estimates.iter().map(|e| (e - x) * (e - x)).collect();
    Ok(Case2Result {
        estimate: Stat::of(&estimates),
        squared_error: Stat::of(&squared),
    })
}

/// Expected inverse-variance combination of `n` answers whose variance
/// estimates equal the answers themselves, `a_j ~ IG(2 + x/c, x + x^2/c)`:
/// `x (n (2 + x/c) - n) / (n (2 + x/c) - 1)`.
pub fn case3_expected_guess(n: usize, x: f64, c: f64) -> f64 {
    let n = n as f64;
    let k = n * (2.0 + x / c);
    x * (k - n) / (k - 1.0)
}

/// Monte-Carlo mean of `n / sum(1 / a_j)` for the model of
/// [`case3_expected_guess`].
pub fn case3_montecarlo(
    n: usize,
    x: f64,
    c: f64,
    trials: usize,
    seed: u64,
) -> Result<Stat, BiasSimError> {
    if n == 0 || trials == 0 {
        return Err(config_error("n and trials must be at least 1"));
    }
    if !(x > 0.0) || !(c > 0.0) {
        return Err(config_error("x and c must be positive"));
    }
    let shape = 2.0 + x / c;
    let scale = x + x * x / c;
    let guesses: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(seed, t as u64);
            let mut inv = 0.0;
            for _ in 0..n {
                inv += 1.0 / sample_inverse_gamma(&mut rng, shape, scale)?;
            }
            Ok(n as f64 / inv)
        })
        .collect::<Result<_, NumericsError>>()?;
    Ok(Stat::of(&guesses))
}

/// Transform used by the ablation's releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTransform {
    Sqrt,
    Log,
    /// No transform: plain Gaussian answers with known variance.
    Identity,
}

/// Which variances feed the least-squares weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Estimated variances for every query.
    Est,
    /// True variances for every query.
    Act,
    /// Estimated for the identity query, true for the aggregates.
    Hybrid,
}

impl VarianceMode {
    pub const ALL: [VarianceMode; 3] = [VarianceMode::Est, VarianceMode::Act, VarianceMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            VarianceMode::Est => "Est",
            VarianceMode::Act => "Act",
            VarianceMode::Hybrid => "Hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub counties: usize,
    pub per_county: usize,
    pub true_value: f64,
    pub transform: AblationTransform,
    pub delta: f64,
    pub mu: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            counties: 50,
            per_county: 2,
            true_value: 10.0,
            transform: AblationTransform::Sqrt,
            delta: 0.5,
            mu: 1.0,
            trials: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: VarianceMode,
    pub id: Stat,
    pub county: Stat,
    pub total: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: AblationConfig,
    pub rows: Vec<AblationRow>,
    /// Share of sqrt variance estimates that hit the positivity floor.
    pub floor_rate: f64,
}

impl AblationTable {
    pub fn row(&self, mode: VarianceMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), BiasSimError> {
        writeln!(w, "mode,id_mse,id_se,county_mse,county_se,total_mse,total_se")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.mode.name(),
                r.id.mean,
                r.id.se,
                r.county.mean,
                r.county.se,
                r.total.mean,
                r.total.se
            )?;
        }
        Ok(())
    }
}

struct Layout {
    n: usize,
    counties: usize,
    rows: Vec<Vec<usize>>,
    truth: Vec<f64>,
}

fn layout(cfg: &AblationConfig) -> Layout {
    let n = cfg.counties * cfg.per_county;
    let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for c in 0..cfg.counties {
        rows.push((c * cfg.per_county..(c + 1) * cfg.per_county).collect());
    }
    rows.push((0..n).collect());
    let truth = rows
        .iter()
        .map(|r| r.len() as f64 * cfg.true_value)
        .collect();
    Layout {
        n,
        counties: cfg.counties,
        rows,
        truth,
    }
}

struct TrialOutcome {
    /// Per mode: mean squared error of identity, county and total answers.
    errors: Vec<[f64; 3]>,
    floored: usize,
}

fn run_trial(
    cfg: &AblationConfig,
    lay: &Layout,
    modes: &[VarianceMode],
    trial: usize,
) -> Result<TrialOutcome, BiasSimError> {
    let mut rng = RngStream::new(cfg.seed, trial as u64);
    let s = cfg.delta / cfg.mu;
    let m = lay.rows.len();
    let mut answers = Vec::with_capacity(m);
    let mut estimated = Vec::with_capacity(m);
    let mut actual = Vec::with_capacity(m);
    let mut floored = 0;
    for &x in &lay.truth {
        let z = standard_normal(&mut rng);
        let (value, est_var, true_var) = match cfg.transform {
            AblationTransform::Sqrt => {
                let e = estimate_sqrt(x.sqrt() + s * z, cfg.delta, cfg.mu);
                floored += e.floored as usize;
                (e.value, e.variance, sqrt_estimator_variance(x, cfg.delta, cfg.mu))
            }
            AblationTransform::Log => {
                let e = estimate_log(x.ln() + s * z, cfg.delta, cfg.mu)
                    .map_err(|source| BiasSimError::Estimator { trial, source })?;
                (e.value, e.variance, log_estimator_variance(x, cfg.delta, cfg.mu))
            }
            AblationTransform::Identity => (x + s * z, s * s, s * s),
        };
        answers.push(value);
        estimated.push(est_var);
        actual.push(true_var);
    }

    let mut errors = Vec::with_capacity(modes.len());
    for &mode in modes {
        let measurements = lay
            .rows
            .iter()
            .enumerate()
            .map(|(i, cols)| {
                let variance = match mode {
                    VarianceMode::Est => estimated[i],
                    VarianceMode::Act => actual[i],
                    VarianceMode::Hybrid if i < lay.n => estimated[i],
                    VarianceMode::Hybrid => actual[i],
                };
                Measurement {
                    set: 0,
                    group_key: String::new(),
                    columns: cols.clone(),
                    answer: answers[i],
                    weight: 1.0 / variance,
                }
            })
            .collect();
        let problem = ReconstructionProblem {
            attribute: None,
            variables: vec![String::new(); lay.n],
            set_labels: vec!["ablation".into()],
            measurements,
        };
        let sol = solve(&problem, &SolveOptions::default())
            .map_err(|source| BiasSimError::Solver { trial, source })?;
        let sq: Vec<f64> = sol
            .fitted
            .iter()
            .zip(&lay.truth)
            .map(|(f, t)| (f - t) * (f - t))
            .collect();
        let id = pairwise_sum(&sq[..lay.n]) / lay.n as f64;
        let county = pairwise_sum(&sq[lay.n..lay.n + lay.counties]) / lay.counties as f64;
        let total = sq[m - 1];
        errors.push([id, county, total]);
    }
    Ok(TrialOutcome { errors, floored })
}

/// Runs the ablation for the requested variance modes. All modes share the
/// same noisy answers in each trial, so their differences are not blurred
/// by independent noise.
pub fn ablation_run(
    cfg: &AblationConfig,
    modes: &[VarianceMode],
) -> Result<AblationTable, BiasSimError> {
    if cfg.counties == 0 || cfg.per_county == 0 || cfg.trials == 0 {
        return Err(config_error("counties, per_county and trials must be at least 1"));
    }
    if !(cfg.delta > 0.0) || !(cfg.mu > 0.0) || !(cfg.true_value > 0.0) {
        return Err(config_error("delta, mu and true_value must be positive"));
    }
    if modes.is_empty() {
        return Err(config_error("at least one variance mode is required"));
    }
    let lay = layout(cfg);
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &lay, modes, t))
        .collect::<Result<_, _>>()?;

    let rows = modes
        .iter()
        .enumerate()
        .map(|(k, &mode)| {
            let col = |c: usize| -> Vec<f64> { outcomes.iter().map(|o| o.errors[k][c]).collect() };
            AblationRow {
                mode,
                id: Stat::of(&col(0)),
                county: Stat::of(&col(1)),
                total: Stat::of(&col(2)),
            }
        })
        .collect();
    let floored: usize = outcomes.iter().map(|o| o.floored).sum();
    let floor_rate = floored as f64 / (cfg.trials * lay.rows.len()) as f64;
    if floor_rate > 0.0 {
        log::info!("variance floor applied to {:.4}% of estimates", 100.0 * floor_rate);
    }
    Ok(AblationTable {
        config: cfg.clone(),
        rows,
        floor_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case2_factor_values() {
        assert!((case2_factor(2, 1.0) - 8.0 / 7.0).abs() < 1e-15);
        assert!((case2_factor(1, 0.0) - 1.0).abs() < 1e-15);
        assert!((case2_factor(3, 1e12) - 1.0).abs() < 1e-9);
        assert!(case2_factor(5, 4.0) > 1.0);
    }

    #[test]
    fn case3_closed_form() {
        assert!((case3_expected_guess(1, 10.0, 1.0) - 10.0).abs() < 1e-12);
        assert!((case3_expected_guess(2, 10.0, 1.0) - 220.0 / 23.0).abs() < 1e-12);
        for n in 2..20 {
            assert!(case3_expected_guess(n, 10.0, 1.0) < 10.0);
        }
    }

    #[test]
    fn case2_small_run() {
        let r = case2_montecarlo(2, 1.0, 1.0, 10.0, 200_000, 1).unwrap();
        assert!((r.estimate.mean - 10.0).abs() < 4.0 * r.estimate.se);
        let want = 0.5 * case2_factor(2, 1.0);
        assert!((r.squared_error.mean - want).abs() < 4.0 * r.squared_error.se);
        let one = case2_montecarlo(1, 3.0, 2.0, 0.0, 200_000, 2).unwrap();
        assert!((one.squared_error.mean - 4.0).abs() < 4.0 * one.squared_error.se);
    }

    #[test]
    fn case3_small_run() {
        let r = case3_montecarlo(2, 10.0, 1.0, 200_000, 3).unwrap();
        assert!((r.mean - case3_expected_guess(2, 10.0, 1.0)).abs() < 4.0 * r.se);
        let one = case3_montecarlo(1, 10.0, 1.0, 200_000, 4).unwrap();
        assert!((one.mean - 10.0).abs() < 4.0 * one.se);
    }

    #[test]
    fn identity_transform_matches_gls() {
        // Known variance s^2 on every query: the fitted total is the GLS
        // estimate, whose variance has the closed form below.
        let cfg = AblationConfig {
            counties: 3,
            per_county: 2,
            transform: AblationTransform::Identity,
            delta: 1.0,
            trials: 40_000,
            seed: 5,
            ..AblationConfig::default()
        };
        let t = ablation_run(&cfg, &[VarianceMode::Act]).unwrap();
        // Each county: two identity answers and one county answer give the
        // county sum with variance 2/3; three such and the total answer:
        // 1 / (1/(3 * 2/3) + 1) = 2/3.
        let want = 2.0 / 3.0;
        let got = t.rows[0].total;
        assert!((got.mean - want).abs() < 4.0 * got.se, "{got:?}");
    }

    #[test]
    fn ablation_is_deterministic() {
        let cfg = AblationConfig { counties: 4, trials: 200, seed: 9, ..AblationConfig::default() };
        let a = ablation_run(&cfg, &VarianceMode::ALL).unwrap();
        let b = ablation_run(&cfg, &VarianceMode::ALL).unwrap();
        assert_eq!(a, b);
        assert!(ablation_run(&AblationConfig { trials: 0, ..cfg }, &VarianceMode::ALL).is_err());
    }
}
