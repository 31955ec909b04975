//! Run configuration.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! dataset = "establishments.csv"     # relative to this file
//! output_dir = "out"
//! seed = 7
//! total_budget = 2.31
//! gamma = 0.01                       # PNC confidence, default 0.01
//! release_transformed = false        # keep neighbor answers in f-space
//!
//! [attributes.m1emp]
//! neighbor = "sqrt"                  # or sqrt_shift:a, log_shift:a, linear:d, or a table
//! delta = 0.5
//!
//! [[queries]]
//! grouper = "identity"               # identity, total, county, naics:k, county-naics:k
//! mechanism = "neighbor"             # neighbor, pnc, estab_gaussian
//! budgets = { m1emp = 0.7 }
//!
//! [universe]                         # optional: publicly known groups per grouper
//! county = ["state=01|county=005"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use estab_dp::accountant::compose;
use estab_dp::dataset::{Attribute, Grouper};
use estab_dp::mechanisms::Mechanism;
use estab_dp::neighbor::{NeighborFunction, ValidNeighborFunction};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("unknown attribute `{0}`")]
    Attribute(String),
    #[error("query {query} spends budget on {attribute}, which has no [attributes.{attribute}] section")]
    UnconfiguredAttribute { query: usize, attribute: Attribute },
    #[error("query {query}: budget for {attribute} must be positive and finite, got {mu}")]
    Budget {
        query: usize,
        attribute: Attribute,
        mu: f64,
    },
    #[error("attribute {attribute}: delta must be positive and finite, got {delta}")]
    Delta { attribute: Attribute, delta: f64 },
    #[error("invalid neighbor function for {attribute}: {message}")]
    Neighbor { attribute: Attribute, message: String },
    #[error("unrecognised neighbor function `{0}`")]
    NeighborSpec(String),
    #[error("workload composes to {composed} which exceeds the declared total budget {total}")]
    OverBudget { composed: f64, total: f64 },
    #[error("query {query} ({grouper}/{attribute}) uses pnc, but no earlier identity query answers {attribute} with the neighbor mechanism")]
    MissingIdentity {
        query: usize,
        grouper: Grouper,
        attribute: Attribute,
    },
    #[error("query {query}: estab_gaussian needs a linear neighbor function for {attribute}")]
    GaussianNeedsLinear { query: usize, attribute: Attribute },
    #[error("gamma must lie in (0, 1), got {0}")]
    Gamma(f64),
    #[error("total_budget must be positive and finite, got {0}")]
    Total(f64),
    #[error("universe grouper `{0}` is not valid")]
    UniverseGrouper(String),
}

/// Neighbor function written either as a short string or as a full table.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum NeighborSpec {
    Short(String),
    Full(NeighborFunction),
}

/// Parses `sqrt`, `log`, `sqrt_shift:a`, `log_shift:a`, `linear:d`, or JSON.
pub fn parse_neighbor(spec: &str) -> Result<NeighborFunction, ConfigError> {
    let spec = spec.trim();
    let bad = || ConfigError::NeighborSpec(spec.to_string());
    if spec.starts_with('{') {
        return serde_json::from_str(spec).map_err(|_| bad());
    }
    let (name, arg) = match spec.split_once(':') {
        Some((n, a)) => (n, Some(a.parse::<f64>().map_err(|_| bad())?)),
        None => (spec, None),
    };
    let f = match (name, arg) {
        ("sqrt", None) => Ok(NeighborFunction::sqrt()),
        ("log", None) => Ok(NeighborFunction::log()),
        ("sqrt_shift", Some(a)) => NeighborFunction::sqrt_shift(a),
        ("log_shift", Some(a)) => NeighborFunction::log_shift(a),
        ("linear", Some(d)) => NeighborFunction::linear(d),
        _ => return Err(bad()),
    };
    f.map_err(|_| bad())
}

impl NeighborSpec {
    fn resolve(&self) -> Result<NeighborFunction, ConfigError> {
        match self {
            NeighborSpec::Short(s) => parse_neighbor(s),
            NeighborSpec::Full(f) => Ok(f.clone()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSettings {
    pub neighbor: NeighborSpec,
    pub delta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub grouper: Grouper,
    pub mechanism: Mechanism,
    pub budgets: BTreeMap<String, f64>,
}

fn default_gamma() -> f64 {
    0.01
}

/// The file as written.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub total_budget: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub release_transformed: bool,
    pub attributes: BTreeMap<String, AttributeSettings>,
    pub queries: Vec<QuerySpec>,
    #[serde(default)]
    pub universe: BTreeMap<String, Vec<String>>,
}

/// Protection settings for one attribute.
#[derive(Debug, Clone)]
pub struct AttributeProtection {
    pub function: ValidNeighborFunction,
    pub delta: f64,
}

/// One (query, attribute) release, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkItem {
    /// Position of the query in the workload, from 0.
    pub query: usize,
    /// Query label used in outputs; repeated groupers get `#n` suffixes.
    pub label: String,
    pub grouper: Grouper,
    pub attribute: Attribute,
    pub mechanism: Mechanism,
    pub mu: f64,
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct Plan {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub total_budget: f64,
    pub gamma: f64,
    pub release_transformed: bool,
    pub attributes: BTreeMap<Attribute, AttributeProtection>,
    pub work: Vec<WorkItem>,
    pub universe: BTreeMap<Grouper, Vec<String>>,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn plan(&self) -> Result<Plan, ConfigError> {
        if !(self.total_budget > 0.0) || !self.total_budget.is_finite() {
            return Err(ConfigError::Total(self.total_budget));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        let mut attributes = BTreeMap::new();
        for (name, s) in &self.attributes {
            let attribute: Attribute = name
                .parse()
                .map_err(|_| ConfigError::Attribute(name.clone()))?;
            if !(s.delta > 0.0) || !s.delta.is_finite() {
                return Err(ConfigError::Delta {
                    attribute,
                    delta: s.delta,
                });
            }
            let function = ValidNeighborFunction::new(s.neighbor.resolve()?).map_err(|e| {
                ConfigError::Neighbor {
                    attribute,
                    message: e.to_string(),
                }
            })?;
            attributes.insert(
                attribute,
                AttributeProtection {
                    function,
                    delta: s.delta,
                },
            );
        }

        let mut work = Vec::new();
        let mut seen: BTreeMap<Grouper, usize> = BTreeMap::new();
        for (qi, q) in self.queries.iter().enumerate() {
            let n = seen.entry(q.grouper).or_insert(0);
            *n += 1;
            let label = if *n == 1 {
                q.grouper.to_string()
            } else {
                format!("{}#{}", q.grouper, n)
            };
            let mut budgets: Vec<(Attribute, f64)> = Vec::new();
            for (name, &mu) in &q.budgets {
                let attribute: Attribute = name
                    .parse()
                    .map_err(|_| ConfigError::Attribute(name.clone()))?;
                budgets.push((attribute, mu));
            }
            budgets.sort_by_key(|(a, _)| *a);
            for (attribute, mu) in budgets {
                if !(mu > 0.0) || !mu.is_finite() {
                    return Err(ConfigError::Budget {
                        query: qi + 1,
                        attribute,
                        mu,
                    });
                }
                let protection = attributes
                    .get(&attribute)
                    .ok_or(ConfigError::UnconfiguredAttribute {
                        query: qi + 1,
                        attribute,
                    })?;
                match q.mechanism {
                    Mechanism::Pnc => {
                        let has_identity = work.iter().any(|w: &WorkItem| {
                            w.grouper == Grouper::Identity
                                && w.mechanism == Mechanism::Neighbor
                                && w.attribute == attribute
                        });
                        if !has_identity {
                            return Err(ConfigError::MissingIdentity {
                                query: qi + 1,
                                grouper: q.grouper,
                                attribute,
                            });
                        }
                    }
                    Mechanism::EstabGaussian => {
                        if !matches!(
                            protection.function.function(),
                            NeighborFunction::Linear { .. }
                        ) {
                            return Err(ConfigError::GaussianNeedsLinear {
                                query: qi + 1,
                                attribute,
                            });
                        }
                    }
                    Mechanism::Neighbor => {}
                }
                work.push(WorkItem {
                    query: qi,
                    label: label.clone(),
                    grouper: q.grouper,
                    attribute,
                    mechanism: q.mechanism,
                    mu,
                });
            }
        }

        let mus: Vec<f64> = work.iter().map(|w| w.mu).collect();
        let composed = compose(&mus).expect("budgets validated above");
        if composed > self.total_budget * (1.0 + 1e-12) {
            return Err(ConfigError::OverBudget {
                composed,
                total: self.total_budget,
            });
        }

        let mut universe = BTreeMap::new();
        for (g, keys) in &self.universe {
            let grouper: Grouper = g
                .parse()
                .map_err(|_| ConfigError::UniverseGrouper(g.clone()))?;
            let mut keys = keys.clone();
            keys.sort();
            keys.dedup();
            universe.insert(grouper, keys);
        }

        Ok(Plan {
            dataset: self.dataset.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            total_budget: self.total_budget,
            gamma: self.gamma,
            release_transformed: self.release_transformed,
            attributes,
            work,
            universe,
        })
    }
}
