//! Privacy-budget accounting.
//!
//! Gaussian-style guarantees compose by the square root of the sum of
//! squares. The ledger enforces that rule against a declared total.

use serde::{Deserialize, Serialize};

use crate::neighbor::{compose_intersect, DistanceParams, NeighborError, NeighborFunction};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("budget must be nonnegative and finite, got {0}")]
    Negative(f64),
    #[error("total budget must be positive and finite, got {0}")]
    Total(f64),
    #[error("group size must be at least 1, got {0}")]
    GroupSize(u32),
    #[error("registering `{label}` (mu = {mu}) would raise the composed budget to {would_be} > {total}")]
    Exhausted {
        label: String,
        mu: f64,
        would_be: f64,
        total: f64,
    },
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
}

fn check(mu: f64) -> Result<f64, AccountantError> {
    if mu >= 0.0 && mu.is_finite() {
        Ok(mu)
    } else {
        Err(AccountantError::Negative(mu))
    }
}

/// Square root of the sum of squares.
pub fn compose(mus: &[f64]) -> Result<f64, AccountantError> {
    let mut sq = Vec::with_capacity(mus.len());
    for &m in mus {
        let m = check(m)?;
        sq.push(m * m);
    }
    Ok(crate::numerics::pairwise_sum(&sq).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupGuarantee {
    pub mu: f64,
    pub distances: DistanceParams,
}

/// Guarantee for changing a group of `m` records, each within the original
/// distance: the budget and the distances both scale by `m`.
pub fn group_privacy(
    mu: f64,
    m: u32,
    distances: &DistanceParams,
) -> Result<GroupGuarantee, AccountantError> {
    let mu = check(mu)?;
    if m < 1 {
        return Err(AccountantError::GroupSize(m));
    }
    Ok(GroupGuarantee {
        mu: m as f64 * mu,
        distances: distances.scaled(m as f64),
    })
}

/// Budget for distinguishing the two ends of a chain of `establishments`
/// pairwise neighbors, as when a whole firm is swapped one location at a
/// time: `(establishments - 1) * mu`.
pub fn firm_chain_mu(mu: f64, establishments: u32) -> Result<f64, AccountantError> {
    let mu = check(mu)?;
    if establishments < 1 {
        return Err(AccountantError::GroupSize(establishments));
    }
    Ok((establishments - 1) as f64 * mu)
}

/// One release described by its budget and neighbor function.
#[derive(Debug, Clone, PartialEq)]
pub struct Release<'a> {
    pub mu: f64,
    pub function: &'a NeighborFunction,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneousReport {
    pub function: NeighborFunction,
    pub delta: f64,
    pub mu: f64,
}

/// Joint guarantee of two releases protected under different neighbor
/// functions: the intersection function at unit distance, with composed budget.
pub fn heterogeneous_report(
    a: &Release<'_>,
    b: &Release<'_>,
) -> Result<HeterogeneousReport, AccountantError> {
    let function = compose_intersect(a.function, a.delta, b.function, b.delta)?;
    Ok(HeterogeneousReport {
        function,
        delta: 1.0,
        mu: compose(&[a.mu, b.mu])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub mu: f64,
    pub neighbor_function: String,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    total_budget: f64,
    entries: Vec<LedgerEntry>,
}

/// Slack for the exhaustion check, so a budget declared at its rounded
/// composed value is not rejected by the last ulp.
const EXHAUSTION_SLACK: f64 = 1e-12;

impl BudgetLedger {
    pub fn new(total_budget: f64) -> Result<Self, AccountantError> {
        if !(total_budget > 0.0) || !total_budget.is_finite() {
            return Err(AccountantError::Total(total_budget));
        }
        Ok(Self {
            total_budget,
            entries: Vec::new(),
        })
    }

    pub fn total_budget(&self) -> f64 {
        self.total_budget
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn composed(&self) -> f64 {
        let mus: Vec<f64> = self.entries.iter().map(|e| e.mu).collect();
        compose(&mus).expect("entries are validated on registration")
    }

    /// Composed budget if `mu` were registered next.
    pub fn would_compose_to(&self, mu: f64) -> Result<f64, AccountantError> {
        let c = self.composed();
        let mu = check(mu)?;
        Ok((c * c + mu * mu).sqrt())
    }

    /// Records a release. Fails, leaving the ledger unchanged, if the
    /// composed total would exceed the declared budget.
    pub fn register(
        &mut self,
        label: impl Into<String>,
        mu: f64,
        neighbor_function: &NeighborFunction,
        delta: f64,
    ) -> Result<(), AccountantError> {
        let label = label.into();
        let would_be = self.would_compose_to(mu)?;
        if would_be > self.total_budget * (1.0 + EXHAUSTION_SLACK) {
            return Err(AccountantError::Exhausted {
                label,
                mu,
                would_be,
                total: self.total_budget,
            });
        }
        self.entries.push(LedgerEntry {
            label,
            mu,
            neighbor_function: neighbor_function.to_string(),
            delta,
        });
        Ok(())
    }
}
