//! Microdata reconstruction by inverse-variance weighted least squares.
//!
//! Each noisy group answer `a_i` with variance `v_i` contributes the term
//! `(q_i(x) - a_i)^2 / v_i`, where `q_i` sums the member records' values.
//! The minimiser is found with Jacobi-preconditioned conjugate gradients on
//! the normal equations.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{Attribute, Dataset};
use crate::mechanisms::{NoisyAnswer, Space};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MicrodataError {
    #[error("answer set `{set}`, group `{group}`: variance must be positive and finite, got {variance}")]
    Variance {
        set: String,
        group: String,
        variance: f64,
    },
    #[error("answer set `{set}`, group `{group}`: transformed-space answers must be converted with an estimator first")]
    Transformed { set: String, group: String },
    #[error("answer set `{set}` is for {found}, expected {expected}")]
    MixedAttributes {
        set: String,
        expected: Attribute,
        found: Attribute,
    },
    #[error("answer set `{set}`: group `{group}` has no membership entry")]
    UnknownGroup { set: String, group: String },
    #[error("answer set `{set}`, group `{group}`: unknown record `{record}`")]
    UnknownRecord {
        set: String,
        group: String,
        record: String,
    },
    #[error("answer set `{set}`, group `{group}` touches no records")]
    EmptyRow { set: String, group: String },
    #[error("measurement {row}: column {column} out of range for {variables} variables")]
    Column {
        row: usize,
        column: usize,
        variables: usize,
    },
    #[error("solver did not converge after {iterations} iterations (relative gradient norm {relative_gradient:e})")]
    NotConverged {
        iterations: usize,
        relative_gradient: f64,
    },
}

/// One noisy answer as a linear functional over the variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Set the row came from, for residual reporting.
    pub set: usize,
    pub group_key: String,
    pub columns: Vec<usize>,
    pub answer: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionProblem {
    pub attribute: Option<Attribute>,
    /// Primary keys, one variable each.
    pub variables: Vec<String>,
    pub set_labels: Vec<String>,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveOptions {
    pub nonnegative: bool,
    pub relative_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            nonnegative: false,
            relative_tolerance: 1e-8,
            max_iterations: 100_000,
        }
    }
}

/// Noisy answers for one query, with the group membership they refer to.
#[derive(Debug, Clone, Copy)]
pub struct AnswerSet<'a> {
    pub label: &'a str,
    pub attribute: Attribute,
    pub answers: &'a [NoisyAnswer],
    pub membership: &'a BTreeMap<String, Vec<String>>,
}

/// Builds one row per noisy answer over the given record universe.
pub fn build_problem(
    record_keys: &[String],
    sets: &[AnswerSet<'_>],
) -> Result<ReconstructionProblem, MicrodataError> {
    let index: HashMap<&str, usize> = record_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i))
        .collect();
    let attribute = sets.first().map(|s| s.attribute);
    let mut measurements = Vec::new();
    for (set_no, set) in sets.iter().enumerate() {
        if let Some(expected) = attribute {
            if set.attribute != expected {
                return Err(MicrodataError::MixedAttributes {
                    set: set.label.to_string(),
                    expected,
                    found: set.attribute,
                });
            }
        }
        for a in set.answers {
            let ctx = || (set.label.to_string(), a.group_key.clone());
            if a.space == Space::Transformed {
                let (set, group) = ctx();
                return Err(MicrodataError::Transformed { set, group });
            }
            if !(a.variance > 0.0) || !a.variance.is_finite() {
                let (set, group) = ctx();
                return Err(MicrodataError::Variance {
                    set,
                    group,
                    variance: a.variance,
                });
            }
            let members = set.membership.get(&a.group_key).ok_or_else(|| {
                let (set, group) = ctx();
                MicrodataError::UnknownGroup { set, group }
            })?;
            if members.is_empty() {
                let (set, group) = ctx();
                return Err(MicrodataError::EmptyRow { set, group });
            }
            let mut columns = Vec::with_capacity(members.len());
            for pk in members {
                let &c = index.get(pk.as_str()).ok_or_else(|| {
                    let (set, group) = ctx();
                    MicrodataError::UnknownRecord {
                        set,
                        group,
                        record: pk.clone(),
                    }
                })?;
                columns.push(c);
            }
            measurements.push(Measurement {
                set: set_no,
                group_key: a.group_key.clone(),
                columns,
                answer: a.value,
                weight: 1.0 / a.variance,
            });
        }
    }
    Ok(ReconstructionProblem {
        attribute,
        variables: record_keys.to_vec(),
        set_labels: sets.iter().map(|s| s.label.to_string()).collect(),
        measurements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetResidual {
    pub label: String,
    pub rows: usize,
    /// Root mean square of `(fitted - answer) / sqrt(variance)`.
    pub rms_standardized: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub values: Vec<f64>,
    pub iterations: usize,
    pub relative_gradient: f64,
    /// Variables with no single-record measurement; these received a tiny
    /// ridge penalty toward 0.
    pub underdetermined: Vec<String>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<SetResidual>,
}

/// Row-compressed 0/1 matrix with a column index for transposed products.
struct Design {
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
}

const PARALLEL_ROWS: usize = 20_000;

impl Design {
    fn new(n: usize, rows: Vec<Vec<usize>>) -> Self {
        let mut cols = vec![Vec::new(); n];
        for (i, r) in rows.iter().enumerate() {
            for &c in r {
                cols[c].push(i);
            }
        }
        Self { rows, cols }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let row = |r: &Vec<usize>| r.iter().map(|&c| x[c]).sum::<f64>();
        if self.rows.len() >= PARALLEL_ROWS {
            self.rows.par_iter().map(row).collect()
        } else {
            self.rows.iter().map(row).collect()
        }
    }

    fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        let col = |c: &Vec<usize>| c.iter().map(|&i| r[i]).sum::<f64>();
        if self.rows.len() >= PARALLEL_ROWS {
            self.cols.par_iter().map(col).collect()
        } else {
            self.cols.iter().map(col).collect()
        }
    }
}

/// Normal-equation operator `A^T W A + ridge`, restricted to a free set.
struct Normal<'a> {
    design: &'a Design,
    weights: &'a [f64],
    ridge: Vec<f64>,
}

impl Normal<'_> {
    fn apply(&self, x: &[f64], free: Option<&[bool]>) -> Vec<f64> {
        let mut ax = self.design.apply(x);
        for (v, w) in ax.iter_mut().zip(self.weights) {
            *v *= w;
        }
        let mut out = self.design.apply_transpose(&ax);
        for (j, o) in out.iter_mut().enumerate() {
            *o += self.ridge[j] * x[j];
            if let Some(f) = free {
                if !f[j] {
                    *o = 0.0;
                }
            }
        }
        out
    }

    fn diagonal(&self) -> Vec<f64> {
        self.design
            .cols
            .iter()
            .zip(&self.ridge)
            .map(|(c, r)| c.iter().map(|&i| self.weights[i]).sum::<f64>() + r)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct CgOutcome {
    x: Vec<f64>,
    iterations: usize,
    relative_gradient: f64,
}

/// Preconditioned CG for `N x = rhs` over the free variables, starting from
/// `x0` (fixed variables keep their starting values, which must be 0).
fn conjugate_gradient(
    op: &Normal<'_>,
    diag: &[f64],
    rhs: &[f64],
    x0: Vec<f64>,
    free: Option<&[bool]>,
    opts: &SolveOptions,
) -> Result<CgOutcome, MicrodataError> {
    let is_free = |j: usize| free.is_none_or(|f| f[j]);
    let masked_rhs: Vec<f64> = rhs
        .iter()
        .enumerate()
        .map(|(j, &v)| if is_free(j) { v } else { 0.0 })
        .collect();
    let rhs_norm = norm(&masked_rhs);
    let mut x = x0;
    if rhs_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome {
            x,
            iterations: 0,
            relative_gradient: 0.0,
        });
    }
    let nx = op.apply(&x, free);
    let mut r: Vec<f64> = masked_rhs.iter().zip(&nx).map(|(b, a)| b - a).collect();
    let precondition = |r: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(diag)
            .map(|(v, d)| if *d > 0.0 { v / d } else { 0.0 })
            .collect()
    };
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = norm(&r) / rhs_norm;
    let mut it = 0;
    while rel > opts.relative_tolerance {
        if it >= opts.max_iterations {
            return Err(MicrodataError::NotConverged {
                iterations: it,
                relative_gradient: rel,
            });
        }
        let np = op.apply(&p, free);
        let curvature = dot(&p, &np);
        if !(curvature > 0.0) {
            break;
        }
        let alpha = rz / curvature;
        for j in 0..x.len() {
            x[j] += alpha * p[j];
            r[j] -= alpha * np[j];
        }
        it += 1;
        // Recompute the true residual periodically to stop drift.
        if it % 50 == 0 {
            let nx = op.apply(&x, free);
            for j in 0..r.len() {
                r[j] = masked_rhs[j] - nx[j];
            }
        }
        rel = norm(&r) / rhs_norm;
        z = precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for j in 0..p.len() {
            p[j] = z[j] + beta * p[j];
        }
    }
    Ok(CgOutcome {
        x,
        iterations: it,
        relative_gradient: rel,
    })
}

/// Ridge multiplier relative to the largest weight.
const RIDGE_FACTOR: f64 = 1e-12;

/// Minimises the weighted objective. With `nonnegative`, the constrained
/// minimiser is found by an active-set method whose subproblems use the
/// same CG solver and stopping rule.
pub fn solve(
    problem: &ReconstructionProblem,
    opts: &SolveOptions,
) -> Result<Solution, MicrodataError> {
    let n = problem.variables.len();
    for (i, m) in problem.measurements.iter().enumerate() {
        if m.columns.is_empty() {
            return Err(MicrodataError::EmptyRow {
                set: problem.set_labels.get(m.set).cloned().unwrap_or_default(),
                group: m.group_key.clone(),
            });
        }
        if let Some(&c) = m.columns.iter().find(|&&c| c >= n) {
            return Err(MicrodataError::Column {
                row: i,
                column: c,
                variables: n,
            });
        }
    }
    let design = Design::new(
        n,
        problem.measurements.iter().map(|m| m.columns.clone()).collect(),
    );
    let weights: Vec<f64> = problem.measurements.iter().map(|m| m.weight).collect();
    let max_weight = weights.iter().copied().fold(0.0, f64::max);

    let mut has_singleton = vec![false; n];
    for m in &problem.measurements {
        if m.columns.len() == 1 {
            has_singleton[m.columns[0]] = true;
        }
    }
    let ridge: Vec<f64> = has_singleton
        .iter()
        .map(|&s| if s { 0.0 } else { RIDGE_FACTOR * max_weight.max(1.0) })
        .collect();
    let underdetermined: Vec<String> = has_singleton
        .iter()
        .enumerate()
        .filter(|(_, s)| !**s)
        .map(|(j, _)| problem.variables[j].clone())
        .collect();

    let op = Normal {
        design: &design,
        weights: &weights,
        ridge,
    };
    let diag = op.diagonal();
    let weighted_answers: Vec<f64> = problem
        .measurements
        .iter()
        .map(|m| m.weight * m.answer)
        .collect();
    let rhs = design.apply_transpose(&weighted_answers);

    let unconstrained = conjugate_gradient(&op, &diag, &rhs, vec![0.0; n], None, opts)?;
    let (values, iterations, relative_gradient) = if opts.nonnegative {
        active_set(&op, &diag, &rhs, unconstrained, opts)?
    } else {
        (
            unconstrained.x,
            unconstrained.iterations,
            unconstrained.relative_gradient,
        )
    };

    let fitted = design.apply(&values);
    let residuals = residual_report(problem, &fitted);
    Ok(Solution {
        values,
        iterations,
        relative_gradient,
        underdetermined,
        fitted,
        residuals,
    })
}

/// Lawson-Hanson style active set, warm-started from the clipped
/// unconstrained solution.
fn active_set(
    op: &Normal<'_>,
    diag: &[f64],
    rhs: &[f64],
    start: CgOutcome,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, usize, f64), MicrodataError> {
    let n = rhs.len();
    let rhs_norm = norm(rhs).max(f64::MIN_POSITIVE);
    let mut free: Vec<bool> = start.x.iter().map(|&v| v > 0.0).collect();
    let mut x: Vec<f64> = start.x.iter().map(|&v| v.max(0.0)).collect();
    let mut iterations = start.iterations;
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        // Inner loop: solve on the free set, backtracking into the feasible region.
        loop {
            let x0: Vec<f64> = (0..n).map(|j| if free[j] { x[j] } else { 0.0 }).collect();
            let sub = conjugate_gradient(op, diag, rhs, x0, Some(&free), opts)?;
            iterations += sub.iterations;
            let z = sub.x;
            if (0..n).all(|j| !free[j] || z[j] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = 1.0_f64;
            for j in 0..n {
                if free[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for j in 0..n {
                if free[j] {
                    x[j] += alpha * (z[j] - x[j]);
                }
            }
            let scale = x.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            for j in 0..n {
                if free[j] && x[j] <= 1e-14 * scale {
                    x[j] = 0.0;
                    free[j] = false;
                }
            }
            if !free.iter().any(|&f| f) {
                break;
            }
        }
        // Gradient of the negated objective at x.
        let nx = op.apply(&x, None);
        let grad: Vec<f64> = rhs.iter().zip(&nx).map(|(b, a)| b - a).collect();
        let candidate = (0..n)
            .filter(|&j| !free[j])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let free_grad: Vec<f64> = (0..n).map(|j| if free[j] { grad[j] } else { 0.0 }).collect();
        let rel = norm(&free_grad) / rhs_norm;
        match candidate {
            Some(j) if grad[j] > opts.relative_tolerance * rhs_norm => free[j] = true,
            _ => return Ok((x, iterations, rel)),
        }
    }
    let nx = op.apply(&x, None);
    let grad: Vec<f64> = rhs.iter().zip(&nx).map(|(b, a)| b - a).collect();
    Err(MicrodataError::NotConverged {
        iterations,
        relative_gradient: norm(&grad) / rhs_norm,
    })
}

fn residual_report(problem: &ReconstructionProblem, fitted: &[f64]) -> Vec<SetResidual> {
    let mut acc: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); problem.set_labels.len()];
    for (m, f) in problem.measurements.iter().zip(fitted) {
        let r = f - m.answer;
        let e = &mut acc[m.set];
        e.0 += 1;
        e.1 += r * r * m.weight;
        e.2 = e.2.max(r.abs());
    }
    problem
        .set_labels
        .iter()
        .zip(acc)
        .map(|(label, (rows, ss, max_abs))| SetResidual {
            label: label.clone(),
            rows,
            rms_standardized: if rows > 0 { (ss / rows as f64).sqrt() } else { 0.0 },
            max_abs,
        })
        .collect()
}

/// Replaces one attribute of `base` with reconstructed values, matched by
/// primary key. Records not in the problem keep their current value.
pub fn apply_solution(
    base: &mut Dataset,
    problem: &ReconstructionProblem,
    solution: &Solution,
) -> Result<(), MicrodataError> {
    let Some(attribute) = problem.attribute else {
        return Ok(());
    };
    let values: HashMap<&str, f64> = problem
        .variables
        .iter()
        .map(String::as_str)
        .zip(solution.values.iter().copied())
        .collect();
    let mut records = base.records().to_vec();
    for r in &mut records {
        if let Some(v) = values.get(r.primary_key.as_str()) {
            r.values[attribute.index()] = *v;
        }
    }
    *base = Dataset::new(records).expect("primary keys unchanged");
    Ok(())
}
