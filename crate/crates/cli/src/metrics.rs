//! Accuracy metrics comparing reconstructed and true group-by answers.
//!
//! Quantiles use linear interpolation between order statistics (the
//! "type 7" convention): for sorted `x[0..n]` and probability `p`, the
//! quantile sits at fractional index `(n - 1) p`.

use std::io::Write;

use anyhow::Result;
use estab_dp::dataset::{format_value, Dataset, GroupBySumQuery};
use serde::Serialize;

/// Type-7 quantile of already sorted data. `None` when empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Quartiles {
        q1: quantile_sorted(&v, 0.25)?,
        median: quantile_sorted(&v, 0.5)?,
        q3: quantile_sorted(&v, 0.75)?,
    })
}

/// `|x - est| / (x + 1)`, defined for zero cells.
pub fn relative_abs_diff(truth: f64, estimate: f64) -> f64 {
    (truth - estimate).abs() / (truth + 1.0)
}

/// One group's true and reconstructed values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupPair {
    pub group_key: String,
    pub true_value: f64,
    pub estimate: f64,
}

impl GroupPair {
    pub fn signed(&self) -> f64 {
        self.estimate - self.true_value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query: String,
    pub groups: usize,
    pub signed: Option<Quartiles>,
    pub mean_signed: f64,
    pub mean_abs: f64,
    pub median_abs: f64,
    pub mean_relative: f64,
    pub median_relative: f64,
    /// Share of groups whose estimate lies within 3% of the true value.
    pub within_3pct: f64,
    /// Groups present in the truth but not in the reconstruction.
    pub missing_from_estimate: Vec<String>,
    /// Groups present in the reconstruction but not in the truth.
    pub missing_from_truth: Vec<String>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5).unwrap_or(0.0)
}

/// Metrics over matched groups. Unmatched keys are reported, not fatal.
pub fn query_metrics(
    query: &str,
    pairs: &[GroupPair],
    missing_from_estimate: Vec<String>,
    missing_from_truth: Vec<String>,
) -> QueryMetrics {
    let signed: Vec<f64> = pairs.iter().map(GroupPair::signed).collect();
    let abs: Vec<f64> = signed.iter().map(|d| d.abs()).collect();
    let rel: Vec<f64> = pairs
        .iter()
        .map(|p| relative_abs_diff(p.true_value, p.estimate))
        .collect();
    let within = pairs
        .iter()
        .filter(|p| (p.estimate - p.true_value).abs() <= 0.03 * p.true_value.abs())
        .count();
    QueryMetrics {
        query: query.to_string(),
        groups: pairs.len(),
        signed: quartiles(&signed),
        mean_signed: mean(&signed),
        mean_abs: mean(&abs),
        median_abs: median(&abs),
        mean_relative: mean(&rel),
        median_relative: median(&rel),
        within_3pct: if pairs.is_empty() {
            0.0
        } else {
            within as f64 / pairs.len() as f64
        },
        missing_from_estimate,
        missing_from_truth,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub queries: Vec<QueryMetrics>,
    #[serde(skip)]
    pub scatter: Vec<(String, GroupPair)>,
}

/// Answers each query exactly on both datasets and compares group by group.
pub fn evaluate(truth: &Dataset, estimate: &Dataset, queries: &[GroupBySumQuery]) -> EvaluationReport {
    let mut report = EvaluationReport {
        queries: Vec::with_capacity(queries.len()),
        scatter: Vec::new(),
    };
    for q in queries {
        let label = q.to_string();
        let t = truth.answer_exact(q);
        let e = estimate.answer_exact(q);
        let mut pairs = Vec::with_capacity(t.entries.len());
        let mut missing_from_estimate = Vec::new();
        for (k, x) in &t.entries {
            match e.get(k) {
                Some(est) => pairs.push(GroupPair {
                    group_key: k.clone(),
                    true_value: *x,
                    estimate: est,
                }),
                None => missing_from_estimate.push(k.clone()),
            }
        }
        let missing_from_truth: Vec<String> = e
            .entries
            .iter()
            .filter(|(k, _)| t.get(k).is_none())
            .map(|(k, _)| k.clone())
            .collect();
        for k in missing_from_estimate.iter().chain(&missing_from_truth) {
            log::warn!("{label}: group `{k}` is not present in both datasets");
        }
        report.queries.push(query_metrics(
            &label,
            &pairs,
            missing_from_estimate,
            missing_from_truth,
        ));
        report
            .scatter
            .extend(pairs.into_iter().map(|p| (label.clone(), p)));
    }
    report
}

impl EvaluationReport {
    /// Plot-ready rows: `query,group_key,true_value,estimate,signed,abs,relative`.
    pub fn write_scatter<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "query",
            "group_key",
            "true_value",
            "estimate",
            "signed",
            "abs",
            "relative",
        ])?;
        for (q, p) in &self.scatter {
            let d = p.signed();
            w.write_record([
                q.as_str(),
                &p.group_key,
                &format_value(p.true_value),
                &format_value(p.estimate),
                &format_value(d),
                &format_value(d.abs()),
                &format_value(relative_abs_diff(p.true_value, p.estimate)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One summary row per query.
    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "query",
            "groups",
            "signed_q1",
            "signed_median",
            "signed_q3",
            "signed_mean",
            "abs_mean",
            "abs_median",
            "relative_mean",
            "relative_median",
            "within_3pct",
            "unmatched_groups",
        ])?;
        for m in &self.queries {
            let q = m.signed.unwrap_or(Quartiles {
                q1: 0.0,
                median: 0.0,
                q3: 0.0,
            });
            w.write_record([
                m.query.clone(),
                m.groups.to_string(),
                format_value(q.q1),
                format_value(q.median),
                format_value(q.q3),
                format_value(m.mean_signed),
                format_value(m.mean_abs),
                format_value(m.median_abs),
                format_value(m.mean_relative),
                format_value(m.median_relative),
                format_value(m.within_3pct),
                (m.missing_from_estimate.len() + m.missing_from_truth.len()).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quartiles() {
        let q = quartiles(&[2.0, -4.0, 0.0, -2.0]).unwrap();
        assert_eq!((q.q1, q.median, q.q3), (-2.5, -1.0, 0.5));
        assert!(quartiles(&[]).is_none());
        let one = quartiles(&[3.0]).unwrap();
        assert_eq!((one.q1, one.median, one.q3), (3.0, 3.0, 3.0));
    }

    #[test]
    fn single_group_formulas() {
        let p = GroupPair {
            group_key: "g".into(),
            true_value: 100.0,
            estimate: 97.0,
        };
        let m = query_metrics("q", &[p], vec![], vec![]);
        assert_eq!(m.mean_signed, -3.0);
        assert_eq!(m.mean_abs, 3.0);
        assert_eq!(m.mean_relative, 3.0 / 101.0);
        assert_eq!(m.within_3pct, 1.0);
    }

    #[test]
    fn exact_reconstruction_scores_zero() {
        let pairs: Vec<GroupPair> = [0.0, 5.0, 12.5]
            .iter()
            .enumerate()
            .map(|(i, &x)| GroupPair {
                group_key: i.to_string(),
                true_value: x,
                estimate: x,
            })
            .collect();
        let m = query_metrics("q", &pairs, vec![], vec![]);
        let q = m.signed.unwrap();
        assert_eq!((q.q1, q.median, q.q3), (0.0, 0.0, 0.0));
        assert_eq!((m.mean_abs, m.mean_relative, m.median_relative), (0.0, 0.0, 0.0));
    }
}
