//! End-to-end commands: protected release, reconstruction, evaluation.
//!
//! `run` writes only releasable material to its output directory:
//!
//! * `answers.csv`: `query,attribute,group_key,value,variance,variance_kind,mechanism,space`
//! * `membership.csv`: `grouper,group_key,primary_key` for every grouper measured
//! * `publics.csv`: public attributes and primary keys
//! * `ledger.json`: the budget ledger
//!
//! `postprocess` reads that directory back and reconstructs microdata.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use estab_dp::accountant::{BudgetLedger, LedgerEntry};
use estab_dp::dataset::{
    format_value, Attribute, Dataset, EstablishmentRecord, GroupBySumQuery, Grouper, LoadMode,
    PUBLIC_COLUMNS,
};
use estab_dp::mechanisms::{
    detransform, estab_gaussian, neighbor_mech_on, pnc_bounds, pnc_mech, Mechanism, NoisyAnswer,
    PncBounds, Space, VarianceKind,
};
use estab_dp::microdata::{apply_solution, build_problem, solve, AnswerSet, SetResidual, SolveOptions};
use estab_dp::neighbor::NeighborFunction;
use estab_dp::RngStream;
use serde::{Deserialize, Serialize};

use crate::config::{Plan, WorkItem};
use crate::metrics::{evaluate, EvaluationReport};

pub const ANSWERS_FILE: &str = "answers.csv";
pub const MEMBERSHIP_FILE: &str = "membership.csv";
pub const PUBLICS_FILE: &str = "publics.csv";
pub const LEDGER_FILE: &str = "ledger.json";

/// One row of `answers.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRow {
    pub query: String,
    pub attribute: Attribute,
    pub group_key: String,
    pub value: f64,
    pub variance: f64,
    pub variance_kind: VarianceKind,
    pub mechanism: Mechanism,
    pub space: Space,
}

impl AnswerRow {
    fn new(query: &str, attribute: Attribute, a: NoisyAnswer) -> Self {
        Self {
            query: query.to_string(),
            attribute,
            group_key: a.group_key,
            value: a.value,
            variance: a.variance,
            variance_kind: a.variance_kind,
            mechanism: a.mechanism,
            space: a.space,
        }
    }

    fn noisy(&self) -> NoisyAnswer {
        NoisyAnswer {
            group_key: self.group_key.clone(),
            value: self.value,
            variance: self.variance,
            variance_kind: self.variance_kind,
            mechanism: self.mechanism,
            space: self.space,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerDocument {
    pub total_budget: f64,
    pub composed: f64,
    pub entries: Vec<LedgerEntry>,
}

impl From<&BudgetLedger> for LedgerDocument {
    fn from(l: &BudgetLedger) -> Self {
        Self {
            total_budget: l.total_budget(),
            composed: l.composed(),
            entries: l.entries().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub records: usize,
    pub answers: usize,
    pub composed_budget: f64,
    pub total_budget: f64,
    /// Neighbor answers whose estimated variance hit the floor.
    pub floored_variances: usize,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

/// Executes the workload. Each (query, attribute) release is charged to
/// the ledger before it samples, and draws from RNG stream `(seed, k)` where
/// `k` is its position in the workload.
pub fn cmd_run(plan: &Plan) -> Result<RunSummary> {
    let data = Dataset::load_csv(&plan.dataset)
        .with_context(|| format!("loading {}", plan.dataset.display()))?;
    let mut ledger = BudgetLedger::new(plan.total_budget)?;
    let pnc_attributes: BTreeSet<Attribute> = plan
        .work
        .iter()
        .filter(|w| w.mechanism == Mechanism::Pnc)
        .map(|w| w.attribute)
        .collect();
    let mut bounds: BTreeMap<Attribute, PncBounds> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut floored_variances = 0;

    for (k, w) in plan.work.iter().enumerate() {
        let protection = &plan.attributes[&w.attribute];
        let (f, delta) = (&protection.function, protection.delta);
        ledger.register(format!("{}/{}", w.label, w.attribute), w.mu, f, delta)?;
        let mut rng = RngStream::new(plan.seed, k as u64);
        let query = GroupBySumQuery::new(w.grouper, w.attribute);
        let universe = plan.universe.get(&w.grouper).map(Vec::as_slice);
        let sums = || match universe {
            Some(u) => data.answer_exact_with_universe(&query, u),
            None => data.answer_exact(&query),
        };
        let released = match w.mechanism {
            Mechanism::Neighbor => {
                let answers = neighbor_mech_on(&sums(), f, delta, w.mu, &mut rng)
                    .with_context(|| format!("{}/{}", w.label, w.attribute))?;
                if w.grouper == Grouper::Identity
                    && pnc_attributes.contains(&w.attribute)
                    && !bounds.contains_key(&w.attribute)
                {
                    let b = pnc_bounds(&answers, f, delta, w.mu, plan.gamma, pnc_attributes.len())?;
                    log::info!("{}: PNC bounds with tau = {:.6}", w.attribute, b.tau);
                    bounds.insert(w.attribute, b);
                }
                if plan.release_transformed {
                    answers
                } else {
                    let (raw, floored) = detransform(&answers, f, delta, w.mu).with_context(|| {
                        format!(
                            "{}/{}: set release_transformed = true to publish f-space answers",
                            w.label, w.attribute
                        )
                    })?;
                    floored_variances += floored;
                    raw
                }
            }
            Mechanism::Pnc => {
                let b = bounds
                    .get(&w.attribute)
                    .ok_or_else(|| anyhow!("no PNC bounds for {}", w.attribute))?;
                pnc_mech(&data, &query, b, f, delta, w.mu, universe, &mut rng)
                    .with_context(|| format!("{}/{}", w.label, w.attribute))?
            }
            Mechanism::EstabGaussian => {
                let NeighborFunction::Linear { d } = f.function() else {
                    bail!("{}/{}: estab_gaussian needs a linear neighbor function", w.label, w.attribute);
                };
                estab_gaussian(&sums(), d * delta, w.mu, &mut rng)?
            }
        };
        rows.extend(released.into_iter().map(|a| AnswerRow::new(&w.label, w.attribute, a)));
    }

    std::fs::create_dir_all(&plan.output_dir)
        .with_context(|| format!("cannot create {}", plan.output_dir.display()))?;
    write_answers(&plan.output_dir.join(ANSWERS_FILE), &rows)?;
    write_membership(&plan.output_dir.join(MEMBERSHIP_FILE), &data, &plan.work)?;
    write_publics(&plan.output_dir.join(PUBLICS_FILE), &data)?;
    let doc = LedgerDocument::from(&ledger);
    let mut w = create(&plan.output_dir.join(LEDGER_FILE))?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    std::io::Write::write_all(&mut w, b"\n")?;

    Ok(RunSummary {
        output_dir: plan.output_dir.clone(),
        records: data.len(),
        answers: rows.len(),
        composed_budget: doc.composed,
        total_budget: doc.total_budget,
        floored_variances,
    })
}

pub fn write_answers(path: &Path, rows: &[AnswerRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "query",
        "attribute",
        "group_key",
        "value",
        "variance",
        "variance_kind",
        "mechanism",
        "space",
    ])?;
    for r in rows {
        w.write_record([
            r.query.clone(),
            r.attribute.to_string(),
            r.group_key.clone(),
            format_value(r.value),
            format_value(r.variance),
            r.variance_kind.to_string(),
            r.mechanism.to_string(),
            r.space.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_answers(path: &Path) -> Result<Vec<AnswerRow>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k)
                .ok_or_else(|| anyhow!("{} row {}: missing column {}", path.display(), i + 1, k + 1))
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?
                .parse()
                .with_context(|| format!("{} row {}: not a number", path.display(), i + 1))
        };
        rows.push(AnswerRow {
            query: field(0)?.to_string(),
            attribute: field(1)?.parse()?,
            group_key: field(2)?.to_string(),
            value: num(3)?,
            variance: num(4)?,
            variance_kind: field(5)?.parse()?,
            mechanism: field(6)?.parse()?,
            space: field(7)?.parse()?,
        });
    }
    Ok(rows)
}

fn write_membership(path: &Path, data: &Dataset, work: &[WorkItem]) -> Result<()> {
    let groupers: BTreeSet<Grouper> = work.iter().map(|w| w.grouper).collect();
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["grouper", "group_key", "primary_key"])?;
    for g in groupers {
        let name = g.to_string();
        for (key, members) in data.group_membership(&g) {
            for pk in members {
                w.write_record([name.as_str(), key.as_str(), pk.as_str()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

type Membership = BTreeMap<String, BTreeMap<String, Vec<String>>>;

fn read_membership(path: &Path) -> Result<Membership> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out: Membership = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (Some(g), Some(k), Some(pk)) = (rec.get(0), rec.get(1), rec.get(2)) else {
            bail!("{}: short row", path.display());
        };
        out.entry(g.to_string())
            .or_default()
            .entry(k.to_string())
            .or_default()
            .push(pk.to_string());
    }
    Ok(out)
}

fn write_publics(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = PUBLIC_COLUMNS.to_vec();
    header.push("primary_key");
    w.write_record(&header)?;
    for r in data.records() {
        w.write_record([
            &r.year,
            &r.qtr,
            &r.state,
            &r.county,
            &r.naics,
            &r.ownership,
            &r.primary_key,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_publics(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 7 {
            bail!("{} row {}: expected 7 columns", path.display(), i + 1);
        }
        records.push(EstablishmentRecord {
            year: rec[0].to_string(),
            qtr: rec[1].to_string(),
            state: rec[2].to_string(),
            county: rec[3].to_string(),
            naics: rec[4].to_string(),
            ownership: rec[5].to_string(),
            values: [0.0; 4],
            primary_key: rec[6].to_string(),
        });
    }
    Ok(Dataset::new(records)?)
}

/// Grouper of a query label such as `county#2`.
fn label_grouper(label: &str) -> Result<Grouper> {
    let base = label.split_once('#').map_or(label, |(g, _)| g);
    Ok(base.parse()?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeFit {
    pub attribute: Attribute,
    pub measurements: usize,
    pub iterations: usize,
    pub relative_gradient: f64,
    pub underdetermined: usize,
    pub excluded_zero_variance: usize,
    pub residuals: Vec<SetResidualReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SetResidualReport {
    pub query: String,
    pub rows: usize,
    pub rms_standardized: f64,
    pub max_abs: f64,
}

impl From<&SetResidual> for SetResidualReport {
    fn from(r: &SetResidual) -> Self {
        Self {
            query: r.label.clone(),
            rows: r.rows,
            rms_standardized: r.rms_standardized,
            max_abs: r.max_abs,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PostprocessOptions {
    pub nonnegative: bool,
    /// Needed only to de-transform answers released in f-space.
    pub plan: Option<Plan>,
}

/// Reconstructs microdata from a `run` output directory and writes it in
/// the dataset schema with `synthetic=1`. Attributes with no usable
/// answers stay 0.
pub fn cmd_postprocess(run_dir: &Path, out: &Path, opts: &PostprocessOptions) -> Result<Vec<AttributeFit>> {
    let mut data = read_publics(&run_dir.join(PUBLICS_FILE))?;
    let membership = read_membership(&run_dir.join(MEMBERSHIP_FILE))?;
    let rows = read_answers(&run_dir.join(ANSWERS_FILE))?;
    let record_keys: Vec<String> = data.records().iter().map(|r| r.primary_key.clone()).collect();

    // attribute -> query label -> answers, in file order
    let mut by_attr: BTreeMap<Attribute, Vec<(String, Vec<NoisyAnswer>)>> = BTreeMap::new();
    for r in &rows {
        let sets = by_attr.entry(r.attribute).or_default();
        match sets.last_mut() {
            Some((label, answers)) if *label == r.query => answers.push(r.noisy()),
            _ => sets.push((r.query.clone(), vec![r.noisy()])),
        }
    }

    let solve_opts = SolveOptions {
        nonnegative: opts.nonnegative,
        ..SolveOptions::default()
    };
    let mut fits = Vec::new();
    for attribute in Attribute::ALL {
        let Some(sets) = by_attr.get(&attribute) else {
            log::warn!("no answers for {attribute}; its reconstructed values are 0");
            continue;
        };
        let mut prepared: Vec<(String, Grouper, Vec<NoisyAnswer>)> = Vec::new();
        let mut excluded = 0;
        for (label, answers) in sets {
            let grouper = label_grouper(label)?;
            let mut answers = answers.clone();
            if answers.iter().any(|a| a.space == Space::Transformed) {
                answers = raw_space(label, attribute, &answers, opts.plan.as_ref())?;
            }
            let groups = membership.get(&grouper.to_string());
            let before = answers.len();
            answers.retain(|a| {
                let has_members = groups
                    .and_then(|g| g.get(&a.group_key))
                    .is_some_and(|m| !m.is_empty());
                if !has_members {
                    log::info!("{label}/{attribute}: group `{}` has no records; skipped", a.group_key);
                    return false;
                }
                if a.variance == 0.0 {
                    log::info!(
                        "{label}/{attribute}: group `{}` has zero noise variance; excluded from the fit",
                        a.group_key
                    );
                    excluded += 1;
                    return false;
                }
                true
            });
            log::debug!("{label}/{attribute}: {} of {before} answers used", answers.len());
            prepared.push((label.clone(), grouper, answers));
        }
        let empty = BTreeMap::new();
        let answer_sets: Vec<AnswerSet<'_>> = prepared
            .iter()
            .map(|(label, grouper, answers)| AnswerSet {
                label,
                attribute,
                answers,
                membership: membership.get(&grouper.to_string()).unwrap_or(&empty),
            })
            .collect();
        let problem = build_problem(&record_keys, &answer_sets)?;
        let solution = solve(&problem, &solve_opts)?;
        if !solution.underdetermined.is_empty() {
            log::warn!(
                "{attribute}: {} records have no single-record answer and were regularised toward 0",
                solution.underdetermined.len()
            );
        }
        apply_solution(&mut data, &problem, &solution)?;
        fits.push(AttributeFit {
            attribute,
            measurements: problem.measurements.len(),
            iterations: solution.iterations,
            relative_gradient: solution.relative_gradient,
            underdetermined: solution.underdetermined.len(),
            excluded_zero_variance: excluded,
            residuals: solution.residuals.iter().map(SetResidualReport::from).collect(),
        });
    }
    data.save_csv(out, true)?;
    Ok(fits)
}

fn raw_space(
    label: &str,
    attribute: Attribute,
    answers: &[NoisyAnswer],
    plan: Option<&Plan>,
) -> Result<Vec<NoisyAnswer>> {
    let plan = plan.ok_or_else(|| {
        anyhow!("{label}/{attribute} was released in transformed space; pass the run config to de-transform it")
    })?;
    let item = plan
        .work
        .iter()
        .find(|w| w.label == label && w.attribute == attribute)
        .ok_or_else(|| anyhow!("{label}/{attribute} is not in the config workload"))?;
    let p = &plan.attributes[&attribute];
    let (raw, floored) = detransform(answers, p.function.function(), p.delta, item.mu)?;
    if floored > 0 {
        log::info!("{label}/{attribute}: {floored} variance estimates floored");
    }
    Ok(raw)
}

/// Compares reconstructed microdata with ground truth and writes
/// `metrics.csv`, `scatter.csv` and `report.json` into `out_dir`.
pub fn cmd_evaluate(
    microdata: &Path,
    truth: &Path,
    queries: &[GroupBySumQuery],
    out_dir: &Path,
) -> Result<EvaluationReport> {
    let estimate = Dataset::load_csv_with(microdata, LoadMode::Estimates)
        .with_context(|| format!("loading {}", microdata.display()))?;
    let truth = Dataset::load_csv(truth).with_context(|| format!("loading {}", truth.display()))?;
    let report = evaluate(&truth, &estimate, queries);
    std::fs::create_dir_all(out_dir)?;
    report.write_summary(create(&out_dir.join("metrics.csv"))?)?;
    report.write_scatter(create(&out_dir.join("scatter.csv"))?)?;
    let mut w = create(&out_dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(report)
}
