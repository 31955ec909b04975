//! Synthetic establishment microdata from county-by-industry cell totals.
//!
//! Each cell's totals are split across its establishments with Dirichlet
//! shares. One concentration vector per cell is reused for the month-1,
//! month-3 and wage splits so that larger employers tend to pay larger
//! wage bills. Month-2 employment is interpolated with noise.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError, EstablishmentRecord};
use crate::numerics::{sample_dirichlet, sample_gamma, standard_normal, NumericsError, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum SyngenError {
    #[error("{what} must be nonnegative and finite, got {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("{what} must be positive and finite, got {value}")]
    Parameter { what: &'static str, value: f64 },
    #[error("concentration vector must not be empty")]
    Empty,
    #[error("cell row {row}: {message}")]
    Cell { row: usize, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Aggregate totals for one county by 6-digit industry cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTotals {
    pub state: String,
    pub county: String,
    pub naics: String,
    pub estnum: usize,
    pub m1emp: f64,
    pub m3emp: f64,
    pub wage: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct CellRow {
    #[serde(default = "default_state")]
    state: String,
    cnty: String,
    naics: String,
    estnum: String,
    m1emp: String,
    m3emp: String,
    wage: String,
}

fn default_state() -> String {
    "00".to_string()
}

/// Reads cells from CSV with columns `cnty,naics,estnum,m1emp,m3emp,wage`
/// and an optional `state`. Row numbers in errors count data rows from 1.
pub fn read_cells<R: Read>(reader: R) -> Result<Vec<CellTotals>, SyngenError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut cells = Vec::new();
    for (i, row) in rdr.deserialize::<CellRow>().enumerate() {
        let row_no = i + 1;
        let row = row?;
        let cell_err = |message: String| SyngenError::Cell { row: row_no, message };
        let num = |name: &str, raw: &str| -> Result<f64, SyngenError> {
            let v: f64 = raw
                .parse()
                .map_err(|_| cell_err(format!("`{name}` is not numeric: `{raw}`")))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(cell_err(format!("`{name}` must be nonnegative, got {v}")));
            }
            Ok(v)
        };
        if row.naics.len() != 6 || !row.naics.bytes().all(|b| b.is_ascii_digit()) {
            return Err(cell_err(format!("naics `{}` is not a 6-digit code", row.naics)));
        }
        let estnum: usize = row
            .estnum
            .parse()
            .map_err(|_| cell_err(format!("`estnum` is not a count: `{}`", row.estnum)))?;
        cells.push(CellTotals {
            m1emp: num("m1emp", &row.m1emp)?,
            m3emp: num("m3emp", &row.m3emp)?,
            wage: num("wage", &row.wage)?,
            state: row.state,
            county: row.cnty,
            naics: row.naics,
            estnum,
        });
    }
    Ok(cells)
}

pub fn load_cells(path: &Path) -> Result<Vec<CellTotals>, SyngenError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_cells(file)
}

/// Splits `total` into random nonnegative parts with Dirichlet(`b`) shares.
/// An all-zero `b` is treated as all ones; zero entries otherwise get no share.
pub fn dirichlet_divide(
    rng: &mut RngStream,
    concentration: &[f64],
    total: f64,
) -> Result<Vec<f64>, SyngenError> {
    if concentration.is_empty() {
        return Err(SyngenError::Empty);
    }
    if let Some(&b) = concentration.iter().find(|b| !(**b >= 0.0) || !b.is_finite()) {
        return Err(SyngenError::Negative { what: "concentration", value: b });
    }
    if !(total >= 0.0) || !total.is_finite() {
        return Err(SyngenError::Negative { what: "total", value: total });
    }
    if total == 0.0 {
        return Ok(vec![0.0; concentration.len()]);
    }
    if concentration.len() == 1 {
        return Ok(vec![total]);
    }
    let positive: Vec<usize> = (0..concentration.len())
        .filter(|&i| concentration[i] > 0.0)
        .collect();
    let mut out = vec![0.0; concentration.len()];
    if positive.is_empty() {
        let shares = sample_dirichlet(rng, &vec![1.0; concentration.len()])?;
        for (o, p) in out.iter_mut().zip(shares) {
            *o = p * total;
        }
    } else {
        let b: Vec<f64> = positive.iter().map(|&i| concentration[i]).collect();
        let shares = sample_dirichlet(rng, &b)?;
        for (&i, p) in positive.iter().zip(shares) {
            out[i] = p * total;
        }
    }
    Ok(out)
}

/// Month-2 employment given months 1 and 3 and a standard normal draw.
pub fn month2_from_draw(eta: f64, m1: f64, m3: f64, z: f64) -> f64 {
    if m1 == 0.0 && m3 == 0.0 {
        return 0.0;
    }
    let variance = 2.0 * eta * (m3 - m1).abs() / (m3 + m1);
    let m2 = m1 + (m3 - m1) / 2.0 + variance.sqrt() * z;
    if m2 > 0.0 {
        m2
    } else if m1 == 0.0 || m3 == 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Noisy midpoint of months 1 and 3 with variance
/// `2 eta |m3 - m1| / (m3 + m1)`, kept positive.
pub fn month2(rng: &mut RngStream, eta: f64, m1: f64, m3: f64) -> Result<f64, SyngenError> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(SyngenError::Parameter { what: "eta", value: eta });
    }
    for (what, v) in [("m1emp", m1), ("m3emp", m3)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(SyngenError::Negative { what, value: v });
        }
    }
    if m1 == 0.0 && m3 == 0.0 {
        return Ok(0.0);
    }
    Ok(month2_from_draw(eta, m1, m3, standard_normal(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Gamma shape for per-establishment concentrations.
    pub alpha_prior: f64,
    /// Gamma scale for per-establishment concentrations.
    pub theta_prior: f64,
    /// Month-2 noise parameter.
    pub eta: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            alpha_prior: 10.0,
            theta_prior: 200.0,
            eta: 0.5,
        }
    }
}

pub const SYNTH_YEAR: &str = "2016";
pub const SYNTH_QUARTER: &str = "1";
pub const SYNTH_OWNERSHIP: &str = "5";

/// Generates establishments for every cell. Cell `k` draws from stream
/// `(seed, k)`; primary keys number the establishments from 1 in cell order.
pub fn generate_establishments(
    seed: u64,
    cells: &[CellTotals],
    params: &SynthParams,
) -> Result<Dataset, SyngenError> {
    for (what, v) in [
        ("alpha_prior", params.alpha_prior),
        ("theta_prior", params.theta_prior),
        ("eta", params.eta),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(SyngenError::Parameter { what, value: v });
        }
    }
    let mut offsets = Vec::with_capacity(cells.len());
    let mut next = 0usize;
    for (k, c) in cells.iter().enumerate() {
        if c.estnum == 0 {
            log::warn!("cell {} ({} / {}) has estnum 0; skipped", k + 1, c.county, c.naics);
        }
        offsets.push(next);
        next += c.estnum;
    }
    let per_cell: Vec<Vec<EstablishmentRecord>> = cells
        .par_iter()
        .enumerate()
        .map(|(k, cell)| generate_cell(seed, k, offsets[k], cell, params))
        .collect::<Result<_, _>>()?;
    Ok(Dataset::new(per_cell.into_iter().flatten().collect())?)
}

fn generate_cell(
    seed: u64,
    index: usize,
    offset: usize,
    cell: &CellTotals,
    params: &SynthParams,
) -> Result<Vec<EstablishmentRecord>, SyngenError> {
    if cell.estnum == 0 {
        return Ok(Vec::new());
    }
    let mut rng = RngStream::new(seed, index as u64);
    let concentration = (0..cell.estnum)
        .map(|_| sample_gamma(&mut rng, params.alpha_prior, params.theta_prior))
        .collect::<Result<Vec<_>, _>>()?;
    let m1 = dirichlet_divide(&mut rng, &concentration, cell.m1emp)?;
    let m3 = dirichlet_divide(&mut rng, &concentration, cell.m3emp)?;
    let wage = dirichlet_divide(&mut rng, &concentration, cell.wage)?;
    let mut out = Vec::with_capacity(cell.estnum);
    for j in 0..cell.estnum {
        let m2 = month2(&mut rng, params.eta, m1[j], m3[j])?;
        out.push(EstablishmentRecord {
            year: SYNTH_YEAR.into(),
            qtr: SYNTH_QUARTER.into(),
            state: cell.state.clone(),
            county: cell.county.clone(),
            naics: cell.naics.clone(),
            ownership: SYNTH_OWNERSHIP.into(),
            values: [m1[j], m2, m3[j], wage[j]],
            primary_key: (offset + j + 1).to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Attribute;

    fn cell(county: &str, naics: &str, estnum: usize, m1: f64, m3: f64, wage: f64) -> CellTotals {
        CellTotals {
            state: "01".into(),
            county: county.into(),
            naics: naics.into(),
            estnum,
            m1emp: m1,
            m3emp: m3,
            wage,
        }
    }

    #[test]
    fn divider_edge_cases() {
        let mut rng = RngStream::new(1, 0);
        assert_eq!(dirichlet_divide(&mut rng, &[1.0, 2.0], 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(dirichlet_divide(&mut rng, &[3.0], 7.5).unwrap(), vec![7.5]);
        assert!(dirichlet_divide(&mut rng, &[1.0, -1.0], 1.0).is_err());
        assert!(dirichlet_divide(&mut rng, &[], 1.0).is_err());
        let p = dirichlet_divide(&mut rng, &[0.0, 2.0, 0.0], 9.0).unwrap();
        assert_eq!((p[0], p[1], p[2]), (0.0, 9.0, 0.0));
    }

    #[test]
    fn all_zero_concentration_acts_as_ones() {
        let mut rng = RngStream::new(2, 0);
        let n = 100_000;
        let mut first = 0.0;
        for _ in 0..n {
            let a = dirichlet_divide(&mut rng, &[0.0, 0.0], 10.0).unwrap();
            assert!((a[0] + a[1] - 10.0).abs() < 1e-12);
            first += a[0];
        }
        assert!((first / n as f64 - 5.0).abs() < 0.05);
    }

    #[test]
    fn month2_rules() {
        let mut rng = RngStream::new(3, 0);
        assert_eq!(month2(&mut rng, 0.5, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(month2(&mut rng, 0.5, 12.0, 12.0).unwrap(), 12.0);
        assert_eq!(month2_from_draw(0.5, 100.0, 0.0, -100.0), 0.0);
        assert_eq!(month2_from_draw(0.5, 0.0, 100.0, -100.0), 0.0);
        assert_eq!(month2_from_draw(0.5, 1.0, 3.0, -100.0), 1.0);
        assert_eq!(month2_from_draw(0.5, 10.0, 20.0, 0.0), 15.0);
        assert!(month2(&mut rng, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn single_establishment_cell_keeps_totals() {
        let d = generate_establishments(4, &[cell("001", "236115", 1, 5.0, 7.0, 900.0)], &SynthParams::default()).unwrap();
        assert_eq!(d.len(), 1);
        let r = &d.records()[0];
        assert_eq!((r.value(Attribute::M1emp), r.value(Attribute::M3emp), r.value(Attribute::Wage)), (5.0, 7.0, 900.0));
        assert_eq!((r.year.as_str(), r.qtr.as_str(), r.ownership.as_str()), ("2016", "1", "5"));
        assert_eq!(r.primary_key, "1");
    }

    #[test]
    fn totals_are_conserved_and_nonnegative() {
        let cells: Vec<CellTotals> = (0..40)
            .map(|k| cell(&format!("{:03}", k % 5), "541110", 1 + k % 7, 10.0 * k as f64, 12.0 * k as f64 + 1.0, 5000.0 + k as f64))
            .chain(std::iter::once(cell("009", "111111", 0, 1.0, 1.0, 1.0)))
            .collect();
        let d = generate_establishments(5, &cells, &SynthParams::default()).unwrap();
        assert_eq!(d.len(), cells.iter().map(|c| c.estnum).sum::<usize>());
        let mut at = 0;
        for c in cells.iter().filter(|c| c.estnum > 0) {
            let rs = &d.records()[at..at + c.estnum];
            at += c.estnum;
            for (a, want) in [(Attribute::M1emp, c.m1emp), (Attribute::M3emp, c.m3emp), (Attribute::Wage, c.wage)] {
                let got: f64 = rs.iter().map(|r| r.value(a)).sum();
                assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{a} {got} vs {want}");
            }
        }
        assert!(d.records().iter().all(|r| r.values.iter().all(|v| *v >= 0.0)));
        let again = generate_establishments(5, &cells, &SynthParams::default()).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn wage_and_employment_shares_correlate() {
        // Small shape spreads the shares so the shared concentration shows.
        let params = SynthParams { alpha_prior: 1.0, theta_prior: 1.0, eta: 0.5 };
        let cells: Vec<CellTotals> = (0..300).map(|k| cell(&format!("{k:03}"), "541110", 5, 100.0, 100.0, 1e5)).collect();
        let d = generate_establishments(6, &cells, &params).unwrap();
        let emp: Vec<f64> = d.records().iter().map(|r| r.value(Attribute::M3emp) / 100.0).collect();
        let wage: Vec<f64> = d.records().iter().map(|r| r.value(Attribute::Wage) / 1e5).collect();
        assert!(spearman(&emp, &wage) > 0.0);
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, i) in idx.into_iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let m = (n - 1.0) / 2.0;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
        let var: f64 = ra.iter().map(|x| (x - m) * (x - m)).sum();
        cov / var
    }

    #[test]
    fn reads_cells_csv() {
        let text = "cnty,naics,estnum,m1emp,m3emp,wage\n001,236115,3,10,12,5000\n";
        let c = read_cells(text.as_bytes()).unwrap();
        assert_eq!(c[0].estnum, 3);
        assert_eq!(c[0].state, "00");
        let bad = "cnty,naics,estnum,m1emp,m3emp,wage\n001,236115,3,-10,12,5000\n";
        assert!(matches!(read_cells(bad.as_bytes()), Err(SyngenError::Cell { row: 1, .. })));
    }
}
