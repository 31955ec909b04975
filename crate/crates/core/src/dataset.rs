//! Establishment microdata, CSV ingestion and group-by sum queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::pairwise_sum;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` has non-numeric value `{value}`")]
    NotNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: column `{column}` is negative ({value})")]
    Negative {
        row: usize,
        column: String,
        value: f64,
    },
    #[error("row {row}: naics `{value}` is not a 6-digit code")]
    BadNaics { row: usize, value: String },
    #[error("row {row}: duplicate primary_key `{key}`")]
    DuplicateKey { row: usize, key: String },
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown grouper `{0}`")]
    UnknownGrouper(String),
    #[error("naics prefix length must be between 2 and 6, got {0}")]
    PrefixLength(usize),
}

/// Confidential attributes, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    M1emp,
    M2emp,
    M3emp,
    Wage,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::M1emp,
        Attribute::M2emp,
        Attribute::M3emp,
        Attribute::Wage,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::M1emp => "m1emp",
            Attribute::M2emp => "m2emp",
            Attribute::M3emp => "m3emp",
            Attribute::Wage => "wage",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DatasetError::UnknownAttribute(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstablishmentRecord {
    pub year: String,
    pub qtr: String,
    pub state: String,
    pub county: String,
    pub naics: String,
    pub ownership: String,
    /// Confidential values indexed by [`Attribute::index`].
    pub values: [f64; 4],
    pub primary_key: String,
}

impl EstablishmentRecord {
    pub fn value(&self, attribute: Attribute) -> f64 {
        self.values[attribute.index()]
    }

    pub fn same_public_attributes(&self, other: &Self) -> bool {
        self.year == other.year
            && self.qtr == other.qtr
            && self.state == other.state
            && self.county == other.county
            && self.naics == other.naics
            && self.ownership == other.ownership
    }
}

pub const PUBLIC_COLUMNS: [&str; 6] = ["year", "qtr", "state", "cnty", "naics", "own"];
pub const CSV_COLUMNS: [&str; 11] = [
    "year",
    "qtr",
    "state",
    "cnty",
    "naics",
    "own",
    "m1emp",
    "m2emp",
    "m3emp",
    "wage",
    "primary_key",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<EstablishmentRecord>,
}

/// How strictly confidential columns are checked on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Confidential data: values must be nonnegative.
    Confidential,
    /// Reconstructed microdata: unconstrained estimates may be negative.
    Estimates,
}

impl Dataset {
    /// Builds a dataset, rejecting duplicate primary keys.
    pub fn new(records: Vec<EstablishmentRecord>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.primary_key.as_str()) {
                return Err(DatasetError::DuplicateKey {
                    row: i + 1,
                    key: r.primary_key.clone(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[EstablishmentRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_csv(path: &Path) -> Result<Self, DatasetError> {
        Self::load_csv_with(path, LoadMode::Confidential)
    }

    pub fn load_csv_with(path: &Path, mode: LoadMode) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(file, mode)
    }

    /// Parses the documented column layout; extra columns are ignored.
    /// Row numbers in errors count data rows from 1.
    pub fn read_csv<R: Read>(reader: R, mode: LoadMode) -> Result<Self, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let mut idx = [0usize; 11];
        for (slot, name) in idx.iter_mut().zip(CSV_COLUMNS) {
            *slot = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, row) in rdr.records().enumerate() {
            let row_no = i + 1;
            let row = row?;
            let field = |k: usize| row.get(idx[k]).unwrap_or("").to_string();
            let naics = field(4);
            if naics.len() != 6 || !naics.bytes().all(|b| b.is_ascii_digit()) {
                return Err(DatasetError::BadNaics {
                    row: row_no,
                    value: naics,
                });
            }
            let mut values = [0.0; 4];
            for (a, slot) in Attribute::ALL.iter().zip(values.iter_mut()) {
                let raw = field(6 + a.index());
                let v: f64 = raw.parse().map_err(|_| DatasetError::NotNumeric {
                    row: row_no,
                    column: a.name().to_string(),
                    value: raw.clone(),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::NotNumeric {
                        row: row_no,
                        column: a.name().to_string(),
                        value: raw,
                    });
                }
                if mode == LoadMode::Confidential && v < 0.0 {
                    return Err(DatasetError::Negative {
                        row: row_no,
                        column: a.name().to_string(),
                        value: v,
                    });
                }
                *slot = v;
            }
            let primary_key = field(10);
            if !seen.insert(primary_key.clone()) {
                return Err(DatasetError::DuplicateKey {
                    row: row_no,
                    key: primary_key,
                });
            }
            records.push(EstablishmentRecord {
                year: field(0),
                qtr: field(1),
                state: field(2),
                county: field(3),
                naics,
                ownership: field(5),
                values,
                primary_key,
            });
        }
        Ok(Self { records })
    }

    /// Writes the dataset in the input schema. `synthetic` appends a
    /// `synthetic=1` column marking reconstructed rows.
    pub fn write_csv<W: Write>(&self, writer: W, synthetic: bool) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
        if synthetic {
            header.push("synthetic");
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.year.clone(),
                r.qtr.clone(),
                r.state.clone(),
                r.county.clone(),
                r.naics.clone(),
                r.ownership.clone(),
            ];
            row.extend(r.values.iter().map(|v| format_value(*v)));
            row.push(r.primary_key.clone());
            if synthetic {
                row.push("1".to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| DatasetError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, synthetic: bool) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file), synthetic)
    }

    /// Map from primary key to record position.
    pub fn key_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.primary_key.as_str(), i))
            .collect()
    }

    pub fn answer_exact(&self, query: &GroupBySumQuery) -> QueryAnswerVector {
        answer_over(self, &query.grouper, |r| r.value(query.attribute), None)
    }

    /// Like [`answer_exact`](Self::answer_exact) but also reports zero sums
    /// for universe groups with no records.
    pub fn answer_exact_with_universe(
        &self,
        query: &GroupBySumQuery,
        universe: &[String],
    ) -> QueryAnswerVector {
        answer_over(self, &query.grouper, |r| r.value(query.attribute), Some(universe))
    }

    /// Group key to member primary keys, in record order.
    pub fn group_membership(&self, grouper: &Grouper) -> BTreeMap<String, Vec<String>> {
        self.group_indices(grouper)
            .into_iter()
            .map(|(k, ix)| {
                let keys = ix
                    .into_iter()
                    .map(|i| self.records[i].primary_key.clone())
                    .collect();
                (k, keys)
            })
            .collect()
    }

    /// Group key to member record positions, in record order.
    pub fn group_indices(&self, grouper: &Grouper) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(grouper.key(r)).or_default().push(i);
        }
        groups
    }
}

fn answer_over(
    data: &Dataset,
    grouper: &Grouper,
    value: impl Fn(&EstablishmentRecord) -> f64,
    universe: Option<&[String]>,
) -> QueryAnswerVector {
    let mut groups: BTreeMap<String, f64> = data
        .group_indices(grouper)
        .into_iter()
        .map(|(k, ix)| {
            let vals: Vec<f64> = ix.iter().map(|&i| value(&data.records[i])).collect();
            (k, pairwise_sum(&vals))
        })
        .collect();
    if let Some(u) = universe {
        for k in u {
            groups.entry(k.clone()).or_insert(0.0);
        }
    }
    QueryAnswerVector {
        entries: groups.into_iter().collect(),
    }
}

/// Shortest decimal that round-trips the value.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v}")
}

/// Partition of records by public attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Grouper {
    Identity,
    Total,
    County,
    NaicsPrefix(usize),
    CountyNaicsPrefix(usize),
}

impl Grouper {
    pub fn naics_prefix(len: usize) -> Result<Self, DatasetError> {
        check_prefix(len)?;
        Ok(Grouper::NaicsPrefix(len))
    }

    pub fn county_naics_prefix(len: usize) -> Result<Self, DatasetError> {
        check_prefix(len)?;
        Ok(Grouper::CountyNaicsPrefix(len))
    }

    /// Canonical group key of a record. Reads public attributes only.
    pub fn key(&self, r: &EstablishmentRecord) -> String {
        match *self {
            Grouper::Identity => format!("id={}", r.primary_key),
            Grouper::Total => "total".to_string(),
            Grouper::County => format!("state={}|county={}", r.state, r.county),
            Grouper::NaicsPrefix(k) => format!("naics{k}={}", prefix(&r.naics, k)),
            Grouper::CountyNaicsPrefix(k) => format!(
                "state={}|county={}|naics{k}={}",
                r.state,
                r.county,
                prefix(&r.naics, k)
            ),
        }
    }
}

fn prefix(naics: &str, k: usize) -> &str {
    &naics[..k.min(naics.len())]
}

fn check_prefix(len: usize) -> Result<(), DatasetError> {
    if (2..=6).contains(&len) {
        Ok(())
    } else {
        Err(DatasetError::PrefixLength(len))
    }
}

impl fmt::Display for Grouper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grouper::Identity => f.write_str("identity"),
            Grouper::Total => f.write_str("total"),
            Grouper::County => f.write_str("county"),
            Grouper::NaicsPrefix(k) => write!(f, "naics:{k}"),
            Grouper::CountyNaicsPrefix(k) => write!(f, "county-naics:{k}"),
        }
    }
}

impl FromStr for Grouper {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DatasetError::UnknownGrouper(s.to_string());
        match s {
            "identity" => return Ok(Grouper::Identity),
            "total" => return Ok(Grouper::Total),
            "county" => return Ok(Grouper::County),
            _ => {}
        }
        let (name, len) = s.split_once(':').ok_or_else(bad)?;
        let len: usize = len.parse().map_err(|_| bad())?;
        match name {
            "naics" => Grouper::naics_prefix(len),
            "county-naics" => Grouper::county_naics_prefix(len),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Grouper {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Grouper {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupBySumQuery {
    pub grouper: Grouper,
    pub attribute: Attribute,
}

impl GroupBySumQuery {
    pub fn new(grouper: Grouper, attribute: Attribute) -> Self {
        Self { grouper, attribute }
    }
}

impl fmt::Display for GroupBySumQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.grouper, self.attribute)
    }
}

impl FromStr for GroupBySumQuery {
    type Err = DatasetError;

    /// Parses `grouper/attribute`, e.g. `county-naics:5/m3emp`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (g, a) = s
            .rsplit_once('/')
            .ok_or_else(|| DatasetError::UnknownGrouper(s.to_string()))?;
        Ok(Self::new(g.parse()?, a.parse()?))
    }
}

/// Per-group sums ordered by group key.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryAnswerVector {
    pub entries: Vec<(String, f64)>,
}

impl QueryAnswerVector {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries
            .binary_search_by(|(k, _)| k.as_str().cmp(key))
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn total(&self) -> f64 {
        let v: Vec<f64> = self.entries.iter().map(|(_, v)| *v).collect();
        pairwise_sum(&v)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group_key", "true_value"])?;
        for (k, v) in &self.entries {
            w.write_record([k.as_str(), &format_value(*v)])?;
        }
        w.flush().map_err(|source| DatasetError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }
}
