//! Cohort data model, ingestion, synthetic generation, preprocessing and
//! splitting.
//!
//! A [`CohortTable`] holds raw typed predictor columns plus three reserved
//! date columns per subject: `assessment_date` (time origin), an optional
//! `outcome_date` and the `censor_date` at which follow-up ends.

mod io;
mod preprocess;
mod split;
mod synth;

pub use io::{load_cohort, load_schema, write_cohort_csv};
pub use preprocess::{preprocess, FeatureMatrix, PreprocessReport, RareCategory, Scaling};
pub use split::{stratified_split, SplitIndices};
pub use synth::{generate_synthetic, GroundTruth, SynthConfig, WeibullBaseline};

use std::collections::HashSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ASSESSMENT_DATE: &str = "assessment_date";
pub const OUTCOME_DATE: &str = "outcome_date";
pub const CENSOR_DATE: &str = "censor_date";
pub const RESERVED_COLUMNS: [&str; 3] = [ASSESSMENT_DATE, OUTCOME_DATE, CENSOR_DATE];

/// Days per year used to convert date differences into durations.
pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Ordinal,
    Categorical,
    EventDate,
}

/// One predictor column. For categorical columns `categories` lists the
/// labels; for ordinal columns it lists the levels in increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl ColumnSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::Continuous, categories: None }
    }

    pub fn categorical(name: impl Into<String>, categories: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: Some(categories.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn ordinal(name: impl Into<String>, levels: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Ordinal,
            categories: Some(levels.iter().map(|s| s.to_string()).collect()),
        }
    }

    pub fn event_date(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: ColumnKind::EventDate, categories: None }
    }

    pub(crate) fn labels(&self) -> &[String] {
        self.categories.as_deref().unwrap_or(&[])
    }
}

/// Checks the schema invariants: unique, non-reserved names and label
/// lists where the column kind needs one.
pub fn validate_schema(schema: &[ColumnSpec]) -> Result<()> {
    let mut seen = HashSet::new();
    for col in schema {
        if col.name.is_empty() {
            return Err(Error::Schema("empty column name".into()));
        }
        if RESERVED_COLUMNS.contains(&col.name.as_str()) {
            return Err(Error::Schema(format!("`{}` is a reserved column name", col.name)));
        }
        if !seen.insert(col.name.as_str()) {
            return Err(Error::Schema(format!("duplicate column `{}`", col.name)));
        }
        match col.kind {
            ColumnKind::Categorical | ColumnKind::Ordinal => {
                let labels = col.labels();
                if labels.is_empty() {
                    return Err(Error::Schema(format!(
                        "column `{}` needs at least one category/level",
                        col.name
                    )));
                }
                let unique: HashSet<_> = labels.iter().collect();
                if unique.len() != labels.len() {
                    return Err(Error::Schema(format!("column `{}` repeats a label", col.name)));
                }
            }
            ColumnKind::Continuous | ColumnKind::EventDate => {}
        }
    }
    Ok(())
}

/// Per-column cell storage. Ordinal cells hold the level index.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<usize>>),
    Date(Vec<Option<NaiveDate>>),
}

impl ColumnData {
    fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
            ColumnData::Date(v) => v.len(),
        }
    }

    fn missing(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.iter().filter(|c| c.is_none()).count(),
            ColumnData::Categorical(v) => v.iter().filter(|c| c.is_none()).count(),
            ColumnData::Date(v) => v.iter().filter(|c| c.is_none()).count(),
        }
    }
}

/// Survival outcome of one subject: follow-up in years and whether the
/// event was observed (false means right-censored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutcome {
    pub duration: f64,
    pub event: bool,
}

impl SurvivalOutcome {
    pub fn new(duration: f64, event: bool) -> Self {
        Self { duration, event }
    }
}

pub fn event_count(outcomes: &[SurvivalOutcome]) -> usize {
    outcomes.iter().filter(|o| o.event).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub schema: Vec<ColumnSpec>,
    pub columns: Vec<ColumnData>,
    pub assessment_date: Vec<NaiveDate>,
    pub outcome_date: Vec<Option<NaiveDate>>,
    pub censor_date: Vec<NaiveDate>,
    /// Names of columns added by [`derive_prior_flag`].
    pub derived: Vec<String>,
}

impl CohortTable {
    pub fn new(
        schema: Vec<ColumnSpec>,
        columns: Vec<ColumnData>,
        assessment_date: Vec<NaiveDate>,
        outcome_date: Vec<Option<NaiveDate>>,
        censor_date: Vec<NaiveDate>,
    ) -> Result<Self> {
        validate_schema(&schema)?;
        if schema.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} column specs but {} columns",
                schema.len(),
                columns.len()
            )));
        }
        let n = assessment_date.len();
        if outcome_date.len() != n || censor_date.len() != n {
            return Err(Error::Schema("date columns differ in length".into()));
        }
        for (spec, col) in schema.iter().zip(&columns) {
            let kind_ok = matches!(
                (spec.kind, col),
                (ColumnKind::Continuous | ColumnKind::Ordinal, ColumnData::Numeric(_))
                    | (ColumnKind::Categorical, ColumnData::Categorical(_))
                    | (ColumnKind::EventDate, ColumnData::Date(_))
            );
            if !kind_ok {
                return Err(Error::Schema(format!("column `{}` storage does not match its kind", spec.name)));
            }
            if col.len() != n {
                return Err(Error::Schema(format!("column `{}` has {} rows, expected {n}", spec.name, col.len())));
            }
        }
        Ok(Self { schema, columns, assessment_date, outcome_date, censor_date, derived: Vec::new() })
    }

    pub fn n_rows(&self) -> usize {
        self.assessment_date.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn missing_cells(&self) -> usize {
        self.columns.iter().map(ColumnData::missing).sum()
    }
}

/// Appends a binary ordinal column `name` that is 1 when any of `sources`
/// holds a date strictly before the subject's assessment date.
pub fn derive_prior_flag(cohort: &CohortTable, sources: &[&str], name: &str) -> Result<CohortTable> {
    let mut source_cols = Vec::with_capacity(sources.len());
    for src in sources {
        let idx = cohort
            .column_index(src)
            .ok_or_else(|| Error::Schema(format!("unknown column `{src}`")))?;
        match &cohort.columns[idx] {
            ColumnData::Date(dates) => source_cols.push(dates),
            _ => return Err(Error::Schema(format!("column `{src}` is not an event_date column"))),
        }
    }
    if cohort.column_index(name).is_some() {
        return Err(Error::Schema(format!("column `{name}` already exists")));
    }

    let flags = (0..cohort.n_rows())
        .map(|row| {
            let assessed = cohort.assessment_date[row];
            let prior = source_cols.iter().any(|dates| matches!(dates[row], Some(d) if d < assessed));
            Some(if prior { 1.0 } else { 0.0 })
        })
        .collect();

    let mut out = cohort.clone();
    out.schema.push(ColumnSpec::ordinal(name, &["0", "1"]));
    out.columns.push(ColumnData::Numeric(flags));
    out.derived.push(name.to_string());
    Ok(out)
}
