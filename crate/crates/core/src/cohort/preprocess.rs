use serde::{Deserialize, Serialize};

use super::{CohortTable, ColumnData, ColumnKind, SurvivalOutcome, DAYS_PER_YEAR};
use crate::error::{Error, Result};

/// Label of the explicit one-hot category for missing categorical cells.
pub const MISSING_CATEGORY: &str = "missing";

/// How a feature column was transformed from raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scaling {
    Standardized { mean: f64, sd: f64 },
    Identity,
}

impl Scaling {
    pub fn apply(&self, raw: f64) -> f64 {
        match *self {
            Scaling::Standardized { mean, sd } => (raw - mean) / sd,
            Scaling::Identity => raw,
        }
    }
}

/// Dense row-major design matrix with column metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    n_rows: usize,
    n_cols: usize,
    values: Vec<f64>,
    pub column_names: Vec<String>,
    pub scaling: Vec<Scaling>,
    /// Source cohort column for each feature (shared by one-hot groups).
    pub sources: Vec<String>,
}

impl FeatureMatrix {
    /// Builds an unscaled matrix; every column gets identity scaling.
    pub fn from_rows(column_names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = column_names.len();
        let mut values = Vec::with_capacity(rows.len() * n_cols);
        for row in rows {
            if row.len() != n_cols {
                return Err(Error::Shape { expected: n_cols, got: row.len() });
            }
            values.extend_from_slice(row);
        }
        Self::from_parts(rows.len(), column_names, values)
    }

    /// Builds a matrix from row-major values with identity scaling.
    pub fn from_parts(n_rows: usize, column_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n_cols = column_names.len();
        if values.len() != n_rows * n_cols {
            return Err(Error::Shape { expected: n_rows * n_cols, got: values.len() });
        }
        Ok(Self {
            n_rows,
            n_cols,
            values,
            scaling: vec![Scaling::Identity; n_cols],
            sources: column_names.clone(),
            column_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.get(i, j)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self { n_rows: rows.len(), values, ..self.clone_meta() }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        for i in 0..self.n_rows {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        Self {
            n_rows: self.n_rows,
            n_cols: cols.len(),
            values,
            column_names: cols.iter().map(|&j| self.column_names[j].clone()).collect(),
            scaling: cols.iter().map(|&j| self.scaling[j]).collect(),
            sources: cols.iter().map(|&j| self.sources[j].clone()).collect(),
        }
    }

    /// Selects columns by name, failing on unknown names.
    pub fn select_named(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n).ok_or_else(|| Error::Schema(format!("unknown feature `{n}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_columns(&idx))
    }

    pub fn row_concat(&self, other: &Self) -> Result<Self> {
        if other.column_names != self.column_names {
            return Err(Error::Schema("cannot stack matrices with different columns".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Ok(Self { n_rows: self.n_rows + other.n_rows, values, ..self.clone_meta() })
    }

    /// Multiplies column `j` by `factor` in place (scaling metadata is left
    /// untouched).
    pub fn scale_column(&mut self, j: usize, factor: f64) {
        for i in 0..self.n_rows {
            self.values[i * self.n_cols + j] *= factor;
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            n_rows: 0,
            n_cols: self.n_cols,
            values: Vec::new(),
            column_names: self.column_names.clone(),
            scaling: self.scaling.clone(),
            sources: self.sources.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RareCategory {
    pub column: String,
    pub category: String,
    pub frequency: f64,
}

/// Accounting of what preprocessing removed.
/// `input_rows = output_rows + rows_excluded_prior + rows_excluded_missing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub input_rows: usize,
    pub output_rows: usize,
    /// Subjects whose outcome is dated on or before their assessment.
    pub rows_excluded_prior: usize,
    pub rows_excluded_missing: usize,
    pub columns_dropped_rare: Vec<RareCategory>,
    pub derived_columns: Vec<String>,
}

/// Encodes and scales a cohort into a design matrix plus outcomes.
///
/// Steps, in order: exclude subjects with a pre-existing outcome, one-hot
/// encode categoricals (missing gets its own category) and drop one-hot
/// columns rarer than `rare_threshold`, exclude rows with missing
/// continuous/ordinal cells, then standardize continuous/ordinal columns on
/// the retained rows. Event-date columns are not features by themselves.
pub fn preprocess(cohort: &CohortTable, rare_threshold: f64) -> Result<(FeatureMatrix, Vec<SurvivalOutcome>, PreprocessReport)> {
    if !(0.0..1.0).contains(&rare_threshold) {
        return Err(Error::Config(format!("rare_threshold must be in [0,1), got {rare_threshold}")));
    }
    let n_input = cohort.n_rows();
    if n_input == 0 {
        return Err(Error::EmptyCohort);
    }

    let mut eligible = Vec::with_capacity(n_input);
    let mut outcomes = Vec::with_capacity(n_input);
    for row in 0..n_input {
        let start = cohort.assessment_date[row];
        let censor = cohort.censor_date[row];
        let (end, event) = match cohort.outcome_date[row] {
            Some(d) if d <= start => continue,
            Some(d) if d <= censor => (d, true),
            _ => (censor, false),
        };
        let days = (end - start).num_days();
        if days <= 0 {
            return Err(Error::Parse {
                row: row + 1,
                column: super::CENSOR_DATE.into(),
                message: "censor date must be after the assessment date".into(),
            });
        }
        eligible.push(row);
        outcomes.push(SurvivalOutcome::new(days as f64 / DAYS_PER_YEAR, event));
    }
    let rows_excluded_prior = n_input - eligible.len();
    if eligible.is_empty() {
        return Err(Error::EmptyCohort);
    }

    // Columns of the output matrix, computed over the eligible rows.
    struct Pending {
        name: String,
        source: String,
        cells: Vec<Option<f64>>,
        standardize: bool,
    }
    let mut pending = Vec::new();
    let mut dropped = Vec::new();
    let n_eligible = eligible.len() as f64;

    for (spec, data) in cohort.schema.iter().zip(&cohort.columns) {
        match (spec.kind, data) {
            (ColumnKind::Continuous | ColumnKind::Ordinal, ColumnData::Numeric(v)) => pending.push(Pending {
                name: spec.name.clone(),
                source: spec.name.clone(),
                cells: eligible.iter().map(|&r| v[r]).collect(),
                standardize: true,
            }),
            (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                let labels = spec.labels();
                let mut counts = vec![0usize; labels.len() + 1];
                for &r in &eligible {
                    counts[v[r].unwrap_or(labels.len())] += 1;
                }
                for (level, &count) in counts.iter().enumerate() {
                    let label = labels.get(level).map(String::as_str).unwrap_or(MISSING_CATEGORY);
                    let frequency = count as f64 / n_eligible;
                    if frequency < rare_threshold || count == 0 {
                        dropped.push(RareCategory { column: spec.name.clone(), category: label.to_string(), frequency });
                        continue;
                    }
                    let code = (level < labels.len()).then_some(level);
                    pending.push(Pending {
                        name: format!("{}={}", spec.name, label),
                        source: spec.name.clone(),
                        cells: eligible.iter().map(|&r| Some(if v[r] == code { 1.0 } else { 0.0 })).collect(),
                        standardize: false,
                    });
                }
            }
            (ColumnKind::EventDate, _) => {}
            _ => return Err(Error::Schema(format!("column `{}` storage does not match its kind", spec.name))),
        }
    }

    let keep: Vec<usize> = (0..eligible.len())
        .filter(|&i| pending.iter().all(|c| c.cells[i].is_some()))
        .collect();
    let rows_excluded_missing = eligible.len() - keep.len();
    if keep.is_empty() {
        return Err(Error::EmptyCohort);
    }

    let n = keep.len();
    let d = pending.len();
    let mut values = vec![0.0; n * d];
    let mut scaling = Vec::with_capacity(d);
    for (j, col) in pending.iter().enumerate() {
        let raw: Vec<f64> = keep.iter().map(|&i| col.cells[i].unwrap()).collect();
        let s = if col.standardize {
            let (mean, sd) = mean_sd(&raw);
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::DegenerateColumn(col.name.clone()));
            }
            Scaling::Standardized { mean, sd }
        } else {
            Scaling::Identity
        };
        for (i, x) in raw.into_iter().enumerate() {
            values[i * d + j] = s.apply(x);
        }
        scaling.push(s);
    }

    let mut matrix = FeatureMatrix::from_parts(n, pending.iter().map(|c| c.name.clone()).collect(), values)?;
    matrix.scaling = scaling;
    matrix.sources = pending.into_iter().map(|c| c.source).collect();
    let outcomes = keep.iter().map(|&i| outcomes[i]).collect();

    let report = PreprocessReport {
        input_rows: n_input,
        output_rows: n,
        rows_excluded_prior,
        rows_excluded_missing,
        columns_dropped_rare: dropped,
        derived_columns: cohort.derived.clone(),
    };
    Ok((matrix, outcomes, report))
}

/// Mean and sample (n-1) standard deviation.
fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}
