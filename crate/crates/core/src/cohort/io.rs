use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{
    validate_schema, CohortTable, ColumnData, ColumnKind, ColumnSpec, ASSESSMENT_DATE, CENSOR_DATE,
    OUTCOME_DATE, RESERVED_COLUMNS,
};
use crate::error::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Reads a schema document: a JSON array of column specs.
pub fn load_schema(path: impl AsRef<Path>) -> Result<Vec<ColumnSpec>> {
    let schema: Vec<ColumnSpec> = serde_json::from_reader(File::open(path)?)?;
    validate_schema(&schema)?;
    Ok(schema)
}

/// Loads a cohort CSV. The header must contain the three reserved date
/// columns plus exactly the schema's column names, in any order.
pub fn load_cohort(path: impl AsRef<Path>, schema: &[ColumnSpec]) -> Result<CohortTable> {
    read_cohort(File::open(path)?, schema)
}

pub fn read_cohort<R: Read>(reader: R, schema: &[ColumnSpec]) -> Result<CohortTable> {
    validate_schema(schema)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    if position.len() != header.len() {
        return Err(Error::Schema("duplicate header column".into()));
    }
    let mut problems = Vec::new();
    for reserved in RESERVED_COLUMNS {
        if !position.contains_key(reserved) {
            problems.push(format!("missing reserved column `{reserved}`"));
        }
    }
    for col in schema {
        if !position.contains_key(col.name.as_str()) {
            problems.push(format!("schema column `{}` not in header", col.name));
        }
    }
    for h in &header {
        if !RESERVED_COLUMNS.contains(&h.as_str()) && !schema.iter().any(|c| &c.name == h) {
            problems.push(format!("header column `{h}` not in schema"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Schema(problems.join("; ")));
    }

    let mut columns: Vec<ColumnData> = schema
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Continuous | ColumnKind::Ordinal => ColumnData::Numeric(Vec::new()),
            ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
            ColumnKind::EventDate => ColumnData::Date(Vec::new()),
        })
        .collect();
    let mut assessment = Vec::new();
    let mut outcome = Vec::new();
    let mut censor = Vec::new();

    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |name: &str| record.get(position[name]).unwrap_or("").trim();

        assessment.push(required_date(cell(ASSESSMENT_DATE), row, ASSESSMENT_DATE)?);
        outcome.push(optional_date(cell(OUTCOME_DATE), row, OUTCOME_DATE)?);
        censor.push(required_date(cell(CENSOR_DATE), row, CENSOR_DATE)?);

        for (spec, data) in schema.iter().zip(columns.iter_mut()) {
            let raw = cell(&spec.name);
            match data {
                ColumnData::Numeric(v) => v.push(match spec.kind {
                    ColumnKind::Ordinal => parse_ordinal(raw, spec.labels()),
                    _ => parse_number(raw),
                }),
                ColumnData::Categorical(v) => v.push(spec.labels().iter().position(|l| l == raw)),
                ColumnData::Date(v) => v.push(optional_date(raw, row, &spec.name)?),
            }
        }
    }

    CohortTable::new(schema.to_vec(), columns, assessment, outcome, censor)
}

fn parse_number(raw: &str) -> Option<f64> {
    raw.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Ordinal cells are matched against the level labels first, then accepted
/// as a zero-based level index.
fn parse_ordinal(raw: &str, levels: &[String]) -> Option<f64> {
    if let Some(i) = levels.iter().position(|l| l == raw) {
        return Some(i as f64);
    }
    let idx = parse_number(raw)?;
    (idx.fract() == 0.0 && idx >= 0.0 && (idx as usize) < levels.len()).then_some(idx)
}

fn optional_date(raw: &str, row: usize, column: &str) -> Result<Option<NaiveDate>> {
    if raw.is_empty() {
        return Ok(None);
    }
    NaiveDate::parse_from_str(raw, DATE_FORMAT).map(Some).map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("invalid date `{raw}`: {e}"),
    })
}

fn required_date(raw: &str, row: usize, column: &str) -> Result<NaiveDate> {
    optional_date(raw, row, column)?.ok_or_else(|| Error::Parse {
        row,
        column: column.to_string(),
        message: "date is required".into(),
    })
}

/// Writes the cohort as CSV: schema columns first, then the reserved dates.
pub fn write_cohort_csv<W: Write>(table: &CohortTable, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = table.schema.iter().map(|c| c.name.as_str()).collect();
    header.extend(RESERVED_COLUMNS);
    wtr.write_record(&header)?;

    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for row in 0..table.n_rows() {
        record.clear();
        for (spec, data) in table.schema.iter().zip(&table.columns) {
            record.push(match data {
                ColumnData::Numeric(v) => match (spec.kind, v[row]) {
                    (_, None) => String::new(),
                    (ColumnKind::Ordinal, Some(x)) => spec.labels()[x as usize].clone(),
                    (_, Some(x)) => x.to_string(),
                },
                ColumnData::Categorical(v) => v[row].map(|c| spec.labels()[c].clone()).unwrap_or_default(),
                ColumnData::Date(v) => v[row].map(format_date).unwrap_or_default(),
            });
        }
        record.push(format_date(table.assessment_date[row]));
        record.push(table.outcome_date[row].map(format_date).unwrap_or_default());
        record.push(format_date(table.censor_date[row]));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FORMAT).to_string()
}
