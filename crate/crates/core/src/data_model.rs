//! Mixed-type datasets with explicit missingness, plus CSV ingestion.
//!
//! A dataset is an n × (m+k) grid of [`Cell`]s described by a schema of
//! binary and continuous fields. Missingness is explicit: a `Missing` cell
//! contributes likelihood 1 (log-likelihood 0) downstream, so no sentinel
//! values ever enter the numeric pipeline.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Kind of an observed field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    /// Bernoulli-distributed field taking values 0 or 1.
    Binary,
    /// Gaussian-distributed field taking finite real values.
    Continuous,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Binary => write!(f, "binary"),
            FieldKind::Continuous => write!(f, "continuous"),
        }
    }
}

/// Name, kind and position of one dataset column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    /// Zero-based position of the field among the data columns.
    pub column_index: usize,
}

/// One observed or missing value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    /// An observed value: exactly 0.0/1.0 for binary fields, any finite real
    /// for continuous fields.
    Present(f64),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

/// Per-field and overall missing fractions.
#[derive(Debug, Clone)]
pub struct MissingnessSummary {
    /// (field name, fraction of records missing that field), in schema order.
    pub per_field: Vec<(String, f64)>,
    /// Missing cells over all n·(m+k) cells.
    pub overall: f64,
}

/// An immutable validated dataset.
///
/// Rows are stored in schema (file) order. The model convention puts binary
/// fields before continuous ones; [`Dataset::model_row`] and
/// [`Dataset::model_field_names`] provide that reordered view.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Vec<FieldSchema>,
    record_ids: Vec<String>,
    rows: Vec<Vec<Cell>>,
    binary_indices: Vec<usize>,
    continuous_indices: Vec<usize>,
}

impl Dataset {
    /// Validates and constructs a dataset. Enforces: at least one record and
    /// one field, unique nonempty field names, unique record ids, binary
    /// cells in {0, 1}, continuous cells finite, and no all-missing rows.
    pub fn new(
        schema: Vec<FieldSchema>,
        record_ids: Vec<String>,
        rows: Vec<Vec<Cell>>,
    ) -> Result<Self> {
        if schema.is_empty() {
            return Err(Error::Dataset("dataset needs at least one field".into()));
        }
        if rows.is_empty() {
            return Err(Error::Dataset("dataset needs at least one record".into()));
        }
        if record_ids.len() != rows.len() {
            return Err(Error::Dataset(format!(
                "{} record ids for {} rows",
                record_ids.len(),
                rows.len()
            )));
        }
        let mut names = HashSet::new();
        for (i, field) in schema.iter().enumerate() {
            if field.name.is_empty() {
                return Err(Error::Schema(format!("field {i} has an empty name")));
            }
            if !names.insert(field.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name '{}'", field.name)));
            }
            if field.column_index != i {
                return Err(Error::Schema(format!(
                    "field '{}' declares column index {} but sits at position {}",
                    field.name, field.column_index, i
                )));
            }
        }
        let mut ids = HashSet::new();
        for id in &record_ids {
            if !ids.insert(id.as_str()) {
                return Err(Error::Dataset(format!("duplicate record id '{id}'")));
            }
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Dataset(format!(
                    "record '{}' has {} cells, schema has {} fields",
                    record_ids[r],
                    row.len(),
                    schema.len()
                )));
            }
            let mut any_present = false;
            for (j, cell) in row.iter().enumerate() {
                if let Cell::Present(v) = cell {
                    any_present = true;
                    match schema[j].kind {
                        FieldKind::Binary => {
                            if *v != 0.0 && *v != 1.0 {
                                return Err(Error::Cell {
                                    row: r + 1,
                                    column: schema[j].name.clone(),
                                    message: format!("binary value {v} outside {{0, 1}}"),
                                });
                            }
                        }
                        FieldKind::Continuous => {
                            if !v.is_finite() {
                                return Err(Error::Cell {
                                    row: r + 1,
                                    column: schema[j].name.clone(),
                                    message: "continuous value is not finite".into(),
                                });
                            }
                        }
                    }
                }
            }
            if !any_present {
                return Err(Error::Dataset(format!(
                    "record '{}' is entirely missing",
                    record_ids[r]
                )));
            }
        }
        let binary_indices = schema
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FieldKind::Binary)
            .map(|(i, _)| i)
            .collect();
        let continuous_indices = schema
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FieldKind::Continuous)
            .map(|(i, _)| i)
            .collect();
        Ok(Dataset {
            schema,
            record_ids,
            rows,
            binary_indices,
            continuous_indices,
        })
    }

    pub fn n_records(&self) -> usize {
        self.rows.len()
    }

    pub fn n_fields(&self) -> usize {
        self.schema.len()
    }

    /// Number of binary fields (m).
    pub fn n_binary(&self) -> usize {
        self.binary_indices.len()
    }

    /// Number of continuous fields (k).
    pub fn n_continuous(&self) -> usize {
        self.continuous_indices.len()
    }

    pub fn schema(&self) -> &[FieldSchema] {
        &self.schema
    }

    pub fn record_ids(&self) -> &[String] {
        &self.record_ids
    }

    /// Row in schema (file) order.
    pub fn row(&self, i: usize) -> &[Cell] {
        &self.rows[i]
    }

    /// Row reordered to the model convention: binary fields first (in schema
    /// order), then continuous fields (in schema order).
    pub fn model_row(&self, i: usize) -> Vec<Cell> {
        let row = &self.rows[i];
        self.binary_indices
            .iter()
            .chain(self.continuous_indices.iter())
            .map(|&j| row[j])
            .collect()
    }

    /// Field names in the model convention order (binary first).
    pub fn model_field_names(&self) -> Vec<String> {
        self.binary_indices
            .iter()
            .chain(self.continuous_indices.iter())
            .map(|&j| self.schema[j].name.clone())
            .collect()
    }

    /// All rows in model order; convenience for the fitting pipeline.
    pub fn model_rows(&self) -> Vec<Vec<Cell>> {
        (0..self.n_records()).map(|i| self.model_row(i)).collect()
    }

    /// Per-field and overall missing fractions.
    pub fn missingness_summary(&self) -> MissingnessSummary {
        let n = self.n_records() as f64;
        let mut per_field = Vec::with_capacity(self.schema.len());
        let mut total_missing = 0usize;
        for (j, field) in self.schema.iter().enumerate() {
            let missing = self.rows.iter().filter(|row| row[j].is_missing()).count();
            total_missing += missing;
            per_field.push((field.name.clone(), missing as f64 / n));
        }
        MissingnessSummary {
            per_field,
            overall: total_missing as f64 / (n * self.schema.len() as f64),
        }
    }

    /// Writes the dataset back to CSV (with its id column) in a form that
    /// `load_csv` reloads cell-for-cell, Missing included.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        let mut header = vec!["id".to_string()];
        header.extend(self.schema.iter().map(|f| f.name.clone()));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut record = vec![self.record_ids[i].clone()];
            for (j, cell) in row.iter().enumerate() {
                record.push(match cell {
                    Cell::Missing => String::new(),
                    Cell::Present(v) => match self.schema[j].kind {
                        FieldKind::Binary => format!("{}", *v as i64),
                        FieldKind::Continuous => format!("{v}"),
                    },
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the schema sidecar (`name,kind` per line) alongside a CSV.
    pub fn write_schema<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        for field in &self.schema {
            writeln!(f, "{},{}", field.name, field.kind)?;
        }
        Ok(())
    }
}

pub fn is_missing_token(token: &str) -> bool {
    token.is_empty() || token.eq_ignore_ascii_case("na")
}

/// Parses the schema sidecar: one `name,kind` line per data column with kind
/// in {binary, continuous} (case-insensitive). Blank lines are skipped.
pub fn load_schema<P: AsRef<Path>>(path: P) -> Result<Vec<FieldSchema>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut schema = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, kind) = line.split_once(',').ok_or_else(|| {
            Error::Schema(format!("line {}: expected 'name,kind'", line_no + 1))
        })?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "binary" => FieldKind::Binary,
            "continuous" => FieldKind::Continuous,
            other => {
                return Err(Error::Schema(format!(
                    "line {}: unknown kind '{other}' (expected binary or continuous)",
                    line_no + 1
                )))
            }
        };
        schema.push(FieldSchema {
            name: name.trim().to_string(),
            kind,
            column_index: schema.len(),
        });
    }
    if schema.is_empty() {
        return Err(Error::Schema("schema file declares no fields".into()));
    }
    Ok(schema)
}

/// Loads a dataset from a UTF-8 comma-separated file whose first row is a
/// header and whose first column holds record ids, validated against the
/// sidecar schema. Missing tokens are "" and "NA" (case-insensitive).
pub fn load_csv<P: AsRef<Path>, Q: AsRef<Path>>(path: P, schema_path: Q) -> Result<Dataset> {
    let schema = load_schema(schema_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;

    let headers = reader.headers()?.clone();
    if headers.len() != schema.len() + 1 {
        return Err(Error::Schema(format!(
            "header has {} data columns, schema declares {}",
            headers.len().saturating_sub(1),
            schema.len()
        )));
    }
    for (j, field) in schema.iter().enumerate() {
        let header = headers.get(j + 1).unwrap_or("");
        if header != field.name {
            return Err(Error::Schema(format!(
                "column {} is named '{header}' but schema declares '{}'",
                j + 2,
                field.name
            )));
        }
    }

    let mut record_ids = Vec::new();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != schema.len() + 1 {
            return Err(Error::Dataset(format!(
                "row {} has {} columns, expected {}",
                r + 1,
                record.len(),
                schema.len() + 1
            )));
        }
        record_ids.push(record.get(0).unwrap_or("").to_string());
        let mut row = Vec::with_capacity(schema.len());
        for (j, field) in schema.iter().enumerate() {
            let token = record.get(j + 1).unwrap_or("").trim();
            if is_missing_token(token) {
                row.push(Cell::Missing);
                continue;
            }
            let value: f64 = token.parse().map_err(|_| Error::Cell {
                row: r + 1,
                column: field.name.clone(),
                message: format!("cannot parse '{token}' as a number"),
            })?;
            match field.kind {
                FieldKind::Binary if value != 0.0 && value != 1.0 => {
                    return Err(Error::Cell {
                        row: r + 1,
                        column: field.name.clone(),
                        message: format!("binary value {token} outside {{0, 1}}"),
                    });
                }
                FieldKind::Continuous if !value.is_finite() => {
                    return Err(Error::Cell {
                        row: r + 1,
                        column: field.name.clone(),
                        message: "continuous value is not finite".into(),
                    });
                }
                _ => {}
            }
            row.push(Cell::Present(value));
        }
        rows.push(row);
    }

    Dataset::new(schema, record_ids, rows)
}
