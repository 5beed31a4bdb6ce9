//! Column schema and CSV ingestion.
//!
//! Data files are UTF-8, comma-delimited, with a header row; `NA` or an empty
//! cell marks a missing value. The schema is a JSON object mapping column
//! name to `{"kind": ..., "levels": [...]}`. Rows with a missing value in any
//! schema column are dropped (listwise deletion) and counted per column.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Declared kind of a data column.
///
/// For a binary response the optional `levels` pair maps `levels[0]` to 0 and
/// `levels[1]` to 1; without declared levels the cells must literally be
/// `0`/`1`. Factor level order is meaningful: it fixes contrast signs and,
/// for ordered factors, the polynomial coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Covariate,
    Factor { levels: Vec<String> },
    OrderedFactor { levels: Vec<String> },
    Response {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<String>>,
    },
}

impl ColumnKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ColumnKind::Covariate => "covariate",
            ColumnKind::Factor { .. } => "factor",
            ColumnKind::OrderedFactor { .. } => "ordered_factor",
            ColumnKind::Response { .. } => "response",
        }
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Factor { levels } | ColumnKind::OrderedFactor { levels } => Some(levels),
            ColumnKind::Response { levels } => levels.as_deref(),
            ColumnKind::Covariate => None,
        }
    }
}

/// Per-run declaration of every column the model may reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColumnSchema {
    pub columns: BTreeMap<String, ColumnKind>,
}

impl ColumnSchema {
    pub fn get(&self, name: &str) -> Option<&ColumnKind> {
        self.columns.get(name)
    }

    pub fn response_column(&self) -> Option<&str> {
        self.columns
            .iter()
            .find(|(_, k)| matches!(k, ColumnKind::Response { .. }))
            .map(|(n, _)| n.as_str())
    }

    /// Structural checks: non-empty duplicate-free level lists and exactly
    /// one response column.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut responses = 0;
        for (name, kind) in &self.columns {
            if let Some(levels) = kind.levels() {
                if levels.is_empty() {
                    return Err(DataError::BadSchema {
                        detail: format!("column `{name}` declares an empty level list"),
                    });
                }
                for (i, l) in levels.iter().enumerate() {
                    if levels[i + 1..].contains(l) {
                        return Err(DataError::BadSchema {
                            detail: format!("column `{name}` repeats level `{l}`"),
                        });
                    }
                }
            }
            if matches!(kind, ColumnKind::Response { .. }) {
                responses += 1;
            }
        }
        if responses != 1 {
            return Err(DataError::BadSchema {
                detail: format!("expected exactly one response column, found {responses}"),
            });
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let schema: ColumnSchema = serde_json::from_str(text).map_err(|e| DataError::BadSchema {
            detail: e.to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }
}

/// Convenience constructor used by tests and the simulator.
pub fn schema_from_pairs(pairs: &[(&str, ColumnKind)]) -> ColumnSchema {
    ColumnSchema {
        columns: pairs
            .iter()
            .map(|(n, k)| (n.to_string(), k.clone()))
            .collect(),
    }
}

/// One typed, loaded column.
#[derive(Debug, Clone)]
pub enum Column {
    Covariate(Vec<f64>),
    Factor {
        codes: Vec<u32>,
        levels: Vec<String>,
        ordered: bool,
    },
    Response(Vec<u8>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Covariate(v) => v.len(),
            Column::Factor { codes, .. } => codes.len(),
            Column::Response(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Typed dataset after listwise deletion.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub columns: BTreeMap<String, Column>,
    pub response: String,
    /// Rows dropped because of a missing value in any schema column.
    pub dropped_rows: usize,
    /// Missing-cell counts among dropped rows, per column (schema order).
    pub missing_by_column: Vec<(String, usize)>,
}

impl Dataset {
    pub fn response_values(&self) -> &[u8] {
        match &self.columns[&self.response] {
            Column::Response(v) => v,
            _ => unreachable!("response column has response kind"),
        }
    }

    pub fn covariate(&self, name: &str) -> Option<&[f64]> {
        match self.columns.get(name)? {
            Column::Covariate(v) => Some(v),
            _ => None,
        }
    }

    pub fn factor(&self, name: &str) -> Option<(&[u32], &[String])> {
        match self.columns.get(name)? {
            Column::Factor { codes, levels, .. } => Some((codes, levels)),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data: cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("data: invalid schema: {detail}")]
    BadSchema { detail: String },
    #[error("data: malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("data: column `{column}` declared in the schema is absent from the CSV header")]
    MissingColumn { column: String },
    #[error("data: row {row}, column `{column}`: cannot parse `{value}` as {expected}")]
    BadCell {
        row: usize,
        column: String,
        value: String,
        expected: String,
    },
    #[error("data: row {row}, column `{column}`: value `{value}` is not a declared level")]
    UnknownLevel {
        row: usize,
        column: String,
        value: String,
    },
    #[error("data: no usable rows after dropping {dropped} incomplete rows")]
    NoUsableRows { dropped: usize },
    #[error("data: covariate `{column}` has zero variance")]
    ZeroVariance { column: String },
    #[error("data: factor `{column}` has a single observed level")]
    SingleObservedLevel { column: String },
    #[error("data: column `{column}` is not a {expected}")]
    WrongColumnType { column: String, expected: String },
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

/// Load a CSV against a schema: typed columns, listwise deletion with
/// per-column missing counts.
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<Dataset, DataError> {
    schema.validate()?;
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader.headers()?.clone();
    let mut col_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        col_index.entry(h).or_insert(i);
    }
    for name in schema.columns.keys() {
        if !col_index.contains_key(name.as_str()) {
            return Err(DataError::MissingColumn {
                column: name.clone(),
            });
        }
    }

    // Raw cells for schema columns only, in schema order.
    let names: Vec<&String> = schema.columns.keys().collect();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut missing: Vec<usize> = vec![0; names.len()];
    let mut dropped = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let cells: Vec<&str> = names
            .iter()
            .map(|n| record.get(col_index[n.as_str()]).unwrap_or(""))
            .collect();
        if cells.iter().any(|c| is_missing(c)) {
            dropped += 1;
            for (j, c) in cells.iter().enumerate() {
                if is_missing(c) {
                    missing[j] += 1;
                }
            }
            continue;
        }
        let _ = row_idx;
        for (j, c) in cells.iter().enumerate() {
            raw[j].push(c.to_string());
        }
    }

    let n = raw.first().map_or(0, |c| c.len());
    if n == 0 {
        return Err(DataError::NoUsableRows { dropped });
    }

    let mut columns = BTreeMap::new();
    for (j, name) in names.iter().enumerate() {
        let kind = &schema.columns[name.as_str()];
        let col = parse_column(name, kind, &raw[j])?;
        columns.insert((*name).clone(), col);
    }

    let response = schema
        .response_column()
        .expect("validated schema has a response")
        .to_string();

    Ok(Dataset {
        n,
        columns,
        response,
        dropped_rows: dropped,
        missing_by_column: names.iter().map(|n| n.to_string()).zip(missing).collect(),
    })
}

fn parse_column(name: &str, kind: &ColumnKind, cells: &[String]) -> Result<Column, DataError> {
    match kind {
        ColumnKind::Covariate => {
            let mut out = Vec::with_capacity(cells.len());
            for (i, c) in cells.iter().enumerate() {
                let v: f64 = c.trim().parse().map_err(|_| DataError::BadCell {
                    row: i + 1,
                    column: name.to_string(),
                    value: c.clone(),
                    expected: "a number".to_string(),
                })?;
                out.push(v);
            }
            Ok(Column::Covariate(out))
        }
        ColumnKind::Factor { levels } | ColumnKind::OrderedFactor { levels } => {
            let ordered = matches!(kind, ColumnKind::OrderedFactor { .. });
            let mut codes = Vec::with_capacity(cells.len());
            for (i, c) in cells.iter().enumerate() {
                let code = levels.iter().position(|l| l == c).ok_or_else(|| {
                    DataError::UnknownLevel {
                        row: i + 1,
                        column: name.to_string(),
                        value: c.clone(),
                    }
                })?;
                codes.push(code as u32);
            }
            Ok(Column::Factor {
                codes,
                levels: levels.clone(),
                ordered,
            })
        }
        ColumnKind::Response { levels } => {
            let mut out = Vec::with_capacity(cells.len());
            for (i, c) in cells.iter().enumerate() {
                let v = match levels {
                    Some(levels) => match levels.iter().position(|l| l == c) {
                        Some(0) => 0u8,
                        Some(1) => 1u8,
                        _ => {
                            return Err(DataError::UnknownLevel {
                                row: i + 1,
                                column: name.to_string(),
                                value: c.clone(),
                            })
                        }
                    },
                    None => match c.trim() {
                        "0" => 0u8,
                        "1" => 1u8,
                        _ => {
                            return Err(DataError::BadCell {
                                row: i + 1,
                                column: name.to_string(),
                                value: c.clone(),
                                expected: "0 or 1".to_string(),
                            })
                        }
                    },
                };
                out.push(v);
            }
            Ok(Column::Response(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn basic_schema() -> ColumnSchema {
        schema_from_pairs(&[
            ("y", ColumnKind::Response { levels: None }),
            ("x", ColumnKind::Covariate),
            (
                "cond",
                ColumnKind::Factor {
                    levels: vec!["A".into(), "B".into()],
                },
            ),
        ])
    }

    #[test]
    fn loads_complete_file() {
        let mut body = String::from("y,x,cond\n");
        for i in 0..50 {
            body.push_str(&format!("{},{},{}\n", i % 2, i, if i % 2 == 0 { "A" } else { "B" }));
        }
        let f = write_temp(&body);
        let ds = load_csv(f.path(), &basic_schema()).unwrap();
        assert_eq!(ds.n, 50);
        assert_eq!(ds.dropped_rows, 0);
        assert_eq!(ds.response_values().iter().filter(|&&v| v == 1).count(), 25);
    }

    #[test]
    fn bad_covariate_cell_names_row_and_column() {
        let f = write_temp("y,x,cond\n1,abc,A\n");
        let err = load_csv(f.path(), &basic_schema()).unwrap_err();
        match err {
            DataError::BadCell { row, column, value, .. } => {
                assert_eq!(row, 1);
                assert_eq!(column, "x");
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_responses_are_dropped_and_counted() {
        let f = write_temp("y,x,cond\n1,1.0,A\nNA,2.0,B\n,3.0,A\n0,4.0,B\nNA,5.0,A\n");
        let ds = load_csv(f.path(), &basic_schema()).unwrap();
        assert_eq!(ds.n, 2);
        assert_eq!(ds.dropped_rows, 3);
        let y_missing = ds
            .missing_by_column
            .iter()
            .find(|(n, _)| n == "y")
            .unwrap()
            .1;
        assert_eq!(y_missing, 3);
    }

    #[test]
    fn unknown_factor_level_is_an_error() {
        let f = write_temp("y,x,cond\n1,1.0,C\n");
        assert!(matches!(
            load_csv(f.path(), &basic_schema()).unwrap_err(),
            DataError::UnknownLevel { .. }
        ));
    }

    #[test]
    fn all_rows_missing_is_an_error() {
        let f = write_temp("y,x,cond\nNA,1.0,A\n");
        assert!(matches!(
            load_csv(f.path(), &basic_schema()).unwrap_err(),
            DataError::NoUsableRows { dropped: 1 }
        ));
    }

    #[test]
    fn response_levels_map_in_declared_order() {
        let schema = schema_from_pairs(&[
            (
                "acc",
                ColumnKind::Response {
                    levels: Some(vec!["incorrect".into(), "correct".into()]),
                },
            ),
            ("x", ColumnKind::Covariate),
        ]);
        let f = write_temp("acc,x\ncorrect,1\nincorrect,2\n");
        let ds = load_csv(f.path(), &schema).unwrap();
        assert_eq!(ds.response_values(), &[1, 0]);
    }

    #[test]
    fn schema_json_roundtrip() {
        let text = r#"{
            "y": {"kind": "response"},
            "x": {"kind": "covariate"},
            "syll": {"kind": "ordered_factor", "levels": ["one", "two", "three"]},
            "subj": {"kind": "factor", "levels": ["s1", "s2"]}
        }"#;
        let schema = ColumnSchema::from_json(text).unwrap();
        assert_eq!(schema.response_column(), Some("y"));
        assert!(matches!(
            schema.get("syll"),
            Some(ColumnKind::OrderedFactor { .. })
        ));
        let back = serde_json::to_string(&schema).unwrap();
        let again = ColumnSchema::from_json(&back).unwrap();
        assert_eq!(schema, again);
    }

    #[test]
    fn duplicate_levels_rejected() {
        let schema = schema_from_pairs(&[
            ("y", ColumnKind::Response { levels: None }),
            (
                "a",
                ColumnKind::Factor {
                    levels: vec!["x".into(), "x".into()],
                },
            ),
        ]);
        assert!(matches!(
            schema.validate(),
            Err(DataError::BadSchema { .. })
        ));
    }
}
