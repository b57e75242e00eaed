use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RawRun, StateLabel};
use crate::error::{Error, Result};

/// Column layout of a run CSV: one row per time step, a run id column, a
/// state column and one column per process variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub run_id_column: String,
    pub state_column: String,
    /// Extra non-variable columns (e.g. a sample counter) to skip.
    pub ignore_columns: Vec<String>,
    /// When set, the number of variable columns must match exactly.
    pub expected_variables: Option<usize>,
    /// Accept files without a state column; every run is then `UNKNOWN`.
    pub state_optional: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            run_id_column: "run_id".into(),
            state_column: "state".into(),
            ignore_columns: Vec::new(),
            expected_variables: None,
            state_optional: false,
        }
    }
}

/// Read runs from a CSV file. Rows sharing `(run_id, state)` form one run, in
/// file order; runs are returned in order of first appearance.
pub fn load_runs_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<RawRun>> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: shown.clone(),
        line,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let run_col = find(&schema.run_id_column)
        .ok_or_else(|| parse_err(1, format!("missing column `{}`", schema.run_id_column)))?;
    let state_col = match find(&schema.state_column) {
        Some(c) => Some(c),
        None if schema.state_optional => None,
        None => return Err(parse_err(1, format!("missing column `{}`", schema.state_column))),
    };
    for ignored in &schema.ignore_columns {
        if find(ignored).is_none() {
            return Err(parse_err(1, format!("missing column `{ignored}`")));
        }
    }
    let var_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != run_col && Some(i) != state_col && !schema.ignore_columns.iter().any(|c| c == &headers[i]))
        .collect();
    if var_cols.is_empty() {
        return Err(parse_err(1, "no variable columns".into()));
    }
    if let Some(want) = schema.expected_variables {
        if want != var_cols.len() {
            return Err(parse_err(
                1,
                format!("expected {want} variable columns, found {}", var_cols.len()),
            ));
        }
    }

    let mut order: Vec<(String, StateLabel)> = Vec::new();
    let mut groups: HashMap<(String, StateLabel), Vec<f64>> = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                let detail = match e.kind() {
                    csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                        format!("row has {len} fields, header has {expected_len}")
                    }
                    _ => e.to_string(),
                };
                return Err(parse_err(line, detail));
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let run_id = record[run_col].to_string();
        let state: StateLabel = match state_col {
            Some(c) => record[c].parse().map_err(|e| parse_err(line, e))?,
            None => StateLabel::Unknown,
        };
        let key = (run_id, state);
        let values = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        for &c in &var_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column `{}`: `{cell}` is not a number", &headers[c]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column `{}`: non-finite value", &headers[c])));
            }
            values.push(v);
        }
    }
    if order.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    order
        .into_iter()
        .map(|key| {
            let values = groups.remove(&key).expect("grouped run");
            RawRun::new(key.0, key.1, var_cols.len(), values)
        })
        .collect()
}

/// Write runs in the default schema (`run_id,state,<variables...>`).
pub fn write_runs_csv(path: impl AsRef<Path>, runs: &[RawRun], variable_names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    let mut header = vec!["run_id".to_string(), "state".to_string()];
    header.extend(variable_names.iter().cloned());
    writer.write_record(&header)?;
    for run in runs {
        if run.variables() != variable_names.len() {
            return Err(Error::Dimension {
                op: "write_runs_csv",
                axis: "variables",
                expected: variable_names.len(),
                found: run.variables(),
            });
        }
        let state = run.state.to_string();
        for t in 0..run.len() {
            let mut row = Vec::with_capacity(header.len());
            row.push(run.run_id.clone());
            row.push(state.clone());
            row.extend(run.step(t).iter().map(|v| v.to_string()));
            writer.write_record(&row)?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
