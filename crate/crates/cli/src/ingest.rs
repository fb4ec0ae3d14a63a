//! CSV ingestion into a typed [`CohortTable`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use equidecomp::partition::Selection;
use equidecomp::{CohortTable, Column, RoleBindings};

use crate::error::{CliError, CliResult};

/// How to type the columns of a file.
#[derive(Debug, Clone, Default)]
pub struct IngestSpec {
    /// Columns to read; `None` reads every header column.
    pub columns: Option<Vec<String>>,
    /// Categorical columns with declared levels (`Some`) or levels read
    /// from the data in sorted order (`None`). Everything else is numeric.
    pub categorical: BTreeMap<String, Option<Vec<String>>>,
    /// Column of nonnegative frequency weights, kept out of the table.
    pub weight_column: Option<String>,
    pub selection: Option<Selection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows with a missing value in some column read.
    pub rows_missing: usize,
    pub missing_by_column: BTreeMap<String, usize>,
    pub rows_dropped_by_selection: usize,
    pub rows_retained: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "N/A" | "NaN" | "nan")
}

pub fn ingest_csv(path: &Path, spec: &IngestSpec) -> CliResult<(CohortTable, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    ingest_reader(file, spec)
}

pub fn ingest_reader<R: Read>(reader: R, spec: &IngestSpec) -> CliResult<(CohortTable, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("unreadable header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut names = spec.columns.clone().unwrap_or_else(|| header.clone());
    if let Some(w) = &spec.weight_column {
        names.retain(|n| n != w);
    }
    let mut wanted: Vec<&String> = names.iter().collect();
    wanted.extend(spec.weight_column.as_ref());
    let mut position = BTreeMap::new();
    for name in wanted {
        let p = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Input(format!("column `{name}` is not in the header")))?;
        position.insert(name.clone(), p);
    }

    let mut raw: Vec<Vec<String>> = vec![Vec::new(); names.len()];
    let mut raw_weights = Vec::new();
    let mut report = IngestReport::default();
    let mut lines = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let at = e.position().map(|p| format!("line {}", p.line())).unwrap_or_else(|| "unknown line".into());
            CliError::Input(format!("{at}: {e}"))
        })?;
        report.rows_read += 1;
        let line = record.position().map_or(report.rows_read as u64 + 1, |p| p.line());
        let cell = |name: &str| record.get(position[name]).unwrap_or("");
        let mut missing = false;
        for name in names.iter().chain(spec.weight_column.as_ref()) {
            if is_missing(cell(name)) {
                *report.missing_by_column.entry(name.clone()).or_default() += 1;
                missing = true;
            }
        }
        if missing {
            report.rows_missing += 1;
            continue;
        }
        for (k, name) in names.iter().enumerate() {
            raw[k].push(cell(name).trim().to_string());
        }
        if let Some(w) = &spec.weight_column {
            raw_weights.push(cell(w).trim().to_string());
        }
        lines.push(line);
    }

    let mut columns = Vec::with_capacity(names.len());
    for (name, cells) in names.iter().zip(&raw) {
        let column = match spec.categorical.get(name) {
            Some(declared) => categorical(name, cells, declared.as_deref(), &lines)?,
            None => Column::Numeric(numeric(name, cells, &lines)?),
        };
        columns.push(column);
    }
    let weights = match &spec.weight_column {
        None => None,
        Some(w) => {
            let values = numeric(w, &raw_weights, &lines)?;
            if let Some(i) = values.iter().position(|v| *v < 0.0) {
                return Err(CliError::Input(format!("line {}, column `{w}`: negative weight", lines[i])));
            }
            Some(values)
        }
    };
    let table = CohortTable::new(names, columns, weights)?;
    let table = match &spec.selection {
        None => table,
        Some(sel) => {
            // Role bindings only carry the selection here.
            let mut roles = RoleBindings::new("", "", "", "", "");
            roles.selection = Some(sel.clone());
            let (kept, dropped) = table.select(&roles)?;
            report.rows_dropped_by_selection = dropped;
            kept
        }
    };
    report.rows_retained = table.n_rows();
    if table.n_rows() == 0 {
        return Err(equidecomp::Error::EmptyCohort(format!(
            "no usable rows ({} read, {} with missing values, {} outside the selection)",
            report.rows_read, report.rows_missing, report.rows_dropped_by_selection
        ))
        .into());
    }
    Ok((table, report))
}

fn categorical(name: &str, cells: &[String], declared: Option<&[String]>, lines: &[u64]) -> CliResult<Column> {
    let levels: Vec<String> = match declared {
        Some(l) => l.to_vec(),
        None => cells.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let index: BTreeMap<&str, u32> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
    let codes = cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            index.get(c.as_str()).copied().ok_or_else(|| {
                CliError::Input(format!("line {}, column `{name}`: `{c}` is not a declared level {levels:?}", lines[i]))
            })
        })
        .collect::<CliResult<Vec<u32>>>()?;
    Ok(Column::Categorical { levels, codes })
}

fn numeric(name: &str, cells: &[String], lines: &[u64]) -> CliResult<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| match c.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(CliError::Input(format!("line {}, column `{name}`: cannot read `{c}` as a number", lines[i]))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> IngestSpec {
        IngestSpec {
            categorical: BTreeMap::from([("g".to_string(), Some(vec!["a".to_string(), "b".to_string()]))]),
            ..Default::default()
        }
    }

    #[test]
    fn header_only_is_an_empty_cohort() {
        let err = ingest_reader("g,x\n".as_bytes(), &spec()).unwrap_err();
        assert!(matches!(err, CliError::Core(equidecomp::Error::EmptyCohort(_))));
    }

    #[test]
    fn missing_cells_are_counted_not_imputed() {
        let (t, r) = ingest_reader("g,x\na,1\n,2\nb,NA\nb,4\n".as_bytes(), &spec()).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(r.rows_missing, 2);
        assert_eq!(r.missing_by_column["g"], 1);
        assert_eq!(r.missing_by_column["x"], 1);
        assert_eq!(t.numeric("x").unwrap(), vec![1.0, 4.0]);
    }

    #[test]
    fn bad_cells_name_line_and_column() {
        let err = ingest_reader("g,x\na,1\na,oops\n".as_bytes(), &spec()).unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("`x`"), "{err}");
        let err = ingest_reader("g,x\nc,1\n".as_bytes(), &spec()).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("`g`"), "{err}");
    }

    #[test]
    fn selection_keeps_matching_rows() {
        let mut s = spec();
        s.selection = Some(Selection { variable: "x".into(), level: "1".into() });
        let (t, r) = ingest_reader("g,x\na,1\nb,0\nb,1\na,0\na,1\n".as_bytes(), &s).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(r.rows_dropped_by_selection, 2);
    }

    #[test]
    fn weight_column_becomes_row_weights() {
        let mut s = spec();
        s.weight_column = Some("w".into());
        let (t, _) = ingest_reader("g,x,w\na,1,0.5\nb,2,2\n".as_bytes(), &s).unwrap();
        assert_eq!(t.names(), ["g", "x"]);
        assert_eq!(t.weights().unwrap(), [0.5, 2.0]);
    }

    #[test]
    fn unknown_column_is_reported() {
        let mut s = spec();
        s.columns = Some(vec!["g".into(), "z".into()]);
        let err = ingest_reader("g,x\na,1\n".as_bytes(), &s).unwrap_err().to_string();
        assert!(err.contains("`z`"), "{err}");
    }
}
