//! Row-level cohort data with typed columns.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dist::{FiniteJoint, VariableSpec};
use crate::error::{Error, Result};
use crate::partition::RoleBindings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    /// Codes index into `levels`.
    Categorical { levels: Vec<String>, codes: Vec<u32> },
    Numeric(Vec<f64>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Categorical { codes, .. } => codes.len(),
            Column::Numeric(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn levels(&self) -> Option<&[String]> {
        match self {
            Column::Categorical { levels, .. } => Some(levels),
            Column::Numeric(_) => None,
        }
    }

    fn take(&self, rows: &[usize]) -> Column {
        match self {
            Column::Categorical { levels, codes } => Column::Categorical {
                levels: levels.clone(),
                codes: rows.iter().map(|&r| codes[r]).collect(),
            },
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
        }
    }

    /// Display value of one row.
    pub fn label(&self, row: usize) -> String {
        match self {
            Column::Categorical { levels, codes } => levels[codes[row] as usize].clone(),
            Column::Numeric(v) => format!("{:?}", v[row]),
        }
    }
}

/// A cohort: named columns of equal length and optional nonnegative row
/// weights (frequency or probability weights; unweighted rows count 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTable {
    names: Vec<String>,
    columns: Vec<Column>,
    weights: Option<Vec<f64>>,
}

impl CohortTable {
    pub fn new(names: Vec<String>, columns: Vec<Column>, weights: Option<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema("column names and columns differ in number".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Schema(format!("duplicate column `{n}`")));
            }
        }
        let n = columns.first().map_or(0, Column::len);
        if let Some((name, _)) = names.iter().zip(&columns).find(|(_, c)| c.len() != n) {
            return Err(Error::Schema(format!("column `{name}` has a different length")));
        }
        for (name, c) in names.iter().zip(&columns) {
            if let Column::Categorical { levels, codes } = c {
                if codes.iter().any(|&k| k as usize >= levels.len()) {
                    return Err(Error::Schema(format!("column `{name}` has codes outside its levels")));
                }
            }
        }
        if let Some(w) = &weights {
            if w.len() != n {
                return Err(Error::Schema("row weights have a different length".into()));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::Schema("row weights must be finite and nonnegative".into()));
            }
        }
        Ok(CohortTable { names, columns, weights })
    }

    /// One row per positive-probability cell, weighted by the cell probability.
    pub fn from_joint(joint: &FiniteJoint) -> CohortTable {
        let k = joint.variables().len();
        let mut codes: Vec<Vec<u32>> = vec![Vec::new(); k];
        let mut weights = Vec::new();
        joint.for_each_cell(|a, p| {
            if p > 0.0 {
                for (c, &l) in codes.iter_mut().zip(a) {
                    c.push(l as u32);
                }
                weights.push(p);
            }
        });
        let columns = joint
            .variables()
            .iter()
            .zip(codes)
            .map(|(v, codes)| Column::Categorical { levels: v.levels().to_vec(), codes })
            .collect();
        CohortTable {
            names: joint.names().iter().map(|s| s.to_string()).collect(),
            columns,
            weights: Some(weights),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Column::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown column `{name}`")))
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.index_of(name)?])
    }

    /// Levels and codes of a categorical column.
    pub fn categorical(&self, name: &str) -> Result<(&[String], &[u32])> {
        match self.column(name)? {
            Column::Categorical { levels, codes } => Ok((levels, codes)),
            Column::Numeric(_) => Err(Error::Schema(format!("column `{name}` must be categorical"))),
        }
    }

    /// Numeric values of a column; categorical labels must parse as numbers.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v.clone()),
            Column::Categorical { levels, codes } => {
                let values = levels
                    .iter()
                    .map(|l| {
                        l.parse::<f64>().map_err(|_| {
                            Error::Schema(format!("column `{name}` has non-numeric level `{l}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(codes.iter().map(|&c| values[c as usize]).collect())
            }
        }
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Row weights, 1 for unweighted tables.
    pub fn base_weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0; self.n_rows()])
    }

    pub fn with_weights(mut self, weights: Option<Vec<f64>>) -> Result<Self> {
        self.weights = None;
        CohortTable::new(self.names, self.columns, weights)
    }

    /// Rows at the given positions, in order; repeats allowed.
    pub fn take(&self, rows: &[usize]) -> CohortTable {
        CohortTable {
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c.take(rows)).collect(),
            weights: self.weights.as_ref().map(|w| rows.iter().map(|&r| w[r]).collect()),
        }
    }

    /// Copy with every row of a categorical column set to level `code`.
    pub fn with_constant_code(&self, name: &str, code: u32) -> Result<CohortTable> {
        let i = self.index_of(name)?;
        let mut out = self.clone();
        match &mut out.columns[i] {
            Column::Categorical { levels, codes } => {
                if code as usize >= levels.len() {
                    return Err(Error::InvalidArgument(format!("level code {code} out of range for `{name}`")));
                }
                codes.iter_mut().for_each(|c| *c = code);
            }
            Column::Numeric(_) => return Err(Error::Schema(format!("column `{name}` must be categorical"))),
        }
        Ok(out)
    }

    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> CohortTable {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| keep(r)).collect();
        self.take(&rows)
    }

    /// Keep rows satisfying the selection role. Returns the cohort and the
    /// number of rows dropped.
    pub fn select(&self, roles: &RoleBindings) -> Result<(CohortTable, usize)> {
        let Some(sel) = &roles.selection else {
            return Ok((self.clone(), 0));
        };
        let col = self.column(&sel.variable)?;
        let wanted = sel.level.parse::<f64>().ok();
        let keep: Vec<bool> = (0..self.n_rows())
            .map(|r| match col {
                Column::Numeric(v) => wanted == Some(v[r]),
                Column::Categorical { .. } => col.label(r) == sel.level,
            })
            .collect();
        let out = self.filter(|r| keep[r]);
        let dropped = self.n_rows() - out.n_rows();
        Ok((out, dropped))
    }

    /// Empirical joint over categorical columns, weighted by the base weights.
    pub fn empirical_joint<S: AsRef<str>>(&self, vars: &[S]) -> Result<FiniteJoint> {
        let mut specs = Vec::with_capacity(vars.len());
        let mut cols = Vec::with_capacity(vars.len());
        for v in vars {
            let (levels, codes) = self.categorical(v.as_ref())?;
            specs.push(VariableSpec::new(v.as_ref(), levels)?);
            cols.push(codes);
        }
        let cards: Vec<usize> = specs.iter().map(|s| s.cardinality()).collect();
        let mut strides = vec![1usize; cards.len()];
        for k in (0..cards.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * cards[k + 1];
        }
        let mut mass = vec![0.0; cards.iter().product()];
        let w = self.base_weights();
        for (r, wr) in w.iter().enumerate() {
            let o: usize = cols.iter().zip(&strides).map(|(c, s)| c[r] as usize * s).sum();
            mass[o] += wr;
        }
        if self.n_rows() == 0 {
            return Err(Error::EmptyCohort("no rows".into()));
        }
        FiniteJoint::from_weights(specs, mass)
    }

    /// Write as CSV with a header row; categorical columns as labels, numbers
    /// in shortest round-trip form. Row weights, if any, go in a trailing
    /// `weight_column` column.
    pub fn write_csv<W: Write>(&self, out: W, weight_column: Option<&str>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        let weights = self.weights.as_ref().zip(weight_column);
        if let Some((_, name)) = weights {
            header.push(name);
        }
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for r in 0..self.n_rows() {
            record.clear();
            record.extend(self.columns.iter().map(|c| c.label(r)));
            if let Some((ws, _)) = weights {
                record.push(format!("{:?}", ws[r]));
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}
