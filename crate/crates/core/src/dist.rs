//! Exact probability tables over finite discrete variables.
//!
//! `FiniteJoint` stores one probability per cell of the cross-product of its
//! variables' levels, row-major with the first variable varying slowest. All
//! operations are brute-force enumeration; the tables used here are small.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{AllowabilityPartition, RoleBindings, RoleIndex};

/// Mass checks use this tolerance.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    name: String,
    levels: Vec<String>,
}

impl VariableSpec {
    pub fn new<S: AsRef<str>>(name: &str, levels: &[S]) -> Result<Self> {
        let levels: Vec<String> = levels.iter().map(|l| l.as_ref().to_string()).collect();
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::Schema(format!("invalid variable name {name:?}")));
        }
        if levels.len() < 2 {
            return Err(Error::Schema(format!("variable `{name}` needs at least two levels")));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.is_empty() || l.contains(['\t', '\n']) {
                return Err(Error::Schema(format!("variable `{name}` has invalid level label {l:?}")));
            }
            if levels[..i].contains(l) {
                return Err(Error::Schema(format!("variable `{name}` repeats level `{l}`")));
            }
        }
        Ok(VariableSpec { name: name.to_string(), levels })
    }

    /// A variable with levels `"0"` and `"1"`.
    pub fn binary(name: &str) -> Self {
        VariableSpec::new(name, &["0", "1"]).expect("valid binary variable")
    }

    /// A variable with levels `"0"`, …, `"k-1"`.
    pub fn indexed(name: &str, k: usize) -> Result<Self> {
        let levels: Vec<String> = (0..k).map(|i| i.to_string()).collect();
        VariableSpec::new(name, &levels)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }
}

/// Visit every assignment of variables with the given cardinalities in
/// lexicographic order (last position fastest).
pub fn for_each_assignment(cards: &[usize], mut f: impl FnMut(&[usize])) {
    let mut a = vec![0usize; cards.len()];
    if cards.contains(&0) {
        return;
    }
    loop {
        f(&a);
        let mut k = cards.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            a[k] += 1;
            if a[k] < cards[k] {
                break;
            }
            a[k] = 0;
        }
    }
}

fn strides_for(cards: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; cards.len()];
    for k in (0..cards.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * cards[k + 1];
    }
    strides
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJoint {
    variables: Vec<VariableSpec>,
    probs: Vec<f64>,
    strides: Vec<usize>,
}

impl FiniteJoint {
    /// Build from cell probabilities in lexicographic order. Mass must be 1 within 1e-12.
    pub fn new(variables: Vec<VariableSpec>, probs: Vec<f64>) -> Result<Self> {
        let joint = Self::unchecked(variables, probs)?;
        let mass: f64 = joint.probs.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidArgument(format!("total mass {mass} differs from 1")));
        }
        Ok(joint)
    }

    /// Build from nonnegative cell weights, normalizing to mass 1.
    pub fn from_weights(variables: Vec<VariableSpec>, mut weights: Vec<f64>) -> Result<Self> {
        let mass: f64 = weights.iter().sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot normalize total mass {mass}")));
        }
        weights.iter_mut().for_each(|w| *w /= mass);
        Self::unchecked(variables, weights)
    }

    /// Build by evaluating `f` on every assignment; the result must have mass 1.
    pub fn from_fn(variables: Vec<VariableSpec>, f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let probs = Self::enumerate(&variables, f);
        Self::new(variables, probs)
    }

    /// Like [`FiniteJoint::from_fn`] but normalizes the evaluated weights.
    pub fn from_fn_normalized(
        variables: Vec<VariableSpec>,
        f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self> {
        let probs = Self::enumerate(&variables, f);
        Self::from_weights(variables, probs)
    }

    fn enumerate(variables: &[VariableSpec], mut f: impl FnMut(&[usize]) -> f64) -> Vec<f64> {
        let cards: Vec<usize> = variables.iter().map(|v| v.cardinality()).collect();
        let mut probs = Vec::with_capacity(cards.iter().product());
        for_each_assignment(&cards, |a| probs.push(f(a)));
        probs
    }

    fn unchecked(variables: Vec<VariableSpec>, probs: Vec<f64>) -> Result<Self> {
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].iter().any(|u| u.name == v.name) {
                return Err(Error::Schema(format!("duplicate variable `{}`", v.name)));
            }
        }
        let cards: Vec<usize> = variables.iter().map(|v| v.cardinality()).collect();
        let expected: usize = cards.iter().product();
        if probs.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} cells, got {}",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid cell probability {p}")));
        }
        Ok(FiniteJoint { strides: strides_for(&cards), variables, probs })
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn names(&self) -> Vec<&str> {
        self.variables.iter().map(|v| v.name()).collect()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.cardinality()).collect()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| Error::Schema(format!("unknown variable `{name}`")))
    }

    pub fn level_of(&self, var: usize, label: &str) -> Result<usize> {
        self.variables[var].level_index(label).ok_or_else(|| {
            Error::Schema(format!("`{label}` is not a level of `{}`", self.variables[var].name))
        })
    }

    pub fn offset(&self, assignment: &[usize]) -> usize {
        assignment.iter().zip(&self.strides).map(|(a, s)| a * s).sum()
    }

    pub fn prob(&self, assignment: &[usize]) -> f64 {
        self.probs[self.offset(assignment)]
    }

    /// Visit every cell with its assignment and probability.
    pub fn for_each_cell(&self, mut f: impl FnMut(&[usize], f64)) {
        let mut i = 0;
        for_each_assignment(&self.cardinalities(), |a| {
            f(a, self.probs[i]);
            i += 1;
        });
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Resolve `(name, label)` evidence pairs to `(variable, level)` indices.
    pub fn resolve_evidence(&self, evidence: &[(&str, &str)]) -> Result<Vec<(usize, usize)>> {
        evidence
            .iter()
            .map(|(n, l)| {
                let v = self.index_of(n)?;
                Ok((v, self.level_of(v, l)?))
            })
            .collect()
    }

    /// Probability of a partial assignment.
    pub fn probability(&self, event: &[(&str, &str)]) -> Result<f64> {
        let ev = self.resolve_evidence(event)?;
        let mut p = 0.0;
        self.for_each_cell(|a, q| {
            if ev.iter().all(|&(v, l)| a[v] == l) {
                p += q;
            }
        });
        Ok(p)
    }

    /// Marginal joint over `keep`, which retains the joint's variable order.
    pub fn marginalize<S: AsRef<str>>(&self, keep: &[S]) -> Result<FiniteJoint> {
        let mut idx = keep
            .iter()
            .map(|n| self.index_of(n.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        idx.sort_unstable();
        idx.dedup();
        let table = self.table(&idx);
        let variables = idx.iter().map(|&i| self.variables[i].clone()).collect();
        Ok(FiniteJoint::unchecked(variables, table.mass)?)
    }

    /// Conditional joint of the remaining variables given `evidence`.
    pub fn condition(&self, evidence: &[(&str, &str)]) -> Result<FiniteJoint> {
        let ev = self.resolve_evidence(evidence)?;
        let keep: Vec<usize> = (0..self.variables.len())
            .filter(|i| !ev.iter().any(|(v, _)| v == i))
            .collect();
        let mut cells = Vec::new();
        let mut mass = 0.0;
        self.for_each_cell(|a, p| {
            if ev.iter().all(|&(v, l)| a[v] == l) {
                cells.push(p);
                mass += p;
            }
        });
        if !(mass > 0.0) {
            let evidence = evidence
                .iter()
                .map(|(n, l)| format!("{n}={l}"))
                .collect::<Vec<_>>()
                .join(", ");
            return Err(Error::UndefinedConditional { evidence });
        }
        cells.iter_mut().for_each(|p| *p /= mass);
        let variables = keep.iter().map(|&i| self.variables[i].clone()).collect();
        FiniteJoint::unchecked(variables, cells)
    }

    /// `Σ f(cell) · P(cell)`.
    pub fn expectation(&self, mut f: impl FnMut(&[usize]) -> f64) -> f64 {
        let mut total = 0.0;
        self.for_each_cell(|a, p| {
            if p != 0.0 {
                total += f(a) * p;
            }
        });
        total
    }

    /// Marginal mass table over the variables at positions `vars`.
    pub fn table(&self, vars: &[usize]) -> MassTable {
        self.weighted_table(vars, |_| 1.0)
    }

    /// Table of `Σ g(cell) P(cell)` grouped by the variables at `vars`.
    pub fn weighted_table(&self, vars: &[usize], mut g: impl FnMut(&[usize]) -> f64) -> MassTable {
        let mut table = MassTable::zeros(vars, &self.cardinalities());
        self.for_each_cell(|a, p| {
            if p != 0.0 {
                let o = table.offset(a);
                table.mass[o] += g(a) * p;
            }
        });
        table
    }

    /// Largest cellwise absolute difference; `None` if the schemas differ.
    pub fn max_abs_diff(&self, other: &FiniteJoint) -> Option<f64> {
        if self.variables != other.variables {
            return None;
        }
        Some(
            self.probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// `name=label` description of the variables at `vars` in `assignment`.
    pub fn describe(&self, vars: &[usize], assignment: &[usize]) -> String {
        if vars.is_empty() {
            return "(all)".to_string();
        }
        vars.iter()
            .map(|&v| format!("{}={}", self.variables[v].name, self.variables[v].levels[assignment[v]]))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Tab-separated text: a header of variable names, then one line per cell
    /// with level labels and probability in lexicographic order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.variables {
            out.push_str(&v.name);
            out.push('\t');
        }
        out.push_str("probability\n");
        self.for_each_cell(|a, p| {
            for (v, &l) in self.variables.iter().zip(a) {
                out.push_str(&v.levels[l]);
                out.push('\t');
            }
            let _ = writeln!(out, "{p:?}");
        });
        out
    }

    /// Parse the format written by [`FiniteJoint::to_text`]. Level order is
    /// recovered from first appearance, which lexicographic order guarantees.
    pub fn from_text(text: &str) -> Result<FiniteJoint> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let parse_err = |line: usize, message: String| Error::Parse {
            location: format!("line {}", line + 1),
            message,
        };
        let (hline, header) = lines.next().ok_or_else(|| parse_err(0, "empty input".into()))?;
        let mut names: Vec<&str> = header.split('\t').collect();
        if names.pop() != Some("probability") {
            return Err(parse_err(hline, "header must end with `probability`".into()));
        }
        let mut levels: Vec<Vec<String>> = vec![Vec::new(); names.len()];
        let mut rows: Vec<(usize, Vec<usize>, f64)> = Vec::new();
        for (ln, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != names.len() + 1 {
                return Err(parse_err(ln, format!("expected {} fields", names.len() + 1)));
            }
            let mut a = Vec::with_capacity(names.len());
            for (k, f) in fields[..names.len()].iter().enumerate() {
                let pos = match levels[k].iter().position(|l| l == f) {
                    Some(p) => p,
                    None => {
                        levels[k].push(f.to_string());
                        levels[k].len() - 1
                    }
                };
                a.push(pos);
            }
            let p: f64 = fields[names.len()]
                .trim()
                .parse()
                .map_err(|e| parse_err(ln, format!("bad probability: {e}")))?;
            rows.push((ln, a, p));
        }
        let variables = names
            .iter()
            .zip(&levels)
            .map(|(n, l)| VariableSpec::new(n, l))
            .collect::<Result<Vec<_>>>()?;
        let cards: Vec<usize> = variables.iter().map(|v| v.cardinality()).collect();
        let mut expected = Vec::new();
        for_each_assignment(&cards, |a| expected.push(a.to_vec()));
        if expected.len() != rows.len() {
            return Err(parse_err(0, format!("expected {} cells, got {}", expected.len(), rows.len())));
        }
        let mut probs = Vec::with_capacity(rows.len());
        for ((ln, a, p), e) in rows.into_iter().zip(expected) {
            if a != e {
                return Err(parse_err(ln, "cells are not in lexicographic order".into()));
            }
            probs.push(p);
        }
        FiniteJoint::new(variables, probs)
    }
}

/// Dense table indexed by a subset of a joint's variables, read with full assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct MassTable {
    vars: Vec<usize>,
    cards: Vec<usize>,
    strides: Vec<usize>,
    mass: Vec<f64>,
}

impl MassTable {
    fn zeros(vars: &[usize], all_cards: &[usize]) -> Self {
        let cards: Vec<usize> = vars.iter().map(|&v| all_cards[v]).collect();
        let size = cards.iter().product();
        MassTable {
            vars: vars.to_vec(),
            strides: strides_for(&cards),
            cards,
            mass: vec![0.0; size],
        }
    }

    fn offset(&self, full: &[usize]) -> usize {
        self.vars.iter().zip(&self.strides).map(|(&v, s)| full[v] * s).sum()
    }

    /// Mass of the stratum that `full` (an assignment of all joint variables) falls in.
    pub fn get(&self, full: &[usize]) -> f64 {
        self.mass[self.offset(full)]
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Visit every stratum as a full-length assignment (positions outside
    /// the table's variables are zero) with its mass.
    pub fn for_each(&self, n_vars: usize, mut f: impl FnMut(&[usize], f64)) {
        let mut full = vec![0usize; n_vars];
        let mut i = 0;
        for_each_assignment(&self.cards, |a| {
            for (&v, &l) in self.vars.iter().zip(a) {
                full[v] = l;
            }
            f(&full, self.mass[i]);
            i += 1;
        });
    }
}

/// Restrict a joint to the cohort defined by the selection role, dropping the
/// selection variable. Returns the joint and roles without a selection.
pub fn select_cohort(joint: &FiniteJoint, roles: &RoleBindings) -> Result<(FiniteJoint, RoleBindings)> {
    match &roles.selection {
        None => Ok((joint.clone(), roles.clone())),
        Some(sel) => {
            let cohort = joint.condition(&[(sel.variable.as_str(), sel.level.as_str())])?;
            let mut roles = roles.clone();
            roles.selection = None;
            Ok((cohort, roles))
        }
    }
}

pub(crate) fn resolve_on_joint(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<RoleIndex> {
    let names = joint.names();
    RoleIndex::resolve(roles, partition, &names, |i| Some(joint.variables()[i].levels()))
}

/// The joint of the marginalized group under the stochastic intervention on
/// the target: within each stratum of the target-allowable covariates, the
/// target is drawn from the privileged group's conditional law, independently
/// of the non-allowable covariates. Every other factor keeps its law among the
/// marginalized group. The race variable is dropped from the result.
pub fn intervene_target(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<FiniteJoint> {
    let (joint, roles) = select_cohort(joint, roles)?;
    let ix = resolve_on_joint(&joint, &roles, partition)?;
    let n_vars = joint.variables().len();
    let (race, r0, r1, m) = (ix.race, ix.r0, ix.r0_prime, ix.target);

    let mut a_vars = vec![race];
    a_vars.extend(ix.target_allowable());
    a_vars.sort_unstable();
    let mut na_vars = a_vars.clone();
    na_vars.extend(&ix.non_allowable);
    na_vars.sort_unstable();
    let with_m = |v: &[usize]| {
        let mut out = v.to_vec();
        out.push(m);
        out.sort_unstable();
        out
    };

    let p_a = joint.table(&a_vars);
    let p_am = joint.table(&with_m(&a_vars));
    let p_na = joint.table(&na_vars);
    let p_nam = joint.table(&with_m(&na_vars));
    let p_r0 = joint.table(&[race]);
    let mut probe = vec![0usize; n_vars];
    probe[race] = r0;
    let mass_r0 = p_r0.get(&probe);
    if !(mass_r0 > 0.0) {
        return Err(Error::RaceNotBinary(roles.race.variable.clone()));
    }

    let a_cov: Vec<usize> = a_vars.iter().copied().filter(|&v| v != race).collect();
    let n_cov: Vec<usize> = na_vars.iter().copied().filter(|&v| v != race).collect();
    let m_card = joint.variables()[m].cardinality();

    // Support of the allowable strata.
    let mut err = None;
    p_a.for_each(n_vars, |full, _| {
        if err.is_some() || full[race] != r0 {
            return;
        }
        let mut a = full.to_vec();
        let in_r0 = p_a.get(&a);
        a[race] = r1;
        let in_r1 = p_a.get(&a);
        if in_r1 > 0.0 && !(in_r0 > 0.0) {
            err = Some(Error::CommonSupport(format!(
                "stratum {} occurs among `{}` but not among `{}`",
                joint.describe(&a_cov, &a),
                roles.race.privileged,
                roles.race.marginalized
            )));
        } else if in_r0 > 0.0 && !(in_r1 > 0.0) {
            err = Some(Error::CommonSupport(format!(
                "stratum {} occurs among `{}` but has no `{}` counterpart to draw the target from",
                joint.describe(&a_cov, &a),
                roles.race.marginalized,
                roles.race.privileged
            )));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    // Partial positivity: target levels drawn under the intervention must
    // occur among the marginalized group in every non-allowable stratum.
    let mut err = None;
    p_na.for_each(n_vars, |full, mass| {
        if err.is_some() || full[race] != r0 || !(mass > 0.0) {
            return;
        }
        let mut a = full.to_vec();
        for level in 0..m_card {
            a[m] = level;
            a[race] = r1;
            let demanded = p_am.get(&a);
            a[race] = r0;
            if demanded > 0.0 && !(p_nam.get(&a) > 0.0) {
                err = Some(Error::Positivity(format!(
                    "target {}={} occurs among `{}` in stratum {} but never among `{}` in stratum {}",
                    joint.variables()[m].name(),
                    joint.variables()[m].levels()[level],
                    roles.race.privileged,
                    joint.describe(&a_cov, &a),
                    roles.race.marginalized,
                    joint.describe(&n_cov, &a)
                )));
                return;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    let out_vars: Vec<VariableSpec> = joint
        .variables()
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != race)
        .map(|(_, v)| v.clone())
        .collect();
    let out_cards: Vec<usize> = out_vars.iter().map(|v| v.cardinality()).collect();
    let mut out = vec![0.0; out_cards.iter().product()];
    let out_strides = strides_for(&out_cards);
    let mut alt = vec![0usize; n_vars];
    joint.for_each_cell(|a, p| {
        if a[race] != r0 || p == 0.0 {
            return;
        }
        // P(cell | r0) / P(m | r0, n, a) * P(m | r1, a)
        let denom = p_nam.get(a) / p_na.get(a);
        alt.copy_from_slice(a);
        alt[race] = r1;
        let target_law = p_am.get(&alt) / p_a.get(&alt);
        let q = p / mass_r0 / denom * target_law;
        let o: usize = a
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != race)
            .zip(&out_strides)
            .map(|((_, l), s)| l * s)
            .sum();
        out[o] += q;
    });
    FiniteJoint::unchecked(out_vars, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::worked_joint;

    fn uniform_ry() -> FiniteJoint {
        FiniteJoint::new(
            vec![VariableSpec::binary("R"), VariableSpec::binary("Y")],
            vec![0.25; 4],
        )
        .unwrap()
    }

    #[test]
    fn variable_spec_invariants() {
        assert!(VariableSpec::new("x", &["a"]).is_err());
        assert!(VariableSpec::new("x", &["a", "a"]).is_err());
        assert!(VariableSpec::new("x", &["a", "b"]).is_ok());
    }

    #[test]
    fn new_rejects_bad_tables() {
        let vars = || vec![VariableSpec::binary("R")];
        assert!(FiniteJoint::new(vars(), vec![0.5]).is_err());
        assert!(FiniteJoint::new(vars(), vec![0.7, 0.7]).is_err());
        assert!(FiniteJoint::new(vars(), vec![1.5, -0.5]).is_err());
        assert!(FiniteJoint::new(vars(), vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn marginalize_uniform() {
        let j = uniform_ry().marginalize(&["Y"]).unwrap();
        assert_eq!(j.probability(&[("Y", "1")]).unwrap(), 0.5);
        assert_eq!(uniform_ry().marginalize(&["R", "Y"]).unwrap(), uniform_ry());
        assert!(uniform_ry().marginalize(&["Z"]).is_err());
    }

    #[test]
    fn condition_uniform_and_zero_evidence() {
        let j = uniform_ry().condition(&[("R", "1")]).unwrap();
        assert_eq!(j.names(), vec!["Y"]);
        assert_eq!(j.probability(&[("Y", "1")]).unwrap(), 0.5);

        let skew = FiniteJoint::new(
            vec![VariableSpec::binary("R"), VariableSpec::binary("Y")],
            vec![0.5, 0.5, 0.0, 0.0],
        )
        .unwrap();
        let err = skew.condition(&[("R", "1")]).unwrap_err();
        assert!(matches!(err, Error::UndefinedConditional { .. }), "{err}");
    }

    #[test]
    fn expectation_basics() {
        let j = uniform_ry();
        assert!((j.expectation(|_| 3.0) - 3.0).abs() < 1e-15);
        let y = j.index_of("Y").unwrap();
        assert_eq!(j.expectation(|a| (a[y] == 1) as u8 as f64), 0.5);
    }

    #[test]
    fn worked_joint_enumeration_values() {
        let j = worked_joint();
        // P(A=1) = 0.5 by construction of the worked joint.
        let pa = j.marginalize(&["A"]).unwrap().probability(&[("A", "1")]).unwrap();
        assert!((pa - 0.5).abs() < 1e-12);

        let c = j.condition(&[("R", "r0"), ("A", "1")]).unwrap();
        assert!((c.probability(&[("M", "1")]).unwrap() - 0.4).abs() < 1e-12);

        // Standardized mean among r0: independent recomputation by summing
        // P(a) Σ_m P(m|r0,a) E[Y|r0,m,a] with the defining factor formulas.
        let mut oracle = 0.0;
        for a in 0..2 {
            let pm1 = 0.2 + 0.2 * a as f64;
            for m in 0..2 {
                let pm = if m == 1 { pm1 } else { 1.0 - pm1 };
                oracle += 0.5 * pm * (0.1 + 0.2 * m as f64 + 0.3 * a as f64 + 0.1);
            }
        }
        let (r, y) = (j.index_of("R").unwrap(), j.index_of("Y").unwrap());
        let p_r0 = j.probability(&[("R", "r0")]).unwrap();
        let via_expectation = j.expectation(|c| (c[y] == 1 && c[r] == 0) as u8 as f64 / p_r0);
        assert!((via_expectation - oracle).abs() < 1e-12);
        assert!((oracle - 0.41).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip() {
        let j = worked_joint();
        let text = j.to_text();
        assert!(text.starts_with("R\tA\tM\tY\tprobability\n"));
        let back = FiniteJoint::from_text(&text).unwrap();
        assert_eq!(back, j);
    }

    #[test]
    fn text_rejects_out_of_order() {
        let text = "R\tprobability\n1\t0.5\n0\t0.5\n";
        // levels are inferred as ["1", "0"], so this is in order and parses.
        assert!(FiniteJoint::from_text(text).is_ok());
        let text = "R\tY\tprobability\n0\t0\t0.25\n0\t1\t0.25\n1\t1\t0.25\n1\t0\t0.25\n";
        assert!(FiniteJoint::from_text(text).is_err());
    }

    #[test]
    fn intervention_on_worked_joint() {
        let (joint, roles, partition) = crate::fixtures::worked_setup();
        let q = intervene_target(&joint, &roles, &partition).unwrap();
        assert_eq!(q.names(), vec!["A", "M", "Y"]);
        assert!((q.total_mass() - 1.0).abs() < MASS_TOL);
        // A ⊥ R, so the pooled standard equals P(A | r0) and the mean is unstandardized.
        let y = q.index_of("Y").unwrap();
        let mean = q.expectation(|a| a[y] as f64);
        assert!((mean - 0.49).abs() < 1e-12, "{mean}");
        // Law of A among r0 is preserved.
        let pa = q.probability(&[("A", "1")]).unwrap();
        assert!((pa - 0.5).abs() < 1e-12);
    }

    #[test]
    fn intervention_is_noop_when_target_law_is_race_invariant() {
        let vars = vec![
            VariableSpec::new("R", &["r0", "r1"]).unwrap(),
            VariableSpec::binary("A"),
            VariableSpec::binary("M"),
            VariableSpec::binary("Y"),
        ];
        let j = FiniteJoint::from_fn(vars, |c| {
            let pr = if c[0] == 0 { 0.3 } else { 0.7 };
            let pa = if c[1] == 1 { 0.4 + 0.2 * c[0] as f64 } else { 0.6 - 0.2 * c[0] as f64 };
            let pm1 = 0.3 + 0.4 * c[1] as f64;
            let pm = if c[2] == 1 { pm1 } else { 1.0 - pm1 };
            let py1 = 0.2 + 0.1 * c[2] as f64 + 0.2 * c[0] as f64;
            let py = if c[3] == 1 { py1 } else { 1.0 - py1 };
            pr * pa * pm * py
        })
        .unwrap();
        let roles = RoleBindings::new("R", "r0", "r1", "M", "Y");
        let partition = AllowabilityPartition::new(&["A"], &[], &[]);
        let q = intervene_target(&j, &roles, &partition).unwrap();
        let r0 = j.condition(&[("R", "r0")]).unwrap();
        assert!(q.max_abs_diff(&r0).unwrap() < 1e-12);
    }

    #[test]
    fn intervention_reports_common_support_violation() {
        let vars = vec![
            VariableSpec::new("R", &["r0", "r1"]).unwrap(),
            VariableSpec::binary("A"),
            VariableSpec::binary("M"),
            VariableSpec::binary("Y"),
        ];
        // A=1 never occurs among r0 but does among r1.
        let j = FiniteJoint::from_fn_normalized(vars, |c| {
            if c[0] == 0 && c[1] == 1 {
                0.0
            } else {
                1.0
            }
        })
        .unwrap();
        let roles = RoleBindings::new("R", "r0", "r1", "M", "Y");
        let partition = AllowabilityPartition::new(&["A"], &[], &[]);
        let err = intervene_target(&j, &roles, &partition).unwrap_err();
        assert!(matches!(err, Error::CommonSupport(ref s) if s.contains("A=1")), "{err}");
    }
}
