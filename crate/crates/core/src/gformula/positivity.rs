//! Report-style support diagnostics: partial positivity, common support and
//! support of the standardization weights.

use serde::Serialize;

use super::{sub_assignments, ExactTables};
use crate::data::{CohortTable, Column};
use crate::dist::FiniteJoint;
use crate::error::Result;
use crate::partition::{AllowabilityPartition, RoleBindings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A target level drawn under the intervention never occurs among the
    /// marginalized group in some non-allowable stratum.
    PartialPositivity,
    /// A target-allowable stratum (or a target level within it) occurs among
    /// the privileged group but not among the marginalized group.
    CommonSupport,
    /// A target-allowable stratum of the marginalized group has no privileged
    /// counterpart, so the intervention law is undefined there.
    UndefinedIntervention,
    /// An outcome-allowable stratum lacks one of the two groups.
    StandardSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportViolation {
    pub kind: ViolationKind,
    pub stratum: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PositivityReport {
    pub violations: Vec<SupportViolation>,
    /// Numeric covariates cannot be checked by enumeration and are left out
    /// of the strata.
    pub skipped_numeric: Vec<String>,
}

impl PositivityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_positivity_joint(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<PositivityReport> {
    let t = ExactTables::new(joint, roles, partition)?;
    Ok(PositivityReport { violations: scan(&t), skipped_numeric: Vec::new() })
}

/// Sample version: frequencies of the categorical covariates stand in for
/// probabilities. Numeric covariates are dropped from the strata and listed.
pub fn check_positivity_data(
    data: &CohortTable,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<PositivityReport> {
    let (cohort, _) = data.select(roles)?;
    let mut roles = roles.clone();
    roles.selection = None;
    let categorical = |n: &String| matches!(cohort.column(n), Ok(Column::Categorical { .. }));
    let mut skipped = Vec::new();
    let mut keep = |set: &[String]| -> Vec<String> {
        set.iter()
            .filter(|n| {
                let c = categorical(n);
                if !c {
                    skipped.push(n.to_string());
                }
                c
            })
            .cloned()
            .collect()
    };
    let reduced = AllowabilityPartition {
        outcome_allowable: keep(&partition.outcome_allowable),
        target_allowable_extra: keep(&partition.target_allowable_extra),
        non_allowable: keep(&partition.non_allowable),
    };
    // Outcome values do not matter here; a constant placeholder stands in for
    // it so the joint stays small and all-categorical.
    let mut vars: Vec<String> = vec![roles.race.variable.clone(), roles.target.clone()];
    vars.extend(reduced.covariates().cloned());
    let outcome_placeholder = "__outcome";
    let joint = cohort.empirical_joint(&vars)?;
    let placeholder = crate::dist::VariableSpec::binary(outcome_placeholder);
    let mut specs = joint.variables().to_vec();
    specs.push(placeholder);
    let probs: Vec<f64> = joint.probs().iter().flat_map(|&p| [p, 0.0]).collect();
    let joint = FiniteJoint::from_weights(specs, probs)?;
    roles.outcome = outcome_placeholder.into();
    let t = ExactTables::new(&joint, &roles, &reduced)?;
    Ok(PositivityReport { violations: scan(&t), skipped_numeric: skipped })
}

fn scan(t: &ExactTables) -> Vec<SupportViolation> {
    let (race, r0, r1, m) = (t.ix.race, t.ix.r0, t.ix.r0_prime, t.ix.target);
    let target_allowable = t.ix.target_allowable();
    let all_cov = t.ix.all_covariates();
    let m_var = &t.joint.variables()[m];
    let mut out = Vec::new();
    let base = vec![0usize; t.n_vars()];

    for ay in sub_assignments(&t.cards, &t.ay, &base) {
        if t.t_ay.get(&ay) == 0.0 {
            continue;
        }
        for (level, name) in [(r0, &t.roles.race.marginalized), (r1, &t.roles.race.privileged)] {
            let mut a = ay.clone();
            a[race] = level;
            if t.t_r_ay.get(&a) == 0.0 {
                out.push(SupportViolation {
                    kind: ViolationKind::StandardSupport,
                    stratum: t.describe(&t.ay, &ay),
                    detail: format!("no `{name}` rows in this outcome-allowable stratum"),
                });
            }
        }
    }

    for a in sub_assignments(&t.cards, &target_allowable, &base) {
        let mut a0 = a.clone();
        a0[race] = r0;
        let mut a1 = a.clone();
        a1[race] = r1;
        let (p0, p1) = (t.t_r_a.get(&a0), t.t_r_a.get(&a1));
        let stratum = t.describe(&target_allowable, &a);
        if p1 > 0.0 && p0 == 0.0 {
            out.push(SupportViolation {
                kind: ViolationKind::CommonSupport,
                stratum,
                detail: format!("occurs among `{}` only", t.roles.race.privileged),
            });
            continue;
        }
        if p0 > 0.0 && p1 == 0.0 {
            out.push(SupportViolation {
                kind: ViolationKind::UndefinedIntervention,
                stratum,
                detail: format!("no `{}` rows to draw the target from", t.roles.race.privileged),
            });
            continue;
        }
        if p0 == 0.0 {
            continue;
        }
        for level in 0..t.cards[m] {
            a0[m] = level;
            a1[m] = level;
            if t.t_r_a_m.get(&a1) > 0.0 && t.t_r_a_m.get(&a0) == 0.0 {
                out.push(SupportViolation {
                    kind: ViolationKind::CommonSupport,
                    stratum: stratum.clone(),
                    detail: format!(
                        "target {}={} occurs among `{}` only",
                        m_var.name(),
                        m_var.levels()[level],
                        t.roles.race.privileged
                    ),
                });
            }
        }
        a0[m] = 0;
        for na in sub_assignments(&t.cards, &t.n, &a0) {
            if t.t_r_na.get(&na) == 0.0 {
                continue;
            }
            let mut c = na.clone();
            for level in 0..t.cards[m] {
                c[m] = level;
                let mut c1 = c.clone();
                c1[race] = r1;
                if t.t_r_a_m.get(&c1) > 0.0 && t.t_r_na_m.get(&c) == 0.0 {
                    out.push(SupportViolation {
                        kind: ViolationKind::PartialPositivity,
                        stratum: t.describe(&all_cov, &c),
                        detail: format!(
                            "target {}={} occurs among `{}` in stratum {} but never among `{}` here",
                            m_var.name(),
                            m_var.levels()[level],
                            t.roles.race.privileged,
                            stratum,
                            t.roles.race.marginalized
                        ),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::VariableSpec;
    use crate::fixtures::worked_setup;

    fn intensification_joint(r0_law: [f64; 2], r1_law: [f64; 2]) -> FiniteJoint {
        let vars = vec![
            VariableSpec::new("R", &["r0", "r1"]).unwrap(),
            VariableSpec::binary("A"),
            VariableSpec::binary("M"),
            VariableSpec::binary("Y"),
        ];
        FiniteJoint::from_fn_normalized(vars, |c| {
            let pm1 = if c[0] == 0 { r0_law[c[1]] } else { r1_law[c[1]] };
            if c[2] == 1 {
                pm1
            } else {
                1.0 - pm1
            }
        })
        .unwrap()
    }

    fn roles() -> RoleBindings {
        RoleBindings::new("R", "r0", "r1", "M", "Y")
    }

    #[test]
    fn worked_joint_is_clean() {
        let (j, r, p) = worked_setup();
        assert!(check_positivity_joint(&j, &r, &p).unwrap().is_clean());
    }

    #[test]
    fn never_intensified_marginalized_stratum_is_listed() {
        let j = intensification_joint([0.5, 0.0], [0.5, 1.0]);
        let p = AllowabilityPartition::new(&["A"], &[], &[]);
        let report = check_positivity_joint(&j, &roles(), &p).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::PartialPositivity && v.stratum.contains("A=1")));
    }

    #[test]
    fn both_groups_always_intensified_is_fine() {
        let j = intensification_joint([0.5, 1.0], [0.5, 1.0]);
        let p = AllowabilityPartition::new(&["A"], &[], &[]);
        assert!(check_positivity_joint(&j, &roles(), &p).unwrap().is_clean());
    }

    #[test]
    fn data_check_matches_joint_check() {
        let j = intensification_joint([0.5, 0.0], [0.5, 1.0]);
        let data = CohortTable::from_joint(&j);
        let p = AllowabilityPartition::new(&["A"], &[], &[]);
        let report = check_positivity_data(&data, &roles(), &p).unwrap();
        assert_eq!(report.violations, check_positivity_joint(&j, &roles(), &p).unwrap().violations);
    }
}
