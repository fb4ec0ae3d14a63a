//! Variable roles and the allowability partition.
//!
//! A decomposition is configured by binding four roles (race, target, outcome
//! and an optional cohort-selection filter) and by splitting the remaining
//! covariates into three disjoint sets:
//!
//! * `outcome_allowable`: define the disparity measure and the intervention,
//! * `target_allowable_extra`: additionally define the intervention only,
//! * `non_allowable`: used for confounding control only.
//!
//! Any of the sets may be empty.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceBinding {
    pub variable: String,
    /// Level of the marginalized group (`r0`); always explicit, never inferred from data order.
    pub marginalized: String,
    /// Level of the privileged group (`r0'`).
    pub privileged: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub variable: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleBindings {
    pub race: RaceBinding,
    pub target: String,
    pub outcome: String,
    #[serde(default)]
    pub selection: Option<Selection>,
}

impl RoleBindings {
    pub fn new(
        race: &str,
        marginalized: &str,
        privileged: &str,
        target: &str,
        outcome: &str,
    ) -> Self {
        RoleBindings {
            race: RaceBinding {
                variable: race.to_string(),
                marginalized: marginalized.to_string(),
                privileged: privileged.to_string(),
            },
            target: target.to_string(),
            outcome: outcome.to_string(),
            selection: None,
        }
    }

    pub fn with_selection(mut self, variable: &str, level: &str) -> Self {
        self.selection = Some(Selection {
            variable: variable.to_string(),
            level: level.to_string(),
        });
        self
    }

    /// The same roles with the marginalized and privileged levels exchanged.
    pub fn swapped(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.race.marginalized, &mut out.race.privileged);
        out
    }

    fn role_names(&self) -> Vec<(&'static str, &str)> {
        let mut v = vec![
            ("race", self.race.variable.as_str()),
            ("target", self.target.as_str()),
            ("outcome", self.outcome.as_str()),
        ];
        if let Some(sel) = &self.selection {
            v.push(("selection", sel.variable.as_str()));
        }
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllowabilityPartition {
    #[serde(default)]
    pub outcome_allowable: Vec<String>,
    #[serde(default)]
    pub target_allowable_extra: Vec<String>,
    #[serde(default)]
    pub non_allowable: Vec<String>,
}

impl AllowabilityPartition {
    pub fn new<S: AsRef<str>>(outcome_allowable: &[S], target_allowable_extra: &[S], non_allowable: &[S]) -> Self {
        let own = |v: &[S]| v.iter().map(|s| s.as_ref().to_string()).collect();
        AllowabilityPartition {
            outcome_allowable: own(outcome_allowable),
            target_allowable_extra: own(target_allowable_extra),
            non_allowable: own(non_allowable),
        }
    }

    /// Every covariate named by the partition, in set order.
    pub fn covariates(&self) -> impl Iterator<Item = &String> {
        self.outcome_allowable
            .iter()
            .chain(&self.target_allowable_extra)
            .chain(&self.non_allowable)
    }

    /// Target-allowable covariates: `A^m ∪ A^y`.
    pub fn target_allowable(&self) -> Vec<String> {
        self.target_allowable_extra
            .iter()
            .chain(&self.outcome_allowable)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Pooled distribution of the outcome-allowable covariates.
    #[default]
    Pooled,
    /// Distribution among the marginalized group.
    MarginalizedToR0,
    /// Distribution among the privileged group.
    MarginalizedToR0Prime,
}

impl Standardization {
    pub const ALL: [Standardization; 3] = [
        Standardization::Pooled,
        Standardization::MarginalizedToR0,
        Standardization::MarginalizedToR0Prime,
    ];
}

impl fmt::Display for Standardization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Standardization::Pooled => "pooled",
            Standardization::MarginalizedToR0 => "marginalized_to_r0",
            Standardization::MarginalizedToR0Prime => "marginalized_to_r0_prime",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateTag {
    Demographic,
    Clinical,
    Socioeconomic,
}

/// The allowability designations of the established estimators, plus the
/// meaningful alternative that separates clinical from socioeconomic covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    /// Oaxaca-Blinder via linear models: every covariate non-allowable.
    ObLinear = 1,
    /// Oaxaca-Blinder via reweighting: every covariate exclusively target-allowable.
    ObReweighting = 2,
    /// Natural indirect effect analogue: every covariate outcome-allowable.
    NieAnalogue = 3,
    /// Path-specific analogues I and II: demographics outcome-allowable, the rest non-allowable.
    PathSpecificI = 4,
    /// Path-specific analogue III: demographics outcome-allowable, the rest target-allowable.
    PathSpecificIII = 5,
    /// Demographics outcome-allowable, clinical target-allowable, socioeconomic non-allowable.
    Meaningful = 6,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::ObLinear,
        Preset::ObReweighting,
        Preset::NieAnalogue,
        Preset::PathSpecificI,
        Preset::PathSpecificIII,
        Preset::Meaningful,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| *p as u8 == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown preset id {id} (expected 1-6)")))
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn label(self) -> &'static str {
        match self {
            Preset::ObLinear => "Oaxaca-Blinder (linear models)",
            Preset::ObReweighting => "Oaxaca-Blinder (reweighting)",
            Preset::NieAnalogue => "Natural indirect effect analogue",
            Preset::PathSpecificI => "Path-specific analogue I & II",
            Preset::PathSpecificIII => "Path-specific analogue III",
            Preset::Meaningful => "Meaningful estimator",
        }
    }

    /// Which set each tag lands in: (outcome-allowable, target-allowable extra, non-allowable).
    fn placement(self, tag: CovariateTag) -> Slot {
        use CovariateTag::*;
        match (self, tag) {
            (Preset::ObLinear, _) => Slot::NonAllowable,
            (Preset::ObReweighting, _) => Slot::TargetExtra,
            (Preset::NieAnalogue, _) => Slot::OutcomeAllowable,
            (Preset::PathSpecificI, Demographic) => Slot::OutcomeAllowable,
            (Preset::PathSpecificI, _) => Slot::NonAllowable,
            (Preset::PathSpecificIII, Demographic) => Slot::OutcomeAllowable,
            (Preset::PathSpecificIII, _) => Slot::TargetExtra,
            (Preset::Meaningful, Demographic) => Slot::OutcomeAllowable,
            (Preset::Meaningful, Clinical) => Slot::TargetExtra,
            (Preset::Meaningful, Socioeconomic) => Slot::NonAllowable,
        }
    }
}

enum Slot {
    OutcomeAllowable,
    TargetExtra,
    NonAllowable,
}

/// Build the partition of a preset row from a tagged covariate schema.
pub fn preset(preset: Preset, schema: &[(String, CovariateTag)]) -> AllowabilityPartition {
    let mut out = AllowabilityPartition::default();
    for (name, tag) in schema {
        let set = match preset.placement(*tag) {
            Slot::OutcomeAllowable => &mut out.outcome_allowable,
            Slot::TargetExtra => &mut out.target_allowable_extra,
            Slot::NonAllowable => &mut out.non_allowable,
        };
        set.push(name.clone());
    }
    out
}

/// Covariates of the hypertension example, tagged.
pub fn hypertension_schema() -> Vec<(String, CovariateTag)> {
    use CovariateTag::*;
    [
        ("age", Demographic),
        ("sex", Demographic),
        ("edu", Socioeconomic),
        ("ins", Socioeconomic),
        ("dia", Clinical),
        ("l1", Clinical),
    ]
    .into_iter()
    .map(|(n, t)| (n.to_string(), t))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum PartitionViolation {
    /// A variable appears in more than one allowability set (or twice in one).
    Overlap { variable: String, sets: Vec<&'static str> },
    /// A name that does not exist in the schema.
    UnknownVariable { variable: String, role: &'static str },
    /// A role-bound variable also appears in an allowability set.
    RoleCollision { variable: String, role: &'static str, set: &'static str },
    /// Two roles are bound to the same variable.
    SharedRole { variable: String, roles: Vec<&'static str> },
    /// Marginalized and privileged levels coincide.
    RaceLevels { level: String },
}

impl fmt::Display for PartitionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionViolation::Overlap { variable, sets } => {
                write!(f, "variable `{variable}` appears in several sets: {}", sets.join(", "))
            }
            PartitionViolation::UnknownVariable { variable, role } => {
                write!(f, "unknown variable `{variable}` (used as {role})")
            }
            PartitionViolation::RoleCollision { variable, role, set } => {
                write!(f, "variable `{variable}` is bound to role {role} and listed in {set}")
            }
            PartitionViolation::SharedRole { variable, roles } => {
                write!(f, "variable `{variable}` is bound to several roles: {}", roles.join(", "))
            }
            PartitionViolation::RaceLevels { level } => {
                write!(f, "marginalized and privileged race levels are both `{level}`")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<PartitionViolation>,
    /// Schema variables that are neither role-bound nor in any set; ignored by estimation.
    pub ignored: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<Vec<String>> {
        if self.violations.is_empty() {
            Ok(self.ignored)
        } else {
            Err(Error::Validation(self.violations.iter().map(|v| v.to_string()).collect()))
        }
    }
}

const SET_NAMES: [&str; 3] = ["outcome_allowable", "target_allowable_extra", "non_allowable"];

pub fn validate<S: AsRef<str>>(
    partition: &AllowabilityPartition,
    roles: &RoleBindings,
    schema: &[S],
) -> ValidationReport {
    let known = |name: &str| schema.iter().any(|s| s.as_ref() == name);
    let mut report = ValidationReport::default();

    let sets = [
        &partition.outcome_allowable,
        &partition.target_allowable_extra,
        &partition.non_allowable,
    ];
    let mut seen: BTreeMap<&str, Vec<&'static str>> = BTreeMap::new();
    for (set, set_name) in sets.iter().zip(SET_NAMES) {
        for v in set.iter() {
            seen.entry(v.as_str()).or_default().push(set_name);
        }
    }
    for (variable, in_sets) in &seen {
        if in_sets.len() > 1 {
            report.violations.push(PartitionViolation::Overlap {
                variable: variable.to_string(),
                sets: in_sets.clone(),
            });
        }
        if !known(variable) {
            report.violations.push(PartitionViolation::UnknownVariable {
                variable: variable.to_string(),
                role: in_sets[0],
            });
        }
    }

    let mut by_variable: BTreeMap<&str, Vec<&'static str>> = BTreeMap::new();
    for (role, variable) in roles.role_names() {
        by_variable.entry(variable).or_default().push(role);
        if !known(variable) {
            report.violations.push(PartitionViolation::UnknownVariable {
                variable: variable.to_string(),
                role,
            });
        }
        if let Some(in_sets) = seen.get(variable) {
            for set in in_sets {
                report.violations.push(PartitionViolation::RoleCollision {
                    variable: variable.to_string(),
                    role,
                    set,
                });
            }
        }
    }
    for (variable, role_list) in by_variable {
        if role_list.len() > 1 {
            report.violations.push(PartitionViolation::SharedRole {
                variable: variable.to_string(),
                roles: role_list,
            });
        }
    }
    if roles.race.marginalized == roles.race.privileged {
        report.violations.push(PartitionViolation::RaceLevels {
            level: roles.race.marginalized.clone(),
        });
    }

    for name in schema {
        let name = name.as_ref();
        let is_role = roles.role_names().iter().any(|(_, v)| *v == name);
        if !is_role && !seen.contains_key(name) {
            report.ignored.push(name.to_string());
        }
    }
    report
}

/// Roles and partition resolved to column (or joint-variable) positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleIndex {
    pub race: usize,
    /// Level index of the marginalized group within the race variable.
    pub r0: usize,
    /// Level index of the privileged group.
    pub r0_prime: usize,
    pub target: usize,
    pub outcome: usize,
    pub selection: Option<(usize, String)>,
    pub outcome_allowable: Vec<usize>,
    pub target_extra: Vec<usize>,
    pub non_allowable: Vec<usize>,
}

impl RoleIndex {
    /// Resolve names against a schema. `levels` returns the level labels of a
    /// categorical variable, `None` for numeric ones.
    pub fn resolve<'a, S: AsRef<str>>(
        roles: &RoleBindings,
        partition: &AllowabilityPartition,
        names: &[S],
        levels: impl Fn(usize) -> Option<&'a [String]>,
    ) -> Result<RoleIndex> {
        let ignored = validate(partition, roles, names).into_result()?;
        if !ignored.is_empty() {
            log::warn!("covariates ignored by estimation (in no allowability set): {}", ignored.join(", "));
        }
        let idx = |name: &str| -> usize {
            names.iter().position(|n| n.as_ref() == name).expect("validated name")
        };
        let race = idx(&roles.race.variable);
        let race_levels = levels(race).ok_or_else(|| {
            Error::Schema(format!("race variable `{}` must be categorical", roles.race.variable))
        })?;
        let level_pos = |label: &str| -> Result<usize> {
            race_levels.iter().position(|l| l == label).ok_or_else(|| {
                Error::Schema(format!(
                    "race level `{label}` not among levels of `{}`",
                    roles.race.variable
                ))
            })
        };
        let target = idx(&roles.target);
        if levels(target).is_none() {
            return Err(Error::Schema(format!("target `{}` must be categorical", roles.target)));
        }
        let all = |v: &[String]| v.iter().map(|s| idx(s)).collect::<Vec<_>>();
        Ok(RoleIndex {
            race,
            r0: level_pos(&roles.race.marginalized)?,
            r0_prime: level_pos(&roles.race.privileged)?,
            target,
            outcome: idx(&roles.outcome),
            selection: roles
                .selection
                .as_ref()
                .map(|s| (idx(&s.variable), s.level.clone())),
            outcome_allowable: all(&partition.outcome_allowable),
            target_extra: all(&partition.target_allowable_extra),
            non_allowable: all(&partition.non_allowable),
        })
    }

    /// `A^m ∪ A^y`, target-allowable positions.
    pub fn target_allowable(&self) -> Vec<usize> {
        self.target_extra
            .iter()
            .chain(&self.outcome_allowable)
            .copied()
            .collect()
    }

    /// `N ∪ A^m ∪ A^y`.
    pub fn all_covariates(&self) -> Vec<usize> {
        self.non_allowable
            .iter()
            .chain(&self.target_extra)
            .chain(&self.outcome_allowable)
            .copied()
            .collect()
    }
}
