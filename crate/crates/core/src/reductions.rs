//! Identification formulas of established estimators, evaluated on exact
//! joints, and the suite that checks each against the generalized
//! decomposition under its allowability preset.
//!
//! Every formula here has the shape
//!
//! `Σ_o P(o) Σ_c P(c | r0, o) Σ_m E[Y | r0, m, o, c] {P_a(m) − P_b(m)}`
//!
//! with `o` the outer (standardizing) covariates, `c` the remaining ones and
//! two target laws `P_a`, `P_b` that differ between estimators. The sums are
//! written out directly over marginal tables of the joint and share no code
//! with the g-formula engine.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::CohortTable;
use crate::dist::{select_cohort, FiniteJoint, MassTable};
use crate::error::{Error, Result};
use crate::fixtures::{covariate_names, random_case, RandomJointSpec};
use crate::gformula::{conditional_decomposition_exact, decompose_exact};
use crate::nuisance::{self, Family, ModelSpec};
use crate::partition::{preset, AllowabilityPartition, CovariateTag, Preset, RoleBindings, Standardization};

/// Joint on which the two-intervention contrast differs from the reduction,
/// found by randomized search (target strongly dependent on the
/// non-allowable covariates within allowable strata).
const PSE2_WITNESS: &str = include_str!("../data/pse2_witness.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    /// Mediation formula for the natural indirect effect.
    NiePearl,
    /// Interventional indirect effect with the privileged target law
    /// marginalized over the non-allowables.
    Pse1Vvr,
    /// Contrast of two stochastic interventions (own-group vs privileged law).
    Pse2Vd,
    /// Path-specific effect with every non-demographic covariate target-allowable.
    Pse3,
    /// Detailed Oaxaca-Blinder decomposition.
    ObLinearDetailed,
    /// Reweighting Oaxaca-Blinder with ratio-of-target-probability weights.
    ObReweightRmpw,
    /// Reweighting Oaxaca-Blinder with inverse-odds-ratio weights.
    ObReweightIorw,
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Formula::NiePearl => "NIE (mediation formula)",
            Formula::Pse1Vvr => "PSE-I (interventional indirect effect)",
            Formula::Pse2Vd => "PSE-II (two-intervention contrast)",
            Formula::Pse3 => "PSE-III (path-specific effect)",
            Formula::ObLinearDetailed => "Oaxaca-Blinder (detailed)",
            Formula::ObReweightRmpw => "Oaxaca-Blinder reweighting (RMPW)",
            Formula::ObReweightIorw => "Oaxaca-Blinder reweighting (IORW)",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equal,
    GenerallyUnequal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReductionCase {
    pub preset: Preset,
    pub formula: Formula,
    pub expected_relation: Relation,
}

/// Estimators for presets 1–5 and how each relates to the reduction.
pub fn table1_cases() -> Vec<ReductionCase> {
    use Formula::*;
    let case = |preset, formula, expected_relation| ReductionCase { preset, formula, expected_relation };
    vec![
        case(Preset::ObLinear, ObLinearDetailed, Relation::Equal),
        case(Preset::ObReweighting, ObReweightRmpw, Relation::Equal),
        case(Preset::ObReweighting, ObReweightIorw, Relation::Equal),
        case(Preset::NieAnalogue, NiePearl, Relation::Equal),
        case(Preset::PathSpecificI, Pse1Vvr, Relation::Equal),
        case(Preset::PathSpecificI, Pse2Vd, Relation::GenerallyUnequal),
        case(Preset::PathSpecificIII, Pse3, Relation::Equal),
    ]
}

/// A target law `P(M | race, conditioning)`.
#[derive(Debug, Clone)]
enum Law {
    /// Conditional on the listed covariates within one race level.
    Given { race: usize, on: Vec<usize> },
    /// `Σ_over P(m | race, on ∪ over) P(over | race, on)`: the conditional
    /// law on `on` written as a marginalization.
    Marginalized { race: usize, on: Vec<usize>, over: Vec<usize> },
}

struct LawTables {
    race: usize,
    on: Vec<usize>,
    over: Vec<usize>,
    /// Mass of (race, on).
    den: MassTable,
    /// Mass of (race, on, over) for marginalized laws.
    mid: Option<MassTable>,
    /// Mass of (race, on, over, target).
    num: MassTable,
}

/// Cohort joint with resolved role indices.
struct Ctx {
    joint: FiniteJoint,
    n: usize,
    race: usize,
    r0: usize,
    r1: usize,
    m: usize,
    y_values: Vec<f64>,
    y: usize,
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

impl Ctx {
    fn new(joint: &FiniteJoint, roles: &RoleBindings) -> Result<Ctx> {
        let (joint, roles) = select_cohort(joint, roles)?;
        let race = joint.index_of(&roles.race.variable)?;
        let r0 = joint.level_of(race, &roles.race.marginalized)?;
        let r1 = joint.level_of(race, &roles.race.privileged)?;
        if joint.variables()[race].cardinality() != 2 {
            return Err(Error::RaceNotBinary(roles.race.variable.clone()));
        }
        let m = joint.index_of(&roles.target)?;
        let y = joint.index_of(&roles.outcome)?;
        let y_values = joint.variables()[y]
            .levels()
            .iter()
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| Error::Schema(format!("outcome level `{l}` is not numeric")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = joint.variables().len();
        Ok(Ctx { joint, n, race, r0, r1, m, y, y_values })
    }

    fn indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>> {
        let out: Vec<usize> = names.iter().map(|n| self.joint.index_of(n.as_ref())).collect::<Result<_>>()?;
        for &i in &out {
            if [self.race, self.m, self.y].contains(&i) {
                return Err(Error::Validation(vec![format!(
                    "`{}` is a role variable, not a covariate",
                    self.joint.variables()[i].name()
                )]));
            }
        }
        Ok(out)
    }

    fn table(&self, vars: &[usize]) -> MassTable {
        self.joint.table(&sorted(vars.to_vec()))
    }

    fn with(&self, vars: &[usize], extra: &[usize]) -> Vec<usize> {
        sorted(vars.iter().chain(extra).copied().collect())
    }

    fn at(&self, full: &[usize], var: usize, level: usize) -> Vec<usize> {
        let mut a = full.to_vec();
        a[var] = level;
        a
    }

    fn describe(&self, vars: &[usize], full: &[usize]) -> String {
        self.joint.describe(&sorted(vars.to_vec()), full)
    }

    fn support(&self, what: String) -> Error {
        Error::Positivity(what)
    }

    /// Marginal tables a target law reads from.
    fn prepare(&self, law: &Law) -> LawTables {
        match law {
            Law::Given { race, on } => {
                let den = self.with(on, &[self.race]);
                let num = self.with(&den, &[self.m]);
                LawTables { race: *race, on: on.clone(), over: Vec::new(), den: self.table(&den), mid: None, num: self.table(&num) }
            }
            Law::Marginalized { race, on, over } => {
                let on_r = self.with(on, &[self.race]);
                let all_r = self.with(&on_r, over);
                LawTables {
                    race: *race,
                    on: on.clone(),
                    over: over.clone(),
                    den: self.table(&on_r),
                    mid: Some(self.table(&all_r)),
                    num: self.table(&self.with(&all_r, &[self.m])),
                }
            }
        }
    }

    /// `P(m | law)` at the full assignment `cell` (target level in `cell[m]`).
    fn law_prob(&self, law: &LawTables, cell: &[usize]) -> Result<f64> {
        let base = self.at(cell, self.race, law.race);
        let den = law.den.get(&base);
        if !(den > 0.0) {
            return Err(self.support(format!(
                "target law undefined: no mass at race={}, {}",
                self.joint.variables()[self.race].levels()[law.race],
                self.describe(&law.on, cell)
            )));
        }
        let Some(mid) = &law.mid else {
            return Ok(law.num.get(&base) / den);
        };
        let mut total = 0.0;
        self.table(&law.over).for_each(self.n, |o, _| {
            let mut c = base.clone();
            for &v in &law.over {
                c[v] = o[v];
            }
            let p_over = mid.get(&c);
            if p_over == 0.0 {
                return;
            }
            let p_m = law.num.get(&c) / p_over;
            let p_n = p_over / den;
            total += p_m * p_n;
        });
        Ok(total)
    }

    /// Per outer stratum: its pooled mass and the inner sum
    /// `Σ_c P(c | r0, o) Σ_m E[Y | r0, m, o, c] {P_a(m) − P_b(m)}`.
    fn strata(&self, outer: &[usize], inner: &[usize], a: &Law, b: &Law) -> Result<Vec<(String, f64, f64)>> {
        let outer = sorted(outer.to_vec());
        let all = self.with(&outer, inner);
        let all_r = self.with(&all, &[self.race]);
        let all_rm = self.with(&all_r, &[self.m]);
        let outer_r = self.with(&outer, &[self.race]);
        let t_outer = self.table(&outer);
        let t_outer_r = self.table(&outer_r);
        let t_all_r = self.table(&all_r);
        let t_all_rm = self.table(&all_rm);
        let t_y = self.joint.weighted_table(&all_rm, |c| self.y_values[c[self.y]]);
        let k = self.joint.variables()[self.m].cardinality();
        let (a, b) = (self.prepare(a), self.prepare(b));

        let mut outer_cells = Vec::new();
        t_outer.for_each(self.n, |o, p| outer_cells.push((o.to_vec(), p)));
        let t_inner = self.table(inner);
        let mut inner_cells = Vec::new();
        t_inner.for_each(self.n, |c, _| inner_cells.push(c.to_vec()));

        let mut out = Vec::new();
        for (o, p_o) in outer_cells {
            if p_o == 0.0 {
                continue;
            }
            let o_r0 = self.at(&o, self.race, self.r0);
            let o_r1 = self.at(&o, self.race, self.r1);
            let mass_r0 = t_outer_r.get(&o_r0);
            if !(mass_r0 > 0.0 && t_outer_r.get(&o_r1) > 0.0) {
                return Err(self.support(format!(
                    "outer stratum {} lacks one of the groups",
                    self.describe(&outer, &o)
                )));
            }
            let mut value = 0.0;
            for c in &inner_cells {
                let mut cell = o_r0.clone();
                for &v in inner {
                    cell[v] = c[v];
                }
                let p_c = t_all_r.get(&cell);
                if p_c == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for level in 0..k {
                    let cm = self.at(&cell, self.m, level);
                    let pa = self.law_prob(&a, &cm)?;
                    let pb = self.law_prob(&b, &cm)?;
                    if pa == pb {
                        continue;
                    }
                    let p_cell = t_all_rm.get(&cm);
                    if !(p_cell > 0.0) {
                        return Err(self.support(format!(
                            "E[Y | race, target, covariates] undefined at {}",
                            self.describe(&all_rm, &cm)
                        )));
                    }
                    s += t_y.get(&cm) / p_cell * (pa - pb);
                }
                value += p_c / mass_r0 * s;
            }
            out.push((self.describe(&outer, &o), p_o, value));
        }
        Ok(out)
    }

    fn pooled(&self, outer: &[usize], inner: &[usize], a: &Law, b: &Law) -> Result<f64> {
        Ok(self.strata(outer, inner, a, b)?.iter().map(|(_, p, v)| p * v).sum())
    }
}

/// Per-stratum value of a conditional formula.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumValue {
    pub stratum: String,
    pub value: f64,
}

fn conditional(strata: Vec<(String, f64, f64)>) -> Vec<StratumValue> {
    strata.into_iter().map(|(stratum, _, value)| StratumValue { stratum, value }).collect()
}

/// `Σ_{m,c} E[Y | r0, m, c] {P(m | r0, c) − P(m | r0', c)} P(c)` with `c`
/// all covariates.
pub fn nie_analogue_exact<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, covariates: &[S]) -> Result<f64> {
    let (ctx, a, b, c) = nie_parts(joint, roles, covariates)?;
    ctx.pooled(&c, &[], &a, &b)
}

/// The mediation formula within each covariate stratum.
pub fn nie_conditional_exact<S: AsRef<str>>(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    covariates: &[S],
) -> Result<Vec<StratumValue>> {
    let (ctx, a, b, c) = nie_parts(joint, roles, covariates)?;
    Ok(conditional(ctx.strata(&c, &[], &a, &b)?))
}

fn nie_parts<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, covariates: &[S]) -> Result<(Ctx, Law, Law, Vec<usize>)> {
    let ctx = Ctx::new(joint, roles)?;
    let c = ctx.indices(covariates)?;
    let a = Law::Given { race: ctx.r0, on: c.clone() };
    let b = Law::Given { race: ctx.r1, on: c.clone() };
    Ok((ctx, a, b, c))
}

/// `Σ E[Y | r0, m, n, d] {P(m | r0, n, d) − P(m | r0', d)} P(n | r0, d) P(d)`,
/// with `P(m | r0', d)` formed as `Σ_n P(m | r0', n, d) P(n | r0', d)`.
pub fn pse1_exact<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, demographics: &[S], others: &[S]) -> Result<f64> {
    let (ctx, a, b, d, n) = pse1_parts(joint, roles, demographics, others)?;
    ctx.pooled(&d, &n, &a, &b)
}

pub fn pse1_conditional_exact<S: AsRef<str>>(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    demographics: &[S],
    others: &[S],
) -> Result<Vec<StratumValue>> {
    let (ctx, a, b, d, n) = pse1_parts(joint, roles, demographics, others)?;
    Ok(conditional(ctx.strata(&d, &n, &a, &b)?))
}

type Parts = (Ctx, Law, Law, Vec<usize>, Vec<usize>);

fn pse1_parts<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, demographics: &[S], others: &[S]) -> Result<Parts> {
    let ctx = Ctx::new(joint, roles)?;
    let d = ctx.indices(demographics)?;
    let n = ctx.indices(others)?;
    let a = Law::Given { race: ctx.r0, on: ctx.with(&d, &n) };
    let b = Law::Marginalized { race: ctx.r1, on: d.clone(), over: n.clone() };
    Ok((ctx, a, b, d, n))
}

/// Difference between the marginalized group's outcome under its own
/// allowable-conditional target law and under the privileged group's:
/// `Σ E[Y | r0, m, n, am, ay] {P(m | r0, am, ay) − P(m | r0', am, ay)}
/// P(n | r0, am, ay) P(am | r0, ay) P(ay)`.
pub fn pse2_contrast_exact(joint: &FiniteJoint, roles: &RoleBindings, partition: &AllowabilityPartition) -> Result<f64> {
    let (ctx, a, b, ay, rest) = pse2_parts(joint, roles, partition)?;
    ctx.pooled(&ay, &rest, &a, &b)
}

pub fn pse2_conditional_exact(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<Vec<StratumValue>> {
    let (ctx, a, b, ay, rest) = pse2_parts(joint, roles, partition)?;
    Ok(conditional(ctx.strata(&ay, &rest, &a, &b)?))
}

fn pse2_parts(joint: &FiniteJoint, roles: &RoleBindings, partition: &AllowabilityPartition) -> Result<Parts> {
    let ctx = Ctx::new(joint, roles)?;
    let ay = ctx.indices(&partition.outcome_allowable)?;
    let am = ctx.indices(&partition.target_allowable_extra)?;
    let n = ctx.indices(&partition.non_allowable)?;
    let allowable = ctx.with(&ay, &am);
    let a = Law::Given { race: ctx.r0, on: allowable.clone() };
    let b = Law::Given { race: ctx.r1, on: allowable };
    let rest = ctx.with(&am, &n);
    Ok((ctx, a, b, ay, rest))
}

/// `Σ E[Y | r0, m, c, d] {P(m | r0, c, d) − P(m | r0', c, d)} P(c | r0, d) P(d)`.
pub fn pse3_exact<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, demographics: &[S], others: &[S]) -> Result<f64> {
    let (ctx, a, b, d, c) = pse3_parts(joint, roles, demographics, others)?;
    ctx.pooled(&d, &c, &a, &b)
}

pub fn pse3_conditional_exact<S: AsRef<str>>(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    demographics: &[S],
    others: &[S],
) -> Result<Vec<StratumValue>> {
    let (ctx, a, b, d, c) = pse3_parts(joint, roles, demographics, others)?;
    Ok(conditional(ctx.strata(&d, &c, &a, &b)?))
}

fn pse3_parts<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, demographics: &[S], others: &[S]) -> Result<Parts> {
    let ctx = Ctx::new(joint, roles)?;
    let d = ctx.indices(demographics)?;
    let c = ctx.indices(others)?;
    let all = ctx.with(&d, &c);
    let a = Law::Given { race: ctx.r0, on: all.clone() };
    let b = Law::Given { race: ctx.r1, on: all };
    Ok((ctx, a, b, d, c))
}

/// `Σ E[Y | r0, m, c] {P(m | r0, c) − P(m | r0')} P(c | r0)`.
pub fn ob_detailed_exact<S: AsRef<str>>(joint: &FiniteJoint, roles: &RoleBindings, covariates: &[S]) -> Result<f64> {
    let ctx = Ctx::new(joint, roles)?;
    let c = ctx.indices(covariates)?;
    let a = Law::Given { race: ctx.r0, on: c.clone() };
    let b = Law::Given { race: ctx.r1, on: Vec::new() };
    ctx.pooled(&[], &c, &a, &b)
}

/// Detailed decomposition with a linear outcome model fitted among the
/// marginalized group: `Σ_{j≠ref} β_j {P(M = m_j | r0) − P(M = m_j | r0')}`,
/// where `β_j` is the coefficient of the indicator of target level `j` in
/// the regression of the outcome on the target and the covariates (main
/// effects). Rows are weighted by the table's base weights.
pub fn ob_detailed_linear<S: AsRef<str>>(data: &CohortTable, roles: &RoleBindings, covariates: &[S]) -> Result<f64> {
    let (cohort, _) = data.select(roles)?;
    let mut predictors = vec![roles.target.clone()];
    predictors.extend(covariates.iter().map(|c| c.as_ref().to_string()));
    let spec = ModelSpec::new(&roles.outcome, &predictors, Family::Gaussian)
        .in_group(&roles.race.variable, &roles.race.marginalized);
    let model = nuisance::fit(&spec, &cohort, None)?;
    let beta = &model
        .coefficients()
        .ok_or_else(|| Error::Unfitted(format!("linear model for `{}`", roles.outcome)))?[0];

    let (race_levels, race) = cohort.categorical(&roles.race.variable)?;
    let (m_levels, m) = cohort.categorical(&roles.target)?;
    let find = |l: &str| race_levels.iter().position(|x| x == l).map(|i| i as u32);
    let r0 = find(&roles.race.marginalized).ok_or_else(|| Error::RaceNotBinary(roles.race.variable.clone()))?;
    let r1 = find(&roles.race.privileged).ok_or_else(|| Error::RaceNotBinary(roles.race.variable.clone()))?;
    let w = cohort.base_weights();
    let law = |g: u32| -> Result<Vec<f64>> {
        let mut mass = vec![0.0; m_levels.len()];
        for i in 0..cohort.n_rows() {
            if race[i] == g {
                mass[m[i] as usize] += w[i];
            }
        }
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyCohort("a race group has no rows".into()));
        }
        Ok(mass.into_iter().map(|x| x / total).collect())
    };
    let (p0, p1) = (law(r0)?, law(r1)?);
    let mut psi = 0.0;
    for (j, level) in m_levels.iter().enumerate().skip(1) {
        let term = format!("{}[{}]", roles.target, level);
        let Some(k) = model.term_names.iter().position(|t| *t == term) else {
            return Err(Error::Schema(format!("no coefficient for `{term}`")));
        };
        psi += beta[k] * (p0[j] - p1[j]);
    }
    Ok(psi)
}

/// Which weight the reweighting decomposition uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReweightVariant {
    /// `P(m | r0', c) / P(m | r0, c)`.
    Rmpw,
    /// `[P(r0' | m, c) / P(r0 | m, c)] / [P(r0' | c) / P(r0 | c)]`.
    Iorw,
}

/// `E[Y | r0] − E[Y w | r0]` with no outcome-allowable covariates, all
/// covariates `c` target-allowable and `w` the chosen reweighting factor.
pub fn ob_reweight_exact<S: AsRef<str>>(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    covariates: &[S],
    variant: ReweightVariant,
) -> Result<f64> {
    let ctx = Ctx::new(joint, roles)?;
    let c = ctx.indices(covariates)?;
    let c_r = ctx.with(&c, &[ctx.race]);
    let c_m = ctx.with(&c, &[ctx.m]);
    let c_rm = ctx.with(&c_r, &[ctx.m]);
    let (t_c, t_cm, t_cr, t_crm) = (ctx.table(&c), ctx.table(&c_m), ctx.table(&c_r), ctx.table(&c_rm));
    let t_r = ctx.table(&[ctx.race]);
    let mut probe = vec![0; ctx.n];
    probe[ctx.race] = ctx.r0;
    let mass_r0 = t_r.get(&probe);
    if !(mass_r0 > 0.0) {
        return Err(Error::EmptyCohort("no marginalized rows".into()));
    }
    let (mut plain, mut weighted) = (0.0, 0.0);
    let mut err = None;
    ctx.joint.for_each_cell(|cell, p| {
        if p == 0.0 || cell[ctx.race] != ctx.r0 || err.is_some() {
            return;
        }
        let y = ctx.y_values[cell[ctx.y]];
        let own = cell.to_vec();
        let other = ctx.at(cell, ctx.race, ctx.r1);
        let w = match variant {
            ReweightVariant::Rmpw => {
                let num = t_crm.get(&other) / t_cr.get(&other);
                let den = t_crm.get(&own) / t_cr.get(&own);
                num / den
            }
            ReweightVariant::Iorw => {
                let odds_m = (t_crm.get(&other) / t_cm.get(cell)) / (t_crm.get(&own) / t_cm.get(cell));
                let odds = (t_cr.get(&other) / t_c.get(cell)) / (t_cr.get(&own) / t_c.get(cell));
                odds_m / odds
            }
        };
        if !w.is_finite() {
            err = Some(ctx.support(format!("reweighting factor undefined at {}", ctx.describe(&c_rm, cell))));
            return;
        }
        plain += p * y;
        weighted += p * y * w;
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok((plain - weighted) / mass_r0)
}

/// The committed joint on which the two-intervention contrast and the
/// reduction differ, with its roles and partition.
pub fn pse2_witness() -> Result<(FiniteJoint, RoleBindings, AllowabilityPartition)> {
    let joint = FiniteJoint::from_text(PSE2_WITNESS)?;
    let roles = RoleBindings::new("R", crate::fixtures::MARGINALIZED, crate::fixtures::PRIVILEGED, "M", "Y");
    let partition = AllowabilityPartition::new(&["X1"], &[], &["X2", "X3"]);
    Ok((joint, roles, partition))
}

/// Outcome of one row of the suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReductionOutcome {
    pub case: ReductionCase,
    pub joints: usize,
    /// Largest |formula − reduction| over joints where equality is expected.
    pub max_abs_diff: f64,
    /// |formula − reduction| on the committed witness, for unequal cases.
    pub witness_diff: Option<f64>,
    pub passed: bool,
}

pub const EQUALITY_TOLERANCE: f64 = 1e-10;
pub const WITNESS_MARGIN: f64 = 0.01;

/// Schema for random joints: the first two covariates demographic, the
/// rest clinical.
fn random_schema(k: usize) -> Vec<(String, CovariateTag)> {
    covariate_names(k)
        .into_iter()
        .enumerate()
        .map(|(i, n)| (n, if i < 2 { CovariateTag::Demographic } else { CovariateTag::Clinical }))
        .collect()
}

/// Value of `formula` on a joint whose partition follows the case's preset.
pub fn evaluate(formula: Formula, joint: &FiniteJoint, roles: &RoleBindings, partition: &AllowabilityPartition) -> Result<f64> {
    let all: Vec<String> = partition.covariates().cloned().collect();
    let ay = &partition.outcome_allowable;
    let rest: Vec<String> = partition.target_allowable_extra.iter().chain(&partition.non_allowable).cloned().collect();
    match formula {
        Formula::NiePearl => nie_analogue_exact(joint, roles, &all),
        Formula::Pse1Vvr => pse1_exact(joint, roles, ay, &rest),
        Formula::Pse2Vd => pse2_contrast_exact(joint, roles, partition),
        Formula::Pse3 => pse3_exact(joint, roles, ay, &rest),
        Formula::ObLinearDetailed => ob_detailed_exact(joint, roles, &all),
        Formula::ObReweightRmpw => ob_reweight_exact(joint, roles, &all, ReweightVariant::Rmpw),
        Formula::ObReweightIorw => ob_reweight_exact(joint, roles, &all, ReweightVariant::Iorw),
    }
}

/// |formula − reduction| on one random joint of the case's preset.
fn random_diff(case: &ReductionCase, seed: u64, row: u64, i: u64, independent_target: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row << 32 | i);
    let k = 2 + (i % 3) as usize;
    let partition = preset(case.preset, &random_schema(k));
    let spec = RandomJointSpec {
        covariates: k,
        target_levels: 2 + (i % 2) as usize,
        partition: Some(partition.clone()),
        target_ignores_non_allowable: independent_target,
        ..Default::default()
    };
    let rc = random_case(&mut rng, &spec);
    let formula = evaluate(case.formula, &rc.joint, &rc.roles, &partition)?;
    let engine = decompose_exact(&rc.joint, &rc.roles, &partition, Standardization::Pooled)?;
    Ok((formula - engine.reduction).abs())
}

/// Run every row on `joints` random joints each. Rows expected to differ
/// are checked for equality on joints where the target ignores the
/// non-allowables given race and allowables, and for a difference above
/// [`WITNESS_MARGIN`] on the committed witness.
pub fn run_table1_suite(joints: usize, seed: u64) -> Result<Vec<ReductionOutcome>> {
    table1_cases()
        .into_iter()
        .enumerate()
        .map(|(row, case)| {
            let independent = case.expected_relation == Relation::GenerallyUnequal;
            let diffs: Vec<f64> = (0..joints as u64)
                .into_par_iter()
                .map(|i| random_diff(&case, seed, row as u64, i, independent))
                .collect::<Result<_>>()?;
            let max_abs_diff = diffs.iter().fold(0.0f64, |m, d| m.max(*d));
            let witness_diff = match case.expected_relation {
                Relation::Equal => None,
                Relation::GenerallyUnequal => {
                    let (j, r, p) = pse2_witness()?;
                    let f = evaluate(case.formula, &j, &r, &p)?;
                    Some((f - decompose_exact(&j, &r, &p, Standardization::Pooled)?.reduction).abs())
                }
            };
            let passed = max_abs_diff <= EQUALITY_TOLERANCE && witness_diff.is_none_or(|d| d > WITNESS_MARGIN);
            Ok(ReductionOutcome { case, joints, max_abs_diff, witness_diff, passed })
        })
        .collect()
}

/// Per-stratum comparison of a conditional formula with the engine's
/// unstandardized reductions; returns the largest absolute difference.
pub fn conditional_gap(values: &[StratumValue], joint: &FiniteJoint, roles: &RoleBindings, partition: &AllowabilityPartition) -> Result<f64> {
    let engine = conditional_decomposition_exact(joint, roles, partition)?;
    if engine.len() != values.len() {
        return Err(Error::Validation(vec![format!(
            "{} formula strata vs {} engine strata",
            values.len(),
            engine.len()
        )]));
    }
    let mut gap = 0.0f64;
    for v in values {
        let e = engine
            .iter()
            .find(|e| e.stratum == v.stratum)
            .ok_or_else(|| Error::Validation(vec![format!("stratum {} missing from the engine", v.stratum)]))?;
        gap = gap.max((e.reduction() - v.value).abs());
    }
    Ok(gap)
}
