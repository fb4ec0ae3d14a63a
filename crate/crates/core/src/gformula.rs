//! Disparity estimands and their g-formula evaluation.
//!
//! Three standardized means define the decomposition:
//!
//! * `mean_r0`: `Σ_ay S(ay) E[Y | r0, ay]`,
//! * `mean_r0prime`: `Σ_ay S(ay) E[Y | r0', ay]`, evaluated through the
//!   target factorization `Σ_am P(am|r0',ay) Σ_m P(m|r0',am,ay) E[Y|r0',m,am,ay]`
//!   (or the variant that also integrates over the non-allowable covariates),
//! * `mean_cf`: `Σ_ay S(ay) Σ_am P(am|r0,ay) Σ_n P(n|r0,am,ay) Σ_m P(m|r0',am,ay) E[Y|r0,m,n,am,ay]`,
//!
//! where `S` is the standard over the outcome-allowable covariates.
//! `observed = mean_r0 − mean_r0prime`, `reduction = mean_r0 − mean_cf` and
//! `residual = mean_cf − mean_r0prime`.

use serde::{Deserialize, Serialize};

use crate::dist::{select_cohort, FiniteJoint, MassTable};
use crate::error::{Error, Result};
use crate::partition::{AllowabilityPartition, RoleBindings, RoleIndex, Standardization};

pub(crate) mod montecarlo;
mod positivity;

pub use montecarlo::{decompose_montecarlo, MonteCarloConfig, MonteCarloModels};
pub use positivity::{check_positivity_data, check_positivity_joint, PositivityReport, SupportViolation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    ExactOracle,
    MonteCarloG,
    Rmpw,
    Iorw,
}

/// How the privileged group's mean is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// Through `P(m | r0', am, ay)` and `E[Y | r0', m, am, ay]`; non-allowables never enter.
    #[default]
    TargetAllowable,
    /// Additionally integrates over `P(n | r0', am, ay)` with `E[Y | r0', m, n, am, ay]`.
    WithNonAllowable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervals {
    pub mean_r0: Interval,
    pub mean_r0prime: Interval,
    pub mean_cf: Interval,
    pub observed: Interval,
    pub reduction: Interval,
    pub residual: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionEstimate {
    pub mean_r0: f64,
    pub mean_r0prime: f64,
    pub mean_cf: f64,
    pub observed: f64,
    pub reduction: f64,
    pub residual: f64,
    pub standardization: Standardization,
    pub backend: Backend,
    pub ci: Option<Intervals>,
}

impl DecompositionEstimate {
    pub fn from_means(
        mean_r0: f64,
        mean_r0prime: f64,
        mean_cf: f64,
        standardization: Standardization,
        backend: Backend,
    ) -> Self {
        DecompositionEstimate {
            mean_r0,
            mean_r0prime,
            mean_cf,
            observed: mean_r0 - mean_r0prime,
            reduction: mean_r0 - mean_cf,
            residual: mean_cf - mean_r0prime,
            standardization,
            backend,
            ci: None,
        }
    }

    /// `reduction + residual − observed`.
    pub fn additivity_gap(&self) -> f64 {
        self.reduction + self.residual - self.observed
    }

    /// The six reported quantities in a fixed order:
    /// mean_r0, mean_r0prime, mean_cf, observed, reduction, residual.
    pub fn values(&self) -> [f64; 6] {
        [
            self.mean_r0,
            self.mean_r0prime,
            self.mean_cf,
            self.observed,
            self.reduction,
            self.residual,
        ]
    }
}

/// Numeric values of the outcome's levels; labels must parse as numbers.
pub(crate) fn outcome_values(joint: &FiniteJoint, outcome: usize) -> Result<Vec<f64>> {
    let var = &joint.variables()[outcome];
    var.levels()
        .iter()
        .map(|l| {
            l.parse::<f64>().map_err(|_| {
                Error::Schema(format!("outcome `{}` has non-numeric level `{l}`", var.name()))
            })
        })
        .collect()
}

fn with(mut base: Vec<usize>, extra: &[usize]) -> Vec<usize> {
    base.extend_from_slice(extra);
    base
}

/// Enumerate assignments of `vars` on top of `base`, as full-length assignments.
pub(crate) fn sub_assignments(cards: &[usize], vars: &[usize], base: &[usize]) -> Vec<Vec<usize>> {
    let sub_cards: Vec<usize> = vars.iter().map(|&v| cards[v]).collect();
    let mut out = Vec::with_capacity(sub_cards.iter().product());
    crate::dist::for_each_assignment(&sub_cards, |a| {
        let mut full = base.to_vec();
        for (&v, &l) in vars.iter().zip(a) {
            full[v] = l;
        }
        out.push(full);
    });
    out
}

/// The cohort joint with roles resolved and every marginal table the
/// identification formulas read from.
#[derive(Debug, Clone)]
pub struct ExactTables {
    pub joint: FiniteJoint,
    pub roles: RoleBindings,
    pub ix: RoleIndex,
    pub cards: Vec<usize>,
    pub y_values: Vec<f64>,
    pub ay: Vec<usize>,
    pub am: Vec<usize>,
    pub n: Vec<usize>,
    /// `[R]`
    pub t_r: MassTable,
    /// `[AY]`
    pub t_ay: MassTable,
    /// `[R, AY]`
    pub t_r_ay: MassTable,
    /// `[R, AY, AM]`
    pub t_r_a: MassTable,
    /// `[R, AY, AM, M]`
    pub t_r_a_m: MassTable,
    /// `[R, AY, AM, N]`
    pub t_r_na: MassTable,
    /// `[R, AY, AM, N, M]`
    pub t_r_na_m: MassTable,
    /// `[AY, AM, M]`, race pooled
    pub t_a_m: MassTable,
    /// `[AY, AM, N, M]`, race pooled
    pub t_na_m: MassTable,
    /// `[AY, AM]`, race pooled
    pub t_a: MassTable,
    /// `[AY, AM, N]`, race pooled
    pub t_na: MassTable,
    /// `Σ y P` over `[R, AY]`
    pub y_r_ay: MassTable,
    /// `Σ y P` over `[R, AY, AM, M]`
    pub y_r_a_m: MassTable,
    /// `Σ y P` over `[R, AY, AM, N, M]`
    pub y_r_na_m: MassTable,
}

impl ExactTables {
    pub fn new(joint: &FiniteJoint, roles: &RoleBindings, partition: &AllowabilityPartition) -> Result<Self> {
        let (joint, roles) = select_cohort(joint, roles)?;
        let ix = crate::dist::resolve_on_joint(&joint, &roles, partition)?;
        let y_values = outcome_values(&joint, ix.outcome)?;
        let cards = joint.cardinalities();

        let race = ix.race;
        let race_mass = joint.table(&[race]);
        let mut probe = vec![0usize; cards.len()];
        let mut other = 0.0;
        for level in 0..cards[race] {
            probe[race] = level;
            if level != ix.r0 && level != ix.r0_prime {
                other += race_mass.get(&probe);
            }
        }
        probe[race] = ix.r0;
        let m0 = race_mass.get(&probe);
        probe[race] = ix.r0_prime;
        let m1 = race_mass.get(&probe);
        if !(m0 > 0.0) || !(m1 > 0.0) || other > 0.0 {
            return Err(Error::RaceNotBinary(roles.race.variable.clone()));
        }

        let ay = ix.outcome_allowable.clone();
        let am = ix.target_extra.clone();
        let n = ix.non_allowable.clone();
        let (m, y) = (ix.target, ix.outcome);
        let r_ay = with(vec![race], &ay);
        let r_a = with(r_ay.clone(), &am);
        let r_a_m = with(r_a.clone(), &[m]);
        let r_na = with(r_a.clone(), &n);
        let r_na_m = with(r_na.clone(), &[m]);
        let yv = |a: &[usize]| y_values[a[y]];
        Ok(ExactTables {
            t_r: race_mass,
            t_ay: joint.table(&ay),
            t_r_ay: joint.table(&r_ay),
            t_r_a: joint.table(&r_a),
            t_r_a_m: joint.table(&r_a_m),
            t_r_na: joint.table(&r_na),
            t_r_na_m: joint.table(&r_na_m),
            t_a_m: joint.table(&r_a_m[1..]),
            t_na_m: joint.table(&r_na_m[1..]),
            t_a: joint.table(&r_a[1..]),
            t_na: joint.table(&r_na[1..]),
            y_r_ay: joint.weighted_table(&r_ay, yv),
            y_r_a_m: joint.weighted_table(&r_a_m, yv),
            y_r_na_m: joint.weighted_table(&r_na_m, yv),
            joint,
            roles,
            ix,
            cards,
            y_values,
            ay,
            am,
            n,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.cards.len()
    }

    fn at_race(&self, a: &[usize], level: usize) -> Vec<usize> {
        let mut a = a.to_vec();
        a[self.ix.race] = level;
        a
    }

    /// `P(r0)` or `P(r0')`.
    pub fn p_race(&self, level: usize) -> f64 {
        self.t_r.get(&self.at_race(&vec![0; self.n_vars()], level))
    }

    /// `P(level | ay)` for the stratum of `a`; `None` when `P(ay) = 0`.
    pub fn p_race_given_ay(&self, a: &[usize], level: usize) -> Option<f64> {
        let den = self.t_ay.get(a);
        (den > 0.0).then(|| self.t_r_ay.get(&self.at_race(a, level)) / den)
    }

    /// Standard mass `S(ay)` of the stratum of `a`.
    pub fn standard_mass(&self, a: &[usize], std: Standardization) -> f64 {
        match std {
            Standardization::Pooled => self.t_ay.get(a),
            Standardization::MarginalizedToR0 => {
                self.t_r_ay.get(&self.at_race(a, self.ix.r0)) / self.p_race(self.ix.r0)
            }
            Standardization::MarginalizedToR0Prime => {
                self.t_r_ay.get(&self.at_race(a, self.ix.r0_prime)) / self.p_race(self.ix.r0_prime)
            }
        }
    }

    /// All strata of the outcome-allowable covariates as full assignments.
    pub fn ay_strata(&self) -> Vec<Vec<usize>> {
        sub_assignments(&self.cards, &self.ay, &vec![0; self.n_vars()])
    }

    pub fn describe(&self, vars: &[usize], a: &[usize]) -> String {
        self.joint.describe(vars, a)
    }

    fn race_label(&self, level: usize) -> &str {
        &self.joint.variables()[self.ix.race].levels()[level]
    }

    /// `E[Y | level, ay]`.
    pub fn mean_given_ay(&self, a: &[usize], level: usize) -> Result<f64> {
        let a = self.at_race(a, level);
        let den = self.t_r_ay.get(&a);
        if !(den > 0.0) {
            return Err(Error::Positivity(format!(
                "stratum {} has no `{}` mass",
                self.describe(&self.ay, &a),
                self.race_label(level)
            )));
        }
        Ok(self.y_r_ay.get(&a) / den)
    }

    /// Privileged-group mean in an outcome-allowable stratum, via the chosen factorization.
    pub fn mean_r0prime_in(&self, a: &[usize], factorization: Factorization) -> Result<f64> {
        let base = self.at_race(a, self.ix.r0_prime);
        let p_ay = self.t_r_ay.get(&base);
        if !(p_ay > 0.0) {
            return Err(Error::Positivity(format!(
                "stratum {} has no `{}` mass",
                self.describe(&self.ay, &base),
                self.roles.race.privileged
            )));
        }
        let mut total = 0.0;
        for am in sub_assignments(&self.cards, &self.am, &base) {
            let p_am = self.t_r_a.get(&am);
            if p_am == 0.0 {
                continue;
            }
            let inner = match factorization {
                Factorization::TargetAllowable => self.target_sum(&am, p_am, |c| {
                    self.y_r_a_m.get(c) / self.t_r_a_m.get(c)
                }, &self.t_r_a_m),
                Factorization::WithNonAllowable => {
                    let mut s = 0.0;
                    for na in sub_assignments(&self.cards, &self.n, &am) {
                        let p_n = self.t_r_na.get(&na);
                        if p_n == 0.0 {
                            continue;
                        }
                        s += p_n / p_am
                            * self.target_sum(&na, p_n, |c| {
                                self.y_r_na_m.get(c) / self.t_r_na_m.get(c)
                            }, &self.t_r_na_m);
                    }
                    s
                }
            };
            total += p_am / p_ay * inner;
        }
        Ok(total)
    }

    /// `Σ_m P(m | stratum) g(stratum, m)` where `table` holds the stratum-with-m masses.
    fn target_sum(&self, stratum: &[usize], mass: f64, g: impl Fn(&[usize]) -> f64, table: &MassTable) -> f64 {
        let m = self.ix.target;
        let mut c = stratum.to_vec();
        let mut s = 0.0;
        for level in 0..self.cards[m] {
            c[m] = level;
            let p = table.get(&c);
            if p > 0.0 {
                s += p / mass * g(&c);
            }
        }
        s
    }

    /// `P(m | r0', am, ay)` for the stratum of `a` at target level `a[m]`.
    pub fn intervention_law(&self, a: &[usize]) -> Option<f64> {
        let b = self.at_race(a, self.ix.r0_prime);
        let den = self.t_r_a.get(&b);
        (den > 0.0).then(|| self.t_r_a_m.get(&b) / den)
    }

    /// Counterfactual mean of the marginalized group in an outcome-allowable stratum.
    pub fn mean_cf_in(&self, a: &[usize]) -> Result<f64> {
        let (r0, r1, m) = (self.ix.r0, self.ix.r0_prime, self.ix.target);
        let base = self.at_race(a, r0);
        let p_ay = self.t_r_ay.get(&base);
        if !(p_ay > 0.0) {
            return Err(Error::Positivity(format!(
                "stratum {} has no `{}` mass",
                self.describe(&self.ay, &base),
                self.roles.race.marginalized
            )));
        }
        let target_allowable = self.ix.target_allowable();
        let mut total = 0.0;
        for am in sub_assignments(&self.cards, &self.am, &base) {
            let p_am = self.t_r_a.get(&am);
            let alt = self.at_race(&am, r1);
            let p_am_alt = self.t_r_a.get(&alt);
            if p_am == 0.0 {
                if p_am_alt > 0.0 {
                    return Err(Error::CommonSupport(format!(
                        "stratum {} occurs among `{}` but not among `{}`",
                        self.describe(&target_allowable, &am),
                        self.roles.race.privileged,
                        self.roles.race.marginalized
                    )));
                }
                continue;
            }
            if !(p_am_alt > 0.0) {
                return Err(Error::CommonSupport(format!(
                    "stratum {} occurs among `{}` but has no `{}` counterpart to draw the target from",
                    self.describe(&target_allowable, &am),
                    self.roles.race.marginalized,
                    self.roles.race.privileged
                )));
            }
            let mut s_am = 0.0;
            for na in sub_assignments(&self.cards, &self.n, &am) {
                let p_n = self.t_r_na.get(&na);
                if p_n == 0.0 {
                    continue;
                }
                let mut c = na.clone();
                let mut s_m = 0.0;
                for level in 0..self.cards[m] {
                    c[m] = level;
                    let mut c_alt = c.clone();
                    c_alt[self.ix.race] = r1;
                    let law = self.t_r_a_m.get(&c_alt) / p_am_alt;
                    if law == 0.0 {
                        continue;
                    }
                    let p_cell = self.t_r_na_m.get(&c);
                    if !(p_cell > 0.0) {
                        return Err(Error::Positivity(format!(
                            "target {}={} has probability {law:.3e} among `{}` in stratum {} but never occurs among `{}` in stratum {}",
                            self.joint.variables()[m].name(),
                            self.joint.variables()[m].levels()[level],
                            self.roles.race.privileged,
                            self.describe(&target_allowable, &c),
                            self.roles.race.marginalized,
                            self.describe(&self.ix.all_covariates(), &c)
                        )));
                    }
                    s_m += law * self.y_r_na_m.get(&c) / p_cell;
                }
                s_am += p_n / p_am * s_m;
            }
            total += p_am / p_ay * s_am;
        }
        Ok(total)
    }

    fn check_standard_support(&self, a: &[usize], std: Standardization) -> Result<()> {
        for level in [self.ix.r0, self.ix.r0_prime] {
            let b = self.at_race(a, level);
            if !(self.t_r_ay.get(&b) > 0.0) {
                return Err(Error::Positivity(format!(
                    "P({}={} | {}) = 0 on the support of the {std} standard",
                    self.roles.race.variable,
                    self.race_label(level),
                    self.describe(&self.ay, a)
                )));
            }
        }
        Ok(())
    }

    /// Per-stratum means; strata where either group has no mass are omitted.
    pub fn conditional(&self, factorization: Factorization) -> Result<Vec<StratumEstimate>> {
        let mut out = Vec::new();
        for a in self.ay_strata() {
            let r0_mass = self.t_r_ay.get(&self.at_race(&a, self.ix.r0));
            let r1_mass = self.t_r_ay.get(&self.at_race(&a, self.ix.r0_prime));
            if !(r0_mass > 0.0 && r1_mass > 0.0) {
                continue;
            }
            out.push(StratumEstimate {
                stratum: self.describe(&self.ay, &a),
                mean_r0: self.mean_given_ay(&a, self.ix.r0)?,
                mean_r0prime: self.mean_r0prime_in(&a, factorization)?,
                mean_cf: self.mean_cf_in(&a)?,
                assignment: a,
            });
        }
        Ok(out)
    }

    pub fn decompose(&self, std: Standardization, factorization: Factorization) -> Result<DecompositionEstimate> {
        let (mut m0, mut m1, mut mcf) = (0.0, 0.0, 0.0);
        for a in self.ay_strata() {
            let s = self.standard_mass(&a, std);
            if s == 0.0 {
                continue;
            }
            self.check_standard_support(&a, std)?;
            m0 += s * self.mean_given_ay(&a, self.ix.r0)?;
            m1 += s * self.mean_r0prime_in(&a, factorization)?;
            mcf += s * self.mean_cf_in(&a)?;
        }
        Ok(DecompositionEstimate::from_means(m0, m1, mcf, std, Backend::ExactOracle))
    }
}

/// Decomposition within one stratum of the outcome-allowable covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumEstimate {
    pub stratum: String,
    pub assignment: Vec<usize>,
    pub mean_r0: f64,
    pub mean_r0prime: f64,
    pub mean_cf: f64,
}

impl StratumEstimate {
    pub fn reduction(&self) -> f64 {
        self.mean_r0 - self.mean_cf
    }
}

pub fn observed_disparity_exact(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    std: Standardization,
) -> Result<f64> {
    let t = ExactTables::new(joint, roles, partition)?;
    let (mut m0, mut m1) = (0.0, 0.0);
    for a in t.ay_strata() {
        let s = t.standard_mass(&a, std);
        if s == 0.0 {
            continue;
        }
        t.check_standard_support(&a, std)?;
        m0 += s * t.mean_given_ay(&a, t.ix.r0)?;
        m1 += s * t.mean_given_ay(&a, t.ix.r0_prime)?;
    }
    Ok(m0 - m1)
}

pub fn counterfactual_mean_exact(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    std: Standardization,
) -> Result<f64> {
    let t = ExactTables::new(joint, roles, partition)?;
    let mut total = 0.0;
    for a in t.ay_strata() {
        let s = t.standard_mass(&a, std);
        if s == 0.0 {
            continue;
        }
        t.check_standard_support(&a, std)?;
        total += s * t.mean_cf_in(&a)?;
    }
    Ok(total)
}

pub fn decompose_exact(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    std: Standardization,
) -> Result<DecompositionEstimate> {
    decompose_exact_with(joint, roles, partition, std, Factorization::default())
}

pub fn decompose_exact_with(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    std: Standardization,
    factorization: Factorization,
) -> Result<DecompositionEstimate> {
    ExactTables::new(joint, roles, partition)?.decompose(std, factorization)
}

/// Per-stratum decomposition without the outer standardization.
pub fn conditional_decomposition_exact(
    joint: &FiniteJoint,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
) -> Result<Vec<StratumEstimate>> {
    ExactTables::new(joint, roles, partition)?.conditional(Factorization::default())
}
