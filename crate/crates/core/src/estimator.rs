//! Sample-level decomposition: nuisance models, weights, stacked weighted
//! contrasts and the percentile bootstrap.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CohortTable, Column};
use crate::error::{Error, Result};
use crate::gformula::montecarlo::{simulate, SimInputs};
use crate::gformula::{
    check_positivity_data, Backend, DecompositionEstimate, Factorization, Interval, Intervals, PositivityReport,
};
use crate::nuisance::{Family, FittedModel, ModelSpec, Prepared};
use crate::partition::{AllowabilityPartition, RoleBindings, RoleIndex, Standardization};
use crate::weights::{
    group_standardization_weight, iorw_weight, quantile_sorted, rmpw_weight, Group, IorwInputs, WeightVector,
};

/// The conditional each nuisance model estimates. `ay`, `am` and `n` are the
/// outcome-allowable, extra target-allowable and non-allowable covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceRole {
    /// `P(R | ay)`
    RaceGivenOutcomeAllowable,
    /// `P(M | r0', am, ay)`
    TargetPrivileged,
    /// `P(M | r0', n, am, ay)`
    TargetPrivilegedAll,
    /// `P(M | r0, n, am, ay)`
    TargetMarginalized,
    /// `P(R | m, am, ay)`
    RaceGivenTarget,
    /// `P(R | m, n, am, ay)`
    RaceGivenTargetAll,
    /// `P(R | am, ay)`
    RaceGivenAllowable,
    /// `P(R | n, am, ay)`
    RaceGivenAll,
    /// `P(M | am, ay)`
    TargetGivenAllowable,
    /// `P(M | n, am, ay)`
    TargetGivenAll,
    /// `E[Y | r0, m, n, am, ay]`
    OutcomeMarginalized,
    /// `E[Y | r0', m, am, ay]`, or with `n` for the factorization with non-allowables
    OutcomePrivileged,
}

impl fmt::Display for NuisanceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&snake_case(&format!("{self:?}")))
    }
}

fn snake_case(dbg: &str) -> String {
    let mut out = String::new();
    for (i, c) in dbg.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Main-effects regressions (logistic, multinomial or linear).
    #[default]
    Parametric,
    /// Conditional frequency tables; requires categorical conditioning sets.
    Saturated,
}

/// Per-role adjustments to the default model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleModel {
    /// Replaces the default conditioning set.
    #[serde(default)]
    pub predictors: Option<Vec<String>>,
    #[serde(default)]
    pub interactions: Vec<Vec<String>>,
    #[serde(default)]
    pub saturated: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPlan {
    #[serde(default)]
    pub kind: ModelKind,
    #[serde(default)]
    pub roles: BTreeMap<NuisanceRole, RoleModel>,
}

impl ModelPlan {
    pub fn saturated() -> Self {
        ModelPlan { kind: ModelKind::Saturated, roles: BTreeMap::new() }
    }

    fn all_saturated(&self, needed: &[NuisanceRole]) -> bool {
        needed.iter().all(|r| {
            self.roles
                .get(r)
                .and_then(|m| m.saturated)
                .unwrap_or(self.kind == ModelKind::Saturated)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratify_by_race: bool,
}

fn default_replicates() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_true() -> bool {
    true
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        BootstrapConfig { replicates, level: 0.95, seed, stratify_by_race: true }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidArgument("bootstrap replicates must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

/// Draw count and seed of the Monte Carlo backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSettings {
    pub draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub standardization: Standardization,
    pub backend: Backend,
    pub factorization: Factorization,
    pub models: ModelPlan,
    /// Cap every weight at this percentile (0–100) of its vector.
    pub truncation: Option<f64>,
    pub bootstrap: Option<BootstrapConfig>,
    pub monte_carlo: Option<MonteCarloSettings>,
}

impl EstimatorConfig {
    pub fn new(backend: Backend, standardization: Standardization) -> Self {
        EstimatorConfig {
            standardization,
            backend,
            factorization: Factorization::default(),
            models: ModelPlan::default(),
            truncation: None,
            bootstrap: None,
            monte_carlo: None,
        }
    }

    pub fn with_models(mut self, models: ModelPlan) -> Self {
        self.models = models;
        self
    }

    pub fn with_bootstrap(mut self, boot: BootstrapConfig) -> Self {
        self.bootstrap = Some(boot);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Marginalized,
    /// Marginalized rows again, carrying the counterfactual weight.
    Copy,
    Privileged,
}

/// Marginalized rows with their standardization weights, a copy of them with
/// the counterfactual weights, and the privileged rows with theirs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StackedDataset {
    pub row: Vec<usize>,
    pub origin: Vec<Origin>,
    pub y: Vec<f64>,
    pub weight: Vec<f64>,
}

impl StackedDataset {
    fn push(&mut self, row: usize, origin: Origin, y: f64, weight: f64) {
        self.row.push(row);
        self.origin.push(origin);
        self.y.push(y);
        self.weight.push(weight);
    }

    /// Slope of the weighted regression `E[Y | group] = β0 + β1·1{origin = a}`
    /// on the rows of origins `a` and `b`.
    pub fn contrast(&self, a: Origin, b: Origin) -> Result<f64> {
        let (mut sw, mut swx, mut swy, mut swxy) = (0.0, 0.0, 0.0, 0.0);
        let (mut na, mut nb) = (0.0, 0.0);
        for i in 0..self.y.len() {
            let x = if self.origin[i] == a {
                1.0
            } else if self.origin[i] == b {
                0.0
            } else {
                continue;
            };
            let w = self.weight[i];
            sw += w;
            swx += w * x;
            swy += w * self.y[i];
            swxy += w * x * self.y[i];
            if x == 1.0 {
                na += w;
            } else {
                nb += w;
            }
        }
        if na <= 0.0 || nb <= 0.0 {
            return Err(Error::EmptyCohort(format!("no weighted rows of origin {a:?} or {b:?}")));
        }
        // x is binary, so Σwx² = Σwx.
        Ok((sw * swxy - swx * swy) / (sw * swx - swx * swx))
    }

    /// Weighted mean of Y over one origin.
    pub fn mean(&self, origin: Origin) -> Result<f64> {
        let (ys, ws) = self.part(origin);
        weighted_mean(&ys, &ws)
    }

    fn part(&self, origin: Origin) -> (Vec<f64>, Vec<f64>) {
        (0..self.y.len())
            .filter(|&i| self.origin[i] == origin)
            .map(|i| (self.y[i], self.weight[i]))
            .unzip()
    }
}

fn weighted_mean(y: &[f64], w: &[f64]) -> Result<f64> {
    if y.len() != w.len() {
        return Err(Error::InvalidArgument("outcomes and weights differ in length".into()));
    }
    if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("weight {x} is negative or not finite")));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyCohort("group has no positive weight".into()));
    }
    Ok(y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total)
}

/// Weighted mean of group `a` minus weighted mean of group `b`.
pub fn weighted_mean_contrast(ya: &[f64], wa: &[f64], yb: &[f64], wb: &[f64]) -> Result<f64> {
    Ok(weighted_mean(ya, wa)? - weighted_mean(yb, wb)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapSummary {
    pub config: BootstrapConfig,
    pub succeeded: usize,
    pub failed: usize,
    /// Messages of the first few failed replicates.
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunWeights {
    pub marginalized: WeightVector,
    pub counterfactual: WeightVector,
    pub privileged: WeightVector,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightedRun {
    pub estimate: DecompositionEstimate,
    pub models: Vec<(NuisanceRole, FittedModel)>,
    /// `None` for the Monte Carlo backend.
    pub weights: Option<RunWeights>,
    pub positivity: PositivityReport,
    pub rows_used: usize,
    pub rows_dropped_by_selection: usize,
    pub bootstrap: Option<BootstrapSummary>,
}

/// Nuisance models the backend reads, in a fixed order.
pub fn required_roles(backend: Backend, factorization: Factorization, has_ay: bool, has_n: bool) -> Vec<NuisanceRole> {
    use NuisanceRole::*;
    let mut out = Vec::new();
    if has_ay {
        out.push(RaceGivenOutcomeAllowable);
    }
    match backend {
        Backend::Rmpw => out.extend([TargetPrivileged, TargetMarginalized]),
        Backend::Iorw => {
            out.extend([RaceGivenTarget, RaceGivenAllowable]);
            if has_n {
                out.extend([RaceGivenTargetAll, RaceGivenAll, TargetGivenAllowable, TargetGivenAll]);
            }
        }
        Backend::MonteCarloG => {
            out.extend([TargetPrivileged, TargetMarginalized, OutcomeMarginalized, OutcomePrivileged]);
            if factorization == Factorization::WithNonAllowable {
                out.push(TargetPrivilegedAll);
            }
        }
        Backend::ExactOracle => {}
    }
    out
}

struct Context<'a> {
    roles: &'a RoleBindings,
    partition: &'a AllowabilityPartition,
    factorization: Factorization,
    target_levels: usize,
    outcome_family: Family,
}

impl Context<'_> {
    fn default_predictors(&self, role: NuisanceRole) -> Vec<String> {
        use NuisanceRole::*;
        let p = self.partition;
        let ay = p.outcome_allowable.clone();
        let a: Vec<String> = p.target_allowable_extra.iter().chain(&p.outcome_allowable).cloned().collect();
        let na: Vec<String> = p.non_allowable.iter().chain(&a).cloned().collect();
        let with_m = |rest: &[String]| {
            let mut v = vec![self.roles.target.clone()];
            v.extend_from_slice(rest);
            v
        };
        match role {
            RaceGivenOutcomeAllowable => ay,
            TargetPrivileged | RaceGivenAllowable | TargetGivenAllowable => a,
            TargetPrivilegedAll | TargetMarginalized | RaceGivenAll | TargetGivenAll => na,
            RaceGivenTarget => with_m(&a),
            RaceGivenTargetAll | OutcomeMarginalized => with_m(&na),
            OutcomePrivileged => match self.factorization {
                Factorization::TargetAllowable => with_m(&a),
                Factorization::WithNonAllowable => with_m(&na),
            },
        }
    }

    fn spec(&self, role: NuisanceRole, plan: &ModelPlan) -> ModelSpec {
        use NuisanceRole::*;
        let custom = plan.roles.get(&role);
        let predictors = custom
            .and_then(|c| c.predictors.clone())
            .unwrap_or_else(|| self.default_predictors(role));
        let saturated = custom.and_then(|c| c.saturated).unwrap_or(plan.kind == ModelKind::Saturated);
        let target_family = if self.target_levels == 2 { Family::BinaryLogit } else { Family::MultinomialLogit };
        let (response, family) = match role {
            RaceGivenOutcomeAllowable | RaceGivenTarget | RaceGivenTargetAll | RaceGivenAllowable | RaceGivenAll => {
                (self.roles.race.variable.clone(), Family::BinaryLogit)
            }
            TargetPrivileged | TargetPrivilegedAll | TargetMarginalized | TargetGivenAllowable | TargetGivenAll => {
                (self.roles.target.clone(), target_family)
            }
            OutcomeMarginalized | OutcomePrivileged => (self.roles.outcome.clone(), self.outcome_family),
        };
        let mut spec = ModelSpec::new(&response, &predictors, family);
        spec.saturated = saturated;
        if !saturated {
            if let Some(c) = custom {
                spec.interactions = c.interactions.clone();
            }
        }
        let race = &self.roles.race;
        match role {
            TargetPrivileged | TargetPrivilegedAll | OutcomePrivileged => spec.in_group(&race.variable, &race.privileged),
            TargetMarginalized | OutcomeMarginalized => spec.in_group(&race.variable, &race.marginalized),
            _ => spec,
        }
    }
}

/// A cohort bound to its models, ready for repeated estimation under
/// different row weights.
pub struct Pipeline {
    cohort: CohortTable,
    config: EstimatorConfig,
    base: Vec<f64>,
    /// Marginalized and privileged level labels.
    race_labels: (String, String),
    target_codes: Vec<u32>,
    k: usize,
    y: Vec<f64>,
    r0_rows: Vec<usize>,
    r1_rows: Vec<usize>,
    roles: Vec<NuisanceRole>,
    prepared: Vec<Prepared>,
    /// For the Monte Carlo backend: outcome models bound to tables with the
    /// target fixed at each level.
    outcome_at_level: Vec<(Prepared, Prepared)>,
    pub positivity: PositivityReport,
    pub rows_dropped_by_selection: usize,
}

/// Point fit of a [`Pipeline`] under one weighting of its rows.
#[derive(Debug, Clone)]
pub struct Fit {
    pub estimate: DecompositionEstimate,
    pub models: Vec<FittedModel>,
    pub weights: Option<RunWeights>,
    pub stacked: Option<StackedDataset>,
}

impl Pipeline {
    pub fn new(
        data: &CohortTable,
        roles: &RoleBindings,
        partition: &AllowabilityPartition,
        config: EstimatorConfig,
    ) -> Result<Pipeline> {
        if config.backend == Backend::ExactOracle {
            return Err(Error::InvalidArgument(
                "the exact backend evaluates joints; use a weighting or Monte Carlo backend on data".into(),
            ));
        }
        if config.backend == Backend::MonteCarloG {
            match config.monte_carlo {
                Some(mc) if mc.draws >= 1 => {}
                _ => return Err(Error::InvalidArgument("Monte Carlo backend needs draws ≥ 1 and a seed".into())),
            }
        }
        if let Some(b) = &config.bootstrap {
            b.validate()?;
        }
        let (cohort, dropped) = data.select(roles)?;
        if cohort.n_rows() == 0 {
            return Err(Error::EmptyCohort("no rows satisfy the selection".into()));
        }
        let mut roles = roles.clone();
        roles.selection = None;
        let names = cohort.names().to_vec();
        let ix = RoleIndex::resolve(&roles, partition, &names, |i| cohort.columns()[i].levels())?;
        let base = cohort.base_weights();
        let (_, race_codes) = cohort.categorical(&roles.race.variable)?;
        let race_codes = race_codes.to_vec();
        let race_labels = (roles.race.marginalized.clone(), roles.race.privileged.clone());
        let (m_levels, target_codes) = cohort.categorical(&roles.target)?;
        let k = m_levels.len();
        if k < 2 {
            return Err(Error::Schema(format!("target `{}` needs at least two levels", roles.target)));
        }
        let target_codes = target_codes.to_vec();
        let y = cohort.numeric(&roles.outcome)?;
        let (r0, r1) = (ix.r0 as u32, ix.r0_prime as u32);
        let mut r0_rows = Vec::new();
        let mut r1_rows = Vec::new();
        for i in 0..cohort.n_rows() {
            if base[i] <= 0.0 {
                continue;
            }
            match race_codes[i] {
                c if c == r0 => r0_rows.push(i),
                c if c == r1 => r1_rows.push(i),
                _ => return Err(Error::RaceNotBinary(roles.race.variable.clone())),
            }
        }
        if r0_rows.is_empty() || r1_rows.is_empty() {
            return Err(Error::RaceNotBinary(roles.race.variable.clone()));
        }

        let needed = required_roles(
            config.backend,
            config.factorization,
            !ix.outcome_allowable.is_empty(),
            !ix.non_allowable.is_empty(),
        );
        let positivity = check_positivity_data(&cohort, &roles, partition)?;
        if !positivity.is_clean() {
            let list: Vec<String> = positivity
                .violations
                .iter()
                .map(|v| format!("{:?} in {}: {}", v.kind, v.stratum, v.detail))
                .collect();
            if config.models.all_saturated(&needed) {
                return Err(Error::Positivity(list.join("; ")));
            }
            for l in &list {
                warn!("support violation (parametric models extrapolate): {l}");
            }
        }

        let outcome_family = match cohort.column(&roles.outcome)? {
            Column::Numeric(_) => Family::Gaussian,
            Column::Categorical { levels, .. } if levels.len() == 2 => Family::BinaryLogit,
            Column::Categorical { .. } => Family::MultinomialLogit,
        };
        let ctx = Context { roles: &roles, partition, factorization: config.factorization, target_levels: k, outcome_family };
        let prepared = needed
            .iter()
            .map(|&r| Prepared::new(&ctx.spec(r, &config.models), &cohort))
            .collect::<Result<Vec<_>>>()?;
        let mut outcome_at_level = Vec::new();
        if config.backend == Backend::MonteCarloG {
            let s0 = ctx.spec(NuisanceRole::OutcomeMarginalized, &config.models);
            let s1 = ctx.spec(NuisanceRole::OutcomePrivileged, &config.models);
            for level in 0..k {
                let t = cohort.with_constant_code(&roles.target, level as u32)?;
                outcome_at_level.push((Prepared::new(&s0, &t)?, Prepared::new(&s1, &t)?));
            }
        }
        Ok(Pipeline {
            cohort,
            config,
            base,
            race_labels,
            target_codes,
            k,
            y,
            r0_rows,
            r1_rows,
            roles: needed,
            prepared,
            outcome_at_level,
            positivity,
            rows_dropped_by_selection: dropped,
        })
    }

    pub fn cohort(&self) -> &CohortTable {
        &self.cohort
    }

    pub fn roles(&self) -> &[NuisanceRole] {
        &self.roles
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    fn model<'m>(&self, fits: &'m [FittedModel], role: NuisanceRole) -> Option<(&Prepared, &'m FittedModel)> {
        self.roles.iter().position(|&r| r == role).map(|i| (&self.prepared[i], &fits[i]))
    }

    /// Class column of a race model holding `level`.
    fn race_column(model: &FittedModel, level: &str) -> Result<usize> {
        model
            .response_levels
            .iter()
            .position(|l| l == level)
            .ok_or_else(|| Error::Schema(format!("race model lacks level `{level}`")))
    }

    /// Estimate under row weights `w` (frequency × base). `warm` holds fits
    /// of the same roles to start Newton iterations from.
    pub fn fit(&self, w: &[f64], warm: Option<&[FittedModel]>) -> Result<Fit> {
        let fits = self
            .prepared
            .iter()
            .enumerate()
            .map(|(i, p)| p.fit(w, warm.map(|m| &m[i])))
            .collect::<Result<Vec<_>>>()?;
        let r0_rows: Vec<usize> = self.r0_rows.iter().copied().filter(|&i| w[i] > 0.0).collect();
        let r1_rows: Vec<usize> = self.r1_rows.iter().copied().filter(|&i| w[i] > 0.0).collect();
        if r0_rows.is_empty() || r1_rows.is_empty() {
            return Err(Error::EmptyCohort("a race group has no weight".into()));
        }
        let mass = |rows: &[usize]| rows.iter().map(|&i| w[i]).sum::<f64>();
        let p_r0 = mass(&r0_rows) / (mass(&r0_rows) + mass(&r1_rows));
        let (marg_label, priv_label) = (&self.race_labels.0, &self.race_labels.1);

        let p_r0_ay = |rows: &[usize]| -> Result<Vec<f64>> {
            match self.model(&fits, NuisanceRole::RaceGivenOutcomeAllowable) {
                None => Ok(vec![p_r0; rows.len()]),
                Some((p, m)) => {
                    let c = Self::race_column(m, marg_label)?;
                    Ok(rows.iter().map(|&i| p.prob(m, i, c)).collect())
                }
            }
        };
        let std = self.config.standardization;
        let w_r0 = group_standardization_weight(&p_r0_ay(&r0_rows)?, p_r0, Group::Marginalized, std)?;
        let w_r1 = group_standardization_weight(&p_r0_ay(&r1_rows)?, p_r0, Group::Privileged, std)?;

        let (m0, m1, mcf, weights, stacked) = match self.config.backend {
            Backend::MonteCarloG => {
                let (a, b, c) = self.monte_carlo(&fits, w, &r0_rows, &r1_rows, &w_r0, &w_r1)?;
                (a, b, c, None, None)
            }
            backend => {
                let w_cf = match backend {
                    Backend::Rmpw => self.rmpw(&fits, &r0_rows, &w_r0)?,
                    _ => self.iorw(&fits, &r0_rows, &w_r0, marg_label, priv_label)?,
                };
                let (w_r0, w_cf, w_r1) = match self.config.truncation {
                    None => (w_r0, w_cf, w_r1),
                    Some(p) => (
                        w_r0.truncate_at_percentile(p)?,
                        w_cf.truncate_at_percentile(p)?,
                        w_r1.truncate_at_percentile(p)?,
                    ),
                };
                let b0: Vec<f64> = r0_rows.iter().map(|&i| w[i]).collect();
                let b1: Vec<f64> = r1_rows.iter().map(|&i| w[i]).collect();
                let mut s = StackedDataset::default();
                for (j, &i) in r0_rows.iter().enumerate() {
                    s.push(i, Origin::Marginalized, self.y[i], w[i] * w_r0.values[j]);
                }
                for (j, &i) in r0_rows.iter().enumerate() {
                    s.push(i, Origin::Copy, self.y[i], w[i] * w_cf.values[j]);
                }
                for (j, &i) in r1_rows.iter().enumerate() {
                    s.push(i, Origin::Privileged, self.y[i], w[i] * w_r1.values[j]);
                }
                let means = (s.mean(Origin::Marginalized)?, s.mean(Origin::Privileged)?, s.mean(Origin::Copy)?);
                let weights = RunWeights {
                    marginalized: w_r0.with_base_weights(&b0),
                    counterfactual: w_cf.with_base_weights(&b0),
                    privileged: w_r1.with_base_weights(&b1),
                };
                (means.0, means.1, means.2, Some(weights), Some(s))
            }
        };
        let mut estimate = DecompositionEstimate::from_means(m0, m1, mcf, std, self.config.backend);
        if let Some(s) = &stacked {
            estimate.observed = s.contrast(Origin::Marginalized, Origin::Privileged)?;
            estimate.reduction = s.contrast(Origin::Marginalized, Origin::Copy)?;
            estimate.residual = s.contrast(Origin::Copy, Origin::Privileged)?;
        }
        Ok(Fit { estimate, models: fits, weights, stacked })
    }

    fn observed_prob(&self, fits: &[FittedModel], role: NuisanceRole, rows: &[usize]) -> Result<Vec<f64>> {
        let (p, m) = self.model(fits, role).ok_or_else(|| Error::Unfitted(role.to_string()))?;
        Ok(rows.iter().map(|&i| p.prob(m, i, self.target_codes[i] as usize)).collect())
    }

    fn race_prob(&self, fits: &[FittedModel], role: NuisanceRole, rows: &[usize], level: &str) -> Result<Vec<f64>> {
        let (p, m) = self.model(fits, role).ok_or_else(|| Error::Unfitted(role.to_string()))?;
        let c = Self::race_column(m, level)?;
        Ok(rows.iter().map(|&i| p.prob(m, i, c)).collect())
    }

    fn rmpw(&self, fits: &[FittedModel], rows: &[usize], w_r0: &WeightVector) -> Result<WeightVector> {
        let p_priv = self.observed_prob(fits, NuisanceRole::TargetPrivileged, rows)?;
        let p_marg = self.observed_prob(fits, NuisanceRole::TargetMarginalized, rows)?;
        rmpw_weight(&p_priv, &p_marg, w_r0)
    }

    fn iorw(&self, fits: &[FittedModel], rows: &[usize], w_r0: &WeightVector, marg: &str, privileged: &str) -> Result<WeightVector> {
        use NuisanceRole::*;
        let has_n = self.roles.contains(&RaceGivenAll);
        let (with_m_n, without_m_n) = if has_n { (RaceGivenTargetAll, RaceGivenAll) } else { (RaceGivenTarget, RaceGivenAllowable) };
        let inputs = IorwInputs {
            r1_given_m_a: self.race_prob(fits, RaceGivenTarget, rows, privileged)?,
            r0_given_m_na: self.race_prob(fits, with_m_n, rows, marg)?,
            r1_given_a: self.race_prob(fits, RaceGivenAllowable, rows, privileged)?,
            r0_given_na: self.race_prob(fits, without_m_n, rows, marg)?,
            target_ratio: if has_n {
                Some((
                    self.observed_prob(fits, TargetGivenAllowable, rows)?,
                    self.observed_prob(fits, TargetGivenAll, rows)?,
                ))
            } else {
                None
            },
        };
        iorw_weight(&inputs, w_r0)
    }

    fn monte_carlo(
        &self,
        fits: &[FittedModel],
        w: &[f64],
        r0_rows: &[usize],
        r1_rows: &[usize],
        w_r0: &WeightVector,
        w_r1: &WeightVector,
    ) -> Result<(f64, f64, f64)> {
        use NuisanceRole::*;
        let settings = self.config.monte_carlo.expect("checked at construction");
        let k = self.k;
        let laws = |role: NuisanceRole, rows: &[usize]| -> Result<Vec<f64>> {
            let (p, m) = self.model(fits, role).ok_or_else(|| Error::Unfitted(role.to_string()))?;
            let mut out = vec![0.0; rows.len() * k];
            for (j, &i) in rows.iter().enumerate() {
                p.probs_into(m, i, &mut out[j * k..(j + 1) * k]);
            }
            Ok(out)
        };
        let means = |privileged: bool, rows: &[usize]| -> Result<Vec<f64>> {
            let role = if privileged { OutcomePrivileged } else { OutcomeMarginalized };
            let (_, m) = self.model(fits, role).ok_or_else(|| Error::Unfitted(role.to_string()))?;
            let mut out = vec![0.0; rows.len() * k];
            for (level, (p0, p1)) in self.outcome_at_level.iter().enumerate() {
                let p = if privileged { p1 } else { p0 };
                for (j, &i) in rows.iter().enumerate() {
                    out[j * k + level] = p.mean(m, i);
                }
            }
            Ok(out)
        };
        let own_r1 = match self.config.factorization {
            Factorization::TargetAllowable => TargetPrivileged,
            Factorization::WithNonAllowable => TargetPrivilegedAll,
        };
        let inputs = SimInputs {
            k,
            r0_weight: r0_rows.iter().zip(&w_r0.values).map(|(&i, v)| w[i] * v).collect(),
            r1_weight: r1_rows.iter().zip(&w_r1.values).map(|(&i, v)| w[i] * v).collect(),
            target_own_r0: laws(TargetMarginalized, r0_rows)?,
            target_cf_r0: laws(TargetPrivileged, r0_rows)?,
            target_r1: laws(own_r1, r1_rows)?,
            outcome_r0: means(false, r0_rows)?,
            outcome_r1: means(true, r1_rows)?,
        };
        for v in [&inputs.target_own_r0, &inputs.target_cf_r0, &inputs.target_r1, &inputs.outcome_r0, &inputs.outcome_r1] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Positivity("a fitted law is undefined for some rows (empty model cell)".into()));
            }
        }
        simulate(&inputs, settings.draws, settings.seed)
    }

    /// Row weights of one bootstrap replicate: base weights times resampling
    /// counts. Replicate `b` reads its own stream of the seeded generator, so
    /// the draw does not depend on scheduling.
    pub fn resample(&self, boot: &BootstrapConfig, b: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
        rng.set_stream(b);
        let mut counts = vec![0u32; self.cohort.n_rows()];
        let mut draw = |pool: &[usize], rng: &mut ChaCha8Rng| {
            for _ in 0..pool.len() {
                counts[pool[rng.random_range(0..pool.len())]] += 1;
            }
        };
        if boot.stratify_by_race {
            draw(&self.r0_rows, &mut rng);
            draw(&self.r1_rows, &mut rng);
        } else {
            let mut pool: Vec<usize> = self.r0_rows.iter().chain(&self.r1_rows).copied().collect();
            pool.sort_unstable();
            draw(&pool, &mut rng);
        }
        counts.iter().zip(&self.base).map(|(&c, &b)| c as f64 * b).collect()
    }

    /// Percentile intervals from refitting the whole pipeline on resampled
    /// rows. Replicates run in parallel; results are collected by index.
    pub fn bootstrap(&self, boot: &BootstrapConfig, point: &Fit) -> Result<(Intervals, BootstrapSummary)> {
        boot.validate()?;
        let results: Vec<Result<[f64; 6]>> = (0..boot.replicates as u64)
            .into_par_iter()
            .map(|b| {
                let w = self.resample(boot, b);
                let fit = self.fit(&w, Some(&point.models))?;
                Ok(fit.estimate.values())
            })
            .collect();
        let mut values: Vec<[f64; 6]> = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        let mut failed = 0;
        for r in results {
            match r {
                Ok(v) => values.push(v),
                Err(e) => {
                    failed += 1;
                    if failures.len() < 5 {
                        failures.push(e.to_string());
                    }
                }
            }
        }
        if failed * 100 > boot.replicates {
            return Err(Error::Bootstrap {
                failed,
                total: boot.replicates,
                first: failures.first().cloned().unwrap_or_default(),
            });
        }
        let intervals = percentile_intervals(&values, boot.level);
        let summary = BootstrapSummary { config: *boot, succeeded: values.len(), failed, failures };
        Ok((intervals, summary))
    }
}

/// Type-7 percentile intervals of each of the six quantities.
pub fn percentile_intervals(values: &[[f64; 6]], level: f64) -> Intervals {
    let alpha = (1.0 - level) / 2.0;
    let iv = |j: usize| {
        let mut col: Vec<f64> = values.iter().map(|v| v[j]).collect();
        col.sort_by(f64::total_cmp);
        Interval { lower: quantile_sorted(&col, alpha), upper: quantile_sorted(&col, 1.0 - alpha), level }
    };
    Intervals {
        mean_r0: iv(0),
        mean_r0prime: iv(1),
        mean_cf: iv(2),
        observed: iv(3),
        reduction: iv(4),
        residual: iv(5),
    }
}

/// Full sample pipeline: cohort selection, support diagnostics, nuisance
/// fits, weights, stacked contrasts and (optionally) bootstrap intervals.
pub fn decompose_weighted(
    data: &CohortTable,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    config: &EstimatorConfig,
) -> Result<WeightedRun> {
    let pipeline = Pipeline::new(data, roles, partition, config.clone())?;
    let base = pipeline.base.clone();
    let point = pipeline.fit(&base, None)?;
    let mut estimate = point.estimate.clone();
    let bootstrap = match &config.bootstrap {
        None => None,
        Some(boot) => {
            let (ci, summary) = pipeline.bootstrap(boot, &point)?;
            estimate.ci = Some(ci);
            Some(summary)
        }
    };
    Ok(WeightedRun {
        estimate,
        models: pipeline.roles.iter().copied().zip(point.models).collect(),
        weights: point.weights,
        positivity: pipeline.positivity.clone(),
        rows_used: pipeline.r0_rows.len() + pipeline.r1_rows.len(),
        rows_dropped_by_selection: pipeline.rows_dropped_by_selection,
        bootstrap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_case, worked_joint, worked_setup, RandomJointSpec};
    use crate::gformula::decompose_exact;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn contrast_of_plain_means() {
        let d = weighted_mean_contrast(&[1.0, 1.0, 0.0], &[1.0; 3], &[0.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(close(d, 2.0 / 3.0 - 0.5, 1e-15));
        let e = weighted_mean_contrast(&[0.3, 0.9], &[2.0, 1.0], &[0.3, 0.9], &[2.0, 1.0]).unwrap();
        assert_eq!(e, 0.0);
        assert!(weighted_mean_contrast(&[1.0], &[0.0], &[1.0], &[1.0]).is_err());
        assert!(weighted_mean_contrast(&[1.0], &[-1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn stacked_slope_equals_mean_difference() {
        let mut s = StackedDataset::default();
        for (i, (y, w)) in [(1.0, 0.5), (0.0, 2.0), (1.0, 1.0)].into_iter().enumerate() {
            s.push(i, Origin::Marginalized, y, w);
        }
        for (i, (y, w)) in [(0.0, 1.0), (1.0, 3.0)].into_iter().enumerate() {
            s.push(i, Origin::Privileged, y, w);
        }
        let direct = s.mean(Origin::Marginalized).unwrap() - s.mean(Origin::Privileged).unwrap();
        let slope = s.contrast(Origin::Marginalized, Origin::Privileged).unwrap();
        assert!(close(direct, slope, 1e-14));
    }

    #[test]
    fn saturated_worked_example_matches_oracle() {
        let (j, roles, p) = worked_setup();
        let data = CohortTable::from_joint(&j);
        let exact = decompose_exact(&j, &roles, &p, Standardization::Pooled).unwrap();
        for backend in [Backend::Rmpw, Backend::Iorw] {
            let cfg = EstimatorConfig::new(backend, Standardization::Pooled).with_models(ModelPlan::saturated());
            let run = decompose_weighted(&data, &roles, &p, &cfg).unwrap();
            for (a, b) in run.estimate.values().iter().zip(exact.values()) {
                assert!(close(*a, b, 1e-9), "{backend:?}: {a} vs {b}");
            }
            assert!(close(run.estimate.residual, 0.10, 1e-9));
        }
    }

    #[test]
    fn residual_from_direct_weighted_means() {
        let (j, roles, p) = worked_setup();
        let data = CohortTable::from_joint(&j);
        let cfg = EstimatorConfig::new(Backend::Rmpw, Standardization::Pooled).with_models(ModelPlan::saturated());
        let pipeline = Pipeline::new(&data, &roles, &p, cfg).unwrap();
        let fit = pipeline.fit(&data.base_weights(), None).unwrap();
        let s = fit.stacked.unwrap();
        let (yc, wc) = s.part(Origin::Copy);
        let (y1, w1) = s.part(Origin::Privileged);
        let direct = weighted_mean_contrast(&yc, &wc, &y1, &w1).unwrap();
        assert!(close(direct, 0.10, 1e-9));
        assert!(close(direct, fit.estimate.residual, 1e-12));
    }

    #[test]
    fn rmpw_and_iorw_agree_with_saturated_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let case = random_case(&mut rng, &RandomJointSpec::default());
            let data = CohortTable::from_joint(&case.joint);
            for std in Standardization::ALL {
                let run = |b| {
                    let cfg = EstimatorConfig::new(b, std).with_models(ModelPlan::saturated());
                    decompose_weighted(&data, &case.roles, &case.partition, &cfg).unwrap().estimate
                };
                let (r, i) = (run(Backend::Rmpw), run(Backend::Iorw));
                let exact = decompose_exact(&case.joint, &case.roles, &case.partition, std).unwrap();
                for ((a, b), c) in r.values().iter().zip(i.values()).zip(exact.values()) {
                    assert!(close(*a, b, 1e-9) && close(*a, c, 1e-9), "{a} {b} {c}");
                }
                assert!(r.additivity_gap().abs() < 1e-9 && i.additivity_gap().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_outcome_gives_zero_contrasts_and_intervals() {
        let j = worked_joint();
        let data = CohortTable::from_joint(&j);
        let (_, roles, p) = worked_setup();
        let n = data.n_rows();
        let y_col = data.index_of("Y").unwrap();
        let mut names = data.names().to_vec();
        let mut cols = data.columns().to_vec();
        cols[y_col] = Column::Numeric(vec![0.7; n]);
        names[y_col] = "Y".into();
        let counts: Vec<f64> = data.base_weights().iter().map(|p| (p * 1000.0).round()).collect();
        let data = CohortTable::new(names, cols, Some(counts)).unwrap();
        let cfg = EstimatorConfig::new(Backend::Rmpw, Standardization::Pooled)
            .with_models(ModelPlan::saturated())
            .with_bootstrap(BootstrapConfig::new(20, 3));
        let run = decompose_weighted(&data, &roles, &p, &cfg).unwrap();
        let e = run.estimate;
        assert!(e.observed.abs() < 1e-12 && e.reduction.abs() < 1e-12 && e.residual.abs() < 1e-12);
        let ci = e.ci.unwrap();
        for iv in [ci.observed, ci.reduction, ci.residual] {
            assert!(iv.lower.abs() < 1e-12 && iv.upper.abs() < 1e-12);
        }
    }

    #[test]
    fn single_replicate_interval_is_degenerate() {
        let v = [[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]];
        let iv = percentile_intervals(&v, 0.95);
        assert_eq!((iv.residual.lower, iv.residual.upper), (6.0, 6.0));
    }

    #[test]
    fn stratified_resampling_keeps_group_counts() {
        let (j, roles, p) = worked_setup();
        let data = CohortTable::from_joint(&j);
        let data = data.clone().with_weights(None).unwrap();
        let cfg = EstimatorConfig::new(Backend::Rmpw, Standardization::Pooled);
        let pipeline = Pipeline::new(&data, &roles, &p, cfg).unwrap();
        let boot = BootstrapConfig::new(10, 9);
        for b in 0..10 {
            let w = pipeline.resample(&boot, b);
            let in_r0: f64 = pipeline.r0_rows.iter().map(|&i| w[i]).sum();
            assert_eq!(in_r0 as usize, pipeline.r0_rows.len());
        }
        assert_eq!(pipeline.resample(&boot, 4), pipeline.resample(&boot, 4));
        assert_ne!(pipeline.resample(&boot, 4), pipeline.resample(&boot, 5));
    }

    #[test]
    fn saturated_positivity_failure_is_fatal() {
        use crate::dist::VariableSpec;
        use crate::dist::FiniteJoint;
        let vars = vec![
            VariableSpec::new("R", &["r0", "r1"]).unwrap(),
            VariableSpec::binary("A"),
            VariableSpec::binary("M"),
            VariableSpec::binary("Y"),
        ];
        let j = FiniteJoint::from_fn_normalized(vars, |c| {
            let pm1 = match (c[0], c[1]) {
                (0, 1) => 0.0,
                _ => 0.5,
            };
            (if c[2] == 1 { pm1 } else { 1.0 - pm1 }) * 0.5
        })
        .unwrap();
        let data = CohortTable::from_joint(&j);
        let roles = RoleBindings::new("R", "r0", "r1", "M", "Y");
        let p = AllowabilityPartition::new(&["A"], &[], &[]);
        let cfg = EstimatorConfig::new(Backend::Rmpw, Standardization::Pooled).with_models(ModelPlan::saturated());
        let err = decompose_weighted(&data, &roles, &p, &cfg).unwrap_err();
        assert!(err.is_positivity(), "{err}");
    }
}
