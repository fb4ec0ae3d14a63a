//! Group-standardization, ratio-of-mediator-probability and inverse-odds-ratio
//! weights.
//!
//! All constructors are rowwise maps over per-row probabilities, so the same
//! code serves fitted models and exact conditionals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gformula::ExactTables;
use crate::partition::Standardization;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightFormula {
    GroupStdR0,
    GroupStdR0Prime,
    Rmpw,
    Iorw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Marginalized,
    Privileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    /// Base-weighted mean within the weighted group; 1 in expectation.
    pub mean: f64,
    /// Kish effective sample size `(Σ b·w)² / Σ b·w²` with base weights `b`.
    pub ess: f64,
    /// Rows capped by percentile truncation.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
    pub formula: WeightFormula,
    pub standardization: Standardization,
    pub diagnostics: WeightDiagnostics,
}

impl WeightVector {
    fn new(values: Vec<f64>, formula: WeightFormula, standardization: Standardization) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Positivity(format!("{formula:?} weight {v} at row {}", i + 1)));
        }
        let diagnostics = diagnose(&values, None, 0);
        Ok(WeightVector { values, formula, standardization, diagnostics })
    }

    /// Recompute diagnostics using base (frequency) weights of the same rows.
    pub fn with_base_weights(mut self, base: &[f64]) -> Self {
        self.diagnostics = diagnose(&self.values, Some(base), self.diagnostics.truncated);
        self
    }

    /// Cap values above the given percentile (0–100) of the row values.
    pub fn truncate_at_percentile(mut self, percentile: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&percentile) {
            return Err(Error::InvalidArgument(format!("truncation percentile {percentile} outside [0, 100]")));
        }
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        let cap = quantile_sorted(&sorted, percentile / 100.0);
        let mut truncated = 0;
        for v in &mut self.values {
            if *v > cap {
                *v = cap;
                truncated += 1;
            }
        }
        self.diagnostics = diagnose(&self.values, None, truncated);
        Ok(self)
    }
}

/// Type-7 quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn diagnose(values: &[f64], base: Option<&[f64]>, truncated: usize) -> WeightDiagnostics {
    let b = |i: usize| base.map_or(1.0, |b| b[i]);
    let (mut sb, mut sbw, mut sbw2) = (0.0, 0.0, 0.0);
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        let bi = b(i);
        sb += bi;
        sbw += bi * v;
        sbw2 += bi * v * v;
        min = min.min(v);
        max = max.max(v);
    }
    WeightDiagnostics {
        n: values.len(),
        min,
        max,
        mean: sbw / sb,
        ess: if sbw2 > 0.0 { sbw * sbw / sbw2 } else { 0.0 },
        truncated,
    }
}

fn check_open_unit(p: f64, what: &str, row: usize) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Positivity(format!("{what} = {p} at row {} (must lie in (0, 1))", row + 1)))
    }
}

/// Factor that moves a group's covariate distribution to the standard:
/// `P(g)/P(g|ay)` for the pooled standard, times `P(r|ay)/P(r)` when the
/// standard is group `r`.
pub fn standardization_factor(p_r0_given_ay: f64, p_r0: f64, group: Group, std: Standardization) -> f64 {
    let (p_g_ay, p_g) = match group {
        Group::Marginalized => (p_r0_given_ay, p_r0),
        Group::Privileged => (1.0 - p_r0_given_ay, 1.0 - p_r0),
    };
    let pooled = p_g / p_g_ay;
    match std {
        Standardization::Pooled => pooled,
        Standardization::MarginalizedToR0 => {
            if group == Group::Marginalized {
                1.0
            } else {
                pooled * p_r0_given_ay / p_r0
            }
        }
        Standardization::MarginalizedToR0Prime => {
            if group == Group::Privileged {
                1.0
            } else {
                pooled * (1.0 - p_r0_given_ay) / (1.0 - p_r0)
            }
        }
    }
}

/// `w_r0` or `w_r0'` from per-row `P(r0 | ay)` of the group's rows and the marginal `P(r0)`.
pub fn group_standardization_weight(
    p_r0_given_ay: &[f64],
    p_r0: f64,
    group: Group,
    std: Standardization,
) -> Result<WeightVector> {
    check_open_unit(p_r0, "P(r0)", 0)?;
    let values = p_r0_given_ay
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            check_open_unit(p, "P(r0 | outcome-allowables)", i)?;
            Ok(standardization_factor(p, p_r0, group, std))
        })
        .collect::<Result<Vec<_>>>()?;
    let formula = match group {
        Group::Marginalized => WeightFormula::GroupStdR0,
        Group::Privileged => WeightFormula::GroupStdR0Prime,
    };
    WeightVector::new(values, formula, std)
}

/// `P(m|r0',am,ay) / P(m|r0,n,am,ay) × w_r0` over the marginalized group's
/// rows, each probability taken at the row's observed target level.
pub fn rmpw_weight(
    p_target_privileged: &[f64],
    p_target_marginalized: &[f64],
    group_std: &WeightVector,
) -> Result<WeightVector> {
    let n = p_target_privileged.len();
    if p_target_marginalized.len() != n || group_std.values.len() != n {
        return Err(Error::InvalidArgument("weight inputs differ in length".into()));
    }
    let values = (0..n)
        .map(|i| {
            let (num, den) = (p_target_privileged[i], p_target_marginalized[i]);
            if !(den > 0.0) {
                return Err(Error::Positivity(format!(
                    "P(target | marginalized group, covariates) = {den} at row {}",
                    i + 1
                )));
            }
            if !(num >= 0.0) {
                return Err(Error::Positivity(format!("intervention law undefined at row {}", i + 1)));
            }
            Ok(num / den * group_std.values[i])
        })
        .collect::<Result<Vec<_>>>()?;
    WeightVector::new(values, WeightFormula::Rmpw, group_std.standardization)
}

/// Per-row inputs of the inverse-odds-ratio weight, all at the row's
/// observed target level and covariates.
#[derive(Debug, Clone, Default)]
pub struct IorwInputs {
    /// `P(r0' | m, am, ay)`
    pub r1_given_m_a: Vec<f64>,
    /// `P(r0 | m, n, am, ay)`
    pub r0_given_m_na: Vec<f64>,
    /// `P(r0' | am, ay)`
    pub r1_given_a: Vec<f64>,
    /// `P(r0 | n, am, ay)`
    pub r0_given_na: Vec<f64>,
    /// `P(m | am, ay)` and `P(m | n, am, ay)`; `None` when there are no
    /// non-allowable covariates, in which case the ratio is identically 1.
    pub target_ratio: Option<(Vec<f64>, Vec<f64>)>,
}

/// `[P(r0'|m,am,ay)/P(r0|m,n,am,ay)] / [P(r0'|am,ay)/P(r0|n,am,ay)] ×
/// P(m|am,ay)/P(m|n,am,ay) × w_r0`.
pub fn iorw_weight(inputs: &IorwInputs, group_std: &WeightVector) -> Result<WeightVector> {
    let n = group_std.values.len();
    let lens = [
        inputs.r1_given_m_a.len(),
        inputs.r0_given_m_na.len(),
        inputs.r1_given_a.len(),
        inputs.r0_given_na.len(),
    ];
    if lens.iter().any(|&l| l != n)
        || inputs.target_ratio.as_ref().is_some_and(|(a, b)| a.len() != n || b.len() != n)
    {
        return Err(Error::InvalidArgument("weight inputs differ in length".into()));
    }
    let values = (0..n)
        .map(|i| {
            check_open_unit(inputs.r1_given_m_a[i], "P(r0' | target, allowables)", i)?;
            check_open_unit(inputs.r0_given_m_na[i], "P(r0 | target, covariates)", i)?;
            check_open_unit(inputs.r1_given_a[i], "P(r0' | allowables)", i)?;
            check_open_unit(inputs.r0_given_na[i], "P(r0 | covariates)", i)?;
            let odds = (inputs.r1_given_m_a[i] / inputs.r0_given_m_na[i])
                / (inputs.r1_given_a[i] / inputs.r0_given_na[i]);
            let middle = match &inputs.target_ratio {
                None => 1.0,
                Some((marg, cond)) => {
                    check_open_unit(cond[i], "P(target | covariates)", i)?;
                    marg[i] / cond[i]
                }
            };
            Ok(odds * middle * group_std.values[i])
        })
        .collect::<Result<Vec<_>>>()?;
    WeightVector::new(values, WeightFormula::Iorw, group_std.standardization)
}

/// Weights on the cells of an exact cohort joint, with every conditional
/// computed by enumeration.
#[derive(Debug, Clone)]
pub struct ExactWeights {
    /// Cell assignments of the marginalized group with positive mass.
    pub r0_cells: Vec<Vec<usize>>,
    /// `P(cell | r0)` of each marginalized cell.
    pub r0_mass: Vec<f64>,
    pub w_r0: WeightVector,
    pub w_rmpw: WeightVector,
    pub w_iorw: WeightVector,
    pub r1_cells: Vec<Vec<usize>>,
    pub r1_mass: Vec<f64>,
    pub w_r0prime: WeightVector,
}

impl ExactWeights {
    pub fn new(t: &ExactTables, std: Standardization) -> Result<Self> {
        let (race, r0, r1) = (t.ix.race, t.ix.r0, t.ix.r0_prime);
        let p_r0 = t.p_race(r0);
        let p_r1 = t.p_race(r1);
        let has_n = !t.n.is_empty();
        let at = |c: &[usize], level: usize| {
            let mut c = c.to_vec();
            c[race] = level;
            c
        };
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::NAN };

        let mut r0_cells = Vec::new();
        let mut r1_cells = Vec::new();
        t.joint.for_each_cell(|c, p| {
            if p > 0.0 {
                if c[race] == r0 {
                    r0_cells.push(c.to_vec());
                } else if c[race] == r1 {
                    r1_cells.push(c.to_vec());
                }
            }
        });
        let r0_mass: Vec<f64> = r0_cells.iter().map(|c| t.joint.prob(c) / p_r0).collect();
        let r1_mass: Vec<f64> = r1_cells.iter().map(|c| t.joint.prob(c) / p_r1).collect();
        let p_r0_ay = |c: &[usize]| t.p_race_given_ay(c, r0).unwrap_or(f64::NAN);

        let w_r0 = group_standardization_weight(
            &r0_cells.iter().map(|c| p_r0_ay(c)).collect::<Vec<_>>(),
            p_r0,
            Group::Marginalized,
            std,
        )?;
        let w_r0prime = group_standardization_weight(
            &r1_cells.iter().map(|c| p_r0_ay(c)).collect::<Vec<_>>(),
            p_r0,
            Group::Privileged,
            std,
        )?;

        let mut p_priv = Vec::with_capacity(r0_cells.len());
        let mut p_marg = Vec::with_capacity(r0_cells.len());
        let mut io = IorwInputs::default();
        let (mut marg, mut cond) = (Vec::new(), Vec::new());
        for c in &r0_cells {
            let c1 = at(c, r1);
            p_priv.push(ratio(t.t_r_a_m.get(&c1), t.t_r_a.get(&c1)));
            p_marg.push(ratio(t.t_r_na_m.get(c), t.t_r_na.get(c)));
            io.r1_given_m_a.push(ratio(t.t_r_a_m.get(&c1), t.t_a_m.get(c)));
            io.r0_given_m_na.push(ratio(t.t_r_na_m.get(c), t.t_na_m.get(c)));
            io.r1_given_a.push(ratio(t.t_r_a.get(&c1), t.t_a.get(c)));
            io.r0_given_na.push(ratio(t.t_r_na.get(c), t.t_na.get(c)));
            if has_n {
                marg.push(ratio(t.t_a_m.get(c), t.t_a.get(c)));
                cond.push(ratio(t.t_na_m.get(c), t.t_na.get(c)));
            }
        }
        if has_n {
            io.target_ratio = Some((marg, cond));
        }
        let w_rmpw = rmpw_weight(&p_priv, &p_marg, &w_r0)?;
        let w_iorw = iorw_weight(&io, &w_r0)?;
        Ok(ExactWeights { r0_cells, r0_mass, w_r0, w_rmpw, w_iorw, r1_cells, r1_mass, w_r0prime })
    }

    /// Population weighted means `(mean_r0, mean_r0prime, mean_cf)` with the
    /// counterfactual weights of `formula` (RMPW or IORW).
    pub fn means(&self, t: &ExactTables, formula: WeightFormula) -> (f64, f64, f64) {
        let y = |c: &[usize]| t.y_values[c[t.ix.outcome]];
        let wmean = |cells: &[Vec<usize>], mass: &[f64], w: &[f64]| -> f64 {
            cells.iter().zip(mass).zip(w).map(|((c, p), w)| p * w * y(c)).sum()
        };
        let cf = match formula {
            WeightFormula::Iorw => &self.w_iorw,
            _ => &self.w_rmpw,
        };
        (
            wmean(&self.r0_cells, &self.r0_mass, &self.w_r0.values),
            wmean(&self.r1_cells, &self.r1_mass, &self.w_r0prime.values),
            wmean(&self.r0_cells, &self.r0_mass, &cf.values),
        )
    }

    /// `E[w | group]` for the weight vectors of the marginalized group.
    pub fn group_means(&self) -> (f64, f64, f64) {
        let e = |w: &WeightVector| self.r0_mass.iter().zip(&w.values).map(|(p, w)| p * w).sum();
        (e(&self.w_r0), e(&self.w_rmpw), e(&self.w_iorw))
    }
}
