//! Monte Carlo evaluation of the g-formula with fitted models.
//!
//! Covariates are drawn by resampling cohort rows of each group with
//! probability proportional to base weight × standardization factor; the
//! target is drawn from the fitted conditional law (the group's own, or the
//! privileged group's for the counterfactual), and the outcome contributes its
//! fitted conditional mean at the drawn target level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Backend, DecompositionEstimate, Factorization};
use crate::data::CohortTable;
use crate::error::{Error, Result};
use crate::nuisance::FittedModel;
use crate::partition::{AllowabilityPartition, RoleBindings, RoleIndex, Standardization};
use crate::weights::{standardization_factor, Group};

/// Draws per independently seeded chunk.
pub const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub factorization: Factorization,
}

/// Fitted models the simulation reads from.
#[derive(Debug, Clone)]
pub struct MonteCarloModels {
    /// `P(R | ay)`; `None` when there are no outcome-allowable covariates.
    pub race: Option<FittedModel>,
    /// `P(M | r0, n, am, ay)`, fitted among the marginalized group.
    pub target_r0: FittedModel,
    /// `P(M | r0', am, ay)`, the intervention law, fitted among the privileged group.
    pub target_r0prime: FittedModel,
    /// `P(M | r0', n, am, ay)`; read only by the factorization with non-allowables.
    pub target_r0prime_all: Option<FittedModel>,
    /// `E[Y | r0, m, n, am, ay]`.
    pub outcome_r0: FittedModel,
    /// `E[Y | r0', m, am, ay]` (or with `n`).
    pub outcome_r0prime: FittedModel,
}

/// Everything the sampler needs, per cohort row.
#[derive(Debug, Clone, Default)]
pub(crate) struct SimInputs {
    pub k: usize,
    /// Resampling weights of the group's rows.
    pub r0_weight: Vec<f64>,
    pub r1_weight: Vec<f64>,
    /// Target law per group row (`rows × k`).
    pub target_own_r0: Vec<f64>,
    pub target_cf_r0: Vec<f64>,
    pub target_r1: Vec<f64>,
    /// Outcome mean per group row and target level (`rows × k`).
    pub outcome_r0: Vec<f64>,
    pub outcome_r1: Vec<f64>,
}

fn cumulative(w: &[f64]) -> Result<Vec<f64>> {
    let mut acc = 0.0;
    let cum: Vec<f64> = w
        .iter()
        .map(|&x| {
            acc += x;
            acc
        })
        .collect();
    if !(acc > 0.0 && acc.is_finite()) {
        return Err(Error::EmptyCohort("no resampling mass in a group".into()));
    }
    Ok(cum)
}

fn pick(cum: &[f64], u: f64) -> usize {
    let target = u * cum[cum.len() - 1];
    cum.partition_point(|&c| c <= target).min(cum.len() - 1)
}

fn draw_level(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// One Monte Carlo mean: resample rows by `weight`, draw the target from
/// `target`, average `outcome` at the drawn level.
fn simulate_part(weight: &[f64], target: &[f64], outcome: &[f64], k: usize, draws: usize, seed: u64, part: u64) -> Result<f64> {
    let cum = cumulative(weight)?;
    let chunks = draws.div_ceil(CHUNK);
    let sums: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 * 3 + part);
            let len = CHUNK.min(draws - c * CHUNK);
            let mut s = 0.0;
            for _ in 0..len {
                let row = pick(&cum, rng.random::<f64>());
                let level = draw_level(&target[row * k..(row + 1) * k], rng.random::<f64>());
                s += outcome[row * k + level];
            }
            s
        })
        .collect();
    Ok(sums.iter().sum::<f64>() / draws as f64)
}

pub(crate) fn simulate(inputs: &SimInputs, draws: usize, seed: u64) -> Result<(f64, f64, f64)> {
    if draws < 1 {
        return Err(Error::InvalidArgument("Monte Carlo draws must be at least 1".into()));
    }
    let k = inputs.k;
    let m0 = simulate_part(&inputs.r0_weight, &inputs.target_own_r0, &inputs.outcome_r0, k, draws, seed, 0)?;
    let mcf = simulate_part(&inputs.r0_weight, &inputs.target_cf_r0, &inputs.outcome_r0, k, draws, seed, 1)?;
    let m1 = simulate_part(&inputs.r1_weight, &inputs.target_r1, &inputs.outcome_r1, k, draws, seed, 2)?;
    Ok((m0, m1, mcf))
}

fn rows_of(probs: &[f64], k: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| probs[r * k..(r + 1) * k].iter().copied()).collect()
}

pub fn decompose_montecarlo(
    models: &MonteCarloModels,
    data: &CohortTable,
    roles: &RoleBindings,
    partition: &AllowabilityPartition,
    std: Standardization,
    config: &MonteCarloConfig,
) -> Result<DecompositionEstimate> {
    if config.draws < 1 {
        return Err(Error::InvalidArgument("Monte Carlo draws must be at least 1".into()));
    }
    let (cohort, _) = data.select(roles)?;
    let mut roles = roles.clone();
    roles.selection = None;
    let names = cohort.names().to_vec();
    let ix = RoleIndex::resolve(&roles, partition, &names, |i| cohort.columns()[i].levels())?;
    if !ix.outcome_allowable.is_empty() && models.race.is_none() {
        return Err(Error::Unfitted("race model for the standardization weights".into()));
    }
    let (_, race_codes) = cohort.categorical(&roles.race.variable)?;
    let (m_levels, _) = cohort.categorical(&roles.target)?;
    let k = m_levels.len();
    let base = cohort.base_weights();
    let (r0, r1) = (ix.r0 as u32, ix.r0_prime as u32);
    let r0_rows: Vec<usize> = (0..cohort.n_rows()).filter(|&i| race_codes[i] == r0 && base[i] > 0.0).collect();
    let r1_rows: Vec<usize> = (0..cohort.n_rows()).filter(|&i| race_codes[i] == r1 && base[i] > 0.0).collect();
    let other = (0..cohort.n_rows()).any(|i| race_codes[i] != r0 && race_codes[i] != r1 && base[i] > 0.0);
    if r0_rows.is_empty() || r1_rows.is_empty() || other {
        return Err(Error::RaceNotBinary(roles.race.variable.clone()));
    }
    let mass = |rows: &[usize]| rows.iter().map(|&i| base[i]).sum::<f64>();
    let p_r0 = mass(&r0_rows) / (mass(&r0_rows) + mass(&r1_rows));

    let p_r0_ay: Vec<f64> = match &models.race {
        None => vec![p_r0; cohort.n_rows()],
        Some(m) => {
            let probs = m.predict_proba(&cohort)?;
            let kk = m.n_classes();
            let col = m
                .response_levels
                .iter()
                .position(|l| *l == roles.race.marginalized)
                .ok_or_else(|| Error::Schema("race model lacks the marginalized level".into()))?;
            (0..cohort.n_rows()).map(|i| probs[i * kk + col]).collect()
        }
    };
    let factor = |rows: &[usize], g: Group| -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| {
                let p = p_r0_ay[i];
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Positivity(format!("P(r0 | outcome-allowables) = {p} at row {}", i + 1)));
                }
                Ok(base[i] * standardization_factor(p, p_r0, g, std))
            })
            .collect()
    };

    let check_k = |m: &FittedModel| -> Result<()> {
        if m.n_classes() != k {
            return Err(Error::Schema(format!("target model for `{}` has {} classes, expected {k}", m.spec.response, m.n_classes())));
        }
        Ok(())
    };
    check_k(&models.target_r0)?;
    check_k(&models.target_r0prime)?;
    let t_r0 = models.target_r0.predict_proba(&cohort)?;
    let t_cf = models.target_r0prime.predict_proba(&cohort)?;
    let t_r1 = match config.factorization {
        Factorization::TargetAllowable => t_cf.clone(),
        Factorization::WithNonAllowable => {
            let m = models
                .target_r0prime_all
                .as_ref()
                .ok_or_else(|| Error::Unfitted("privileged target model with non-allowables".into()))?;
            check_k(m)?;
            m.predict_proba(&cohort)?
        }
    };
    let mut y_r0 = vec![0.0; cohort.n_rows() * k];
    let mut y_r1 = vec![0.0; cohort.n_rows() * k];
    for level in 0..k {
        let cf = cohort.with_constant_code(&roles.target, level as u32)?;
        for (i, v) in models.outcome_r0.predict_mean(&cf)?.into_iter().enumerate() {
            y_r0[i * k + level] = v;
        }
        for (i, v) in models.outcome_r0prime.predict_mean(&cf)?.into_iter().enumerate() {
            y_r1[i * k + level] = v;
        }
    }

    let inputs = SimInputs {
        k,
        r0_weight: factor(&r0_rows, Group::Marginalized)?,
        r1_weight: factor(&r1_rows, Group::Privileged)?,
        target_own_r0: rows_of(&t_r0, k, &r0_rows),
        target_cf_r0: rows_of(&t_cf, k, &r0_rows),
        target_r1: rows_of(&t_r1, k, &r1_rows),
        outcome_r0: rows_of(&y_r0, k, &r0_rows),
        outcome_r1: rows_of(&y_r1, k, &r1_rows),
    };
    for (name, v) in [
        ("target law", &inputs.target_own_r0),
        ("intervention law", &inputs.target_cf_r0),
        ("privileged target law", &inputs.target_r1),
        ("outcome mean", &inputs.outcome_r0),
        ("privileged outcome mean", &inputs.outcome_r1),
    ] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Positivity(format!("{name} undefined for some rows (empty model cell)")));
        }
    }
    let (m0, m1, mcf) = simulate(&inputs, config.draws, config.seed)?;
    Ok(DecompositionEstimate::from_means(m0, m1, mcf, std, Backend::MonteCarloG))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pick_respects_weights() {
        let cum = cumulative(&[0.0, 1.0, 0.0, 3.0]).unwrap();
        assert_eq!(pick(&cum, 0.0), 1);
        assert_eq!(pick(&cum, 0.2), 1);
        assert_eq!(pick(&cum, 0.3), 3);
        assert_eq!(pick(&cum, 0.999), 3);
    }

    #[test]
    fn draw_level_uses_cumulative_law() {
        assert_eq!(draw_level(&[0.25, 0.75], 0.2), 0);
        assert_eq!(draw_level(&[0.25, 0.75], 0.3), 1);
    }
}
