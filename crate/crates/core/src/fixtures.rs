//! Small joints used by tests, sweeps and the reduction suite.

use rand::Rng;

use crate::dist::{FiniteJoint, VariableSpec};
use crate::partition::{AllowabilityPartition, RoleBindings};

pub const MARGINALIZED: &str = "r0";
pub const PRIVILEGED: &str = "r0p";

fn race_spec() -> VariableSpec {
    VariableSpec::new("R", &[MARGINALIZED, PRIVILEGED]).expect("valid race spec")
}

fn bernoulli(p1: f64, level: usize) -> f64 {
    if level == 1 {
        p1
    } else {
        1.0 - p1
    }
}

/// Binary race, one binary covariate and binary target and outcome:
/// `P(r0) = 0.5`, `A ⊥ R` with `P(A=1) = 0.5`, `P(M=1|r0,A) = 0.2 + 0.2A`,
/// `P(M=1|r0',A) = 0.6 + 0.2A` and `P(Y=1|R,M,A) = 0.1 + 0.2M + 0.3A + 0.1·1{R=r0}`.
pub fn worked_joint() -> FiniteJoint {
    let vars = vec![
        race_spec(),
        VariableSpec::binary("A"),
        VariableSpec::binary("M"),
        VariableSpec::binary("Y"),
    ];
    FiniteJoint::from_fn(vars, |c| {
        let (r0, a, m, y) = (c[0] == 0, c[1] as f64, c[2], c[3]);
        let pm1 = if r0 { 0.2 + 0.2 * a } else { 0.6 + 0.2 * a };
        let py1 = 0.1 + 0.2 * m as f64 + 0.3 * a + if r0 { 0.1 } else { 0.0 };
        0.5 * 0.5 * bernoulli(pm1, m) * bernoulli(py1, y)
    })
    .expect("worked joint has unit mass")
}

pub fn worked_roles() -> RoleBindings {
    RoleBindings::new("R", MARGINALIZED, PRIVILEGED, "M", "Y")
}

/// Worked joint, roles, and the partition with `A` outcome-allowable.
pub fn worked_setup() -> (FiniteJoint, RoleBindings, AllowabilityPartition) {
    (
        worked_joint(),
        worked_roles(),
        AllowabilityPartition::new(&["A"], &[], &[]),
    )
}

/// How a random joint is generated. Variables are drawn in the order
/// race, covariates `X1..Xk` (each may depend on race and earlier
/// covariates), target, outcome; every conditional law is random with all
/// probabilities bounded away from 0 and 1.
#[derive(Debug, Clone)]
pub struct RandomJointSpec {
    pub covariates: usize,
    pub target_levels: usize,
    /// `None` splits the covariates uniformly at random among the three sets.
    pub partition: Option<AllowabilityPartition>,
    /// Target depends on race and the target-allowable covariates only.
    pub target_ignores_non_allowable: bool,
    /// Target law identical across race.
    pub target_ignores_race: bool,
    /// Covariates independent of race.
    pub covariates_ignore_race: bool,
    /// Outcome independent of the target given everything else.
    pub outcome_ignores_target: bool,
}

impl Default for RandomJointSpec {
    fn default() -> Self {
        RandomJointSpec {
            covariates: 3,
            target_levels: 2,
            partition: None,
            target_ignores_non_allowable: false,
            target_ignores_race: false,
            covariates_ignore_race: false,
            outcome_ignores_target: false,
        }
    }
}

pub fn covariate_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("X{i}")).collect()
}

/// A random conditional law: one probability vector per parent configuration.
struct Cpt {
    parents: Vec<usize>,
    strides: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl Cpt {
    fn random<R: Rng>(rng: &mut R, parents: Vec<usize>, cards: &[usize], levels: usize) -> Cpt {
        let mut strides = vec![1usize; parents.len()];
        for k in (0..parents.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * cards[parents[k + 1]];
        }
        let n_rows: usize = parents.iter().map(|&p| cards[p]).product();
        let rows = (0..n_rows)
            .map(|_| {
                let raw: Vec<f64> = (0..levels).map(|_| rng.random_range(0.15..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Cpt { parents, strides, rows }
    }

    fn prob(&self, cell: &[usize], level: usize) -> f64 {
        let row: usize = self.parents.iter().zip(&self.strides).map(|(&p, s)| cell[p] * s).sum();
        self.rows[row][level]
    }
}

#[derive(Debug, Clone)]
pub struct RandomCase {
    pub joint: FiniteJoint,
    pub roles: RoleBindings,
    pub partition: AllowabilityPartition,
}

pub fn random_case<R: Rng>(rng: &mut R, spec: &RandomJointSpec) -> RandomCase {
    let names = covariate_names(spec.covariates);
    let partition = spec.partition.clone().unwrap_or_else(|| {
        let mut p = AllowabilityPartition::default();
        for n in &names {
            match rng.random_range(0..3) {
                0 => p.outcome_allowable.push(n.clone()),
                1 => p.target_allowable_extra.push(n.clone()),
                _ => p.non_allowable.push(n.clone()),
            }
        }
        p
    });

    let mut vars = vec![race_spec()];
    vars.extend(names.iter().map(|n| VariableSpec::binary(n)));
    vars.push(VariableSpec::indexed("M", spec.target_levels).expect("target levels ≥ 2"));
    vars.push(VariableSpec::binary("Y"));
    let cards: Vec<usize> = vars.iter().map(|v| v.cardinality()).collect();
    let k = spec.covariates;
    let (m, y) = (k + 1, k + 2);

    let race = Cpt::random(rng, vec![], &cards, 2);
    let covs: Vec<Cpt> = (1..=k)
        .map(|i| {
            let mut parents: Vec<usize> = if spec.covariates_ignore_race { vec![] } else { vec![0] };
            parents.extend(1..i);
            Cpt::random(rng, parents, &cards, 2)
        })
        .collect();
    let mut m_parents: Vec<usize> = if spec.target_ignores_race { vec![] } else { vec![0] };
    for (i, n) in names.iter().enumerate() {
        if !(spec.target_ignores_non_allowable && partition.non_allowable.contains(n)) {
            m_parents.push(i + 1);
        }
    }
    let target = Cpt::random(rng, m_parents, &cards, spec.target_levels);
    let mut y_parents: Vec<usize> = (0..=k).collect();
    if !spec.outcome_ignores_target {
        y_parents.push(m);
    }
    let outcome = Cpt::random(rng, y_parents, &cards, 2);

    let joint = FiniteJoint::from_fn_normalized(vars, |c| {
        let mut p = race.prob(c, c[0]);
        for (i, cpt) in covs.iter().enumerate() {
            p *= cpt.prob(c, c[i + 1]);
        }
        p * target.prob(c, c[m]) * outcome.prob(c, c[y])
    })
    .expect("random joint has positive mass");

    RandomCase {
        joint,
        roles: RoleBindings::new("R", MARGINALIZED, PRIVILEGED, "M", "Y"),
        partition,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_cases_are_valid_joints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 2..=4 {
            let spec = RandomJointSpec { covariates: k, target_levels: 3, ..Default::default() };
            let case = random_case(&mut rng, &spec);
            assert!((case.joint.total_mass() - 1.0).abs() < 1e-12);
            assert!(case.joint.probs().iter().all(|&p| p > 0.0));
            assert_eq!(case.partition.covariates().count(), k);
        }
    }
}
