//! Synthetic hypertension cohorts from a structural causal model, with exact
//! discretized joints and direct simulation of the stochastic intervention
//! as ground truth.
//!
//! Structure: race → age; race, age, sex → education → insurance → diabetes;
//! all of these and a latent `U0` → baseline pressure `L1`; `Y1 = 1{L1 ≥ 140}`;
//! covariates and `L1` → intensification `M1`; everything plus `U0` →
//! follow-up pressure `L2`; `Y2 = 1{L2 ≥ 140}`. `U0` never enters `M1`.

use std::collections::HashMap;
use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::data::{CohortTable, Column};
use crate::dist::{FiniteJoint, VariableSpec};
use crate::error::{Error, Result};
use crate::gformula::{decompose_exact, Backend, DecompositionEstimate};
use crate::partition::{AllowabilityPartition, RoleBindings, Standardization};
use crate::quadrature::{gauss_hermite_normal, gauss_legendre};
use crate::weights::{standardization_factor, Group};

pub const MARGINALIZED: &str = "black";
pub const PRIVILEGED: &str = "white";
pub const AGE_LEVELS: [&str; 3] = ["young", "middle", "old"];
pub const SEX_LEVELS: [&str; 2] = ["male", "female"];
/// Covariate columns in generation order.
pub const COVARIATES: [&str; 6] = ["age", "sex", "edu", "ins", "dia", "l1"];

/// Units drawn per independently seeded chunk.
const CHUNK: usize = 8192;
/// Pressure around which `L1` enters later equations, per 10 mmHg.
const L1_CENTER: f64 = 150.0;

/// Linear predictor of one structural equation. `race` multiplies the
/// marginalized-group indicator, `age` the age index (0, 1, 2), `sex` the
/// female indicator, `l1` the baseline pressure in 10 mmHg above 150 and
/// `latent` the standard-normal `U0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Equation {
    pub intercept: f64,
    pub race: f64,
    pub age: f64,
    pub sex: f64,
    pub edu: f64,
    pub ins: f64,
    pub dia: f64,
    pub l1: f64,
    pub m1: f64,
    pub latent: f64,
}

impl Equation {
    fn eval(&self, x: &Covariates, l1: f64, m1: bool, u: f64) -> f64 {
        self.intercept
            + self.race * f(x.marginalized)
            + self.age * x.age as f64
            + self.sex * f(x.female)
            + self.edu * f(x.edu)
            + self.ins * f(x.ins)
            + self.dia * f(x.dia)
            + self.l1 * (l1 - L1_CENTER) / 10.0
            + self.m1 * f(m1)
            + self.latent * u
    }

    /// Names of nonzero coefficients outside `allowed`.
    fn stray(&self, allowed: &[&str]) -> Vec<&'static str> {
        let all = [
            ("race", self.race),
            ("age", self.age),
            ("sex", self.sex),
            ("edu", self.edu),
            ("ins", self.ins),
            ("dia", self.dia),
            ("l1", self.l1),
            ("m1", self.m1),
            ("latent", self.latent),
        ];
        all.into_iter().filter(|(n, v)| *v != 0.0 && !allowed.contains(n)).map(|(n, _)| n).collect()
    }
}

fn f(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF.
fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal upper tail.
fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    /// Share of the marginalized group in the source population.
    pub race_prevalence: f64,
    /// Age distribution (young, middle, old) within each group.
    pub age_marginalized: [f64; 3],
    pub age_privileged: [f64; 3],
    pub sex_female: f64,
    /// Logit of college education.
    pub edu: Equation,
    /// Logit of private insurance.
    pub ins: Equation,
    /// Logit of diabetes.
    pub dia: Equation,
    /// Mean of baseline systolic pressure; `latent` is the loading on `U0`.
    pub l1: Equation,
    pub l1_noise_sd: f64,
    /// Logit of treatment intensification.
    pub m1: Equation,
    /// Mean of follow-up systolic pressure.
    pub l2: Equation,
    pub l2_noise_sd: f64,
    pub threshold: f64,
    /// Keep only units hypertensive at baseline.
    pub select_hypertensive: bool,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig::reference()
    }
}

impl ScmConfig {
    /// The configuration used for golden values and sampling checks.
    pub fn reference() -> Self {
        ScmConfig {
            race_prevalence: 0.35,
            age_marginalized: [0.40, 0.40, 0.20],
            age_privileged: [0.25, 0.40, 0.35],
            sex_female: 0.52,
            edu: Equation { intercept: 0.3, race: -0.7, age: -0.3, sex: 0.1, ..Default::default() },
            ins: Equation { intercept: 0.2, race: -0.5, age: -0.2, sex: 0.1, edu: 1.0, ..Default::default() },
            dia: Equation {
                intercept: -2.2,
                race: 0.5,
                age: 0.6,
                sex: -0.1,
                edu: -0.3,
                ins: -0.2,
                ..Default::default()
            },
            l1: Equation {
                intercept: 132.0,
                race: 6.0,
                age: 5.0,
                sex: -2.0,
                edu: -3.0,
                ins: -3.0,
                dia: 5.0,
                latent: 8.0,
                ..Default::default()
            },
            l1_noise_sd: 10.0,
            m1: Equation {
                intercept: -0.2,
                race: -0.6,
                age: 0.1,
                edu: 0.2,
                ins: 0.3,
                dia: 0.4,
                l1: 0.5,
                ..Default::default()
            },
            l2: Equation {
                intercept: 140.0,
                race: 3.0,
                age: 2.0,
                sex: -1.0,
                edu: -2.0,
                ins: -2.0,
                dia: 3.0,
                l1: 5.0,
                m1: -12.0,
                latent: 8.0,
            },
            l2_noise_sd: 10.0,
            threshold: 140.0,
            select_hypertensive: true,
            seed: 1,
        }
    }

    /// Reference configuration with the latent factor also raising diabetes risk.
    pub fn latent_covariate_variant() -> Self {
        let mut c = ScmConfig::reference();
        c.dia.latent = 0.4;
        c
    }

    /// Every race effect removed, including the race–age association.
    pub fn without_race_effects(mut self) -> Self {
        for eq in [&mut self.edu, &mut self.ins, &mut self.dia, &mut self.l1, &mut self.m1, &mut self.l2] {
            eq.race = 0.0;
        }
        self.age_marginalized = self.age_privileged;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let prob = |name: &str, p: f64, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name} = {p} is not a probability"));
            }
        };
        prob("race_prevalence", self.race_prevalence, &mut problems);
        prob("sex_female", self.sex_female, &mut problems);
        for (name, dist) in [("age_marginalized", self.age_marginalized), ("age_privileged", self.age_privileged)] {
            for p in dist {
                prob(name, p, &mut problems);
            }
            if (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                problems.push(format!("{name} does not sum to 1"));
            }
        }
        for (name, sd) in [("l1_noise_sd", self.l1_noise_sd), ("l2_noise_sd", self.l2_noise_sd)] {
            if !(sd > 0.0 && sd.is_finite()) {
                problems.push(format!("{name} must be positive"));
            }
        }
        let base = ["race", "age", "sex"];
        let parents: [(&str, &Equation, Vec<&str>); 6] = [
            ("edu", &self.edu, [&base[..], &["latent"]].concat()),
            ("ins", &self.ins, [&base[..], &["edu", "latent"]].concat()),
            ("dia", &self.dia, [&base[..], &["edu", "ins", "latent"]].concat()),
            ("l1", &self.l1, [&base[..], &["edu", "ins", "dia", "latent"]].concat()),
            ("m1", &self.m1, [&base[..], &["edu", "ins", "dia", "l1"]].concat()),
            ("l2", &self.l2, [&base[..], &["edu", "ins", "dia", "l1", "m1", "latent"]].concat()),
        ];
        for (name, eq, allowed) in parents {
            for s in eq.stray(&allowed) {
                problems.push(format!("equation for {name} has a coefficient on non-parent {s}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    fn age_probs(&self, marginalized: bool) -> &[f64; 3] {
        if marginalized {
            &self.age_marginalized
        } else {
            &self.age_privileged
        }
    }

    /// Whether `U0` reaches any discrete covariate; if not, it can be
    /// integrated out of `L1` analytically.
    fn latent_in_covariates(&self) -> bool {
        self.edu.latent != 0.0 || self.ins.latent != 0.0 || self.dia.latent != 0.0
    }
}

/// Role bindings of generated cohorts: black vs. white, intensification as
/// target, follow-up control as outcome, selection on baseline hypertension.
pub fn reference_roles() -> RoleBindings {
    RoleBindings::new("race", MARGINALIZED, PRIVILEGED, "m1", "y2").with_selection("y1", "1")
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Covariates {
    marginalized: bool,
    age: usize,
    female: bool,
    edu: bool,
    ins: bool,
    dia: bool,
}

/// One simulated unit with the exogenous noise its downstream equations use.
#[derive(Debug, Clone, Copy)]
struct Unit {
    x: Covariates,
    u: f64,
    l1: f64,
    m1: bool,
    /// Uniform draw deciding `M1`.
    u_m1: f64,
    /// Standard-normal noise of `L2`.
    z_l2: f64,
}

impl Unit {
    fn l2(&self, cfg: &ScmConfig, m1: bool) -> f64 {
        cfg.l2.eval(&self.x, self.l1, m1, self.u) + cfg.l2_noise_sd * self.z_l2
    }
}

/// Draw one unit. Every unit consumes the same ten random numbers in the
/// same order, so changing a downstream equation never changes upstream values.
fn draw_unit(cfg: &ScmConfig, rng: &mut ChaCha8Rng) -> Unit {
    let u_race: f64 = rng.random();
    let u_age: f64 = rng.random();
    let u_sex: f64 = rng.random();
    let u_edu: f64 = rng.random();
    let u_ins: f64 = rng.random();
    let u_dia: f64 = rng.random();
    let u: f64 = rng.sample(StandardNormal);
    let z_l1: f64 = rng.sample(StandardNormal);
    let u_m1: f64 = rng.random();
    let z_l2: f64 = rng.sample(StandardNormal);

    let marginalized = u_race < cfg.race_prevalence;
    let ap = cfg.age_probs(marginalized);
    let age = if u_age < ap[0] {
        0
    } else if u_age < ap[0] + ap[1] {
        1
    } else {
        2
    };
    let mut x = Covariates { marginalized, age, female: u_sex < cfg.sex_female, ..Default::default() };
    x.edu = u_edu < expit(cfg.edu.eval(&x, L1_CENTER, false, u));
    x.ins = u_ins < expit(cfg.ins.eval(&x, L1_CENTER, false, u));
    x.dia = u_dia < expit(cfg.dia.eval(&x, L1_CENTER, false, u));
    let l1 = cfg.l1.eval(&x, L1_CENTER, false, u) + cfg.l1_noise_sd * z_l1;
    let m1 = u_m1 < expit(cfg.m1.eval(&x, l1, false, u));
    Unit { x, u, l1, m1, u_m1, z_l2 }
}

fn chunk_units(cfg: &ScmConfig, chunk: u64) -> Vec<Unit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk);
    (0..CHUNK)
        .map(|_| draw_unit(cfg, &mut rng))
        .filter(|u| !cfg.select_hypertensive || u.l1 >= cfg.threshold)
        .collect()
}

/// First `n` cohort units, drawn chunk by chunk in chunk order.
fn simulate_units(cfg: &ScmConfig, n: usize) -> Result<Vec<Unit>> {
    if n < 1 {
        return Err(Error::InvalidArgument("cohort size must be at least 1".into()));
    }
    cfg.validate()?;
    if cfg.select_hypertensive {
        let p = selection_probability(cfg);
        if p < 1e-4 {
            return Err(Error::InfeasibleCohort(p));
        }
    }
    let mut units = Vec::with_capacity(n);
    let mut next = 0u64;
    while units.len() < n {
        let batch = rayon::current_num_threads().max(1) as u64 * 2;
        let parts: Vec<Vec<Unit>> = (next..next + batch).into_par_iter().map(|c| chunk_units(cfg, c)).collect();
        next += batch;
        for p in parts {
            units.extend(p);
        }
    }
    units.truncate(n);
    Ok(units)
}

fn categorical(levels: &[&str], codes: Vec<u32>) -> Column {
    Column::Categorical { levels: levels.iter().map(|s| s.to_string()).collect(), codes }
}

/// Draw a cohort of `n` rows (after selection, if enabled).
///
/// Columns: race, age, sex, edu, ins, dia (categorical), l1 (numeric),
/// y1, m1 (categorical), l2 (numeric), y2 (categorical).
pub fn generate(cfg: &ScmConfig, n: usize) -> Result<CohortTable> {
    let units = simulate_units(cfg, n)?;
    let thr = cfg.threshold;
    let code = |b: bool| b as u32;
    let l2: Vec<f64> = units.iter().map(|u| u.l2(cfg, u.m1)).collect();
    let columns = vec![
        categorical(&[MARGINALIZED, PRIVILEGED], units.iter().map(|u| (!u.x.marginalized) as u32).collect()),
        categorical(&AGE_LEVELS, units.iter().map(|u| u.x.age as u32).collect()),
        categorical(&SEX_LEVELS, units.iter().map(|u| code(u.x.female)).collect()),
        categorical(&["0", "1"], units.iter().map(|u| code(u.x.edu)).collect()),
        categorical(&["0", "1"], units.iter().map(|u| code(u.x.ins)).collect()),
        categorical(&["0", "1"], units.iter().map(|u| code(u.x.dia)).collect()),
        Column::Numeric(units.iter().map(|u| u.l1).collect()),
        categorical(&["0", "1"], units.iter().map(|u| code(u.l1 >= thr)).collect()),
        categorical(&["0", "1"], units.iter().map(|u| code(u.m1)).collect()),
        Column::Numeric(l2.clone()),
        categorical(&["0", "1"], l2.iter().map(|&v| code(v >= thr)).collect()),
    ];
    let names = ["race", "age", "sex", "edu", "ins", "dia", "l1", "y1", "m1", "l2", "y2"];
    CohortTable::new(names.iter().map(|s| s.to_string()).collect(), columns, None)
}

/// Replace the numeric `l1` column by its bin index (labels "0", "1", …),
/// matching the `l1` variable of [`discretize_to_joint`] with the same edges.
pub fn bin_l1(table: &CohortTable, edges: &[f64]) -> Result<CohortTable> {
    let i = table.index_of("l1")?;
    let values = table.numeric("l1")?;
    let k = edges.len() + 1;
    let levels: Vec<String> = (0..k).map(|b| b.to_string()).collect();
    let codes = values.iter().map(|&v| edges.partition_point(|&e| e <= v) as u32).collect();
    let mut columns = table.columns().to_vec();
    columns[i] = Column::Categorical { levels, codes };
    CohortTable::new(table.names().to_vec(), columns, table.weights().map(|w| w.to_vec()))
}

/// All discrete covariate configurations with their probabilities given `u`.
fn for_each_covariates(cfg: &ScmConfig, u: f64, mut visit: impl FnMut(Covariates, f64)) {
    for marginalized in [true, false] {
        let pr = if marginalized { cfg.race_prevalence } else { 1.0 - cfg.race_prevalence };
        for age in 0..3 {
            let pa = cfg.age_probs(marginalized)[age];
            for female in [false, true] {
                let ps = if female { cfg.sex_female } else { 1.0 - cfg.sex_female };
                let mut x = Covariates { marginalized, age, female, ..Default::default() };
                let base = pr * pa * ps;
                if base == 0.0 {
                    continue;
                }
                for edu in [false, true] {
                    x.edu = edu;
                    x.ins = false;
                    x.dia = false;
                    let pe = bern(expit(cfg.edu.eval(&x, L1_CENTER, false, u)), edu);
                    for ins in [false, true] {
                        x.ins = ins;
                        x.dia = false;
                        let pi = bern(expit(cfg.ins.eval(&x, L1_CENTER, false, u)), ins);
                        for dia in [false, true] {
                            x.dia = dia;
                            let pd = bern(expit(cfg.dia.eval(&x, L1_CENTER, false, u)), dia);
                            visit(x, base * pe * pi * pd);
                        }
                    }
                }
            }
        }
    }
}

fn bern(p1: f64, value: bool) -> f64 {
    if value {
        p1
    } else {
        1.0 - p1
    }
}

/// Latent nodes: either Gauss–Hermite nodes for `U0`, or a single node with
/// `U0` folded into the `L1` noise when nothing discrete depends on it.
struct Latent {
    nodes: Vec<(f64, f64)>,
    l1_sd: f64,
}

impl Latent {
    fn new(cfg: &ScmConfig, always_nodes: bool, n: usize) -> Latent {
        if always_nodes || cfg.latent_in_covariates() {
            Latent { nodes: gauss_hermite_normal(n), l1_sd: cfg.l1_noise_sd }
        } else {
            Latent { nodes: vec![(0.0, 1.0)], l1_sd: cfg.l1_noise_sd.hypot(cfg.l1.latent) }
        }
    }
}

/// `P(L1 ≥ threshold)` in the source population.
pub fn selection_probability(cfg: &ScmConfig) -> f64 {
    let lat = Latent::new(cfg, false, 40);
    let mut total = 0.0;
    for &(u, wu) in &lat.nodes {
        for_each_covariates(cfg, u, |x, p| {
            let c = cfg.l1.eval(&x, L1_CENTER, false, u);
            total += wu * p * norm_sf((cfg.threshold - c) / lat.l1_sd);
        });
    }
    total
}

/// `∫_a^b φ((l − c)/σ)/σ · g(l) dl`, integrating in probability space so
/// that constant `g` is exact. Pieces above the centre use upper-tail
/// coordinates to keep precision far out.
fn normal_piece(a: f64, b: f64, c: f64, sd: f64, rule: &[(f64, f64)], panels: usize, g: &mut impl FnMut(f64, f64)) {
    if a >= b {
        return;
    }
    if a < c && c < b {
        normal_piece(a, c, c, sd, rule, panels, g);
        normal_piece(c, b, c, sd, rule, panels, g);
        return;
    }
    let upper = a >= c;
    // Tail probability coordinates: s(l) = P(Z > z) above, P(Z < z) below.
    let (s_lo, s_hi) = if upper {
        (norm_sf((b - c) / sd), norm_sf((a - c) / sd))
    } else {
        (norm_cdf((a - c) / sd), norm_cdf((b - c) / sd))
    };
    let width = s_hi - s_lo;
    if width <= 0.0 {
        return;
    }
    let h = width / panels as f64;
    for k in 0..panels {
        let lo = s_lo + k as f64 * h;
        for &(x, w) in rule {
            let s = lo + 0.5 * h * (x + 1.0);
            let z = SQRT_2 * erfc_inv(2.0 * s);
            let l = if upper { c + sd * z } else { c - sd * z };
            g(l, 0.5 * h * w);
        }
    }
}

/// Exact joint over race, age, sex, edu, ins, dia, the `l1` bin, y1, m1 and
/// y2 of the source population. `edges` are the interior bin edges of `L1`;
/// with selection on, the threshold must be one of them so that no bin
/// straddles it.
pub fn discretize_to_joint(cfg: &ScmConfig, edges: &[f64]) -> Result<FiniteJoint> {
    cfg.validate()?;
    if edges.is_empty() {
        return Err(Error::InvalidArgument("need at least one L1 bin edge".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidArgument("L1 bin edges must be finite and strictly increasing".into()));
    }
    if cfg.select_hypertensive && !edges.contains(&cfg.threshold) {
        return Err(Error::InvalidArgument(format!(
            "L1 bin edges must include the selection threshold {}",
            cfg.threshold
        )));
    }
    let k = edges.len() + 1;
    let bounds: Vec<(f64, f64)> = (0..k)
        .map(|b| {
            let lo = if b == 0 { f64::NEG_INFINITY } else { edges[b - 1] };
            let hi = if b == k - 1 { f64::INFINITY } else { edges[b] };
            (lo, hi)
        })
        .collect();
    let vars = vec![
        VariableSpec::new("race", &[MARGINALIZED, PRIVILEGED])?,
        VariableSpec::new("age", &AGE_LEVELS)?,
        VariableSpec::new("sex", &SEX_LEVELS)?,
        VariableSpec::binary("edu"),
        VariableSpec::binary("ins"),
        VariableSpec::binary("dia"),
        VariableSpec::indexed("l1", k)?,
        VariableSpec::binary("y1"),
        VariableSpec::binary("m1"),
        VariableSpec::binary("y2"),
    ];
    let cards: Vec<usize> = vars.iter().map(|v| v.cardinality()).collect();
    let mut strides = vec![1usize; cards.len()];
    for i in (0..cards.len() - 1).rev() {
        strides[i] = strides[i + 1] * cards[i + 1];
    }
    let rule = gauss_legendre(16);
    let latent = gauss_hermite_normal(40);
    let thr = cfg.threshold;
    let (sd1, sd2) = (cfg.l1_noise_sd, cfg.l2_noise_sd);

    // One task per latent node; summed in node order.
    let parts: Vec<Vec<f64>> = latent
        .par_iter()
        .map(|&(u, wu)| {
            let mut probs = vec![0.0; cards.iter().product()];
            for_each_covariates(cfg, u, |x, px| {
                let centre = cfg.l1.eval(&x, L1_CENTER, false, u);
                let head = [
                    (!x.marginalized) as usize,
                    x.age,
                    x.female as usize,
                    x.edu as usize,
                    x.ins as usize,
                    x.dia as usize,
                ];
                let offset: usize = head.iter().zip(&strides).map(|(a, s)| a * s).sum();
                for (b, &(lo, hi)) in bounds.iter().enumerate() {
                    for (y1, (a, z)) in [(0usize, (lo, hi.min(thr))), (1usize, (lo.max(thr), hi))] {
                        let mut acc = [[0.0f64; 2]; 2];
                        normal_piece(a, z, centre, sd1, &rule, 4, &mut |l, w| {
                            let pm = expit(cfg.m1.eval(&x, l, false, u));
                            for m in [false, true] {
                                let mu2 = cfg.l2.eval(&x, l, m, u);
                                let py = norm_sf((thr - mu2) / sd2);
                                let wm = w * bern(pm, m);
                                acc[m as usize][1] += wm * py;
                                acc[m as usize][0] += wm * (1.0 - py);
                            }
                        });
                        let o = offset + b * strides[6] + y1 * strides[7];
                        for m in 0..2 {
                            for y in 0..2 {
                                probs[o + m * strides[8] + y] += wu * px * acc[m][y];
                            }
                        }
                    }
                }
            });
            probs
        })
        .collect();
    let mut probs = vec![0.0; cards.iter().product()];
    for p in parts {
        for (t, v) in probs.iter_mut().zip(p) {
            *t += v;
        }
    }
    let mass: f64 = probs.iter().sum();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("discretized mass {mass} differs from 1")));
    }
    FiniteJoint::from_weights(vars, probs)
}

/// Cumulative distribution of `L1` in the cohort (selected units if
/// selection is on).
fn cohort_l1_cdf(cfg: &ScmConfig, l: f64) -> f64 {
    let lat = Latent::new(cfg, false, 40);
    let thr = cfg.threshold;
    let (mut below, mut total) = (0.0, 0.0);
    for &(u, wu) in &lat.nodes {
        for_each_covariates(cfg, u, |x, p| {
            let c = cfg.l1.eval(&x, L1_CENTER, false, u);
            let sd = lat.l1_sd;
            if cfg.select_hypertensive {
                total += wu * p * norm_sf((thr - c) / sd);
                if l > thr {
                    below += wu * p * (norm_cdf((l - c) / sd) - norm_cdf((thr - c) / sd));
                }
            } else {
                total += wu * p;
                below += wu * p * norm_cdf((l - c) / sd);
            }
        });
    }
    below / total
}

/// Interior edges of `bins` equal-probability `L1` bins within the cohort.
/// With selection on, the threshold is the first edge and everything below
/// it is one extra (empty-in-cohort) bin.
pub fn equal_probability_edges(cfg: &ScmConfig, bins: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if bins < 1 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut edges = Vec::new();
    if cfg.select_hypertensive {
        edges.push(cfg.threshold);
    }
    let spread = 20.0 * cfg.l1_noise_sd.hypot(cfg.l1.latent);
    for q in 1..bins {
        let target = q as f64 / bins as f64;
        let (mut lo, mut hi) = (cfg.threshold - spread, cfg.threshold + spread);
        if cfg.select_hypertensive {
            lo = cfg.threshold;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cohort_l1_cdf(cfg, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
        edges.push(0.5 * (lo + hi));
    }
    Ok(edges)
}

/// Decomposition of the continuous-`L1` model approximated on `bins`
/// equal-probability cohort bins of `L1` (exact apart from that binning).
pub fn binned_truth(
    cfg: &ScmConfig,
    partition: &AllowabilityPartition,
    std: Standardization,
    bins: usize,
) -> Result<DecompositionEstimate> {
    let edges = equal_probability_edges(cfg, bins)?;
    let joint = discretize_to_joint(cfg, &edges)?;
    decompose_exact(&joint, &reference_roles(), partition, std)
}

/// Partially known covariate values; unknown ones are integrated out.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Known {
    age: Option<usize>,
    female: Option<bool>,
    edu: Option<bool>,
    ins: Option<bool>,
    dia: Option<bool>,
    l1: Option<f64>,
}

impl Known {
    fn from_unit(unit: &Unit, names: &[String]) -> Known {
        let mut k = Known::default();
        for n in names {
            match n.as_str() {
                "age" => k.age = Some(unit.x.age),
                "sex" => k.female = Some(unit.x.female),
                "edu" => k.edu = Some(unit.x.edu),
                "ins" => k.ins = Some(unit.x.ins),
                "dia" => k.dia = Some(unit.x.dia),
                "l1" => k.l1 = Some(unit.l1),
                _ => {}
            }
        }
        k
    }

    fn matches(&self, x: &Covariates) -> bool {
        self.age.is_none_or(|a| a == x.age)
            && self.female.is_none_or(|v| v == x.female)
            && self.edu.is_none_or(|v| v == x.edu)
            && self.ins.is_none_or(|v| v == x.ins)
            && self.dia.is_none_or(|v| v == x.dia)
    }

    /// Cache key for the discrete part; `None` if `l1` is known.
    fn key(&self) -> Option<[i8; 5]> {
        if self.l1.is_some() {
            return None;
        }
        let b = |v: Option<bool>| v.map_or(-1, |x| x as i8);
        Some([self.age.map_or(-1, |a| a as i8), b(self.female), b(self.edu), b(self.ins), b(self.dia)])
    }
}

/// Exact cohort-level laws of the SCM, for ground truth.
struct Oracle<'a> {
    cfg: &'a ScmConfig,
    latent: Latent,
    rule: Vec<(f64, f64)>,
}

impl<'a> Oracle<'a> {
    fn new(cfg: &'a ScmConfig) -> Self {
        Oracle { cfg, latent: Latent::new(cfg, false, 32), rule: gauss_legendre(16) }
    }

    /// Probability (density in `l1` when known) of race, the known values,
    /// cohort membership and, if given, `M1 = m`.
    fn mass(&self, marginalized: bool, known: &Known, m: Option<bool>) -> f64 {
        let cfg = self.cfg;
        let thr = cfg.threshold;
        let sd = self.latent.l1_sd;
        let lower = if cfg.select_hypertensive { thr } else { f64::NEG_INFINITY };
        if let Some(v) = known.l1 {
            if v < lower {
                return 0.0;
            }
        }
        let mut total = 0.0;
        for &(u, wu) in &self.latent.nodes {
            for_each_covariates(cfg, u, |x, p| {
                if x.marginalized != marginalized || !known.matches(&x) {
                    return;
                }
                let c = cfg.l1.eval(&x, L1_CENTER, false, u);
                let part = match (known.l1, m) {
                    (Some(v), None) => norm_pdf((v - c) / sd) / sd,
                    (Some(v), Some(m)) => norm_pdf((v - c) / sd) / sd * bern(expit(cfg.m1.eval(&x, v, false, u)), m),
                    (None, None) => norm_sf((lower - c) / sd),
                    (None, Some(m)) => {
                        let mut acc = 0.0;
                        normal_piece(lower, f64::INFINITY, c, sd, &self.rule, 4, &mut |l, w| {
                            acc += w * bern(expit(cfg.m1.eval(&x, l, false, u)), m);
                        });
                        acc
                    }
                };
                total += wu * p * part;
            });
        }
        total
    }

    fn p_marginalized(&self, known: &Known) -> f64 {
        let a = self.mass(true, known, None);
        let b = self.mass(false, known, None);
        a / (a + b)
    }

    fn p_target(&self, marginalized: bool, known: &Known) -> f64 {
        self.mass(marginalized, known, Some(true)) / self.mass(marginalized, known, None)
    }
}

/// Ground truth from direct simulation of the intervention, with Monte
/// Carlo standard errors of the three contrasts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrueDecomposition {
    pub estimate: DecompositionEstimate,
    pub se_observed: f64,
    pub se_reduction: f64,
    pub se_residual: f64,
    pub draws: usize,
}

/// Simulate `draws` cohort units; give each marginalized unit a target drawn
/// from the exact law among the privileged group sharing its
/// target-allowable covariates (reusing its own uniform draw), regenerate its
/// outcome with its own noise, and standardize all three means with exact
/// probabilities of race given the outcome-allowable covariates.
pub fn true_counterfactual(
    cfg: &ScmConfig,
    partition: &AllowabilityPartition,
    std: Standardization,
    draws: usize,
    seed: u64,
) -> Result<TrueDecomposition> {
    for v in partition.covariates() {
        if !COVARIATES.contains(&v.as_str()) {
            return Err(Error::Validation(vec![format!("`{v}` is not a covariate of the structural model")]));
        }
    }
    let sim_cfg = cfg.clone().with_seed(seed);
    let units = simulate_units(&sim_cfg, draws)?;
    let oracle = Oracle::new(cfg);
    let ay = partition.outcome_allowable.clone();
    let a = partition.target_allowable();
    let p_r0 = oracle.p_marginalized(&Known::default());

    let mut cache_ay: HashMap<[i8; 5], f64> = HashMap::new();
    let mut cache_a: HashMap<[i8; 5], f64> = HashMap::new();
    for unit in &units {
        let k = Known::from_unit(unit, &ay);
        if let Some(key) = k.key() {
            cache_ay.entry(key).or_insert_with(|| oracle.p_marginalized(&k));
        }
        if unit.x.marginalized {
            let k = Known::from_unit(unit, &a);
            if let Some(key) = k.key() {
                cache_a.entry(key).or_insert_with(|| oracle.p_target(false, &k));
            }
        }
    }
    let thr = cfg.threshold;
    // (group, weight, y, y under intervention)
    let rows: Vec<(bool, f64, f64, f64)> = units
        .par_iter()
        .map(|unit| {
            let k = Known::from_unit(unit, &ay);
            let p_ay = match k.key() {
                Some(key) => cache_ay[&key],
                None => oracle.p_marginalized(&k),
            };
            let group = if unit.x.marginalized { Group::Marginalized } else { Group::Privileged };
            let w = standardization_factor(p_ay, p_r0, group, std);
            let y = f(unit.l2(cfg, unit.m1) >= thr);
            let y_cf = if unit.x.marginalized {
                let ka = Known::from_unit(unit, &a);
                let p = match ka.key() {
                    Some(key) => cache_a[&key],
                    None => oracle.p_target(false, &ka),
                };
                f(unit.l2(cfg, unit.u_m1 < p) >= thr)
            } else {
                y
            };
            (unit.x.marginalized, w, y, y_cf)
        })
        .collect();

    let stats = |marg: bool| {
        let g: Vec<&(bool, f64, f64, f64)> = rows.iter().filter(|r| r.0 == marg).collect();
        let sw: f64 = g.iter().map(|r| r.1).sum();
        let m = g.iter().map(|r| r.1 * r.2).sum::<f64>() / sw;
        let mcf = g.iter().map(|r| r.1 * r.3).sum::<f64>() / sw;
        let var = |h: &dyn Fn(&(bool, f64, f64, f64)) -> f64| g.iter().map(|r| (r.1 * h(r)).powi(2)).sum::<f64>() / (sw * sw);
        let se = var(&|r| r.2 - m).sqrt();
        let se_cf = var(&|r| r.3 - mcf).sqrt();
        let se_diff = var(&|r| (r.2 - m) - (r.3 - mcf)).sqrt();
        (m, mcf, se, se_cf, se_diff)
    };
    let (m0, mcf, se0, se_cf, se_red) = stats(true);
    let (m1, _, se1, _, _) = stats(false);
    Ok(TrueDecomposition {
        estimate: DecompositionEstimate::from_means(m0, m1, mcf, std, Backend::MonteCarloG),
        se_observed: se0.hypot(se1),
        se_reduction: se_red,
        se_residual: se_cf.hypot(se1),
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{hypertension_schema, preset, Preset};

    #[test]
    fn reference_config_is_valid() {
        ScmConfig::reference().validate().unwrap();
        ScmConfig::latent_covariate_variant().validate().unwrap();
        let mut bad = ScmConfig::reference();
        bad.m1.latent = 0.5;
        assert!(bad.validate().is_err());
        bad = ScmConfig::reference();
        bad.edu.dia = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seed_determinism_and_selection() {
        let cfg = ScmConfig::reference();
        let a = generate(&cfg, 3000).unwrap();
        let b = generate(&cfg, 3000).unwrap();
        assert_eq!(a, b);
        assert!(a.numeric("l1").unwrap().iter().all(|&v| v >= 140.0));
        let c = generate(&cfg.clone().with_seed(2), 3000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn replacing_target_equation_keeps_upstream_columns() {
        let cfg = ScmConfig::reference();
        let mut other = cfg.clone();
        other.m1.intercept += 2.0;
        other.l2.m1 = 0.0;
        let a = generate(&cfg, 2000).unwrap();
        let b = generate(&other, 2000).unwrap();
        for name in ["race", "age", "sex", "edu", "ins", "dia", "l1", "y1"] {
            assert_eq!(a.column(name).unwrap(), b.column(name).unwrap(), "{name}");
        }
        assert_ne!(a.column("m1").unwrap(), b.column("m1").unwrap());
    }

    #[test]
    fn infeasible_selection_is_rejected() {
        let mut cfg = ScmConfig::reference();
        cfg.l1.intercept = 60.0;
        assert!(matches!(generate(&cfg, 10), Err(Error::InfeasibleCohort(_))));
    }

    #[test]
    fn marginals_are_analytic() {
        let cfg = ScmConfig::reference();
        assert!(discretize_to_joint(&cfg, &[]).is_err());
        let j = discretize_to_joint(&cfg, &[140.0]).unwrap();
        assert!((j.total_mass() - 1.0).abs() < 1e-9);
        let pr = j.probability(&[("race", MARGINALIZED)]).unwrap();
        assert!((pr - 0.35).abs() < 1e-12);
        let old_w = j.probability(&[("race", PRIVILEGED), ("age", "old")]).unwrap();
        assert!((old_w - 0.65 * 0.35).abs() < 1e-12);
        // Education among young black men: expit(intercept + race).
        let e = j.probability(&[("race", MARGINALIZED), ("age", "young"), ("sex", "male"), ("edu", "1")]).unwrap()
            / j.probability(&[("race", MARGINALIZED), ("age", "young"), ("sex", "male")]).unwrap();
        assert!((e - expit(0.3 - 0.7)).abs() < 1e-12);
        // Hypertension at baseline for one covariate pattern, closed form.
        let x = Covariates { marginalized: true, age: 1, female: true, edu: true, ins: false, dia: true };
        let mu = cfg.l1.eval(&x, L1_CENTER, false, 0.0);
        let want = norm_sf((140.0 - mu) / 10f64.hypot(8.0));
        let ev = [("race", MARGINALIZED), ("age", "middle"), ("sex", "female"), ("edu", "1"), ("ins", "0"), ("dia", "1")];
        let mut with_y = ev.to_vec();
        with_y.push(("y1", "1"));
        let got = j.probability(&with_y).unwrap() / j.probability(&ev).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn split_at_threshold_gives_selection_mass() {
        let cfg = ScmConfig::reference();
        let j = discretize_to_joint(&cfg, &[140.0]).unwrap();
        let upper = j.probability(&[("l1", "1")]).unwrap();
        assert!((upper - selection_probability(&cfg)).abs() < 1e-9);
        assert!((j.probability(&[("y1", "1")]).unwrap() - upper).abs() < 1e-12);
        assert!(discretize_to_joint(&cfg, &[150.0]).is_err());
        assert!(discretize_to_joint(&cfg, &[150.0, 140.0]).is_err());
    }

    #[test]
    fn equal_probability_edges_split_cohort_evenly() {
        let cfg = ScmConfig::reference();
        let edges = equal_probability_edges(&cfg, 8).unwrap();
        assert_eq!(edges.len(), 8);
        let j = discretize_to_joint(&cfg, &edges).unwrap();
        let sel = j.probability(&[("y1", "1")]).unwrap();
        for b in 1..=8 {
            let p = j.probability(&[("l1", &b.to_string())]).unwrap() / sel;
            assert!((p - 0.125).abs() < 1e-7, "bin {b}: {p}");
        }
    }

    #[test]
    fn discretized_l1_matches_simulated_frequencies() {
        let cfg = ScmConfig::reference();
        let edges = equal_probability_edges(&cfg, 4).unwrap();
        let j = discretize_to_joint(&cfg, &edges).unwrap();
        let data = bin_l1(&generate(&cfg, 100_000).unwrap(), &edges).unwrap();
        let emp = data.empirical_joint(&["race", "l1", "m1", "y2"]).unwrap();
        let exact = j
            .condition(&[("y1", "1")])
            .unwrap()
            .marginalize(&["race", "l1", "m1", "y2"])
            .unwrap();
        // Cells are bounded by ~5 binomial standard errors at n = 1e5.
        assert!(emp.max_abs_diff(&exact).unwrap() < 5.0 * (0.25f64 / 1e5).sqrt());
    }

    #[test]
    fn null_intervention_cases_have_zero_reduction() {
        // Target law identical across groups: the intervention changes nothing.
        let mut cfg = ScmConfig::reference();
        cfg.m1.race = 0.0;
        let p = preset(Preset::PathSpecificIII, &hypertension_schema());
        let t = true_counterfactual(&cfg, &p, Standardization::Pooled, 20_000, 4).unwrap();
        assert_eq!(t.estimate.reduction, 0.0);

        // Target without effect on the outcome.
        let mut cfg = ScmConfig::reference();
        cfg.l2.m1 = 0.0;
        let p = preset(Preset::Meaningful, &hypertension_schema());
        let t = true_counterfactual(&cfg, &p, Standardization::Pooled, 20_000, 4).unwrap();
        assert_eq!(t.estimate.reduction, 0.0);
    }

    #[test]
    fn no_race_effects_means_no_disparity() {
        let cfg = ScmConfig::reference().without_race_effects();
        let data = generate(&cfg, 200_000).unwrap();
        let (levels, race) = data.categorical("race").unwrap();
        let m = levels.iter().position(|l| l == MARGINALIZED).unwrap() as u32;
        let y = data.numeric("y2").unwrap();
        let mean = |g: bool| {
            let v: Vec<f64> = (0..y.len()).filter(|&i| (race[i] == m) == g).map(|i| y[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean(true) - mean(false)).abs() < 0.01);
    }

    #[test]
    fn simulated_truth_matches_exact_joint_for_discrete_allowables() {
        // With L1 outside the allowable sets, the discretization does not
        // change the estimand, so only Monte Carlo error separates the two.
        let cfg = ScmConfig::reference();
        let p = AllowabilityPartition::new(&["age", "sex"], &["dia"], &["edu", "ins", "l1"]);
        let edges = equal_probability_edges(&cfg, 8).unwrap();
        let j = discretize_to_joint(&cfg, &edges).unwrap();
        let exact = decompose_exact(&j, &reference_roles(), &p, Standardization::Pooled).unwrap();
        let sim = true_counterfactual(&cfg, &p, Standardization::Pooled, 400_000, 11).unwrap();
        let e = &sim.estimate;
        assert!((e.observed - exact.observed).abs() < 4.0 * sim.se_observed, "{e:?} vs {exact:?}");
        assert!((e.reduction - exact.reduction).abs() < 4.0 * sim.se_reduction, "{e:?} vs {exact:?}");
        assert!((e.residual - exact.residual).abs() < 4.0 * sim.se_residual, "{e:?} vs {exact:?}");
    }
}
