//! Run configuration, read from TOML.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use equidecomp::estimator::{BootstrapConfig, EstimatorConfig, ModelPlan, MonteCarloSettings};
use equidecomp::partition::{preset, CovariateTag, Preset, Selection};
use equidecomp::{AllowabilityPartition, Backend, Factorization, RoleBindings, Standardization};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub race: String,
    pub marginalized: String,
    pub privileged: String,
    pub target: String,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
}

impl RoleConfig {
    pub fn bindings(&self) -> RoleBindings {
        let mut r = RoleBindings::new(&self.race, &self.marginalized, &self.privileged, &self.target, &self.outcome);
        r.selection = self.selection.clone();
        r
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub outcome_allowable: Vec<String>,
    #[serde(default)]
    pub target_allowable: Vec<String>,
    #[serde(default)]
    pub non_allowable: Vec<String>,
}

/// Bootstrap settings; the seed is the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_true")]
    pub stratify_by_race: bool,
}

fn default_level() -> f64 {
    0.95
}

fn default_true() -> bool {
    true
}

/// Monte Carlo settings; the seed is the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: PathBuf,
    /// Report path stem: `<output>.json` and `<output>.txt` are written.
    pub output: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub standardization: Standardization,
    pub backend: Backend,
    #[serde(default)]
    pub factorization: Factorization,
    /// Percentile (0-100) at which every weight vector is capped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    /// Column of frequency weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_column: Option<String>,
    pub roles: RoleConfig,
    /// Preset id 1-6; needs `schema`. Excludes `partition`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<u8>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub schema: BTreeMap<String, CovariateTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionConfig>,
    /// Declared levels of categorical columns, in order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub levels: BTreeMap<String, Vec<String>>,
    /// Categorical columns whose levels are read from the data (sorted).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub models: ModelPlan,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSection>,
    /// Directory that relative `input` and `output` paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read a config file; a relative `input` or `output` is taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    pub fn input_path(&self) -> PathBuf {
        self.resolve(&self.input)
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn partition(&self) -> CliResult<AllowabilityPartition> {
        match (&self.partition, self.preset) {
            (Some(p), None) => {
                if !self.schema.is_empty() {
                    return Err(CliError::Config("`schema` is only read together with `preset`".into()));
                }
                Ok(AllowabilityPartition::new(&p.outcome_allowable, &p.target_allowable, &p.non_allowable))
            }
            (None, Some(id)) => {
                let p = Preset::from_id(id).map_err(|e| CliError::Config(e.to_string()))?;
                if self.schema.is_empty() {
                    return Err(CliError::Config(format!("preset {id} needs a `schema` tagging each covariate")));
                }
                let schema: Vec<(String, CovariateTag)> = self.schema.iter().map(|(k, v)| (k.clone(), *v)).collect();
                Ok(preset(p, &schema))
            }
            (Some(_), Some(_)) => Err(CliError::Config("give either `partition` or `preset`, not both".into())),
            (None, None) => Err(CliError::Config("one of `partition` or `preset` is required".into())),
        }
    }

    pub fn estimator(&self) -> EstimatorConfig {
        let mut c = EstimatorConfig::new(self.backend, self.standardization).with_models(self.models.clone());
        c.factorization = self.factorization;
        c.truncation = self.truncation;
        if let Some(b) = self.bootstrap {
            c = c.with_bootstrap(BootstrapConfig {
                replicates: b.replicates,
                level: b.level,
                seed: self.seed,
                stratify_by_race: b.stratify_by_race,
            });
        }
        c.monte_carlo = self.monte_carlo.map(|m| MonteCarloSettings { draws: m.draws, seed: self.seed });
        c
    }

    /// Columns the run reads: roles, selection, covariates and weights.
    pub fn columns_in_scope(&self, partition: &AllowabilityPartition) -> Vec<String> {
        let r = &self.roles;
        let mut cols = vec![r.race.clone(), r.target.clone(), r.outcome.clone()];
        if let Some(s) = &r.selection {
            cols.push(s.variable.clone());
        }
        cols.extend(partition.covariates().cloned());
        if let Some(w) = &self.weight_column {
            cols.push(w.clone());
        }
        let mut seen = Vec::new();
        cols.retain(|c| {
            let fresh = !seen.contains(c);
            seen.push(c.clone());
            fresh
        });
        cols
    }

    /// Columns read as categorical: declared, listed, and the race and
    /// target roles.
    pub fn categorical_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = self.levels.keys().cloned().collect();
        for c in self.categorical.iter().chain([&self.roles.race, &self.roles.target]) {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
input = "cohort.csv"
output = "report"
seed = 7
backend = "rmpw"
preset = 6
[roles]
race = "race"
marginalized = "black"
privileged = "white"
target = "m1"
outcome = "y2"
selection = { variable = "y1", level = "1" }
[schema]
age = "demographic"
edu = "socioeconomic"
dia = "clinical"
"#;

    #[test]
    fn preset_partition_from_schema() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let p = cfg.partition().unwrap();
        assert_eq!(p.outcome_allowable, vec!["age"]);
        assert_eq!(p.target_allowable_extra, vec!["dia"]);
        assert_eq!(p.non_allowable, vec!["edu"]);
        assert_eq!(cfg.standardization, Standardization::Pooled);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partition_and_preset_are_exclusive() {
        let text = format!("{MINIMAL}\n[partition]\nnon_allowable = [\"edu\"]\n");
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert!(cfg.partition().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml(&format!("colour = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn run_seed_reaches_bootstrap_and_monte_carlo() {
        let text = MINIMAL.replace("preset = 6", "preset = 6\n[bootstrap]\nreplicates = 9\n[monte_carlo]\ndraws = 100");
        let cfg = RunConfig::from_toml(&text).unwrap();
        let e = cfg.estimator();
        assert_eq!(e.bootstrap.unwrap().seed, 7);
        assert_eq!(e.monte_carlo.unwrap().seed, 7);
    }
}
