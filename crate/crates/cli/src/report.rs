//! Run reports: a JSON document and a plain-text summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use equidecomp::estimator::{BootstrapSummary, NuisanceRole};
use equidecomp::gformula::{Interval, PositivityReport};
use equidecomp::nuisance::FittedModel;
use equidecomp::weights::WeightDiagnostics;
use equidecomp::{AllowabilityPartition, DecompositionEstimate};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::IngestReport;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Software {
    pub name: &'static str,
    pub version: &'static str,
}

pub const SOFTWARE: Software = Software { name: "equidecomp", version: env!("CARGO_PKG_VERSION") };

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionStatus {
    /// Cannot be checked from data; the analyst vouches for it.
    Declared,
    Checked,
    Violated,
    /// Partly checked: numeric covariates were left out of the strata.
    PartiallyChecked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assumption {
    pub name: &'static str,
    pub statement: &'static str,
    pub status: AssumptionStatus,
}

pub fn assumptions(positivity: &PositivityReport) -> Vec<Assumption> {
    let support = if !positivity.is_clean() {
        AssumptionStatus::Violated
    } else if positivity.skipped_numeric.is_empty() {
        AssumptionStatus::Checked
    } else {
        AssumptionStatus::PartiallyChecked
    };
    vec![
        Assumption {
            name: "conditional exchangeability",
            statement: "no unmeasured confounding of target and outcome given race and all covariates",
            status: AssumptionStatus::Declared,
        },
        Assumption {
            name: "positivity and common support",
            statement: "every covariate stratum holds both race groups and every target level",
            status: support,
        },
        Assumption {
            name: "consistency",
            statement: "the outcome under the target level a unit received equals its observed outcome",
            status: AssumptionStatus::Declared,
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub marginalized: WeightDiagnostics,
    pub counterfactual: WeightDiagnostics,
    pub privileged: WeightDiagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelEntry {
    pub role: NuisanceRole,
    pub model: FittedModel,
}

/// Everything a `decompose` run produced. Contains no timestamps, so the
/// same config and data give byte-identical reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub software: Software,
    pub seed: u64,
    pub config: RunConfig,
    pub partition: AllowabilityPartition,
    pub ingest: IngestReport,
    pub rows_used: usize,
    pub estimate: DecompositionEstimate,
    pub bootstrap: Option<BootstrapSummary>,
    pub weights: Option<WeightSummary>,
    pub positivity: PositivityReport,
    pub assumptions: Vec<Assumption>,
    pub models: Vec<ModelEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub software: Software,
    pub config: RunConfig,
    pub partition: AllowabilityPartition,
    pub ingest: IngestReport,
    pub positivity: PositivityReport,
    pub assumptions: Vec<Assumption>,
}

fn interval(i: &Option<Interval>) -> String {
    match i {
        Some(i) => format!("  [{:+.6}, {:+.6}]", i.lower, i.upper),
        None => String::new(),
    }
}

fn positivity_text(out: &mut String, p: &PositivityReport) {
    if p.is_clean() {
        let _ = writeln!(out, "Support: no violations");
    } else {
        let _ = writeln!(out, "Support: {} violation(s)", p.violations.len());
        for v in &p.violations {
            let _ = writeln!(out, "  {:?} at {}: {}", v.kind, v.stratum, v.detail);
        }
    }
    if !p.skipped_numeric.is_empty() {
        let _ = writeln!(out, "  not checked (numeric): {}", p.skipped_numeric.join(", "));
    }
}

fn assumptions_text(out: &mut String, a: &[Assumption]) {
    let _ = writeln!(out, "Assumptions:");
    for a in a {
        let _ = writeln!(out, "  {:<30} {:?}: {}", a.name, a.status, a.statement);
    }
}

fn ingest_text(out: &mut String, i: &IngestReport) {
    let _ = writeln!(
        out,
        "Rows: {} read, {} rejected for missing values, {} outside the selection, {} retained",
        i.rows_read, i.rows_missing, i.rows_dropped_by_selection, i.rows_retained
    );
    for (col, n) in &i.missing_by_column {
        let _ = writeln!(out, "  missing in {col}: {n}");
    }
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        let e = &self.estimate;
        let _ = writeln!(out, "{} {}", self.software.name, self.software.version);
        let _ = writeln!(out, "Input: {}", c.input.display());
        let _ = writeln!(
            out,
            "Race: {} ({} vs {}), target: {}, outcome: {}",
            c.roles.race, c.roles.marginalized, c.roles.privileged, c.roles.target, c.roles.outcome
        );
        let p = &self.partition;
        let _ = writeln!(out, "Outcome-allowable: {}", p.outcome_allowable.join(", "));
        let _ = writeln!(out, "Target-allowable:  {}", p.target_allowable_extra.join(", "));
        let _ = writeln!(out, "Non-allowable:     {}", p.non_allowable.join(", "));
        let _ = writeln!(out, "Backend: {:?}, standardization: {}, seed: {}", e.backend, e.standardization, self.seed);
        ingest_text(&mut out, &self.ingest);
        let _ = writeln!(out, "Rows used: {}", self.rows_used);
        let _ = writeln!(out);
        let ci = e.ci.as_ref();
        let rows = [
            ("mean, marginalized", e.mean_r0, ci.map(|c| c.mean_r0)),
            ("mean, privileged", e.mean_r0prime, ci.map(|c| c.mean_r0prime)),
            ("mean, counterfactual", e.mean_cf, ci.map(|c| c.mean_cf)),
            ("observed disparity", e.observed, ci.map(|c| c.observed)),
            ("disparity reduction", e.reduction, ci.map(|c| c.reduction)),
            ("disparity residual", e.residual, ci.map(|c| c.residual)),
        ];
        for (name, v, i) in rows {
            let _ = writeln!(out, "{name:<22} {v:+.6}{}", interval(&i));
        }
        if let Some(level) = ci.map(|c| c.observed.level) {
            let _ = writeln!(out, "(percentile bootstrap intervals, level {level})");
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(out, "Bootstrap: {} replicates succeeded, {} failed", b.succeeded, b.failed);
        }
        if let Some(w) = &self.weights {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<16} {:>10} {:>10} {:>10} {:>12} {:>9}", "weights", "min", "max", "mean", "ESS", "capped");
            for (name, d) in [("marginalized", &w.marginalized), ("counterfactual", &w.counterfactual), ("privileged", &w.privileged)] {
                let _ = writeln!(
                    out,
                    "{name:<16} {:>10.4} {:>10.4} {:>10.4} {:>12.1} {:>9}",
                    d.min, d.max, d.mean, d.ess, d.truncated
                );
            }
        }
        let _ = writeln!(out);
        positivity_text(&mut out, &self.positivity);
        assumptions_text(&mut out, &self.assumptions);
        let _ = writeln!(out);
        let _ = writeln!(out, "Models:");
        for m in &self.models {
            let f = &m.model;
            let _ = write!(out, "  {}: {} ~ ", m.role, f.spec.response);
            match f.coefficients() {
                Some(coefs) => {
                    let _ = writeln!(out, "{} ({} iterations{})", f.term_names.join(" + "), f.iterations, if f.ridge { ", ridge" } else { "" });
                    for (k, beta) in coefs.iter().enumerate() {
                        let level = f.response_levels.get(k + 1).map(|l| format!("[{l}] ")).unwrap_or_default();
                        let terms: Vec<String> = f.term_names.iter().zip(beta).map(|(t, b)| format!("{t}={b:.6}")).collect();
                        let _ = writeln!(out, "    {level}{}", terms.join(", "));
                    }
                }
                None => {
                    let _ = writeln!(out, "saturated table");
                }
            }
        }
        out
    }
}

impl CheckReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.software.name, self.software.version);
        let _ = writeln!(out, "Input: {}", self.config.input.display());
        ingest_text(&mut out, &self.ingest);
        positivity_text(&mut out, &self.positivity);
        assumptions_text(&mut out, &self.assumptions);
        out
    }
}

fn with_extension(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Write `<stem>.json` and `<stem>.txt`; returns both paths.
pub fn write_pair<T: Serialize>(stem: &Path, doc: &T, text: &str) -> CliResult<(PathBuf, PathBuf)> {
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let json_path = with_extension(stem, "json");
    let text_path = with_extension(stem, "txt");
    let mut json = serde_json::to_string_pretty(doc).map_err(|e| CliError::Io(e.to_string()))?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| CliError::Io(format!("{}: {e}", json_path.display())))?;
    std::fs::write(&text_path, text).map_err(|e| CliError::Io(format!("{}: {e}", text_path.display())))?;
    Ok((json_path, text_path))
}
