//! Subcommand pipelines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use equidecomp::dgp::{self, ScmConfig};
use equidecomp::gformula::check_positivity_data;
use equidecomp::partition::validate;
use equidecomp::reductions::{run_table1_suite, ReductionOutcome, Relation};
use equidecomp::{AllowabilityPartition, CohortTable};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::ingest::{ingest_csv, IngestReport, IngestSpec};
use crate::report::{assumptions, CheckReport, ModelEntry, RunReport, WeightSummary, SOFTWARE};

/// First line of a CSV file as column names.
pub fn read_header(path: &Path) -> CliResult<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: unreadable header: {e}", path.display())))?;
    Ok(header.iter().map(|h| h.trim().to_string()).collect())
}

/// Validate the partition against the file header, then read the columns
/// in scope.
fn load_cohort(cfg: &RunConfig) -> CliResult<(AllowabilityPartition, CohortTable, IngestReport)> {
    let partition = cfg.partition()?;
    let input = cfg.input_path();
    let header = read_header(&input)?;
    let roles = cfg.roles.bindings();
    validate(&partition, &roles, &header).into_result()?;
    if let Some(w) = &cfg.weight_column {
        if !header.contains(w) {
            return Err(CliError::Input(format!("weight column `{w}` is not in the header")));
        }
    }
    let columns = cfg.columns_in_scope(&partition);
    let mut categorical: BTreeMap<String, Option<Vec<String>>> = BTreeMap::new();
    for c in cfg.categorical_columns() {
        if columns.contains(&c) {
            categorical.insert(c.clone(), cfg.levels.get(&c).cloned());
        }
    }
    let spec = IngestSpec {
        columns: Some(columns),
        categorical,
        weight_column: cfg.weight_column.clone(),
        selection: cfg.roles.selection.clone(),
    };
    let (table, report) = ingest_csv(&input, &spec)?;
    Ok((partition, table, report))
}

pub fn decompose(cfg: &RunConfig) -> CliResult<RunReport> {
    let (partition, table, ingest) = load_cohort(cfg)?;
    let run = equidecomp::estimator::decompose_weighted(&table, &cfg.roles.bindings(), &partition, &cfg.estimator())?;
    let weights = run.weights.as_ref().map(|w| WeightSummary {
        marginalized: w.marginalized.diagnostics,
        counterfactual: w.counterfactual.diagnostics,
        privileged: w.privileged.diagnostics,
    });
    Ok(RunReport {
        software: SOFTWARE,
        seed: cfg.seed,
        config: cfg.clone(),
        partition,
        ingest,
        rows_used: run.rows_used,
        estimate: run.estimate,
        bootstrap: run.bootstrap,
        weights,
        assumptions: assumptions(&run.positivity),
        positivity: run.positivity,
        models: run.models.into_iter().map(|(role, model)| ModelEntry { role, model }).collect(),
    })
}

pub fn check(cfg: &RunConfig) -> CliResult<CheckReport> {
    let (partition, table, ingest) = load_cohort(cfg)?;
    let positivity = check_positivity_data(&table, &cfg.roles.bindings(), &partition)?;
    Ok(CheckReport {
        software: SOFTWARE,
        config: cfg.clone(),
        partition,
        ingest,
        assumptions: assumptions(&positivity),
        positivity,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub rows: usize,
    pub seed: u64,
    pub selection_probability: f64,
    pub scm: ScmConfig,
}

/// Generate `rows` units from the structural model and write them as CSV.
pub fn simulate(scm: &ScmConfig, rows: usize, seed: u64, out: &Path) -> CliResult<SimulationSummary> {
    let scm = scm.clone().with_seed(seed);
    let table = dgp::generate(&scm, rows)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let file = std::fs::File::create(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    table.write_csv(std::io::BufWriter::new(file), None)?;
    Ok(SimulationSummary { rows, seed, selection_probability: dgp::selection_probability(&scm), scm })
}

pub fn reductions(joints: usize, seed: u64) -> CliResult<Vec<ReductionOutcome>> {
    Ok(run_table1_suite(joints, seed)?)
}

/// The reduction results as a preset-by-formula matrix.
pub fn reductions_table(outcomes: &[ReductionOutcome]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<3} {:<34} {:<40} {:<9} {:>6} {:>10} {:>9}  {}",
        "id", "preset", "formula", "expected", "joints", "max diff", "witness", "result"
    );
    for o in outcomes {
        let expected = match o.case.expected_relation {
            Relation::Equal => "equal",
            Relation::GenerallyUnequal => "unequal",
        };
        let witness = o.witness_diff.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<3} {:<34} {:<40} {:<9} {:>6} {:>10.2e} {:>9}  {}",
            o.case.preset.id(),
            o.case.preset.label(),
            o.case.formula.to_string(),
            expected,
            o.joints,
            o.max_abs_diff,
            witness,
            if o.passed { "PASS" } else { "FAIL" }
        );
    }
    out
}
