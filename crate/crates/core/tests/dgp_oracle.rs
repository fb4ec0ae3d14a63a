//! The discretized structural model evaluated exactly agrees with the Monte
//! Carlo g-formula fitted on a large sample from the same model.

use equidecomp::dgp::{bin_l1, discretize_to_joint, equal_probability_edges, generate, reference_roles, ScmConfig};
use equidecomp::estimator::{BootstrapConfig, EstimatorConfig, ModelPlan, MonteCarloSettings, Pipeline};
use equidecomp::gformula::decompose_exact;
use equidecomp::partition::{hypertension_schema, preset, Preset};
use equidecomp::{Backend, Standardization};

#[test]
fn exact_binned_joint_matches_monte_carlo_on_a_million_rows() {
    let cfg = ScmConfig::reference().with_seed(31);
    let edges = equal_probability_edges(&cfg, 8).unwrap();
    let partition = preset(Preset::Meaningful, &hypertension_schema());
    let std = Standardization::Pooled;

    let joint = discretize_to_joint(&cfg, &edges).unwrap();
    let exact = decompose_exact(&joint, &reference_roles(), &partition, std).unwrap();

    let data = bin_l1(&generate(&cfg, 1_000_000).unwrap(), &edges).unwrap();
    let mut config = EstimatorConfig::new(Backend::MonteCarloG, std).with_models(ModelPlan::saturated());
    config.monte_carlo = Some(MonteCarloSettings { draws: 1_000_000, seed: 8 });
    let pipeline = Pipeline::new(&data, &reference_roles(), &partition, config).unwrap();
    let point = pipeline.fit(&vec![1.0; pipeline.cohort().n_rows()], None).unwrap().estimate;

    // Standard errors from refits on resampled rows.
    let boot = BootstrapConfig::new(30, 77);
    let reps: Vec<[f64; 3]> = (0..boot.replicates as u64)
        .map(|b| {
            let e = pipeline.fit(&pipeline.resample(&boot, b), None).unwrap().estimate;
            [e.observed, e.reduction, e.residual]
        })
        .collect();
    let got = [point.observed, point.reduction, point.residual];
    let want = [exact.observed, exact.reduction, exact.residual];
    for k in 0..3 {
        let mean = reps.iter().map(|r| r[k]).sum::<f64>() / reps.len() as f64;
        let var = reps.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64;
        let se = var.sqrt();
        assert!(
            (got[k] - want[k]).abs() <= 3.0 * se,
            "contrast {k}: Monte Carlo {} vs exact {} (se {se})",
            got[k],
            want[k]
        );
    }
}
