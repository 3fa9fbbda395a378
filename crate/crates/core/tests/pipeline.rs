use symode_core::training::StopReason;
use symode_core::{
    adjoint_gradient, compare_runs, generate_dataset, train, Dataset, GenerationConfig, ModelParams, ResidualMode,
    SolverConfig, TrainConfig,
};

fn truth() -> ModelParams {
    ModelParams::new(1.0, 0.5)
}

#[test]
fn dataset_round_trips_through_json() {
    let ds = generate_dataset(&GenerationConfig { noise_sigma: 0.02, seed: 11, ..Default::default() }).unwrap();
    let text = serde_json::to_string(&ds).unwrap();
    let back: Dataset = serde_json::from_str(&text).unwrap();
    assert_eq!(back, ds);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let meta = v["meta"].as_object().unwrap();
    for key in ["theta1_true", "theta2_true", "noise_sigma", "seed", "margin"] {
        assert!(meta.contains_key(key), "{key}");
    }
    let rec = v["experiments"][0].as_object().unwrap();
    assert_eq!(rec.keys().collect::<Vec<_>>(), ["id", "observations", "z0"]);
    let obs = v["experiments"][0]["observations"][0].as_object().unwrap();
    assert_eq!(obs.keys().collect::<Vec<_>>(), ["t", "z"]);
}

#[test]
fn unknown_dataset_fields_are_rejected() {
    let text = r#"{"meta": {"theta1_true": 1.0, "theta2_true": 0.5, "noise_sigma": 0.0, "seed": 0, "margin": 0.1},
        "experiments": [{"id": 0, "z0": 0.1, "observations": [{"t": 1.0, "z": 0.5, "extra": 1}]}]}"#;
    assert!(serde_json::from_str::<Dataset>(text).is_err());
}

#[test]
fn clean_data_identifies_the_parameters() {
    let ds = generate_dataset(&GenerationConfig::default()).unwrap();
    let report = train(&ds, ModelParams::new(0.5, 0.0), &TrainConfig::plain()).unwrap();
    assert_eq!(report.stop_reason, StopReason::Converged);
    assert!(report.iterations() <= 500);
    assert!(report.final_params.max_abs_diff(&truth()) <= 1e-3);
    let g = adjoint_gradient(&ds.experiments, &report.final_params, &SolverConfig::default()).unwrap().gradient;
    assert!(g.norm() < 1e-6);
}

#[test]
fn regularized_training_keeps_the_breakdown_consistent() {
    let ds = generate_dataset(&GenerationConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let report = train(&ds, ModelParams::new(0.5, 0.0), &cfg).unwrap();
    assert!(report.converged);
    for r in &report.theta_path {
        assert!(r.loss.additivity_gap(&cfg.weights) <= 1e-12);
    }
    // the exact subgroup barely moves the optimum
    assert!(report.final_params.max_abs_diff(&truth()) <= 1e-3);
}

#[test]
fn noisy_comparison_reports_both_arms() {
    let ds = generate_dataset(&GenerationConfig { noise_sigma: 0.01, seed: 2, ..Default::default() }).unwrap();
    let plain = TrainConfig { max_iters: 150, ..TrainConfig::plain() };
    for mode in [ResidualMode::Chain, ResidualMode::Literal] {
        let reg = TrainConfig { max_iters: 150, mode, ..TrainConfig::default() };
        let r = compare_runs(&ds, ModelParams::new(0.5, 0.0), &plain, &reg).unwrap();
        assert_eq!(r.regularized_mode, mode);
        assert!(r.deltas.plain_param_error.unwrap().is_finite());
        assert!(r.deltas.regularized_param_error.unwrap().is_finite());
        assert!(r.plain.last().loss.reg_f == 0.0 && r.regularized.last().loss.reg_f > 0.0);
    }
}
