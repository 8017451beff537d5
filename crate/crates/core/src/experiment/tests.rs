use super::*;
use crate::data::ToyOutcome;
use crate::model::AbceiConfig;

fn toy(n_control: usize, n_treated: usize) -> DatasetSource {
    DatasetSource::ToyBias {
        n_control,
        n_treated,
        k: 5,
        offset: 0.5,
        kl_target: None,
        outcome: ToyOutcome::Linear,
    }
}

fn tiny_model() -> AbceiConfig {
    AbceiConfig {
        encoder_width: 8,
        mi_width: 8,
        disc_width: 8,
        pred_width: 8,
        latent_dim: 4,
        batch_size: 40,
        max_epochs: 5,
        patience: 3,
        ..AbceiConfig::desk()
    }
}

fn config(variant: Variant, reps: usize) -> ExperimentConfig {
    ExperimentConfig {
        replications: reps,
        base_seed: 10,
        allow_out_of_range: true,
        ..ExperimentConfig::new(toy(80, 40), tiny_model(), variant)
    }
}

#[test]
fn single_replication_aggregate_has_zero_std_error() {
    let out = run_experiment(&config(Variant::OlsLr2, 1), 1).unwrap();
    let agg = &out.aggregate;
    assert_eq!(agg.completed, 1);
    let s = agg.out_sample.sqrt_pehe.unwrap();
    assert_eq!(s.mean, out.results[0].out_sample.sqrt_pehe.unwrap());
    assert_eq!(s.std_error, 0.0);
    assert_eq!(s.count, 1);
}

#[test]
fn aggregate_matches_hand_average_and_ignores_order() {
    let cfg = config(Variant::OlsLr1, 10);
    let out = run_experiment(&cfg, 1).unwrap();
    let vals: Vec<f64> = out.results.iter().map(|r| r.in_sample.ate_error.unwrap()).collect();
    let mean = vals.iter().sum::<f64>() / 10.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0).sqrt();
    let a = out.aggregate.in_sample.ate_error.unwrap();
    assert!((a.mean - mean).abs() < 1e-12);
    assert!((a.std_error - sd / 10f64.sqrt()).abs() < 1e-12);

    let mut reversed = out.results.clone();
    reversed.reverse();
    assert_eq!(AggregateResult::from_results(&cfg, &reversed, vec![]), out.aggregate);
}

#[test]
fn failures_are_counted_and_excluded() {
    let cfg = config(Variant::OlsLr1, 3);
    let out = run_experiment(&cfg, 1).unwrap();
    let failures = vec![FailedReplication {
        seed: 12,
        error: "training diverged".into(),
    }];
    let agg = AggregateResult::from_results(&cfg, &out.results[..2], failures);
    assert_eq!((agg.completed, agg.failed), (2, 1));
    assert_eq!(agg.out_sample.sqrt_pehe.unwrap().count, 2);
    let json = serde_json::to_value(&agg).unwrap();
    assert_eq!(json["failed"], 1);
}

#[test]
fn baseline_on_desk_toy_is_fast() {
    let mut cfg = config(Variant::OlsLr2, 1);
    cfg.dataset = toy(800, 200);
    let start = std::time::Instant::now();
    run_replication(&cfg, 0).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn replication_is_deterministic_for_every_variant() {
    for v in Variant::ALL {
        let cfg = config(v, 1);
        let a = serde_json::to_string(&run_replication(&cfg, 3).unwrap().result).unwrap();
        let b = serde_json::to_string(&run_replication(&cfg, 3).unwrap().result).unwrap();
        assert_eq!(a, b, "{}", v.name());
    }
}

#[test]
fn parallel_run_matches_sequential() {
    let cfg = config(Variant::Full, 3);
    let a = run_experiment(&cfg, 1).unwrap().aggregate;
    let b = run_experiment(&cfg, 3).unwrap().aggregate;
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn experiment_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Variant::NoMi, 2);
    cfg.output_dir = Some(dir.path().to_path_buf());
    run_experiment(&cfg, 1).unwrap();
    for name in ["rep_10.json", "rep_11.json", "model_10.json", "model_11.json", "aggregate.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let rep: ReplicationResult =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rep_10.json")).unwrap()).unwrap();
    assert_eq!(rep.seed, 10);
    assert_eq!(rep.config, ExperimentConfig { output_dir: None, ..cfg });
    assert_eq!(rep.in_sample.split, SplitTag::In);
}

#[test]
fn search_space_bounds() {
    let mut cfg = config(Variant::Full, 1);
    cfg.allow_out_of_range = false;
    assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
    cfg.model = AbceiConfig::default();
    cfg.validate().unwrap();
    cfg.model.batch_size = 64;
    assert!(cfg.validate().is_err());
    cfg.model.batch_size = 65;
    cfg.model.encoder_depth = 7;
    assert!(cfg.validate().is_err());
    cfg.model.encoder_depth = 6;
    cfg.model.lambda = 5e-5;
    cfg.model.beta = 15.0;
    cfg.validate().unwrap();
    // baselines ignore the model block
    let mut base = config(Variant::Knn, 1);
    base.allow_out_of_range = false;
    base.validate().unwrap();
    base.replications = 0;
    assert!(base.validate().is_err());
}

#[test]
fn config_json_parsing() {
    let text = r#"{
        "dataset": {"kind": "linear_outcomes", "n": 200, "k": 5},
        "variant": "ols_lr2",
        "replications": 2
    }"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    assert_eq!(cfg.variant, Variant::OlsLr2);
    assert!(ExperimentConfig::from_json(r#"{"dataset": {"kind": "csv", "path": "x"}, "variant": "bart"}"#).is_err());
    assert_eq!(Variant::parse("no_mi").unwrap(), Variant::NoMi);
    assert!(Variant::parse("abcei").is_err());
}

#[test]
fn missing_csv_is_a_data_error() {
    let cfg = ExperimentConfig::new(
        DatasetSource::Csv {
            path: "/nonexistent/data.csv".into(),
            reassign: None,
            att_true: None,
        },
        AbceiConfig::default(),
        Variant::OlsLr1,
    );
    assert!(matches!(run_experiment(&cfg, 1), Err(ExperimentError::Data(_))));
}

#[test]
fn sweep_shape_and_kl_column() {
    let cfg = config(Variant::OlsLr1, 2);
    let methods = [Variant::OlsLr1, Variant::OlsLr2, Variant::Knn];
    let rows = sweep_bias(&cfg, &SweepAxis::KlTargets(vec![0.0, 1.0, 3.0]), &methods, 1).unwrap();
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0].kl, 0.0);
    assert_eq!(rows[0].offset, 0.0);
    for r in &rows {
        assert!((r.kl - r.kl_target.unwrap()).abs() < 1e-9);
    }

    let rows = sweep_bias(&cfg, &SweepAxis::Offsets(vec![0.0, 0.1, -0.2, 0.4]), &[Variant::OlsLr1], 1).unwrap();
    assert_eq!(rows[0].kl, 0.0);
    assert!(rows[1].kl <= rows[2].kl && rows[2].kl <= rows[3].kl);

    let mut out = Vec::new();
    write_sweep_csv(&cfg, &rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("# config: {"));
    let data_lines = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(data_lines, 1 + rows.len());
}

#[test]
fn sweep_requires_toy_data() {
    let mut cfg = config(Variant::OlsLr1, 1);
    cfg.dataset = DatasetSource::LinearOutcomes {
        n: 100,
        k: 3,
        spec: Default::default(),
    };
    assert!(matches!(
        sweep_bias(&cfg, &SweepAxis::KlTargets(vec![0.0]), &[Variant::OlsLr1], 1),
        Err(ExperimentError::Config(_))
    ));
}

#[test]
fn trace_mi_rows_follow_epochs() {
    assert!(matches!(trace_mi(&config(Variant::Full, 1), 0), Err(ExperimentError::Config(_))));
    let cfg = config(Variant::NoAdversarial, 1);
    let rows = trace_mi(&cfg, 0).unwrap();
    assert!(!rows.is_empty() && rows.len() <= 5);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.record.epoch, i + 1);
        assert!(r.record.mi_estimate.is_finite());
        assert!(r.val_sqrt_pehe.is_some());
        assert_eq!(r.record.l_d, 0.0);
    }
    let mut out = Vec::new();
    write_trace_mi_csv(&cfg, 0, &rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("epoch,l_mi,l_d,l_phi,l_pred,val_mse,mi_estimate,val_sqrt_pehe"));
}
