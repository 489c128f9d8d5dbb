use jlct::data::{ingest_reader, write_csv, VariableRoles};
use jlct::metrics::{kfold_cv, MetricReport};
use jlct::pipeline::{fit_model, max_observed_time, FitOptions, FittedModel, PipelineError, Replicate, Variant};
use jlct::sim::{simulate, Censoring, Hazard, SimConfig, Structure};

fn config(n: usize, seed: u64) -> SimConfig {
    SimConfig::new(Structure::Tree, 1.0, Hazard::WeibullI, Censoring::Light, n, seed)
}

#[test]
fn csv_round_trip_preserves_fit() {
    let roles = VariableRoles::simulation_default();
    let sim = simulate(&config(200, 4)).unwrap();
    let mut buf = Vec::new();
    write_csv(&sim.data, &roles, &mut buf).unwrap();
    let back = ingest_reader(buf.as_slice(), &roles).unwrap();
    assert_eq!(back.n_records(), sim.data.n_records());

    let opts = FitOptions::new(Variant::Jlct4, &roles);
    let a = fit_model(&sim.data, &roles, &opts).unwrap();
    let b = fit_model(&back, &roles, &opts).unwrap();
    assert_eq!(a.tree.n_leaves(), b.tree.n_leaves());
    for (x, y) in a.leaf_slopes().values().flatten().zip(b.leaf_slopes().values().flatten()) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn model_document_predicts_identically() {
    let roles = VariableRoles::simulation_default();
    let sim = simulate(&config(250, 9)).unwrap();
    let model = fit_model(&sim.data, &roles, &FitOptions::new(Variant::Jlct3, &roles)).unwrap();
    assert!(model.conversions.iter().all(|(_, c)| c.ends_with(".first")));
    let parsed = FittedModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(parsed, model);

    let horizon = max_observed_time(&sim.data);
    let p = model.predict(&sim.data, horizon, true).unwrap();
    let q = parsed.predict(&sim.data, horizon, true).unwrap();
    assert_eq!(p.len(), sim.data.n_subjects());
    for (a, b) in p.iter().zip(&q) {
        assert_eq!(a.outcomes, b.outcomes);
        assert_eq!(a.leaves, b.leaves);
    }
}

#[test]
fn every_variant_reports_metrics() {
    let roles = VariableRoles::simulation_default();
    let rep = Replicate::simulate(&config(200, 17)).unwrap();
    for variant in [Variant::Jlct1, Variant::Jlct2, Variant::Jlct3, Variant::Jlct4] {
        let (model, report) = rep.evaluate(&roles, &FitOptions::new(variant, &roles)).unwrap();
        if variant == Variant::Jlct1 {
            assert_eq!(model.tree.n_leaves(), 1);
            // one leaf: accuracy is the majority class share
            assert!(report.acc_g.unwrap() >= 0.25);
        }
        for v in [report.ise_in, report.ise_out, report.mse_y_in, report.mse_y_out, report.mse_b] {
            let v = v.unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn cross_validation_covers_every_subject_once() {
    let sim = simulate(&config(150, 23)).unwrap();
    let cv = kfold_cv::<PipelineError, _>(&sim.data, 5, 1, |train, test| {
        assert_eq!(train.n_subjects() + test.n_subjects(), 150);
        Ok(MetricReport {
            n_terminal: Some(test.n_subjects() as f64),
            ..MetricReport::default()
        })
    })
    .unwrap();
    assert_eq!(cv.folds.len(), 5);
    let total: f64 = cv.folds.iter().map(|f| f.n_terminal.unwrap()).sum();
    assert_eq!(total, 150.0);
    assert_eq!(cv.mean.n_terminal, Some(30.0));
}
