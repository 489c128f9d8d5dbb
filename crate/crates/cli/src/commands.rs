use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use jlct::curve::{StepCurve, SurvivalCurve};
use jlct::data::{ingest_csv, write_csv, LongDataset, VariableRoles};
use jlct::metrics::{acc_g, ibs, ise, kfold_cv, mse_b, mse_y, MetricReport};
use jlct::pipeline::{fit_model, max_observed_time, FitOptions, FittedModel, Variant};
use jlct::sim::{simulate as run_simulation, SimConfig, SimTruth, SubjectTruth, TrueCurve};
use jlct::split::SplitControls;
use rayon::prelude::*;

use crate::io::{read_curves, read_roles, sibling, write_curves, write_roles};
use crate::{CrossvalArgs, EvaluateArgs, FitArgs, ModelArgs, PredictArgs, ReplicateArgs, SimulateArgs};

/// Points of the grid used for emitted true curves.
const CURVE_GRID: usize = 200;

fn fit_options(args: &ModelArgs, roles: &VariableRoles) -> Result<FitOptions> {
    let variant: Variant = args.variant.parse()?;
    let mut controls = SplitControls::for_survival_vars(roles.survival_vars.len());
    controls.stop_threshold = args.stop;
    controls.max_terminal_nodes = args.max_leaves;
    controls.variance_bound = args.variance_bound;
    controls.min_node_rows = args.min_node_rows;
    if let Some(m) = args.min_events {
        controls.min_events = m;
    }
    controls.validate()?;
    Ok(FitOptions {
        variant,
        controls,
        shared_baseline: args.shared_baseline,
    })
}

fn load_data(data: &std::path::Path, roles: &std::path::Path) -> Result<(LongDataset, VariableRoles)> {
    let roles = read_roles(roles)?;
    let data = ingest_csv(data, &roles).with_context(|| format!("reading {}", data.display()))?;
    Ok((data, roles))
}

fn load_model(path: &std::path::Path) -> Result<FittedModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(FittedModel::from_json(&text)?)
}

fn grid_curve(curve: &TrueCurve, horizon: f64) -> StepCurve {
    let times: Vec<f64> = (0..=CURVE_GRID)
        .map(|k| horizon * k as f64 / CURVE_GRID as f64)
        .collect();
    let values = times.iter().map(|&t| curve.survival(t)).collect();
    StepCurve {
        times,
        values,
        horizon,
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig::new(
        a.structure.parse()?,
        a.p0,
        a.hazard.parse()?,
        a.censoring.parse()?,
        a.n,
        a.seed,
    );
    cfg.time_varying = !a.time_invariant;
    if let Some(v) = a.sigma_v {
        cfg.sigma_v = v;
    }
    if let Some(e) = a.sigma_e {
        cfg.sigma_e = e;
    }
    let sim = run_simulation(&cfg)?;
    let roles = VariableRoles::simulation_default();
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(&sim.data, &roles, BufWriter::new(file))?;
    let truth_path = sibling(&a.out, ".truth.json");
    fs::write(&truth_path, serde_json::to_string_pretty(&sim.truth)?)?;
    write_roles(&sibling(&a.out, ".roles.toml"), &roles)?;
    if a.emit_curves {
        let horizon = max_observed_time(&sim.data);
        let curves: Vec<StepCurve> = sim
            .truth
            .subjects
            .iter()
            .map(|s| grid_curve(&s.curve(cfg.hazard), horizon))
            .collect();
        let ids: Vec<&str> = sim.truth.subjects.iter().map(|s| s.id.as_str()).collect();
        write_curves(&sibling(&a.out, ".curves.csv"), ids.into_iter().zip(&curves))?;
    }
    println!(
        "{} subjects, {} records, {:.1}% censored -> {}",
        sim.data.n_subjects(),
        sim.data.n_records(),
        100.0 * sim.censored_fraction(),
        a.out.display()
    );
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let (data, roles) = load_data(&a.data, &a.roles)?;
    let opts = fit_options(&a.model, &roles)?;
    let model = fit_model(&data, &roles, &opts)?;
    fs::write(&a.out, model.to_json()?).with_context(|| format!("writing {}", a.out.display()))?;
    print!("{}", model.tree.render());
    for m in &model.tree.leaf_models {
        let coefs: Vec<String> = m
            .fit
            .covariate_names
            .iter()
            .zip(&m.fit.coefficients)
            .map(|(n, b)| format!("{n} = {b:.4}"))
            .collect();
        let flag = if m.flagged { " (root fallback)" } else { "" };
        println!("leaf {}: {}{flag}", m.leaf, coefs.join(", "));
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let (data, roles) = load_data(&a.data, &a.roles)?;
    let horizon = a.horizon.unwrap_or_else(|| max_observed_time(&data));
    let preds = model.predict(&data, horizon, a.in_sample)?;
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record([roles.subject_col.as_str(), roles.time_col.as_str(), "leaf", "y_hat"])?;
    for (s, p) in data.subjects().iter().zip(&preds) {
        for ((r, leaf), y) in s.records.iter().zip(&p.leaves).zip(&p.outcomes) {
            w.write_record([s.id.clone(), r.time.to_string(), leaf.to_string(), y.to_string()])?;
        }
    }
    w.flush()?;
    if let Some(path) = &a.emit_curves {
        let curves = data.subjects().iter().map(|s| s.id.as_str()).zip(preds.iter().map(|p| &p.survival));
        write_curves(path, curves)?;
    }
    Ok(())
}

fn truth_by_subject<'a>(truth: &'a SimTruth, data: &LongDataset) -> Result<Vec<&'a SubjectTruth>> {
    let by_id: HashMap<&str, &SubjectTruth> = truth.subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    data.subjects()
        .iter()
        .map(|s| {
            by_id
                .get(s.id.as_str())
                .copied()
                .ok_or_else(|| anyhow!("subject {} missing from the truth file", s.id))
        })
        .collect()
}

fn curves_by_subject(curves: Vec<(String, StepCurve)>, data: &LongDataset) -> Result<Vec<StepCurve>> {
    let mut by_id: HashMap<String, StepCurve> = curves.into_iter().collect();
    data.subjects()
        .iter()
        .map(|s| {
            by_id
                .remove(&s.id)
                .ok_or_else(|| anyhow!("no curve for subject {}", s.id))
        })
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (data, _) = load_data(&a.data, &a.roles)?;
    let horizon = max_observed_time(&data);
    let truth: Option<SimTruth> = match &a.truth {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    let truth_rows = truth.as_ref().map(|t| truth_by_subject(t, &data)).transpose()?;

    let mut report = MetricReport::default();
    let (model, preds) = match &a.model {
        Some(path) => {
            let model = load_model(path)?;
            let preds = model.predict(&data, horizon, a.in_sample)?;
            (Some(model), Some(preds))
        }
        None => (None, None),
    };
    let curves: Vec<StepCurve> = match (&preds, &a.curves) {
        (Some(p), _) => p.iter().map(|p| p.survival.clone()).collect(),
        (None, Some(path)) => curves_by_subject(read_curves(path)?, &data)?,
        (None, None) => bail!("either --model or --curves is required"),
    };

    let ise_value = match (&truth, &truth_rows, &a.true_curves) {
        (Some(t), Some(rows), _) => {
            let true_curves: Vec<TrueCurve> = rows.iter().map(|s| s.curve(t.config.hazard)).collect();
            Some(ise(&curves, &true_curves, horizon)?)
        }
        (_, _, Some(path)) => {
            let true_curves = curves_by_subject(read_curves(path)?, &data)?;
            Some(ise(&curves, &true_curves, horizon)?)
        }
        _ => None,
    };
    let times: Vec<f64> = data.subjects().iter().map(|s| s.event.event_time).collect();
    let status: Vec<bool> = data.subjects().iter().map(|s| s.event.status).collect();
    report.ibs = Some(ibs(&curves, &times, &status, a.brier_exclude_censored)?);

    let mut mse_y_value = None;
    if let (Some(model), Some(preds)) = (&model, &preds) {
        let y_hat: Vec<f64> = preds.iter().flat_map(|p| p.outcomes.iter().copied()).collect();
        let y: Vec<f64> = data
            .subjects()
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.outcome))
            .collect();
        mse_y_value = Some(mse_y(&y_hat, &y)?);
        report.n_terminal = Some(model.tree.n_leaves() as f64);
        if let Some(rows) = &truth_rows {
            let leaves: Vec<usize> = preds.iter().flat_map(|p| p.leaves.iter().copied()).collect();
            let mut classes = Vec::with_capacity(leaves.len());
            let mut slopes = Vec::with_capacity(leaves.len());
            for (s, t) in data.subjects().iter().zip(rows) {
                if t.record_classes.len() != s.records.len() {
                    bail!("subject {}: record count differs from the truth file", s.id);
                }
                classes.extend(t.record_classes.iter().copied());
                slopes.extend(s.records.iter().map(|r| t.slopes_at(r.time).to_vec()));
            }
            report.acc_g = Some(acc_g(&leaves, &classes)?);
            report.mse_b = Some(mse_b(&model.leaf_slopes(), &leaves, &slopes)?);
        }
    }
    if a.in_sample {
        report.ise_in = ise_value;
        report.mse_y_in = mse_y_value;
    } else {
        report.ise_out = ise_value;
        report.mse_y_out = mse_y_value;
    }
    let text = report.to_kv();
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn crossval(a: &CrossvalArgs) -> Result<()> {
    let (data, roles) = load_data(&a.data, &a.roles)?;
    let opts = fit_options(&a.model, &roles)?;
    let cv = kfold_cv(&data, a.folds, a.seed, |train, test| -> Result<MetricReport> {
        let start = Instant::now();
        let model = fit_model(train, &roles, &opts)?;
        let elapsed = start.elapsed().as_secs_f64();
        let horizon = max_observed_time(test);
        let preds = model.predict(test, horizon, false)?;
        let curves: Vec<StepCurve> = preds.iter().map(|p| p.survival.clone()).collect();
        let times: Vec<f64> = test.subjects().iter().map(|s| s.event.event_time).collect();
        let status: Vec<bool> = test.subjects().iter().map(|s| s.event.status).collect();
        let y_hat: Vec<f64> = preds.iter().flat_map(|p| p.outcomes.iter().copied()).collect();
        let y: Vec<f64> = test
            .subjects()
            .iter()
            .flat_map(|s| s.records.iter().map(|r| r.outcome))
            .collect();
        Ok(MetricReport {
            mse_y_out: Some(mse_y(&y_hat, &y)?),
            ibs: Some(ibs(&curves, &times, &status, a.brier_exclude_censored)?),
            n_terminal: Some(model.tree.n_leaves() as f64),
            runtime_seconds: a.timings.then_some(elapsed),
            ..Default::default()
        })
    })?;
    let mut text = format!("fold,{}\n", MetricReport::csv_header());
    for (k, r) in cv.folds.iter().enumerate() {
        let _ = writeln!(text, "{},{}", k + 1, r.csv_row());
    }
    let _ = writeln!(text, "mean,{}", cv.mean.csv_row());
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn replicate(a: &ReplicateArgs) -> Result<()> {
    let roles = VariableRoles::simulation_default();
    let opts = fit_options(&a.model, &roles)?;
    let hazard = a.hazard.parse()?;
    let censoring = a.censoring.parse()?;
    let mut cells = Vec::new();
    for s in &a.structures {
        let structure: jlct::sim::Structure = s.parse()?;
        if structure == jlct::sim::Structure::Null {
            cells.push((structure, 1.0));
        } else {
            cells.extend(a.p0.iter().map(|&p| (structure, p)));
        }
    }
    let mut rows = String::from("structure,p0,replicate,seed,n_terminal");
    rows.push_str(if a.timings { ",runtime_seconds\n" } else { "\n" });
    println!("{:<12} {:>5}  terminal nodes, mean (sd) over {} replicates", "structure", "p0", a.reps);
    for (structure, p0) in cells {
        let results = (0..a.reps)
            .into_par_iter()
            .map(|r| -> Result<(u64, f64, f64)> {
                let seed = a.seed + r as u64;
                let mut cfg = SimConfig::new(structure, p0, hazard, censoring, a.n, seed);
                cfg.time_varying = !a.time_invariant;
                let sim = run_simulation(&cfg)?;
                let start = Instant::now();
                let model = fit_model(&sim.data, &roles, &opts)?;
                Ok((seed, model.tree.n_leaves() as f64, start.elapsed().as_secs_f64()))
            })
            .collect::<Result<Vec<_>>>()?;
        let counts: Vec<f64> = results.iter().map(|r| r.1).collect();
        let (mean, sd) = mean_sd(&counts);
        let name = format!("{structure:?}");
        println!("{name:<12} {p0:>5}  {mean:.2} ({sd:.2})");
        for (r, (seed, leaves, secs)) in results.iter().enumerate() {
            let _ = write!(rows, "{name},{p0},{},{seed},{leaves}", r + 1);
            if a.timings {
                let _ = write!(rows, ",{secs:.3}");
            }
            rows.push('\n');
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, rows).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
