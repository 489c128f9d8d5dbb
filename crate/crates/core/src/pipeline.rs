//! Model variants, end-to-end fitting, prediction and evaluation against
//! simulated ground truth.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::StepCurve;
use crate::data::{first_encountered, to_ltrc, DataError, LongDataset, VariableRoles};
use crate::metrics::{acc_g, ise, mse_b, mse_y, MetricError, MetricReport};
use crate::sim::{simulate, SimConfig, SimDataset, SimError};
use crate::split::SplitControls;
use crate::tree::{grow, prune_to, stump, JlctTree, Prediction, TreeError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unknown variant `{0}` (expected jlct1..jlct4)")]
    Variant(String),
    #[error("model has no survival variables matching the true slopes ({0} vs 3)")]
    SlopeShape(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Which covariate sets are replaced by their first-encountered values.
///
/// | variant | survival   | class      |
/// |---------|------------|------------|
/// | jlct1   | as given   | no split   |
/// | jlct2   | first      | first      |
/// | jlct3   | first      | as given   |
/// | jlct4   | as given   | as given   |
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Jlct1,
    Jlct2,
    Jlct3,
    Jlct4,
}

impl FromStr for Variant {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, PipelineError> {
        match s.to_ascii_lowercase().as_str() {
            "jlct1" | "1" => Ok(Variant::Jlct1),
            "jlct2" | "2" => Ok(Variant::Jlct2),
            "jlct3" | "3" => Ok(Variant::Jlct3),
            "jlct4" | "4" => Ok(Variant::Jlct4),
            _ => Err(PipelineError::Variant(s.to_string())),
        }
    }
}

impl Variant {
    pub fn splits(self) -> bool {
        self != Variant::Jlct1
    }

    pub fn first_survival(self) -> bool {
        matches!(self, Variant::Jlct2 | Variant::Jlct3)
    }

    pub fn first_split(self) -> bool {
        self == Variant::Jlct2
    }
}

/// Suffix of the column holding a covariate's first-encountered value.
pub const FIRST_SUFFIX: &str = ".first";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub variant: Variant,
    pub controls: SplitControls,
    pub shared_baseline: bool,
}

impl FitOptions {
    pub fn new(variant: Variant, roles: &VariableRoles) -> Self {
        FitOptions {
            variant,
            controls: SplitControls::for_survival_vars(roles.survival_vars.len()),
            shared_baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub variant: Variant,
    /// `(source, converted)` column pairs added before fitting.
    pub conversions: Vec<(String, String)>,
    pub tree: JlctTree,
}

fn conversions_for(variant: Variant, roles: &VariableRoles) -> (Vec<(String, String)>, VariableRoles) {
    let mut conv: Vec<(String, String)> = Vec::new();
    let mut model_roles = roles.clone();
    let mut convert = |vars: &mut Vec<String>| {
        for v in vars.iter_mut() {
            let new = format!("{v}{FIRST_SUFFIX}");
            if !conv.iter().any(|(s, _)| s == v) {
                conv.push((v.clone(), new.clone()));
            }
            *v = new;
        }
    };
    if variant.first_survival() {
        convert(&mut model_roles.survival_vars);
    }
    if variant.first_split() {
        convert(&mut model_roles.split_vars);
    }
    (conv, model_roles)
}

/// Append the converted columns.
pub fn apply_conversions(data: &LongDataset, conversions: &[(String, String)]) -> Result<LongDataset, DataError> {
    if conversions.is_empty() {
        return Ok(data.clone());
    }
    let copied = data.with_column_copies(conversions)?;
    let names: Vec<String> = conversions.iter().map(|(_, n)| n.clone()).collect();
    first_encountered(&copied, &names)
}

/// Convert, grow, prune and fit the leaf and longitudinal models.
pub fn fit_model(data: &LongDataset, roles: &VariableRoles, opts: &FitOptions) -> Result<FittedModel, PipelineError> {
    let (conversions, model_roles) = conversions_for(opts.variant, roles);
    let prepared = apply_conversions(data, &conversions)?;
    let ltrc = to_ltrc(&prepared)?;
    let mut tree = if opts.variant.splits() {
        prune_to(grow(&ltrc, &model_roles, &opts.controls)?, opts.controls.max_terminal_nodes)
    } else {
        stump(&ltrc, &model_roles, &opts.controls)?
    };
    tree.fit_leaf_models(&ltrc, &prepared, opts.shared_baseline)?;
    Ok(FittedModel {
        variant: opts.variant,
        conversions,
        tree,
    })
}

impl FittedModel {
    /// Predictions per subject of `data`. In-sample subjects get their
    /// estimated random effect; everyone else gets zero.
    pub fn predict(&self, data: &LongDataset, horizon: f64, in_sample: bool) -> Result<Vec<Prediction>, PipelineError> {
        let prepared = apply_conversions(data, &self.conversions)?;
        let lmm = self.tree.longitudinal_model.as_ref().ok_or(TreeError::NotFitted)?;
        let names = prepared.covariate_names();
        prepared
            .subjects()
            .par_iter()
            .map(|s| {
                let effect = if in_sample {
                    lmm.subject_effects.get(&s.id).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                Ok(self.tree.predict(names, s, horizon, effect)?)
            })
            .collect()
    }

    /// Survival slopes of each leaf, in the order of the survival roles.
    pub fn leaf_slopes(&self) -> BTreeMap<usize, Vec<f64>> {
        self.tree
            .leaf_models
            .iter()
            .map(|m| (m.leaf, m.fit.coefficients.clone()))
            .collect()
    }

    pub fn to_json(&self) -> Result<String, PipelineError> {
        Ok(serde_json::to_string_pretty(self).map_err(TreeError::from)?)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(text).map_err(TreeError::from)?)
    }
}

/// Largest observed time in a dataset.
pub fn max_observed_time(data: &LongDataset) -> f64 {
    data.subjects()
        .iter()
        .map(|s| s.event.event_time)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Metrics of one model on one simulated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub ise: f64,
    pub mse_y: f64,
    pub mse_b: f64,
    pub acc_g: f64,
}

pub fn evaluate_sample(model: &FittedModel, sim: &SimDataset, in_sample: bool) -> Result<SampleEval, PipelineError> {
    let horizon = max_observed_time(&sim.data);
    let preds = model.predict(&sim.data, horizon, in_sample)?;
    let hazard = sim.truth.config.hazard;
    let truth_curves: Vec<_> = sim.truth.subjects.iter().map(|s| s.curve(hazard)).collect();
    let pred_curves: Vec<StepCurve> = preds.iter().map(|p| p.survival.clone()).collect();
    let ise_v = ise(&pred_curves, &truth_curves, horizon)?;

    let y_hat: Vec<f64> = preds.iter().flat_map(|p| p.outcomes.iter().copied()).collect();
    let y: Vec<f64> = sim
        .data
        .subjects()
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.outcome))
        .collect();
    let mse_y_v = mse_y(&y_hat, &y)?;

    let leaves: Vec<usize> = preds.iter().flat_map(|p| p.leaves.iter().copied()).collect();
    let slopes = model.leaf_slopes();
    if let Some(v) = slopes.values().next() {
        if v.len() != 3 {
            return Err(PipelineError::SlopeShape(v.len()));
        }
    }
    let mut true_slopes = Vec::with_capacity(leaves.len());
    for (s, subj) in sim.truth.subjects.iter().zip(sim.data.subjects()) {
        for r in &subj.records {
            true_slopes.push(s.slopes_at(r.time).to_vec());
        }
    }
    let mse_b_v = mse_b(&slopes, &leaves, &true_slopes)?;
    let acc = acc_g(&leaves, &sim.record_classes())?;
    Ok(SampleEval {
        ise: ise_v,
        mse_y: mse_y_v,
        mse_b: mse_b_v,
        acc_g: acc,
    })
}

/// Seed of the independent test sample paired with a training seed.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub train: SimDataset,
    pub test: SimDataset,
}

impl Replicate {
    pub fn simulate(config: &SimConfig) -> Result<Self, PipelineError> {
        let train = simulate(config)?;
        let test = simulate(&SimConfig {
            seed: test_seed(config.seed),
            ..*config
        })?;
        Ok(Replicate { train, test })
    }

    /// Fit on the training sample; in-sample metrics on it, out-of-sample
    /// metrics (including `mse_b` and `acc_g`) on the test sample.
    pub fn evaluate(&self, roles: &VariableRoles, opts: &FitOptions) -> Result<(FittedModel, MetricReport), PipelineError> {
        let start = Instant::now();
        let model = fit_model(&self.train.data, roles, opts)?;
        let elapsed = start.elapsed().as_secs_f64();
        let inside = evaluate_sample(&model, &self.train, true)?;
        let outside = evaluate_sample(&model, &self.test, false)?;
        let report = MetricReport {
            ise_in: Some(inside.ise),
            ise_out: Some(outside.ise),
            mse_y_in: Some(inside.mse_y),
            mse_y_out: Some(outside.mse_y),
            mse_b: Some(outside.mse_b),
            acc_g: Some(outside.acc_g),
            ibs: None,
            n_terminal: Some(model.tree.n_leaves() as f64),
            runtime_seconds: Some(elapsed),
        };
        Ok((model, report))
    }
}
