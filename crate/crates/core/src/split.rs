//! Node association test and split search.
//!
//! A node's statistic `TS` is the likelihood-ratio statistic for the outcome
//! coefficient in a Cox model with the outcome plus the survival covariates.
//! A split `(j, C)` sends rows with `x_j <= C` left and scores
//! `TS_parent - TS_left - TS_right`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::{fit_rows, CoxError, CoxFit, CoxOptions};
use crate::data::{DataError, LtrcDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitControls {
    pub min_node_rows: usize,
    pub min_events: usize,
    pub variance_bound: f64,
    pub stop_threshold: f64,
    pub max_terminal_nodes: usize,
    #[serde(default)]
    pub cox: CoxOptions,
}

impl SplitControls {
    /// Defaults for a given number of survival covariates; the event minimum
    /// counts the outcome term as well.
    pub fn for_survival_vars(n_survival: usize) -> Self {
        SplitControls {
            min_node_rows: 20,
            min_events: n_survival + 1,
            variance_bound: 1e5,
            stop_threshold: 3.84,
            max_terminal_nodes: 6,
            cox: CoxOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.min_node_rows > 0
            && self.min_events > 0
            && self.variance_bound > 0.0
            && self.stop_threshold > 0.0
            && self.max_terminal_nodes > 0;
        if ok {
            Ok(())
        } else {
            Err(DataError::Invalid("split controls must all be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    TooFewRows,
    TooFewEvents,
    NonConvergence,
    VarianceBound,
    DegenerateDesign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeTest {
    pub ts: f64,
    pub valid: bool,
    pub reason: Option<InvalidReason>,
    pub n_rows: usize,
    pub n_events: usize,
    #[serde(skip)]
    pub full_fit: Option<CoxFit>,
    #[serde(skip)]
    pub null_fit: Option<CoxFit>,
}

impl NodeTest {
    fn invalid(reason: InvalidReason, n_rows: usize, n_events: usize) -> Self {
        NodeTest {
            ts: 0.0,
            valid: false,
            reason: Some(reason),
            n_rows,
            n_events,
            full_fit: None,
            null_fit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub variable: String,
    pub threshold: f64,
    pub score: f64,
    pub left_test: NodeTest,
    pub right_test: NodeTest,
}

fn fit_reason(err: &CoxError) -> InvalidReason {
    match err {
        CoxError::InsufficientEvents(_) => InvalidReason::TooFewEvents,
        CoxError::DegenerateDesign(_) => InvalidReason::DegenerateDesign,
        _ => InvalidReason::NonConvergence,
    }
}

/// Test statistic on all rows of `data`.
pub fn node_test(data: &LtrcDataset, survival_vars: &[String], controls: &SplitControls) -> NodeTest {
    let rows: Vec<usize> = (0..data.len()).collect();
    node_test_rows(data, &rows, survival_vars, controls, None)
}

pub(crate) fn node_test_rows(
    data: &LtrcDataset,
    rows: &[usize],
    survival_vars: &[String],
    controls: &SplitControls,
    warm: Option<&NodeTest>,
) -> NodeTest {
    let n_events = rows.iter().filter(|&&k| data.status[k]).count();
    if rows.is_empty() {
        return NodeTest::invalid(InvalidReason::TooFewRows, 0, 0);
    }
    if n_events < controls.min_events {
        return NodeTest::invalid(InvalidReason::TooFewEvents, rows.len(), n_events);
    }
    let mut full_names = Vec::with_capacity(survival_vars.len() + 1);
    full_names.push(data.outcome_name().to_string());
    full_names.extend(survival_vars.iter().cloned());

    let warm_full = warm.and_then(|w| w.full_fit.as_ref()).map(|f| f.coefficients.as_slice());
    let warm_null = warm.and_then(|w| w.null_fit.as_ref()).map(|f| f.coefficients.as_slice());
    let full = match fit_rows(data, rows, &full_names, warm_full, &controls.cox) {
        Ok(f) => f,
        Err(e) => return NodeTest::invalid(fit_reason(&e), rows.len(), n_events),
    };
    let null = match fit_rows(data, rows, survival_vars, warm_null, &controls.cox) {
        Ok(f) => f,
        Err(e) => return NodeTest::invalid(fit_reason(&e), rows.len(), n_events),
    };
    let ts = (2.0 * (full.log_partial_lik - null.log_partial_lik)).max(0.0);
    let reason = if !full.converged || !null.converged {
        Some(InvalidReason::NonConvergence)
    } else if full.max_variance() > controls.variance_bound || null.max_variance() > controls.variance_bound {
        Some(InvalidReason::VarianceBound)
    } else {
        None
    };
    NodeTest {
        ts,
        valid: reason.is_none(),
        reason,
        n_rows: rows.len(),
        n_events,
        full_fit: Some(full),
        null_fit: Some(null),
    }
}

fn midpoints(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    values.dedup();
    values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Midpoints between consecutive distinct values of `variable`.
pub fn enumerate_thresholds(data: &LtrcDataset, variable: &str) -> Result<Vec<f64>, DataError> {
    Ok(midpoints(data.column(variable)?.to_vec()))
}

/// Best admissible split of the rows of `data`.
pub fn best_split(
    data: &LtrcDataset,
    split_vars: &[String],
    survival_vars: &[String],
    controls: &SplitControls,
    parent: &NodeTest,
) -> Result<Option<SplitCandidate>, DataError> {
    let rows: Vec<usize> = (0..data.len()).collect();
    best_split_rows(data, &rows, split_vars, survival_vars, controls, parent)
}

struct Plan {
    var: usize,
    threshold: f64,
    /// Number of rows (in sorted order) going left.
    cut: usize,
}

pub(crate) fn best_split_rows(
    data: &LtrcDataset,
    rows: &[usize],
    split_vars: &[String],
    survival_vars: &[String],
    controls: &SplitControls,
    parent: &NodeTest,
) -> Result<Option<SplitCandidate>, DataError> {
    let columns = split_vars
        .iter()
        .map(|v| data.column(v))
        .collect::<Result<Vec<_>, _>>()?;
    let total_events = rows.iter().filter(|&&k| data.status[k]).count();

    let mut sorted: Vec<Vec<usize>> = Vec::with_capacity(columns.len());
    let mut plans = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let mut order = rows.to_vec();
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        let mut events_left = 0;
        for pos in 0..order.len().saturating_sub(1) {
            if data.status[order[pos]] {
                events_left += 1;
            }
            let (here, next) = (col[order[pos]], col[order[pos + 1]]);
            if here == next {
                continue;
            }
            let cut = pos + 1;
            let admissible = cut >= controls.min_node_rows
                && order.len() - cut >= controls.min_node_rows
                && events_left >= controls.min_events
                && total_events - events_left >= controls.min_events;
            if admissible {
                plans.push(Plan {
                    var: j,
                    threshold: 0.5 * (here + next),
                    cut,
                });
            }
        }
        sorted.push(order);
    }

    let children = |plan: &Plan| {
        let order = &sorted[plan.var];
        let mut left = order[..plan.cut].to_vec();
        let mut right = order[plan.cut..].to_vec();
        left.sort_unstable();
        right.sort_unstable();
        (left, right)
    };
    let scores: Vec<Option<f64>> = plans
        .par_iter()
        .map(|plan| {
            let (left, right) = children(plan);
            let lt = node_test_rows(data, &left, survival_vars, controls, Some(parent));
            if !lt.valid {
                return None;
            }
            let rt = node_test_rows(data, &right, survival_vars, controls, Some(parent));
            rt.valid.then(|| parent.ts - lt.ts - rt.ts)
        })
        .collect();

    // plans are ordered by variable then ascending threshold; strict `>`
    // keeps the earliest of tied candidates
    let mut best: Option<(usize, f64)> = None;
    for (k, score) in scores.iter().enumerate() {
        if let Some(score) = *score {
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }
    }
    Ok(best.map(|(k, score)| {
        let (left, right) = children(&plans[k]);
        SplitCandidate {
            variable: split_vars[plans[k].var].clone(),
            threshold: plans[k].threshold,
            score,
            left_test: node_test_rows(data, &left, survival_vars, controls, Some(parent)),
            right_test: node_test_rows(data, &right, survival_vars, controls, Some(parent)),
        }
    }))
}
