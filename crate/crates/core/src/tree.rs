//! Growing, pruning and using the latent class tree.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{fit_cox_with, fit_rows, BaselineHazard, CoxError, CoxFit};
use crate::curve::StepCurve;
use crate::data::{DataError, LongDataset, LtrcDataset, Subject, VariableRoles};
use crate::lmm::{fit_lmm, LmmError, LmmFit};
use crate::split::{best_split_rows, node_test_rows, InvalidReason, NodeTest, SplitControls};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("root node cannot be fitted: {0:?}")]
    Unfittable(Option<InvalidReason>),
    #[error("leaf models have not been fitted")]
    NotFitted,
    #[error("no fallback survival model: {0}")]
    NoFallback(String),
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("subject `{0}` has no measurements")]
    EmptySubject(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error("model document: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub variable: String,
    pub threshold: f64,
    pub score: f64,
}

/// Why a node ended up as a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Closure {
    TsBelowThreshold,
    Screen,
    NoValidSplit,
    Pruned,
    /// Splitting was switched off.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub depth: usize,
    pub test: NodeTest,
    pub split: Option<SplitRule>,
    pub children: Option<(usize, usize)>,
    pub row_fraction: f64,
    pub closure: Option<Closure>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafModel {
    pub leaf: usize,
    pub fit: CoxFit,
    /// The leaf's own fit failed and `fit` is the root-level fallback.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JlctTree {
    pub root_id: usize,
    pub nodes: BTreeMap<usize, TreeNode>,
    pub roles: VariableRoles,
    pub controls: SplitControls,
    pub shared_baseline: bool,
    pub leaf_models: Vec<LeafModel>,
    pub root_fit: Option<CoxFit>,
    pub longitudinal_model: Option<LmmFit>,
}

/// Survival curve and outcome predictions for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub survival: StepCurve,
    pub outcomes: Vec<f64>,
    pub leaves: Vec<usize>,
}

/// Grow the tree on all rows of `data` without pruning.
pub fn grow(data: &LtrcDataset, roles: &VariableRoles, controls: &SplitControls) -> Result<JlctTree, TreeError> {
    controls.validate()?;
    for v in roles.split_vars.iter().chain(&roles.survival_vars) {
        data.column(v)?;
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let root_test = node_test_rows(data, &all, &roles.survival_vars, controls, None);
    if !root_test.valid {
        return Err(TreeError::Unfittable(root_test.reason));
    }
    let total = data.len() as f64;
    let mut nodes = BTreeMap::new();
    let mut next_id = 2;
    // depth-first, left child first
    let mut stack = vec![(1usize, 0usize, all, root_test)];
    while let Some((id, depth, rows, test)) = stack.pop() {
        let mut node = TreeNode {
            id,
            depth,
            test,
            split: None,
            children: None,
            row_fraction: rows.len() as f64 / total,
            closure: None,
        };
        if !node.test.valid {
            node.closure = Some(Closure::Screen);
        } else if node.test.ts < controls.stop_threshold {
            node.closure = Some(Closure::TsBelowThreshold);
        } else {
            match best_split_rows(data, &rows, &roles.split_vars, &roles.survival_vars, controls, &node.test)? {
                None => node.closure = Some(Closure::NoValidSplit),
                Some(cand) => {
                    let col = data.column(&cand.variable)?;
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&k| col[k] <= cand.threshold);
                    let (l, r) = (next_id, next_id + 1);
                    next_id += 2;
                    node.split = Some(SplitRule {
                        variable: cand.variable,
                        threshold: cand.threshold,
                        score: cand.score,
                    });
                    node.children = Some((l, r));
                    stack.push((r, depth + 1, right, cand.right_test));
                    stack.push((l, depth + 1, left, cand.left_test));
                }
            }
        }
        // the fits only serve as warm starts for the children
        node.test.full_fit = None;
        node.test.null_fit = None;
        nodes.insert(id, node);
    }
    Ok(JlctTree {
        root_id: 1,
        nodes,
        roles: roles.clone(),
        controls: *controls,
        shared_baseline: false,
        leaf_models: Vec::new(),
        root_fit: None,
        longitudinal_model: None,
    })
}

/// Single-node tree: every row in one class.
pub fn stump(data: &LtrcDataset, roles: &VariableRoles, controls: &SplitControls) -> Result<JlctTree, TreeError> {
    controls.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut test = node_test_rows(data, &all, &roles.survival_vars, controls, None);
    test.full_fit = None;
    test.null_fit = None;
    let mut nodes = BTreeMap::new();
    nodes.insert(
        1,
        TreeNode {
            id: 1,
            depth: 0,
            test,
            split: None,
            children: None,
            row_fraction: 1.0,
            closure: Some(Closure::Disabled),
        },
    );
    Ok(JlctTree {
        root_id: 1,
        nodes,
        roles: roles.clone(),
        controls: *controls,
        shared_baseline: false,
        leaf_models: Vec::new(),
        root_fit: None,
        longitudinal_model: None,
    })
}

/// Collapse smallest-score leaf parents until at most `max_leaves` remain.
pub fn prune_to(mut tree: JlctTree, max_leaves: usize) -> JlctTree {
    let max_leaves = max_leaves.max(1);
    while tree.n_leaves() > max_leaves {
        let victim = tree
            .nodes
            .values()
            .filter_map(|n| {
                let (l, r) = n.children?;
                (tree.nodes[&l].is_leaf() && tree.nodes[&r].is_leaf())
                    .then(|| (n.id, n.split.as_ref().map_or(0.0, |s| s.score)))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id)
            .expect("a tree with several leaves has a leaf parent");
        let node = tree.nodes.get_mut(&victim).expect("victim exists");
        let (l, r) = node.children.take().expect("victim is internal");
        node.split = None;
        node.closure = Some(Closure::Pruned);
        tree.nodes.remove(&l);
        tree.nodes.remove(&r);
        tree.leaf_models.clear();
        tree.longitudinal_model = None;
    }
    tree
}

impl JlctTree {
    pub fn leaves(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.values().filter(|n| n.is_leaf()).count()
    }

    /// Leaf reached by a row whose values are looked up by name.
    pub fn route(&self, value: impl Fn(&str) -> Result<f64, DataError>) -> Result<usize, DataError> {
        let mut id = self.root_id;
        loop {
            let node = &self.nodes[&id];
            match (&node.split, node.children) {
                (Some(rule), Some((l, r))) => {
                    id = if value(&rule.variable)? <= rule.threshold { l } else { r };
                }
                _ => return Ok(id),
            }
        }
    }

    pub fn route_record(&self, covariate_names: &[String], covariates: &[f64]) -> Result<usize, DataError> {
        self.route(|name| {
            covariate_names
                .iter()
                .position(|n| n == name)
                .map(|j| covariates[j])
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        })
    }

    /// Leaf of every counting-process row.
    pub fn assign(&self, rows: &LtrcDataset) -> Result<Vec<usize>, DataError> {
        let cols: BTreeMap<&str, &[f64]> = self
            .nodes
            .values()
            .filter_map(|n| n.split.as_ref())
            .map(|s| rows.column(&s.variable).map(|c| (s.variable.as_str(), c)))
            .collect::<Result<_, _>>()?;
        (0..rows.len())
            .map(|k| self.route(|name| Ok(cols[name][k])))
            .collect()
    }

    /// Leaf of every record of a long dataset, in subject then time order.
    pub fn assign_records(&self, data: &LongDataset) -> Result<Vec<usize>, DataError> {
        let mut out = Vec::with_capacity(data.n_records());
        for s in data.subjects() {
            for r in &s.records {
                out.push(self.route_record(data.covariate_names(), &r.covariates)?);
            }
        }
        Ok(out)
    }

    /// Fit per-leaf survival models and the longitudinal model.
    pub fn fit_leaf_models(
        &mut self,
        data: &LtrcDataset,
        long_data: &LongDataset,
        shared_baseline: bool,
    ) -> Result<(), TreeError> {
        let vars = self.roles.survival_vars.clone();
        let opts = self.controls.cox;
        let root_fit = fit_cox_with(data, &vars, None, &opts);
        let fallback = |why: String| match &root_fit {
            Ok(f) => Ok(f.clone()),
            Err(e) => Err(TreeError::NoFallback(format!("{why}; root fit: {e}"))),
        };
        let leaves = self.leaves();
        let assigned = self.assign(data)?;
        let mut models = Vec::with_capacity(leaves.len());
        if shared_baseline && leaves.len() > 1 {
            let shared = fit_shared(data, &vars, &leaves, &assigned, &opts);
            for &leaf in &leaves {
                match &shared {
                    Ok(fits) if fits[&leaf].converged => models.push(LeafModel {
                        leaf,
                        fit: fits[&leaf].clone(),
                        flagged: false,
                    }),
                    _ => models.push(LeafModel {
                        leaf,
                        fit: fallback(format!("leaf {leaf}"))?,
                        flagged: true,
                    }),
                }
            }
        } else {
            for &leaf in &leaves {
                let rows: Vec<usize> = (0..data.len()).filter(|&k| assigned[k] == leaf).collect();
                match fit_rows(data, &rows, &vars, None, &opts) {
                    Ok(fit) if fit.converged => models.push(LeafModel {
                        leaf,
                        fit,
                        flagged: false,
                    }),
                    _ => models.push(LeafModel {
                        leaf,
                        fit: fallback(format!("leaf {leaf}"))?,
                        flagged: true,
                    }),
                }
            }
        }
        let memberships = self.assign_records(long_data)?;
        let lmm = fit_lmm(long_data, &memberships, &self.roles.fixed_vars, &self.roles.random_vars)?;
        self.leaf_models = models;
        self.root_fit = root_fit.ok();
        self.shared_baseline = shared_baseline;
        self.longitudinal_model = Some(lmm);
        Ok(())
    }

    pub fn leaf_model(&self, leaf: usize) -> Result<&LeafModel, TreeError> {
        self.leaf_models
            .iter()
            .find(|m| m.leaf == leaf)
            .ok_or(TreeError::NotFitted)
    }

    /// Predict survival up to `horizon` and the outcome at each measurement.
    ///
    /// Each measurement opens an interval routed to a leaf by its own
    /// covariates; the last interval extends to the horizon and the first
    /// one back to time zero. `subject_effect` is added to every outcome.
    pub fn predict(
        &self,
        covariate_names: &[String],
        subject: &Subject,
        horizon: f64,
        subject_effect: f64,
    ) -> Result<Prediction, TreeError> {
        if !(horizon > 0.0) {
            return Err(TreeError::Horizon(horizon));
        }
        if subject.records.is_empty() {
            return Err(TreeError::EmptySubject(subject.id.clone()));
        }
        let lmm = self.longitudinal_model.as_ref().ok_or(TreeError::NotFitted)?;
        let leaves = subject
            .records
            .iter()
            .map(|r| self.route_record(covariate_names, &r.covariates))
            .collect::<Result<Vec<_>, _>>()?;
        let mut jumps: Vec<(f64, f64)> = Vec::new();
        for (k, rec) in subject.records.iter().enumerate() {
            let lo = if k == 0 { f64::NEG_INFINITY } else { rec.time };
            let hi = subject.records.get(k + 1).map_or(horizon, |r| r.time.min(horizon));
            if k > 0 && lo >= horizon {
                break;
            }
            let fit = &self.leaf_model(leaves[k])?.fit;
            let x = fit
                .covariate_names
                .iter()
                .map(|n| {
                    covariate_names
                        .iter()
                        .position(|c| c == n)
                        .map(|j| rec.covariates[j])
                        .ok_or_else(|| DataError::MissingColumn(n.clone()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let risk = fit.linear_predictor(&x).exp();
            for (t, dh) in fit.baseline.increments() {
                if t > lo && t <= hi {
                    jumps.push((t, dh * risk));
                }
            }
        }
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut survival = StepCurve {
            times: Vec::with_capacity(jumps.len()),
            values: Vec::with_capacity(jumps.len()),
            horizon,
        };
        let mut cum = 0.0;
        for (t, dh) in jumps {
            cum += dh;
            if survival.times.last() == Some(&t) {
                *survival.values.last_mut().expect("nonempty") = (-cum).exp();
            } else {
                survival.times.push(t);
                survival.values.push((-cum).exp());
            }
        }
        let outcomes = subject
            .records
            .iter()
            .zip(&leaves)
            .map(|(r, &leaf)| Ok(lmm.predict_one(covariate_names, &r.covariates, leaf)? + subject_effect))
            .collect::<Result<Vec<_>, TreeError>>()?;
        Ok(Prediction {
            survival,
            outcomes,
            leaves,
        })
    }

    pub fn to_json(&self) -> Result<String, TreeError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Indented text rendering with TS and row share per node.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![self.root_id];
        while let Some(id) = stack.pop() {
            let n = &self.nodes[&id];
            let pad = "  ".repeat(n.depth);
            let _ = write!(
                out,
                "{pad}node {id}: TS = {:.2}, rows = {:.1}%",
                n.test.ts,
                100.0 * n.row_fraction
            );
            match (&n.split, n.children) {
                (Some(s), Some((l, r))) => {
                    let _ = writeln!(out, ", split {} <= {:.4} (score {:.2})", s.variable, s.threshold, s.score);
                    stack.push(r);
                    stack.push(l);
                }
                _ => {
                    let why = match n.closure {
                        Some(Closure::TsBelowThreshold) => "ts-below-threshold",
                        Some(Closure::Screen) => "screen",
                        Some(Closure::NoValidSplit) => "no-valid-split",
                        Some(Closure::Pruned) => "pruned",
                        Some(Closure::Disabled) => "splitting-disabled",
                        None => "leaf",
                    };
                    let _ = writeln!(out, ", leaf ({why})");
                }
            }
        }
        out
    }
}

/// One Cox model with leaf-specific slopes and a common baseline, unpacked
/// into per-leaf fits sharing that baseline.
fn fit_shared(
    data: &LtrcDataset,
    vars: &[String],
    leaves: &[usize],
    assigned: &[usize],
    opts: &crate::cox::CoxOptions,
) -> Result<BTreeMap<usize, CoxFit>, CoxError> {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for &leaf in leaves {
        for v in vars {
            let col = data.column(v)?;
            names.push(format!("{v}@{leaf}"));
            columns.push(
                (0..data.len())
                    .map(|k| if assigned[k] == leaf { col[k] } else { 0.0 })
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let inter = LtrcDataset::from_columns(
        names.clone(),
        data.outcome_name(),
        data.subject.clone(),
        data.start.clone(),
        data.stop.clone(),
        data.status.clone(),
        data.outcome.clone(),
        columns,
    )?;
    let joint = fit_cox_with(&inter, &names, None, opts)?;
    let p = vars.len();
    let mut out = BTreeMap::new();
    for (g, &leaf) in leaves.iter().enumerate() {
        let range = g * p..(g + 1) * p;
        out.insert(
            leaf,
            CoxFit {
                covariate_names: vars.to_vec(),
                coefficients: joint.coefficients[range.clone()].to_vec(),
                vcov: joint.vcov[range.clone()]
                    .iter()
                    .map(|row| row[range.clone()].to_vec())
                    .collect(),
                log_partial_lik: joint.log_partial_lik,
                n_events: (0..data.len()).filter(|&k| data.status[k] && assigned[k] == leaf).count(),
                n_rows: assigned.iter().filter(|&&a| a == leaf).count(),
                iterations: joint.iterations,
                converged: joint.converged,
                baseline: BaselineHazard::clone(&joint.baseline),
            },
        );
    }
    Ok(out)
}
