//! Evaluation metrics and the subject-level cross-validation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::SurvivalCurve;
use crate::data::LongDataset;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    Shape { left: usize, right: usize },
    #[error("curve ends at {curve} before the horizon {horizon}")]
    Coverage { curve: f64, horizon: f64 },
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error("no estimate for class {0}")]
    UnknownClass(usize),
    #[error("need at least {k} subjects for {k} folds, have {n}")]
    Folds { k: usize, n: usize },
    #[error("empty input")]
    Empty,
}

/// Uniform auxiliary points added to every integration grid.
pub const AUX_POINTS: usize = 512;

fn check_len(left: usize, right: usize) -> Result<(), MetricError> {
    if left != right {
        return Err(MetricError::Shape { left, right });
    }
    Ok(())
}

/// Grid on `[0, horizon]`: the given breakpoints plus uniform points.
fn grid(horizon: f64, breaks: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=AUX_POINTS)
        .map(|k| horizon * k as f64 / AUX_POINTS as f64)
        .collect();
    g.extend(breaks.into_iter().filter(|&t| t > 0.0 && t < horizon));
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

/// Trapezoid rule where each panel uses the value at its left end and the
/// left limit at its right end, so step functions with jumps on the grid
/// integrate exactly.
fn integrate(f: impl Fn(f64) -> f64, grid: &[f64]) -> f64 {
    grid.windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let left_limit = f(a + (b - a) * (1.0 - 1e-9));
            0.5 * (b - a) * (f(a) + left_limit)
        })
        .sum()
}

/// Mean over subjects of the time-averaged squared gap between predicted and
/// true survival on `[0, horizon]`.
pub fn ise<P: SurvivalCurve, T: SurvivalCurve>(predicted: &[P], truth: &[T], horizon: f64) -> Result<f64, MetricError> {
    check_len(predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    if !(horizon > 0.0) {
        return Err(MetricError::Horizon(horizon));
    }
    let mut total = 0.0;
    for (p, s) in predicted.iter().zip(truth) {
        for end in [p.horizon(), s.horizon()] {
            if end < horizon {
                return Err(MetricError::Coverage { curve: end, horizon });
            }
        }
        let g = grid(horizon, p.breakpoints().into_iter().chain(s.breakpoints()));
        total += integrate(|t| (p.survival(t) - s.survival(t)).powi(2), &g) / horizon;
    }
    Ok(total / predicted.len() as f64)
}

pub fn mse_y(predicted: &[f64], actual: &[f64]) -> Result<f64, MetricError> {
    check_len(predicted.len(), actual.len())?;
    if predicted.is_empty() {
        return Err(MetricError::Empty);
    }
    let sum: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Row average of the squared distance between the slope estimate of each
/// row's assigned class and the row's true slopes.
pub fn mse_b(
    estimates: &BTreeMap<usize, Vec<f64>>,
    assigned: &[usize],
    true_slopes: &[Vec<f64>],
) -> Result<f64, MetricError> {
    check_len(assigned.len(), true_slopes.len())?;
    if assigned.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (class, truth) in assigned.iter().zip(true_slopes) {
        let est = estimates.get(class).ok_or(MetricError::UnknownClass(*class))?;
        check_len(est.len(), truth.len())?;
        sum += est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(sum / assigned.len() as f64)
}

/// Accuracy of labelling each leaf with the majority true class of its rows.
/// Ties go to the smaller class id.
pub fn acc_g(leaves: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    check_len(leaves.len(), truth.len())?;
    if leaves.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&leaf, &g) in leaves.iter().zip(truth) {
        *counts.entry(leaf).or_default().entry(g).or_default() += 1;
    }
    // BTreeMap iteration is in class order, so `>` keeps the smaller id
    let correct: usize = counts
        .values()
        .map(|c| c.values().fold(0, |best, &n| if n > best { n } else { best }))
        .sum();
    Ok(correct as f64 / leaves.len() as f64)
}

/// Brier score at `t`. With `exclude_censored`, subjects censored at or
/// before `t` have unknown status and are left out.
pub fn brier<P: SurvivalCurve>(
    predicted: &[P],
    times: &[f64],
    status: &[bool],
    t: f64,
    exclude_censored: bool,
) -> Result<f64, MetricError> {
    check_len(predicted.len(), times.len())?;
    check_len(times.len(), status.len())?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, &y), &d) in predicted.iter().zip(times).zip(status) {
        if exclude_censored && !d && y <= t {
            continue;
        }
        let alive = if y > t { 1.0 } else { 0.0 };
        sum += (alive - p.survival(t)).powi(2);
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(sum / n as f64)
}

/// Brier score averaged over `[0, max Y]`.
pub fn ibs<P: SurvivalCurve>(
    predicted: &[P],
    times: &[f64],
    status: &[bool],
    exclude_censored: bool,
) -> Result<f64, MetricError> {
    check_len(predicted.len(), times.len())?;
    check_len(times.len(), status.len())?;
    let horizon = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(horizon > 0.0) {
        return Err(MetricError::Horizon(horizon));
    }
    let breaks = times
        .iter()
        .copied()
        .chain(predicted.iter().flat_map(|p| p.breakpoints()));
    let g = grid(horizon, breaks);
    let integral = integrate(
        |t| brier(predicted, times, status, t, exclude_censored).expect("lengths checked"),
        &g,
    );
    Ok(integral / horizon)
}

/// Metrics for one fitted model. Entries that do not apply (no ground truth,
/// for instance) are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ise_in: Option<f64>,
    pub ise_out: Option<f64>,
    pub mse_y_in: Option<f64>,
    pub mse_y_out: Option<f64>,
    pub mse_b: Option<f64>,
    pub acc_g: Option<f64>,
    pub ibs: Option<f64>,
    pub n_terminal: Option<f64>,
    pub runtime_seconds: Option<f64>,
}

impl MetricReport {
    pub const KEYS: [&'static str; 9] = [
        "ise_in",
        "ise_out",
        "mse_y_in",
        "mse_y_out",
        "mse_b",
        "acc_g",
        "ibs",
        "n_terminal",
        "runtime_seconds",
    ];

    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.ise_in,
            self.ise_out,
            self.mse_y_in,
            self.mse_y_out,
            self.mse_b,
            self.acc_g,
            self.ibs,
            self.n_terminal,
            self.runtime_seconds,
        ]
    }

    fn from_values(v: [Option<f64>; 9]) -> Self {
        MetricReport {
            ise_in: v[0],
            ise_out: v[1],
            mse_y_in: v[2],
            mse_y_out: v[3],
            mse_b: v[4],
            acc_g: v[5],
            ibs: v[6],
            n_terminal: v[7],
            runtime_seconds: v[8],
        }
    }

    /// Entrywise mean over the reports where the entry is present.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut out = [None; 9];
        for (k, slot) in out.iter_mut().enumerate() {
            let present: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
            if !present.is_empty() {
                *slot = Some(present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        MetricReport::from_values(out)
    }

    /// `key = value` lines; missing entries print as `NA`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k} = {}", fmt_value(v));
        }
        out
    }

    pub fn csv_header() -> String {
        Self::KEYS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(|v| fmt_value(*v)).collect::<Vec<_>>().join(",")
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Fold of each subject: shuffle positions with `seed`, then deal them out
/// round-robin, so fold sizes differ by at most one.
pub fn fold_assignment(n_subjects: usize, k: usize, seed: u64) -> Result<Vec<usize>, MetricError> {
    if k < 2 || n_subjects < k {
        return Err(MetricError::Folds { k, n: n_subjects });
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_subjects];
    for (pos, &subject) in order.iter().enumerate() {
        fold[subject] = pos % k;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<MetricReport>,
    pub mean: MetricReport,
}

/// K-fold cross-validation over subjects. `fit_eval` receives the training
/// and held-out subjects of one fold.
pub fn kfold_cv<E, F>(data: &LongDataset, k: usize, seed: u64, fit_eval: F) -> Result<CvReport, E>
where
    E: From<MetricError> + Send,
    F: Fn(&LongDataset, &LongDataset) -> Result<MetricReport, E> + Sync,
{
    let fold = fold_assignment(data.n_subjects(), k, seed)?;
    let folds = (0..k)
        .into_par_iter()
        .map(|f| {
            let test: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] == f).collect();
            let train: Vec<usize> = (0..fold.len()).filter(|&i| fold[i] != f).collect();
            fit_eval(&data.select_subjects(&train), &data.select_subjects(&test))
        })
        .collect::<Result<Vec<_>, E>>()?;
    let mean = MetricReport::mean(&folds);
    Ok(CvReport { folds, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::{FnCurve, StepCurve};
    use crate::data::{LongRecord, Subject, SubjectEvent};

    /// Composite Simpson on a fine grid, independent of the trapezoid path.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn ise_smooth_matches_quadrature() {
        let p = FnCurve::new(|t: f64| (-t).exp());
        let s = FnCurve::new(|t: f64| (-2.0 * t).exp());
        let got = ise(&[p], &[s], 5.0).unwrap();
        let want = simpson(|t| ((-t).exp() - (-2.0 * t).exp()).powi(2), 0.0, 5.0) / 5.0;
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn ise_identities() {
        let s = StepCurve {
            times: vec![0.5, 1.2],
            values: vec![0.7, 0.2],
            horizon: 3.0,
        };
        assert_eq!(ise(&[s.clone()], &[s.clone()], 3.0).unwrap(), 0.0);
        let one = StepCurve::constant(1.0, 3.0);
        let zero = StepCurve::constant(0.0, 3.0);
        assert!((ise(&[one.clone()], &[zero], 3.0).unwrap() - 1.0).abs() < 1e-9);
        // step against constant 1: 0.3^2 * 0.7 + 0.8^2 * 1.8, over 3
        let want = (0.09 * 0.7 + 0.64 * 1.8) / 3.0;
        assert!((ise(&[s], &[one], 3.0).unwrap() - want).abs() < 1e-9);
        let short = StepCurve::constant(1.0, 2.0);
        assert!(matches!(
            ise(&[short.clone()], &[short], 3.0),
            Err(MetricError::Coverage { .. })
        ));
    }

    #[test]
    fn mse_y_cases() {
        assert_eq!(mse_y(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mse_y(&[1.5, 2.5, 0.5], &[1.0, 2.0, 0.0]).unwrap() - 0.25).abs() < 1e-15);
        let p = [0.3, -1.2, 2.0, 0.0, 1.1, 0.9, -0.4, 3.3, 2.2, 1.0];
        let a = [0.1, -1.0, 2.5, 0.2, 1.0, 1.0, -0.4, 3.0, 2.0, 0.0];
        // squared gaps: .04 .04 .25 .04 .01 .01 0 .09 .04 1
        assert!((mse_y(&p, &a).unwrap() - 0.152).abs() < 1e-12);
        assert!(matches!(mse_y(&[1.0], &[]), Err(MetricError::Shape { .. })));
    }

    #[test]
    fn mse_b_cases() {
        let mut est = BTreeMap::new();
        est.insert(1, vec![0.1, 0.0, 0.0]);
        assert!((mse_b(&est, &[1, 1], &[vec![0.0; 3], vec![0.0; 3]]).unwrap() - 0.01).abs() < 1e-15);
        est.insert(2, vec![1.0, 1.0, 0.0]);
        // rows: (1 -> 0) 0.01, (2 -> [1,0,0]) 1, (2 -> [1,1,0]) 0
        let truth = vec![vec![0.0; 3], vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]];
        assert!((mse_b(&est, &[1, 2, 2], &truth).unwrap() - 1.01 / 3.0).abs() < 1e-15);
        assert!(matches!(mse_b(&est, &[7], &[vec![0.0; 3]]), Err(MetricError::UnknownClass(7))));
    }

    #[test]
    fn acc_g_cases() {
        assert_eq!(acc_g(&[2, 2, 3], &[4, 4, 1]).unwrap(), 1.0);
        assert_eq!(acc_g(&[1, 1, 1, 1, 1], &[1, 2, 3, 4, 4]).unwrap(), 0.4);
        // leaf 5: classes {1,1,2} -> 2 right; leaf 6: {3,4} tie -> 3, 1 right
        assert_eq!(acc_g(&[5, 5, 5, 6, 6], &[1, 1, 2, 4, 3]).unwrap(), 0.6);
    }

    #[test]
    fn half_predictor_gives_quarter() {
        let curves = vec![StepCurve::constant(0.5, f64::INFINITY); 4];
        let times = [0.7, 1.9, 3.1, 4.0];
        let status = [true, false, true, false];
        for t in [0.1, 1.0, 3.5] {
            assert_eq!(brier(&curves, &times, &status, t, false).unwrap(), 0.25);
        }
        assert_eq!(ibs(&curves, &times, &status, false).unwrap(), 0.25);
    }

    #[test]
    fn brier_hand_case() {
        let c = |v: f64| StepCurve::constant(v, 10.0);
        let curves = [c(0.9), c(0.4), c(0.2)];
        let times = [1.0, 2.0, 3.0];
        let status = [true, false, true];
        // at 1.5: (0 - .9)^2 + (1 - .4)^2 + (1 - .2)^2 = .81 + .36 + .64
        let got = brier(&curves, &times, &status, 1.5, false).unwrap();
        assert!((got - 1.81 / 3.0).abs() < 1e-12);
        // at 2.5 with exclusion, subject 2 (censored at 2) drops out
        let got = brier(&curves, &times, &status, 2.5, true).unwrap();
        assert!((got - (0.81 + 0.64) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_brier_is_zero() {
        let times = [1.0, 2.0];
        let curves: Vec<StepCurve> = times
            .iter()
            .map(|&y| StepCurve {
                times: vec![y],
                values: vec![0.0],
                horizon: 5.0,
            })
            .collect();
        assert_eq!(ibs(&curves, &times, &[true, true], false).unwrap(), 0.0);
    }

    fn toy_data(n: usize) -> LongDataset {
        let subjects = (0..n)
            .map(|i| Subject {
                id: format!("s{i}"),
                records: vec![LongRecord {
                    time: 0.0,
                    outcome: i as f64,
                    covariates: vec![0.0],
                }],
                event: SubjectEvent {
                    event_time: 1.0,
                    status: true,
                },
            })
            .collect();
        LongDataset::new(vec!["x".into()], "y", subjects).unwrap()
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(23, 5, 9).unwrap();
        assert_eq!(a, fold_assignment(23, 5, 9).unwrap());
        let mut sizes = [0usize; 5];
        for f in &a {
            sizes[*f] += 1;
        }
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(fold_assignment(3, 5, 1).is_err());
        assert!(fold_assignment(3, 1, 1).is_err());
    }

    #[test]
    fn leave_one_out_runs_each_subject() {
        let data = toy_data(5);
        let cv = kfold_cv(&data, 5, 1, |train, test| {
            assert_eq!(train.n_subjects(), 4);
            assert_eq!(test.n_subjects(), 1);
            Ok::<_, MetricError>(MetricReport {
                mse_y_out: Some(test.subjects()[0].records[0].outcome),
                ..Default::default()
            })
        })
        .unwrap();
        assert_eq!(cv.folds.len(), 5);
        let mut seen: Vec<f64> = cv.folds.iter().map(|r| r.mse_y_out.unwrap()).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cv.mean.mse_y_out, Some(2.0));
        assert_eq!(cv.mean.ise_out, None);
    }

    #[test]
    fn report_renders() {
        let r = MetricReport {
            ise_out: Some(0.5),
            ..Default::default()
        };
        assert!(r.to_kv().contains("ise_out = 0.5"));
        assert!(r.to_kv().contains("acc_g = NA"));
        assert_eq!(r.csv_row().split(',').count(), MetricReport::csv_header().split(',').count());
    }
}
