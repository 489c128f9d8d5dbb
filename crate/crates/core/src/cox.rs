//! Extended Cox proportional-hazards model on counting-process data.
//!
//! A row `(start, stop]` is at risk for an event at time `t` iff
//! `start < t <= stop`. Tied event times use the Breslow approximation, and
//! the baseline cumulative hazard is the Breslow estimator at the fitted
//! coefficients.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::StepCurve;
use crate::data::{DataError, LtrcDataset};

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("no events among {0} rows")]
    InsufficientEvents(usize),
    #[error("covariate `{0}` has no variation")]
    DegenerateDesign(String),
    #[error("information matrix is singular")]
    Singular,
    #[error("expected {expected} values, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("horizon must be positive, got {0}")]
    Horizon(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    pub max_halving: usize,
    /// Relative change in log partial likelihood.
    pub loglik_tol: f64,
    /// Max-norm of the score vector.
    pub grad_tol: f64,
    /// Coefficients beyond this magnitude mark a monotone likelihood.
    pub divergence_bound: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            max_iter: 25,
            max_halving: 10,
            loglik_tol: 1e-9,
            grad_tol: 1e-8,
            divergence_bound: 20.0,
        }
    }
}

/// Breslow cumulative baseline hazard, evaluated at each distinct event time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub event_times: Vec<f64>,
    pub cumulative_hazard: Vec<f64>,
}

impl BaselineHazard {
    pub fn at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative_hazard[k - 1]
        }
    }

    /// `(time, jump)` pairs.
    pub fn increments(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.event_times.iter().enumerate().map(move |(k, &t)| {
            let prev = if k == 0 { 0.0 } else { self.cumulative_hazard[k - 1] };
            (t, self.cumulative_hazard[k] - prev)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub covariate_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Inverse observed information at the solution.
    pub vcov: Vec<Vec<f64>>,
    pub log_partial_lik: f64,
    pub n_events: usize,
    pub n_rows: usize,
    pub iterations: usize,
    pub converged: bool,
    pub baseline: BaselineHazard,
}

impl CoxFit {
    pub fn max_variance(&self) -> f64 {
        (0..self.vcov.len())
            .map(|j| self.vcov[j][j])
            .fold(0.0, f64::max)
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

/// Counting-process problem prepared for repeated likelihood evaluation.
pub(crate) struct CoxProblem {
    n: usize,
    p: usize,
    start: Vec<f64>,
    stop: Vec<f64>,
    /// Row-major, centered.
    x: Vec<f64>,
    means: Vec<f64>,
    offset: Vec<f64>,
    by_stop: Vec<usize>,
    by_start: Vec<usize>,
    /// Distinct event times, descending.
    times: Vec<f64>,
    event_rows: Vec<usize>,
    event_ptr: Vec<usize>,
    n_events: usize,
}

pub(crate) struct Work {
    eta: Vec<f64>,
    w: Vec<f64>,
    in_risk: Vec<bool>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    pub grad: Vec<f64>,
    pub info: Vec<f64>,
}

impl Work {
    fn new(n: usize, p: usize) -> Self {
        Work {
            eta: vec![0.0; n],
            w: vec![0.0; n],
            in_risk: vec![false; n],
            s1: vec![0.0; p],
            s2: vec![0.0; p * p],
            grad: vec![0.0; p],
            info: vec![0.0; p * p],
        }
    }
}

struct Estimate {
    beta: Vec<f64>,
    loglik: f64,
    grad: Vec<f64>,
    info: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn solve_spd(info: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let p = rhs.len();
    let m = DMatrix::from_row_slice(p, p, info);
    let chol = m.cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    x.iter().all(|v| v.is_finite()).then(|| x.iter().copied().collect())
}

fn invert_spd(info: &[f64], p: usize) -> Option<Vec<Vec<f64>>> {
    let m = DMatrix::from_row_slice(p, p, info);
    let inv = m.cholesky()?.inverse();
    let out: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..p).map(|j| 0.5 * (inv[(i, j)] + inv[(j, i)])).collect())
        .collect();
    out.iter().flatten().all(|v| v.is_finite()).then_some(out)
}

impl CoxProblem {
    /// Gather `rows` of `data` with the given columns. `offset`, when given,
    /// is indexed like `data`.
    pub(crate) fn build(
        data: &LtrcDataset,
        rows: &[usize],
        names: &[String],
        offset: Option<&[f64]>,
    ) -> Result<Self, CoxError> {
        let columns = names
            .iter()
            .map(|name| data.column(name))
            .collect::<Result<Vec<_>, _>>()?;
        let n = rows.len();
        let p = columns.len();
        let start: Vec<f64> = rows.iter().map(|&k| data.start[k]).collect();
        let stop: Vec<f64> = rows.iter().map(|&k| data.stop[k]).collect();
        let status: Vec<bool> = rows.iter().map(|&k| data.status[k]).collect();
        let n_events = status.iter().filter(|&&s| s).count();
        if n_events == 0 {
            return Err(CoxError::InsufficientEvents(n));
        }
        let mut means = vec![0.0; p];
        for (j, col) in columns.iter().enumerate() {
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for &k in rows {
                let v = col[k];
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            if !(hi > lo) {
                return Err(CoxError::DegenerateDesign(names[j].clone()));
            }
            means[j] = sum / n as f64;
        }
        let mut x = vec![0.0; n * p];
        for (i, &k) in rows.iter().enumerate() {
            for (j, col) in columns.iter().enumerate() {
                x[i * p + j] = col[k] - means[j];
            }
        }
        let offset = match offset {
            Some(o) => rows.iter().map(|&k| o[k]).collect(),
            None => vec![0.0; n],
        };
        let mut by_stop: Vec<usize> = (0..n).collect();
        by_stop.sort_by(|&a, &b| stop[b].total_cmp(&stop[a]).then(a.cmp(&b)));
        let mut by_start: Vec<usize> = (0..n).collect();
        by_start.sort_by(|&a, &b| start[b].total_cmp(&start[a]).then(a.cmp(&b)));

        let mut times = Vec::new();
        let mut event_rows = Vec::with_capacity(n_events);
        let mut event_ptr = vec![0];
        for &i in &by_stop {
            if !status[i] {
                continue;
            }
            if times.last() != Some(&stop[i]) {
                if !times.is_empty() {
                    event_ptr.push(event_rows.len());
                }
                times.push(stop[i]);
            }
            event_rows.push(i);
        }
        event_ptr.push(event_rows.len());

        Ok(CoxProblem {
            n,
            p,
            start,
            stop,
            x,
            means,
            offset,
            by_stop,
            by_start,
            times,
            event_rows,
            event_ptr,
            n_events,
        })
    }

    pub(crate) fn work(&self) -> Work {
        Work::new(self.n, self.p)
    }

    fn linear_predictors(&self, beta: &[f64], w: &mut Work) -> f64 {
        let p = self.p;
        let mut shift = f64::NEG_INFINITY;
        for i in 0..self.n {
            let row = &self.x[i * p..(i + 1) * p];
            let eta = self.offset[i] + row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            w.eta[i] = eta;
            shift = shift.max(eta);
        }
        for i in 0..self.n {
            w.w[i] = (w.eta[i] - shift).exp();
        }
        shift
    }

    fn rebuild(&self, w: &mut Work, derivs: bool) -> f64 {
        let p = self.p;
        let mut s0 = 0.0;
        w.s1.iter_mut().for_each(|v| *v = 0.0);
        w.s2.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            if !w.in_risk[i] {
                continue;
            }
            let wi = w.w[i];
            s0 += wi;
            if derivs {
                let row = &self.x[i * p..(i + 1) * p];
                for a in 0..p {
                    w.s1[a] += wi * row[a];
                    for b in a..p {
                        w.s2[a * p + b] += wi * row[a] * row[b];
                    }
                }
            }
        }
        s0
    }

    /// Log partial likelihood at `beta`; score and information land in
    /// `w.grad` / `w.info` when `derivs` is set.
    pub(crate) fn eval(&self, beta: &[f64], w: &mut Work, derivs: bool) -> f64 {
        let p = self.p;
        let shift = self.linear_predictors(beta, w);
        w.in_risk.iter_mut().for_each(|v| *v = false);
        w.s1.iter_mut().for_each(|v| *v = 0.0);
        w.s2.iter_mut().for_each(|v| *v = 0.0);
        w.grad.iter_mut().for_each(|v| *v = 0.0);
        w.info.iter_mut().for_each(|v| *v = 0.0);
        let mut s0 = 0.0;
        let mut mass = 0.0;
        let mut ll = 0.0;
        let (mut ia, mut ir) = (0, 0);
        for (e, &t) in self.times.iter().enumerate() {
            while ia < self.n && self.stop[self.by_stop[ia]] >= t {
                let i = self.by_stop[ia];
                let wi = w.w[i];
                w.in_risk[i] = true;
                s0 += wi;
                mass += wi;
                if derivs {
                    let row = &self.x[i * p..(i + 1) * p];
                    for a in 0..p {
                        w.s1[a] += wi * row[a];
                        for b in a..p {
                            w.s2[a * p + b] += wi * row[a] * row[b];
                        }
                    }
                }
                ia += 1;
            }
            let mut removed = false;
            while ir < self.n && self.start[self.by_start[ir]] >= t {
                let i = self.by_start[ir];
                let wi = w.w[i];
                w.in_risk[i] = false;
                s0 -= wi;
                if derivs {
                    let row = &self.x[i * p..(i + 1) * p];
                    for a in 0..p {
                        w.s1[a] -= wi * row[a];
                        for b in a..p {
                            w.s2[a * p + b] -= wi * row[a] * row[b];
                        }
                    }
                }
                removed = true;
                ir += 1;
            }
            if removed && s0 < 1e-9 * mass {
                s0 = self.rebuild(w, derivs);
                mass = s0;
            }
            let rows = &self.event_rows[self.event_ptr[e]..self.event_ptr[e + 1]];
            let d = rows.len() as f64;
            let log_s0 = s0.ln() + shift;
            for &i in rows {
                ll += w.eta[i] - log_s0;
            }
            if derivs {
                for &i in rows {
                    let row = &self.x[i * p..(i + 1) * p];
                    for a in 0..p {
                        w.grad[a] += row[a];
                    }
                }
                for a in 0..p {
                    let ma = w.s1[a] / s0;
                    w.grad[a] -= d * ma;
                    for b in a..p {
                        let mb = w.s1[b] / s0;
                        w.info[a * p + b] += d * (w.s2[a * p + b] / s0 - ma * mb);
                    }
                }
            }
        }
        if derivs {
            for a in 0..p {
                for b in 0..a {
                    w.info[a * p + b] = w.info[b * p + a];
                }
            }
        }
        ll
    }

    fn newton(&self, init: Option<&[f64]>, opts: &CoxOptions) -> Result<Estimate, CoxError> {
        let p = self.p;
        let mut w = self.work();
        let mut beta = match init {
            Some(b) if b.len() == p && b.iter().all(|v| v.is_finite()) => b.to_vec(),
            _ => vec![0.0; p],
        };
        let mut ll = self.eval(&beta, &mut w, true);
        if !ll.is_finite() && init.is_some() {
            beta = vec![0.0; p];
            ll = self.eval(&beta, &mut w, true);
        }
        let mut grad = w.grad.clone();
        let mut info = w.info.clone();
        if p == 0 {
            return Ok(Estimate {
                beta,
                loglik: ll,
                grad,
                info,
                iterations: 0,
                converged: true,
            });
        }
        let mut iterations = 0;
        let mut converged = false;
        let mut cand = vec![0.0; p];
        while iterations < opts.max_iter {
            let step = match solve_spd(&info, &grad) {
                Some(s) => s,
                None if iterations == 0 => return Err(CoxError::Singular),
                None => break,
            };
            iterations += 1;
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=opts.max_halving {
                for j in 0..p {
                    cand[j] = beta[j] + scale * step[j];
                }
                let ll_new = self.eval(&cand, &mut w, true);
                if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs().max(1.0) {
                    accepted = Some(ll_new);
                    break;
                }
                scale *= 0.5;
            }
            let Some(ll_new) = accepted else {
                // no ascent possible from here
                converged = grad.iter().all(|g| g.abs() < opts.grad_tol);
                break;
            };
            let rel = (ll_new - ll).abs() / ll_new.abs().max(f64::MIN_POSITIVE);
            beta.copy_from_slice(&cand);
            ll = ll_new;
            grad.copy_from_slice(&w.grad);
            info.copy_from_slice(&w.info);
            if rel < opts.loglik_tol && grad.iter().all(|g| g.abs() < opts.grad_tol) {
                converged = true;
                break;
            }
        }
        if converged {
            let diverging = beta.iter().any(|b| b.abs() > opts.divergence_bound)
                || match solve_spd(&info, &grad) {
                    Some(step) => step
                        .iter()
                        .zip(&beta)
                        .any(|(s, b)| s.abs() > 1e-4 * b.abs().max(1.0)),
                    None => true,
                };
            converged = !diverging;
        }
        Ok(Estimate {
            beta,
            loglik: ll,
            grad,
            info,
            iterations,
            converged,
        })
    }

    /// Breslow increments at the distinct event times, ascending.
    fn breslow(&self, beta: &[f64]) -> BaselineHazard {
        let mut w = self.work();
        let shift = self.linear_predictors(beta, &mut w);
        let center: f64 = self.means.iter().zip(beta).map(|(m, b)| m * b).sum();
        let mut jumps = Vec::with_capacity(self.times.len());
        let mut s0 = 0.0;
        let mut mass = 0.0;
        let (mut ia, mut ir) = (0, 0);
        for (e, &t) in self.times.iter().enumerate() {
            while ia < self.n && self.stop[self.by_stop[ia]] >= t {
                let i = self.by_stop[ia];
                w.in_risk[i] = true;
                s0 += w.w[i];
                mass += w.w[i];
                ia += 1;
            }
            let mut removed = false;
            while ir < self.n && self.start[self.by_start[ir]] >= t {
                let i = self.by_start[ir];
                w.in_risk[i] = false;
                s0 -= w.w[i];
                removed = true;
                ir += 1;
            }
            if removed && s0 < 1e-9 * mass {
                s0 = self.rebuild(&mut w, false);
                mass = s0;
            }
            let d = (self.event_ptr[e + 1] - self.event_ptr[e]) as f64;
            jumps.push((t, d / (s0.ln() + shift + center).exp()));
        }
        jumps.reverse();
        let mut cum = 0.0;
        let mut out = BaselineHazard::default();
        for (t, dh) in jumps {
            cum += dh;
            out.event_times.push(t);
            out.cumulative_hazard.push(cum);
        }
        out
    }

    pub(crate) fn fit(
        &self,
        names: &[String],
        init: Option<&[f64]>,
        opts: &CoxOptions,
    ) -> Result<CoxFit, CoxError> {
        let est = self.newton(init, opts)?;
        let p = self.p;
        let vcov = invert_spd(&est.info, p).unwrap_or_else(|| {
            (0..p)
                .map(|i| (0..p).map(|j| if i == j { f64::MAX } else { 0.0 }).collect())
                .collect()
        });
        let _ = &est.grad;
        Ok(CoxFit {
            covariate_names: names.to_vec(),
            baseline: self.breslow(&est.beta),
            coefficients: est.beta,
            vcov,
            log_partial_lik: est.loglik,
            n_events: self.n_events,
            n_rows: self.n,
            iterations: est.iterations,
            converged: est.converged,
        })
    }
}

/// Fit the extended Cox model on all rows of `data`.
///
/// A fit whose Newton iteration fails (including monotone likelihoods with
/// diverging coefficients) comes back with `converged == false`.
pub fn fit_cox(
    data: &LtrcDataset,
    covariate_names: &[String],
    offsets: Option<&[f64]>,
) -> Result<CoxFit, CoxError> {
    fit_cox_with(data, covariate_names, offsets, &CoxOptions::default())
}

pub fn fit_cox_with(
    data: &LtrcDataset,
    covariate_names: &[String],
    offsets: Option<&[f64]>,
    opts: &CoxOptions,
) -> Result<CoxFit, CoxError> {
    if let Some(o) = offsets {
        if o.len() != data.len() {
            return Err(CoxError::Shape {
                expected: data.len(),
                found: o.len(),
            });
        }
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    CoxProblem::build(data, &rows, covariate_names, offsets)?.fit(covariate_names, None, opts)
}

/// Fit on a subset of rows, optionally warm-started.
pub(crate) fn fit_rows(
    data: &LtrcDataset,
    rows: &[usize],
    covariate_names: &[String],
    init: Option<&[f64]>,
    opts: &CoxOptions,
) -> Result<CoxFit, CoxError> {
    CoxProblem::build(data, rows, covariate_names, None)?.fit(covariate_names, init, opts)
}

fn problem_for(
    data: &LtrcDataset,
    covariate_names: &[String],
    coefficients: &[f64],
) -> Result<CoxProblem, CoxError> {
    if coefficients.len() != covariate_names.len() {
        return Err(CoxError::Shape {
            expected: covariate_names.len(),
            found: coefficients.len(),
        });
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    CoxProblem::build(data, &rows, covariate_names, None)
}

/// Breslow log partial likelihood at fixed coefficients.
pub fn loglik_at(
    data: &LtrcDataset,
    covariate_names: &[String],
    coefficients: &[f64],
) -> Result<f64, CoxError> {
    let prob = problem_for(data, covariate_names, coefficients)?;
    let mut w = prob.work();
    Ok(prob.eval(coefficients, &mut w, false))
}

/// Analytic score vector at fixed coefficients.
pub fn score_at(
    data: &LtrcDataset,
    covariate_names: &[String],
    coefficients: &[f64],
) -> Result<Vec<f64>, CoxError> {
    let prob = problem_for(data, covariate_names, coefficients)?;
    let mut w = prob.work();
    prob.eval(coefficients, &mut w, true);
    Ok(w.grad)
}

/// Piecewise-constant covariate history: piece `k` holds from `starts[k]`
/// (exclusive) until the next start, the last piece indefinitely. Times
/// before the first start use the first piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePath {
    pub names: Vec<String>,
    pub starts: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl CovariatePath {
    pub fn constant(names: Vec<String>, values: Vec<f64>) -> Self {
        CovariatePath {
            names,
            starts: vec![0.0],
            values: vec![values],
        }
    }

    /// Index of the piece in force at time `t` (at-risk convention `start < t`).
    pub fn piece_at(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s < t).saturating_sub(1)
    }

    pub fn index_of(&self, name: &str) -> Result<usize, DataError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }
}

/// Predicted survival under a covariate path:
/// `S(t) = exp(-sum_{s <= t} dH0(s) exp(x(s) b))`.
pub fn predict_survival(
    fit: &CoxFit,
    covariate_path: &CovariatePath,
    horizon: f64,
) -> Result<StepCurve, CoxError> {
    if !(horizon > 0.0) {
        return Err(CoxError::Horizon(horizon));
    }
    let idx = fit
        .covariate_names
        .iter()
        .map(|n| covariate_path.index_of(n))
        .collect::<Result<Vec<_>, _>>()?;
    let risk: Vec<f64> = covariate_path
        .values
        .iter()
        .map(|v| {
            let x: Vec<f64> = idx.iter().map(|&j| v[j]).collect();
            fit.linear_predictor(&x).exp()
        })
        .collect();
    let mut cum = 0.0;
    let mut curve = StepCurve {
        times: Vec::new(),
        values: Vec::new(),
        horizon,
    };
    for (t, dh) in fit.baseline.increments() {
        if t > horizon {
            break;
        }
        cum += dh * risk[covariate_path.piece_at(t)];
        curve.times.push(t);
        curve.values.push((-cum).exp());
    }
    Ok(curve)
}
