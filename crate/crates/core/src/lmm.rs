//! Linear mixed model for the longitudinal outcome given class memberships.
//!
//! `y = X^f beta + (class terms on 1, X^r) + v_i + e`, with a subject random
//! intercept `v_i ~ N(0, s1^2)` and residual `e ~ N(0, s2^2)`. Class terms are
//! estimated as fixed contrasts. Fitting is maximum likelihood, profiled over
//! the variance ratio `gamma = s1^2 / s2^2`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LongDataset};

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("need at least two subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("expected {expected} memberships, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("class {0} is not part of the fitted model")]
    UnknownClass(usize),
    #[error("fixed-effect design is empty after removing aliased columns")]
    EmptyDesign,
    #[error(transparent)]
    Data(#[from] DataError),
}

const GAMMA_MIN: f64 = 1e-8;
const GAMMA_MAX: f64 = 1e8;
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Term {
    ClassIntercept(usize),
    ClassSlope(usize, String),
    Fixed(String),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::ClassIntercept(g) => format!("class[{g}]"),
            Term::ClassSlope(g, v) => format!("class[{g}]:{v}"),
            Term::Fixed(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEffect {
    pub class: usize,
    pub intercept: f64,
    /// Coefficients on the random-effect covariates, in `random_vars` order.
    pub slopes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub fixed_vars: Vec<String>,
    pub random_vars: Vec<String>,
    pub terms: Vec<Term>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Fixed-effect coefficients in `fixed_vars` order (0 when aliased).
    pub fixed_effects: Vec<f64>,
    pub class_effects: Vec<ClassEffect>,
    pub dropped_terms: Vec<String>,
    pub var_subject: f64,
    pub var_resid: f64,
    pub var_class: f64,
    pub variance_ratio: f64,
    /// The variance ratio sits on the edge of its search range.
    pub boundary: bool,
    pub loglik: f64,
    pub subject_effects: BTreeMap<String, f64>,
}

/// Per-subject sufficient statistics of the design.
struct Moments {
    n: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    /// Per distinct subject size: (size, sum of sx sx', sum of sx sy, sum of sy^2).
    groups: Vec<(usize, DMatrix<f64>, DVector<f64>, f64)>,
}

impl Moments {
    fn new(design: &DMatrix<f64>, y: &[f64], sizes: &[usize]) -> Self {
        let (n, p) = design.shape();
        let yv = DVector::from_column_slice(y);
        let mut groups: BTreeMap<usize, (DMatrix<f64>, DVector<f64>, f64)> = BTreeMap::new();
        let mut row = 0;
        for &ni in sizes {
            let mut sx = DVector::zeros(p);
            let mut sy = 0.0;
            for r in row..row + ni {
                sx += design.row(r).transpose();
                sy += y[r];
            }
            let e = groups
                .entry(ni)
                .or_insert_with(|| (DMatrix::zeros(p, p), DVector::zeros(p), 0.0));
            e.0 += &sx * sx.transpose();
            e.1 += &sx * sy;
            e.2 += sy * sy;
            row += ni;
        }
        Moments {
            n,
            xtx: design.transpose() * design,
            xty: design.transpose() * &yv,
            yty: yv.dot(&yv),
            groups: groups.into_iter().map(|(k, (a, b, c))| (k, a, b, c)).collect(),
        }
    }

    fn c(gamma: f64, ni: usize) -> f64 {
        gamma / (1.0 + ni as f64 * gamma)
    }

    /// GLS solution, residual variance, log-likelihood, and `X'WX`.
    fn solve(&self, gamma: f64) -> Option<(DVector<f64>, f64, f64, DMatrix<f64>)> {
        let mut a = self.xtx.clone();
        let mut b = self.xty.clone();
        let mut ywy = self.yty;
        for (ni, sxx, sxy, syy) in &self.groups {
            let c = Self::c(gamma, *ni);
            a -= sxx * c;
            b -= sxy * c;
            ywy -= c * syy;
        }
        let chol = a.clone().cholesky()?;
        let beta = chol.solve(&b);
        let rss = (ywy - b.dot(&beta)).max(0.0);
        let s2 = (rss / self.n as f64).max(VAR_FLOOR);
        Some((beta, s2, rss, a))
    }
}

/// Profiled ML log-likelihood at a given variance ratio.
fn profiled(m: &Moments, sizes_count: &[(usize, usize)], gamma: f64) -> Option<f64> {
    let (_, s2, _, _) = m.solve(gamma)?;
    let logdet: f64 = sizes_count
        .iter()
        .map(|&(ni, k)| k as f64 * (1.0 + ni as f64 * gamma).ln())
        .sum();
    let n = m.n as f64;
    Some(-0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0) - 0.5 * logdet)
}

/// Columns of `x` kept by Gram-Schmidt with relative tolerance.
fn independent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let (n, p) = x.shape();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..p {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col;
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v -= q * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * norm0 && n > 0 {
            basis.push(v / norm);
            keep.push(j);
        }
    }
    keep
}

struct Layout {
    fixed_idx: Vec<usize>,
    random_idx: Vec<usize>,
}

impl Layout {
    fn resolve(names: &[String], fixed: &[String], random: &[String]) -> Result<Self, DataError> {
        let find = |v: &String| {
            names
                .iter()
                .position(|n| n == v)
                .ok_or_else(|| DataError::MissingColumn(v.clone()))
        };
        Ok(Layout {
            fixed_idx: fixed.iter().map(find).collect::<Result<_, _>>()?,
            random_idx: random.iter().map(find).collect::<Result<_, _>>()?,
        })
    }
}

fn term_value(term: &Term, layout: &Layout, fit_vars: (&[String], &[String]), x: &[f64], class: usize) -> f64 {
    match term {
        Term::ClassIntercept(g) => (*g == class) as u8 as f64,
        Term::ClassSlope(g, v) => {
            if *g != class {
                return 0.0;
            }
            let k = fit_vars.1.iter().position(|r| r == v).expect("term built from random_vars");
            x[layout.random_idx[k]]
        }
        Term::Fixed(v) => {
            let k = fit_vars.0.iter().position(|f| f == v).expect("term built from fixed_vars");
            x[layout.fixed_idx[k]]
        }
    }
}

/// Fit the mixed model; `memberships` holds one class id per record, in
/// subject then time order.
pub fn fit_lmm(
    long_data: &LongDataset,
    memberships: &[usize],
    fixed_vars: &[String],
    random_vars: &[String],
) -> Result<LmmFit, LmmError> {
    let n_subj = long_data.n_subjects();
    if n_subj < 2 {
        return Err(LmmError::TooFewSubjects(n_subj));
    }
    let n = long_data.n_records();
    if memberships.len() != n {
        return Err(LmmError::Shape {
            expected: n,
            found: memberships.len(),
        });
    }
    let layout = Layout::resolve(long_data.covariate_names(), fixed_vars, random_vars)?;
    let mut classes: Vec<usize> = memberships.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut all_terms = Vec::new();
    for &g in &classes {
        all_terms.push(Term::ClassIntercept(g));
        for v in random_vars {
            all_terms.push(Term::ClassSlope(g, v.clone()));
        }
    }
    for v in fixed_vars {
        all_terms.push(Term::Fixed(v.clone()));
    }

    let mut full = DMatrix::zeros(n, all_terms.len());
    let mut y = Vec::with_capacity(n);
    let mut sizes = Vec::with_capacity(n_subj);
    let mut r = 0;
    for s in long_data.subjects() {
        sizes.push(s.records.len());
        for rec in &s.records {
            for (j, t) in all_terms.iter().enumerate() {
                full[(r, j)] = term_value(t, &layout, (fixed_vars, random_vars), &rec.covariates, memberships[r]);
            }
            y.push(rec.outcome);
            r += 1;
        }
    }
    let keep = independent_columns(&full);
    if keep.is_empty() {
        return Err(LmmError::EmptyDesign);
    }
    let dropped_terms: Vec<String> = (0..all_terms.len())
        .filter(|j| !keep.contains(j))
        .map(|j| all_terms[j].label())
        .collect();
    let terms: Vec<Term> = keep.iter().map(|&j| all_terms[j].clone()).collect();
    let design = full.select_columns(&keep);

    let moments = Moments::new(&design, &y, &sizes);
    let mut size_count: BTreeMap<usize, usize> = BTreeMap::new();
    for &ni in &sizes {
        *size_count.entry(ni).or_default() += 1;
    }
    let size_count: Vec<(usize, usize)> = size_count.into_iter().collect();

    let (gamma, boundary) = maximize_ratio(|g| profiled(&moments, &size_count, g).unwrap_or(f64::NEG_INFINITY));
    let (beta, s2, _, a) = moments.solve(gamma).ok_or(LmmError::EmptyDesign)?;
    let loglik = profiled(&moments, &size_count, gamma).unwrap_or(f64::NEG_INFINITY);
    let cov = a
        .cholesky()
        .map(|c| c.inverse() * s2)
        .unwrap_or_else(|| DMatrix::from_element(beta.len(), beta.len(), f64::MAX));

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let std_errors: Vec<f64> = (0..coefficients.len()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let coef_of = |t: &Term| terms.iter().position(|u| u == t).map_or(0.0, |j| coefficients[j]);
    let fixed_effects = fixed_vars.iter().map(|v| coef_of(&Term::Fixed(v.clone()))).collect();
    let class_effects: Vec<ClassEffect> = classes
        .iter()
        .map(|&g| ClassEffect {
            class: g,
            intercept: coef_of(&Term::ClassIntercept(g)),
            slopes: random_vars
                .iter()
                .map(|v| coef_of(&Term::ClassSlope(g, v.clone())))
                .collect(),
        })
        .collect();
    let var_class = if class_effects.len() < 2 {
        0.0
    } else {
        let k = class_effects.len() as f64;
        let mean = class_effects.iter().map(|c| c.intercept).sum::<f64>() / k;
        class_effects.iter().map(|c| (c.intercept - mean).powi(2)).sum::<f64>() / (k - 1.0)
    };

    let mut subject_effects = BTreeMap::new();
    let mut r = 0;
    for s in long_data.subjects() {
        let ni = s.records.len();
        let resid: f64 = (r..r + ni)
            .map(|k| y[k] - design.row(k).transpose().dot(&beta))
            .sum();
        subject_effects.insert(s.id.clone(), Moments::c(gamma, ni) * resid);
        r += ni;
    }

    Ok(LmmFit {
        fixed_vars: fixed_vars.to_vec(),
        random_vars: random_vars.to_vec(),
        terms,
        coefficients,
        std_errors,
        fixed_effects,
        class_effects,
        dropped_terms,
        var_subject: gamma * s2,
        var_resid: s2,
        var_class,
        variance_ratio: gamma,
        boundary,
        loglik,
        subject_effects,
    })
}

/// Maximize over `gamma` on a log scale: coarse grid, then golden section.
fn maximize_ratio(f: impl Fn(f64) -> f64) -> (f64, bool) {
    let (lo, hi) = (GAMMA_MIN.ln(), GAMMA_MAX.ln());
    let steps = 80;
    let grid: Vec<f64> = (0..=steps).map(|k| lo + (hi - lo) * k as f64 / steps as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&u| f(u.exp())).collect();
    let mut best = 0;
    for k in 1..vals.len() {
        if vals[k] > vals[best] {
            best = k;
        }
    }
    let a0 = grid[best.saturating_sub(1)];
    let b0 = grid[(best + 1).min(steps)];
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a0, b0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c.exp()), f(d.exp()));
    while b - a > 1e-10 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d.exp());
        }
    }
    let mut u = 0.5 * (a + b);
    if vals[best] > f(u.exp()) {
        u = grid[best];
    }
    let boundary = u - lo < 1e-6 || hi - u < 1e-6 || best == 0 || best == steps;
    (u.exp(), boundary)
}

impl LmmFit {
    fn class_known(&self, class: usize) -> bool {
        self.class_effects.iter().any(|c| c.class == class)
    }

    /// Fixed plus class part for one record.
    pub fn predict_one(&self, covariate_names: &[String], covariates: &[f64], class: usize) -> Result<f64, LmmError> {
        if !self.class_known(class) {
            return Err(LmmError::UnknownClass(class));
        }
        let layout = Layout::resolve(covariate_names, &self.fixed_vars, &self.random_vars)?;
        Ok(self
            .terms
            .iter()
            .zip(&self.coefficients)
            .map(|(t, b)| b * term_value(t, &layout, (&self.fixed_vars, &self.random_vars), covariates, class))
            .sum())
    }
}

/// Predicted outcomes for every record of `data`. `subject_effects`, when
/// given, holds one random intercept per subject; otherwise zero is used.
pub fn predict_lmm(
    fit: &LmmFit,
    data: &LongDataset,
    memberships: &[usize],
    subject_effects: Option<&[f64]>,
) -> Result<Vec<f64>, LmmError> {
    if memberships.len() != data.n_records() {
        return Err(LmmError::Shape {
            expected: data.n_records(),
            found: memberships.len(),
        });
    }
    if let Some(v) = subject_effects {
        if v.len() != data.n_subjects() {
            return Err(LmmError::Shape {
                expected: data.n_subjects(),
                found: v.len(),
            });
        }
    }
    let mut out = Vec::with_capacity(data.n_records());
    let mut r = 0;
    for (i, s) in data.subjects().iter().enumerate() {
        let v = subject_effects.map_or(0.0, |e| e[i]);
        for rec in &s.records {
            out.push(fit.predict_one(data.covariate_names(), &rec.covariates, memberships[r])? + v);
            r += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LongRecord, Subject, SubjectEvent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `n` subjects with 3 records; class = subject index % classes.len().
    fn panel(seed: u64, n: usize, means: &[f64], sv: f64, se: f64) -> (LongDataset, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nv = Normal::new(0.0, sv).unwrap();
        let ne = Normal::new(0.0, se).unwrap();
        let mut subjects = Vec::new();
        let mut member = Vec::new();
        for i in 0..n {
            let g = i % means.len();
            let v = nv.sample(&mut rng);
            let records = (0..3)
                .map(|k| {
                    member.push(g + 1);
                    LongRecord {
                        time: k as f64,
                        outcome: means[g] + v + ne.sample(&mut rng),
                        covariates: vec![k as f64 * 0.1 + (i % 7) as f64],
                    }
                })
                .collect();
            subjects.push(Subject {
                id: (i + 1).to_string(),
                records,
                event: SubjectEvent {
                    event_time: 5.0,
                    status: false,
                },
            });
        }
        (LongDataset::new(names(&["x"]), "y", subjects).unwrap(), member)
    }

    #[test]
    fn constant_outcome() {
        let (mut d, m) = panel(1, 10, &[0.0], 0.0, 0.0);
        let subjects: Vec<Subject> = d
            .subjects()
            .iter()
            .cloned()
            .map(|mut s| {
                s.records.iter_mut().for_each(|r| r.outcome = 5.0);
                s
            })
            .collect();
        d = LongDataset::new(names(&["x"]), "y", subjects).unwrap();
        let fit = fit_lmm(&d, &m, &[], &[]).unwrap();
        assert!((fit.class_effects[0].intercept - 5.0).abs() < 1e-9);
        assert!(fit.var_resid <= 1e-12 + 1e-15);
        assert!(fit.var_subject <= 1e-6);
        let pred = predict_lmm(&fit, &d, &m, None).unwrap();
        assert!(pred.iter().all(|p| (p - 5.0).abs() < 1e-9));
    }

    #[test]
    fn recovers_class_means_and_variances() {
        let (d, m) = panel(2, 500, &[0.0, 1.0, 1.0, 2.0], 0.2, 0.1);
        let fit = fit_lmm(&d, &m, &[], &[]).unwrap();
        for (c, want) in fit.class_effects.iter().zip([0.0, 1.0, 1.0, 2.0]) {
            assert!((c.intercept - want).abs() < 0.05, "{c:?}");
        }
        let (sv, se) = (fit.var_subject.sqrt(), fit.var_resid.sqrt());
        assert!((0.15..=0.25).contains(&sv), "{sv}");
        assert!((0.08..=0.12).contains(&se), "{se}");
        assert!(!fit.boundary);
    }

    #[test]
    fn equal_means_give_null_contrast() {
        let (d, m) = panel(3, 300, &[1.0, 1.0], 0.2, 0.1);
        let fit = fit_lmm(&d, &m, &[], &[]).unwrap();
        let diff = fit.class_effects[0].intercept - fit.class_effects[1].intercept;
        let se = (fit.std_errors[0].powi(2) + fit.std_errors[1].powi(2)).sqrt();
        assert!(diff.abs() < 3.0 * se, "{diff} vs {se}");
    }

    #[test]
    fn optimum_beats_ols_and_is_stationary() {
        let (d, m) = panel(4, 200, &[0.0, 1.0], 0.3, 0.2);
        let fit = fit_lmm(&d, &m, &names(&["x"]), &[]).unwrap();
        assert_eq!(fit.terms.len(), 3);
        let prof = |g: f64| {
            let mut design = DMatrix::zeros(d.n_records(), 3);
            let mut y = vec![];
            let mut sizes = vec![];
            let mut r = 0;
            for s in d.subjects() {
                sizes.push(s.records.len());
                for rec in &s.records {
                    design[(r, 0)] = (m[r] == 1) as u8 as f64;
                    design[(r, 1)] = (m[r] == 2) as u8 as f64;
                    design[(r, 2)] = rec.covariates[0];
                    y.push(rec.outcome);
                    r += 1;
                }
            }
            let mom = Moments::new(&design, &y, &sizes);
            profiled(&mom, &[(3, sizes.len())], g).unwrap()
        };
        let g = fit.variance_ratio;
        assert!((prof(g) - fit.loglik).abs() < 1e-8);
        assert!(fit.loglik >= prof(GAMMA_MIN) - 1e-9);
        let h = 1e-4 * g;
        let deriv = (prof(g + h) - prof(g - h)) / (2.0 * h);
        let scale = (prof(g + 100.0 * h) - prof(g - 100.0 * h)).abs() / (200.0 * h) + 1e-3;
        assert!(deriv.abs() <= 1e-3 * scale.max(1.0), "{deriv}");
    }

    #[test]
    fn shift_equivariance() {
        let (d, m) = panel(5, 60, &[0.0, 1.0], 0.2, 0.1);
        let shifted: Vec<Subject> = d
            .subjects()
            .iter()
            .cloned()
            .map(|mut s| {
                s.records.iter_mut().for_each(|r| r.outcome += 3.0);
                s
            })
            .collect();
        let d2 = LongDataset::new(names(&["x"]), "y", shifted).unwrap();
        let f1 = fit_lmm(&d, &m, &names(&["x"]), &names(&["x"])).unwrap();
        let f2 = fit_lmm(&d2, &m, &names(&["x"]), &names(&["x"])).unwrap();
        let p1 = predict_lmm(&f1, &d, &m, None).unwrap();
        let p2 = predict_lmm(&f2, &d2, &m, None).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((b - a - 3.0).abs() < 1e-8);
        }
        // x appears both as fixed and per-class term; the fixed copy is aliased
        assert_eq!(f1.dropped_terms, vec!["x".to_string()]);
    }

    #[test]
    fn errors() {
        let (d, m) = panel(6, 10, &[0.0, 1.0], 0.2, 0.1);
        let one = d.select_subjects(&[0]);
        assert!(matches!(fit_lmm(&one, &m[..3], &[], &[]), Err(LmmError::TooFewSubjects(1))));
        assert!(matches!(fit_lmm(&d, &m[..5], &[], &[]), Err(LmmError::Shape { .. })));
        assert!(fit_lmm(&d, &m, &names(&["nope"]), &[]).is_err());
        let fit = fit_lmm(&d, &m, &[], &[]).unwrap();
        assert!(matches!(fit.predict_one(d.covariate_names(), &[0.0], 9), Err(LmmError::UnknownClass(9))));
        let p = fit.predict_one(d.covariate_names(), &[0.0], 1).unwrap();
        assert_eq!(p, fit.class_effects[0].intercept);
    }
}
