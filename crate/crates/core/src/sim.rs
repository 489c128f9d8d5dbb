//! Simulation bench: covariates, latent classes, event times, censoring and
//! longitudinal outcomes, with time-invariant or piecewise-constant covariates.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::SurvivalCurve;
use crate::data::{DataError, LongDataset, LongRecord, Subject, SubjectEvent};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("could not draw an event after entry for subject {0}")]
    Truncation(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Tree,
    Linear,
    Nonlinear,
    Asymmetric,
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Hazard {
    Exponential,
    WeibullD,
    WeibullI,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Censoring {
    None,
    Light,
    Heavy,
}

fn parse_err(kind: &str, s: &str) -> SimError {
    SimError::Config(format!("unknown {kind} `{s}`"))
}

impl FromStr for Structure {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "tree" => Ok(Structure::Tree),
            "linear" => Ok(Structure::Linear),
            "nonlinear" => Ok(Structure::Nonlinear),
            "asymmetric" | "asym" => Ok(Structure::Asymmetric),
            "null" => Ok(Structure::Null),
            _ => Err(parse_err("structure", s)),
        }
    }
}

impl FromStr for Hazard {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(Hazard::Exponential),
            "weibull-d" | "weibulld" => Ok(Hazard::WeibullD),
            "weibull-i" | "weibulli" => Ok(Hazard::WeibullI),
            _ => Err(parse_err("hazard", s)),
        }
    }
}

impl FromStr for Censoring {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Censoring::None),
            "light" => Ok(Censoring::Light),
            "heavy" => Ok(Censoring::Heavy),
            _ => Err(parse_err("censoring level", s)),
        }
    }
}

impl Censoring {
    pub fn target(self) -> f64 {
        match self {
            Censoring::None => 0.0,
            Censoring::Light => 0.2,
            Censoring::Heavy => 0.5,
        }
    }
}

impl Hazard {
    /// Baseline cumulative hazard.
    pub fn cumulative(self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            Hazard::Exponential => 0.1 * t,
            Hazard::WeibullD => t.powf(0.9),
            Hazard::WeibullI => (t / 2.0).powi(3),
        }
    }

    pub fn inverse_cumulative(self, h: f64) -> f64 {
        let h = h.max(0.0);
        match self {
            Hazard::Exponential => h / 0.1,
            Hazard::WeibullD => h.powf(1.0 / 0.9),
            Hazard::WeibullI => 2.0 * h.cbrt(),
        }
    }

    /// Slopes on `(X3, X4, X5)` for classes 1..4.
    pub fn slopes(self, class: usize) -> [f64; 3] {
        let table = match self {
            Hazard::Exponential => [[0.0, 0.0, 0.0], [0.56, 0.56, 0.09], [0.92, 0.92, 0.15], [1.46, 1.46, 0.24]],
            Hazard::WeibullD => [
                [-1.17, -1.17, -0.19],
                [-0.66, -0.66, -0.11],
                [-0.55, -0.55, -0.09],
                [0.0, 0.0, 0.0],
            ],
            Hazard::WeibullI => [
                [-3.22, -3.22, -0.54],
                [-2.26, -2.26, -0.38],
                [-1.53, -1.53, -0.26],
                [0.0, 0.0, 0.0],
            ],
        };
        table[class - 1]
    }
}

/// Class-specific longitudinal intercepts.
pub const CLASS_MEANS: [f64; 4] = [0.0, 1.0, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub structure: Structure,
    pub p0: f64,
    pub hazard: Hazard,
    pub censoring: Censoring,
    pub time_varying: bool,
    pub seed: u64,
    pub sigma_v: f64,
    pub sigma_e: f64,
}

impl SimConfig {
    pub fn new(structure: Structure, p0: f64, hazard: Hazard, censoring: Censoring, n_subjects: usize, seed: u64) -> Self {
        SimConfig {
            n_subjects,
            structure,
            p0,
            hazard,
            censoring,
            time_varying: true,
            seed,
            sigma_v: 0.2,
            sigma_e: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_subjects == 0 {
            return Err(SimError::Config("n_subjects must be positive".into()));
        }
        if !(0.25..=1.0).contains(&self.p0) {
            return Err(SimError::Config(format!("p0 = {} outside [0.25, 1]", self.p0)));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_e >= 0.0) {
            return Err(SimError::Config("standard deviations must be nonnegative".into()));
        }
        Ok(())
    }
}

const TREE_W: [[f64; 2]; 4] = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]];
const LINEAR_W: [[f64; 2]; 4] = [[0.8, -0.6], [0.9, 0.5], [-0.8, 0.6], [0.5, 0.9]];

fn scores(structure: Structure, x1: f64, x2: f64) -> Option<[f64; 4]> {
    let w = match structure {
        Structure::Tree => &TREE_W,
        Structure::Linear => &LINEAR_W,
        _ => return None,
    };
    Some(std::array::from_fn(|g| w[g][0] * (2.0 * x1 - 1.0) + w[g][1] * (2.0 * x2 - 1.0)))
}

/// Class with the largest score, or the region rule for the structures
/// defined geometrically. The null structure has a single class.
pub fn majority_class(structure: Structure, x1: f64, x2: f64) -> usize {
    match structure {
        Structure::Tree | Structure::Linear => {
            let f = scores(structure, x1, x2).expect("score structure");
            let mut best = 0;
            for g in 1..4 {
                if f[g] > f[best] {
                    best = g;
                }
            }
            best + 1
        }
        Structure::Nonlinear => {
            let r2 = 0.75 * 0.75;
            let low = x1 * x1 + x2 * x2 <= r2;
            let high = x1 * x1 + (1.0 - x2) * (1.0 - x2) <= r2;
            match (low, high) {
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
                (true, true) => 4,
            }
        }
        Structure::Asymmetric => {
            if x1 > 0.75 {
                1
            } else if x2 <= 0.33 {
                2
            } else if x2 <= 0.67 {
                3
            } else {
                4
            }
        }
        Structure::Null => 1,
    }
}

fn softmax_major_prob(f: &[f64; 4], c: f64) -> f64 {
    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = f.iter().map(|v| (c * (v - m)).exp()).sum();
    1.0 / z
}

fn concentration_cache() -> &'static Mutex<HashMap<(Structure, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(Structure, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Softmax concentration `C` making the majority class have average
/// probability `p0` over uniform `(X1, X2)`. `p0 = 1` gives infinity.
pub fn calibrate_concentration(structure: Structure, p0: f64) -> Result<f64, SimError> {
    if !matches!(structure, Structure::Tree | Structure::Linear) {
        return Err(SimError::Config(format!("{structure:?} has no concentration parameter")));
    }
    if !(0.25..=1.0).contains(&p0) {
        return Err(SimError::Config(format!("p0 = {p0} outside [0.25, 1]")));
    }
    if p0 >= 1.0 {
        return Ok(f64::INFINITY);
    }
    if p0 <= 0.25 {
        return Ok(0.0);
    }
    let key = (structure, p0.to_bits());
    if let Some(&c) = concentration_cache().lock().expect("cache lock").get(&key) {
        return Ok(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c0de);
    let draws: Vec<[f64; 4]> = (0..100_000)
        .map(|_| {
            let (x1, x2): (f64, f64) = (rng.random(), rng.random());
            scores(structure, x1, x2).expect("score structure")
        })
        .collect();
    let avg = |c: f64| draws.iter().map(|f| softmax_major_prob(f, c)).sum::<f64>() / draws.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while avg(hi) < p0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(SimError::Calibration(format!("no concentration reaches p0 = {p0}")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if avg(mid) < p0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    concentration_cache().lock().expect("cache lock").insert(key, c);
    Ok(c)
}

/// Draws a class given the majority class.
struct ClassSampler {
    structure: Structure,
    p0: f64,
    concentration: f64,
}

impl ClassSampler {
    fn new(structure: Structure, p0: f64) -> Result<Self, SimError> {
        let concentration = match structure {
            Structure::Tree | Structure::Linear => calibrate_concentration(structure, p0)?,
            _ => 0.0,
        };
        Ok(ClassSampler {
            structure,
            p0,
            concentration,
        })
    }

    fn draw(&self, x1: f64, x2: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let major = majority_class(self.structure, x1, x2);
        let u: f64 = rng.random();
        let class = match self.structure {
            Structure::Null => major,
            Structure::Tree | Structure::Linear => {
                if self.concentration.is_infinite() {
                    major
                } else {
                    let f = scores(self.structure, x1, x2).expect("score structure");
                    let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = f.iter().map(|v| (self.concentration * (v - m)).exp()).collect();
                    let total: f64 = w.iter().sum();
                    let mut acc = 0.0;
                    let mut pick = 4;
                    for (g, wg) in w.iter().enumerate() {
                        acc += wg / total;
                        if u < acc {
                            pick = g + 1;
                            break;
                        }
                    }
                    pick
                }
            }
            Structure::Nonlinear | Structure::Asymmetric => {
                if u < self.p0 {
                    major
                } else {
                    // one of the other three, equally likely
                    let k = (((u - self.p0) / (1.0 - self.p0)) * 3.0).floor().min(2.0) as usize;
                    let others: Vec<usize> = (1..=4).filter(|&g| g != major).collect();
                    others[k]
                }
            }
        };
        (class, major)
    }
}

/// One constant stretch of a subject's covariates and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruePiece {
    pub start: f64,
    pub covariates: [f64; 5],
    pub class: usize,
    pub majority: usize,
    pub slopes: [f64; 3],
}

impl TruePiece {
    fn multiplier(&self) -> f64 {
        let x = &self.covariates;
        (self.slopes[0] * x[2] + self.slopes[1] * x[3] + self.slopes[2] * x[4]).exp()
    }
}

/// True survival curve from time zero under a piecewise-constant multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCurve {
    pub hazard: Hazard,
    pub starts: Vec<f64>,
    pub multipliers: Vec<f64>,
}

impl TrueCurve {
    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        let mut h = 0.0;
        for (k, (&s, &m)) in self.starts.iter().zip(&self.multipliers).enumerate() {
            if t <= s {
                break;
            }
            let end = self.starts.get(k + 1).map_or(t, |&e| e.min(t));
            h += m * (self.hazard.cumulative(end) - self.hazard.cumulative(s));
        }
        h
    }

    /// Time at which the cumulative hazard reaches `target`.
    pub fn invert(&self, target: f64) -> f64 {
        let mut before = 0.0;
        for (k, (&s, &m)) in self.starts.iter().zip(&self.multipliers).enumerate() {
            let piece = match self.starts.get(k + 1) {
                Some(&e) => m * (self.hazard.cumulative(e) - self.hazard.cumulative(s)),
                None => f64::INFINITY,
            };
            if before + piece >= target {
                let h0 = self.hazard.cumulative(s) + (target - before) / m;
                return self.hazard.inverse_cumulative(h0);
            }
            before += piece;
        }
        f64::INFINITY
    }
}

impl SurvivalCurve for TrueCurve {
    fn survival(&self, t: f64) -> f64 {
        (-self.cumulative_hazard(t)).exp()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.starts.iter().copied().filter(|&s| s > 0.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub entry: f64,
    pub change_time: Option<f64>,
    pub event_time: f64,
    /// `None` without censoring.
    pub censor_time: Option<f64>,
    pub pieces: Vec<TruePiece>,
    /// Class of each measurement, in time order.
    pub record_classes: Vec<usize>,
}

impl SubjectTruth {
    pub fn curve(&self, hazard: Hazard) -> TrueCurve {
        TrueCurve {
            hazard,
            starts: self.pieces.iter().map(|p| p.start).collect(),
            multipliers: self.pieces.iter().map(|p| p.multiplier()).collect(),
        }
    }

    fn piece_at(&self, t: f64) -> &TruePiece {
        // a piece holds through its end point: X_t = X' for t <= change time
        match self.change_time {
            Some(c) if t > c => &self.pieces[1],
            _ => &self.pieces[0],
        }
    }

    pub fn slopes_at(&self, t: f64) -> [f64; 3] {
        self.piece_at(t).slopes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    /// Softmax concentration for score-based structures; infinite (written
    /// as null) when classes are deterministic.
    pub concentration: Option<f64>,
    pub censoring_rate: f64,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub data: LongDataset,
    pub truth: SimTruth,
}

/// Independent random streams so that, for example, toggling censoring leaves
/// event times untouched.
struct Streams {
    covariates: ChaCha8Rng,
    classes: ChaCha8Rng,
    survival: ChaCha8Rng,
    censoring: ChaCha8Rng,
    longitudinal: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let make = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Streams {
            covariates: make(1),
            classes: make(2),
            survival: make(3),
            censoring: make(4),
            longitudinal: make(5),
        }
    }
}

fn draw_baseline_covariates(rng: &mut ChaCha8Rng) -> [f64; 5] {
    [
        rng.random(),
        rng.random(),
        rng.random_range(0..=1) as f64,
        rng.random(),
        rng.random_range(1..=5) as f64,
    ]
}

/// Post-change values: bounded perturbations projected back into range,
/// with the binary covariate redrawn.
pub fn perturb_covariates(x: &[f64; 5], rng: &mut ChaCha8Rng) -> [f64; 5] {
    let mut shift = || rng.random_range(-0.3..=0.3);
    let x1 = (x[0] + shift()).clamp(0.0, 1.0);
    let x2 = (x[1] + shift()).clamp(0.0, 1.0);
    let x3 = rng.random_range(0..=1) as f64;
    let x4 = (x[3] + rng.random_range(-0.3..=0.3)).clamp(0.0, 1.0);
    let x5 = (x[4] + rng.random_range(-1..=1) as f64).clamp(1.0, 5.0);
    [x1, x2, x3, x4, x5]
}

/// Covariate pieces for one subject: a single piece, or two split at a
/// change time drawn from U[1, 3].
pub fn gen_covariates(time_varying: bool, rng: &mut ChaCha8Rng) -> (Option<f64>, Vec<[f64; 5]>) {
    let first = draw_baseline_covariates(rng);
    if !time_varying {
        return (None, vec![first]);
    }
    let change = rng.random_range(1.0..=3.0);
    let second = perturb_covariates(&first, rng);
    (Some(change), vec![first, second])
}

/// Event time by inversion: `T = H^{-1}(E)` with `E ~ Exp(1)`.
pub fn draw_event_time(curve: &TrueCurve, rng: &mut ChaCha8Rng) -> f64 {
    let e: f64 = Exp1.sample(rng);
    curve.invert(e)
}

const MAX_REDRAWS: usize = 10_000;

/// Everything about a subject except censoring and measurements.
fn draw_subject(
    config: &SimConfig,
    sampler: &ClassSampler,
    streams: &mut Streams,
    index: usize,
) -> Result<(f64, SubjectTruth), SimError> {
    for _ in 0..MAX_REDRAWS {
        let (change, covs) = gen_covariates(config.time_varying, &mut streams.covariates);
        let entry: f64 = streams.covariates.random();
        let mut pieces = Vec::with_capacity(covs.len());
        for (k, x) in covs.iter().enumerate() {
            let (class, majority) = sampler.draw(x[0], x[1], &mut streams.classes);
            let slopes = if config.structure == Structure::Null {
                config.hazard.slopes(4)
            } else {
                config.hazard.slopes(class)
            };
            pieces.push(TruePiece {
                start: if k == 0 { 0.0 } else { change.expect("second piece has a change time") },
                covariates: *x,
                class,
                majority,
                slopes,
            });
        }
        let truth = SubjectTruth {
            id: (index + 1).to_string(),
            entry,
            change_time: change,
            event_time: 0.0,
            censor_time: None,
            pieces,
            record_classes: Vec::new(),
        };
        let t = draw_event_time(&truth.curve(config.hazard), &mut streams.survival);
        if t > entry {
            return Ok((t, SubjectTruth { event_time: t, ..truth }));
        }
    }
    Err(SimError::Truncation(index + 1))
}

fn censoring_cache() -> &'static Mutex<HashMap<(Structure, Hazard, Censoring, bool, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(Structure, Hazard, Censoring, bool, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Rate of the exponential censoring time (counted from entry) giving the
/// target censored fraction. Solved on a fixed Monte-Carlo sample of the
/// scenario's follow-up times, where the censored probability is
/// `mean(1 - exp(-rate * (T - L)))`.
pub fn censoring_rate(config: &SimConfig) -> Result<f64, SimError> {
    let target = config.censoring.target();
    if target == 0.0 {
        return Ok(0.0);
    }
    let key = (
        config.structure,
        config.hazard,
        config.censoring,
        config.time_varying,
        config.p0.to_bits(),
    );
    if let Some(&r) = censoring_cache().lock().expect("cache lock").get(&key) {
        return Ok(r);
    }
    let sampler = ClassSampler::new(config.structure, config.p0)?;
    let mut streams = Streams::new(0xce05_0123);
    let follow: Vec<f64> = (0..10_000)
        .map(|i| draw_subject(config, &sampler, &mut streams, i).map(|(t, s)| t - s.entry))
        .collect::<Result<_, _>>()?;
    let frac = |rate: f64| follow.iter().map(|d| -(-rate * d).exp_m1()).sum::<f64>() / follow.len() as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while frac(hi) < target {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(SimError::Calibration("censoring rate not bracketed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi {
            break;
        }
    }
    let rate = 0.5 * (lo + hi);
    censoring_cache().lock().expect("cache lock").insert(key, rate);
    Ok(rate)
}

/// Measurement times: entry plus `1 + Poisson(1)` uniform draws on the
/// follow-up window, sorted.
pub fn gen_measurement_times(entry: f64, end: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let poisson = Poisson::new(1.0).expect("valid rate");
    let extra = 1 + poisson.sample(rng) as usize;
    let mut times = vec![entry];
    times.extend((0..extra).map(|_| entry + (end - entry) * rng.random::<f64>()));
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

/// Simulate a full dataset from `config`.
pub fn simulate(config: &SimConfig) -> Result<SimDataset, SimError> {
    config.validate()?;
    let sampler = ClassSampler::new(config.structure, config.p0)?;
    let rate = censoring_rate(config)?;
    let mut streams = Streams::new(config.seed);
    let noise_v = Normal::new(0.0, config.sigma_v).map_err(|e| SimError::Config(e.to_string()))?;
    let noise_e = Normal::new(0.0, config.sigma_e).map_err(|e| SimError::Config(e.to_string()))?;

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut truths = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let (t, mut truth) = draw_subject(config, &sampler, &mut streams, i)?;
        let e: f64 = Exp1.sample(&mut streams.censoring);
        let c = if rate > 0.0 { truth.entry + e / rate } else { f64::INFINITY };
        truth.censor_time = (rate > 0.0).then_some(c);
        let observed = t.min(c);
        let times = gen_measurement_times(truth.entry, observed, &mut streams.longitudinal);
        let v = noise_v.sample(&mut streams.longitudinal);
        let mut records = Vec::with_capacity(times.len());
        for &tm in &times {
            let piece = truth.piece_at(tm).clone();
            let u = if config.structure == Structure::Null {
                0.0
            } else {
                CLASS_MEANS[piece.class - 1]
            };
            truth.record_classes.push(piece.class);
            records.push(LongRecord {
                time: tm,
                outcome: u + v + noise_e.sample(&mut streams.longitudinal),
                covariates: piece.covariates.to_vec(),
            });
        }
        subjects.push(Subject {
            id: truth.id.clone(),
            records,
            event: SubjectEvent {
                event_time: observed,
                status: t <= c,
            },
        });
        truths.push(truth);
    }
    let names = (1..=5).map(|k| format!("X{k}")).collect();
    let data = LongDataset::new(names, "y", subjects)?;
    Ok(SimDataset {
        data,
        truth: SimTruth {
            config: *config,
            concentration: matches!(config.structure, Structure::Tree | Structure::Linear)
                .then_some(sampler.concentration),
            censoring_rate: rate,
            subjects: truths,
        },
    })
}

impl SimDataset {
    /// True class of every record, in subject then time order.
    pub fn record_classes(&self) -> Vec<usize> {
        self.truth
            .subjects
            .iter()
            .flat_map(|s| s.record_classes.iter().copied())
            .collect()
    }

    pub fn censored_fraction(&self) -> f64 {
        let n = self.data.n_subjects() as f64;
        self.data.subjects().iter().filter(|s| !s.event.status).count() as f64 / n
    }
}
