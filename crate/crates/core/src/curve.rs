//! Survival curves as functions of time.

use serde::{Deserialize, Serialize};

pub trait SurvivalCurve {
    fn survival(&self, t: f64) -> f64;

    /// Times where the curve jumps or changes form; used to build
    /// integration grids.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Largest time the curve is defined for.
    fn horizon(&self) -> f64 {
        f64::INFINITY
    }
}

/// Right-continuous step function starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub horizon: f64,
}

impl StepCurve {
    pub fn constant(value: f64, horizon: f64) -> Self {
        StepCurve {
            times: vec![0.0],
            values: vec![value],
            horizon,
        }
    }
}

impl SurvivalCurve for StepCurve {
    fn survival(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.times.clone()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Linear interpolation between given points, flat outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SurvivalCurve for LinearCurve {
    fn survival(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k < self.times.len() && self.times[k] == t {
            return self.values[k];
        }
        if k == 0 {
            return self.values.first().copied().unwrap_or(1.0);
        }
        if k == self.times.len() {
            return self.values[k - 1];
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.times.clone()
    }

    fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }
}

/// Wraps a closure; handy for closed-form curves.
pub struct FnCurve<F: Fn(f64) -> f64> {
    pub f: F,
    pub breaks: Vec<f64>,
}

impl<F: Fn(f64) -> f64> FnCurve<F> {
    pub fn new(f: F) -> Self {
        FnCurve {
            f,
            breaks: Vec::new(),
        }
    }
}

impl<F: Fn(f64) -> f64> SurvivalCurve for FnCurve<F> {
    fn survival(&self, t: f64) -> f64 {
        (self.f)(t)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breaks.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_curve_is_right_continuous() {
        let c = StepCurve {
            times: vec![1.0, 2.0],
            values: vec![0.8, 0.5],
            horizon: 3.0,
        };
        assert_eq!(c.survival(0.5), 1.0);
        assert_eq!(c.survival(1.0), 0.8);
        assert_eq!(c.survival(1.999), 0.8);
        assert_eq!(c.survival(2.5), 0.5);
    }

    #[test]
    fn linear_curve_hits_nodes_exactly() {
        let c = LinearCurve {
            times: vec![0.0, 1.0, 3.0],
            values: vec![1.0, 0.6, 0.2],
        };
        assert_eq!(c.survival(1.0), 0.6);
        assert!((c.survival(2.0) - 0.4).abs() < 1e-15);
        assert_eq!(c.survival(5.0), 0.2);
    }
}
