//! Non-decreasing cumulative-score thresholds `tau_t` and the temporal weight
//! `eta_t` used by the lambda rule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First threshold value of every shape.
pub const TAU_START: f64 = 0.2;
/// Linear increment, applied every [`LINEAR_PERIOD`] rounds.
pub const TAU_STEP: f64 = 0.1;
pub const LINEAR_PERIOD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
    /// Logarithmic growth: front-loads participation.
    Concave,
    /// Quadratic growth: back-loads participation.
    Convex,
}

impl ScheduleShape {
    pub const ALL: [ScheduleShape; 3] = [Self::Linear, Self::Concave, Self::Convex];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Concave => "concave",
            Self::Convex => "convex",
        }
    }
}

impl fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|shape| shape.name() == s)
            .ok_or_else(|| Error::config("schedule", format!("unknown shape `{s}` (linear, concave, convex)")))
    }
}

/// A threshold schedule over a fixed horizon of `total_rounds`.
///
/// The concave (`a ln(1+t) + 0.2`) and convex (`b t^2 + 0.2`) coefficients are
/// fitted by bisection so their capped mean over the horizon equals the linear
/// schedule's capped mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdSchedule {
    shape: ScheduleShape,
    coefficient: f64,
    cap: f64,
    total_rounds: usize,
}

impl ThresholdSchedule {
    pub fn new(shape: ScheduleShape, total_rounds: usize, cap: f64) -> Result<Self> {
        if total_rounds == 0 {
            return Err(Error::invalid("threshold schedule needs at least one round"));
        }
        if !(cap.is_finite() && cap > 0.0) {
            return Err(Error::config("tau_cap", format!("must be positive, got {cap}")));
        }
        let mut schedule = Self {
            shape,
            coefficient: 0.0,
            cap,
            total_rounds,
        };
        if shape != ScheduleShape::Linear {
            let target = Self::new(ScheduleShape::Linear, total_rounds, cap)?.mean();
            schedule.coefficient = schedule.calibrate(target);
        }
        Ok(schedule)
    }

    pub fn linear(total_rounds: usize) -> Result<Self> {
        Self::new(ScheduleShape::Linear, total_rounds, 1.0)
    }

    pub fn shape(&self) -> ScheduleShape {
        self.shape
    }

    /// Fitted `a` (concave) or `b` (convex); zero for linear.
    pub fn coefficient(&self) -> f64 {
        self.coefficient
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn total_rounds(&self) -> usize {
        self.total_rounds
    }

    /// `tau_t` for the zero-based round index `t`.
    pub fn at(&self, t: usize) -> Result<f64> {
        if t >= self.total_rounds {
            return Err(Error::invalid(format!(
                "round index {t} outside schedule horizon {}",
                self.total_rounds
            )));
        }
        Ok(self.eval(self.coefficient, t))
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.total_rounds).map(|t| self.eval(self.coefficient, t)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.mean_with(self.coefficient)
    }

    fn eval(&self, coef: f64, t: usize) -> f64 {
        let raw = match self.shape {
            // Division by the step count keeps 0.2, 0.3, ... exact decimals.
            ScheduleShape::Linear => {
                let per_unit = (1.0 / TAU_STEP).round();
                ((TAU_START * per_unit).round() + (t / LINEAR_PERIOD) as f64) / per_unit
            }
            ScheduleShape::Concave => coef * (1.0 + t as f64).ln() + TAU_START,
            ScheduleShape::Convex => coef * (t * t) as f64 + TAU_START,
        };
        raw.min(self.cap)
    }

    fn mean_with(&self, coef: f64) -> f64 {
        (0..self.total_rounds).map(|t| self.eval(coef, t)).sum::<f64>() / self.total_rounds as f64
    }

    fn calibrate(&self, target: f64) -> f64 {
        if self.mean_with(0.0) >= target {
            return 0.0;
        }
        let mut hi = 1.0;
        while self.mean_with(hi) < target {
            hi *= 2.0;
            if hi > 1e12 {
                return hi;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.mean_with(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Free-function form of [`ThresholdSchedule::at`] that also checks the horizon.
pub fn threshold_at(schedule: &ThresholdSchedule, t: usize, total_rounds: usize) -> Result<f64> {
    if total_rounds != schedule.total_rounds {
        return Err(Error::invalid(format!(
            "schedule was calibrated for {} rounds, asked about {total_rounds}",
            schedule.total_rounds
        )));
    }
    schedule.at(t)
}

/// Temporal weight `eta_t` in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    /// `(t + 1) / T`.
    Linear,
    Constant(f64),
}

impl EtaSchedule {
    pub fn at(&self, t: usize, total_rounds: usize) -> Result<f64> {
        if t >= total_rounds {
            return Err(Error::invalid(format!(
                "round index {t} outside horizon {total_rounds}"
            )));
        }
        let eta = match *self {
            EtaSchedule::Linear => (t + 1) as f64 / total_rounds as f64,
            EtaSchedule::Constant(v) => v,
        };
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::invalid(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(eta)
    }
}
