//! Variance-preserving noise schedules, the forward noising process and the
//! straight-line interpolant used by flow matching.
//!
//! Step indices run `k = 1..=T` with `k = T` the noisiest; `ᾱ_0 = 1` by
//! convention so `k = 0` denotes clean data.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::geometry::Point;
use crate::scalar::Scalar;

/// Training objective of a denoising network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Predict the injected noise `ε` from `(x_k, k/T)`.
    NoisePrediction,
    /// Predict the velocity `x1 − z` of the straight path from noise to data.
    FlowMatching,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::NoisePrediction => "noise_prediction",
            Objective::FlowMatching => "flow_matching",
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Objective {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_prediction" | "noise" | "eps" => Ok(Objective::NoisePrediction),
            "flow_matching" | "flow" => Ok(Objective::FlowMatching),
            other => Err(crate::Error::Usage(format!("unknown objective `{other}`"))),
        }
    }
}

/// Parameters of a linear β schedule; enough to rebuild a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.06,
        }
    }
}

impl ScheduleConfig {
    pub fn build<F: Scalar>(&self) -> Result<NoiseSchedule<F>> {
        linear_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Discrete schedule. Vectors are indexed `k − 1` for step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<F> {
    pub config: ScheduleConfig,
    pub beta: Vec<F>,
    pub alpha: Vec<F>,
    pub alpha_bar: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(contract(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> Result<F> {
        self.check(k)?;
        Ok(self.beta[k - 1])
    }

    pub fn alpha(&self, k: usize) -> Result<F> {
        self.check(k)?;
        Ok(self.alpha[k - 1])
    }

    /// `ᾱ_k` for `0 ≤ k ≤ T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> Result<F> {
        if k == 0 {
            return Ok(F::one());
        }
        self.check(k)?;
        Ok(self.alpha_bar[k - 1])
    }
}

/// β linearly spaced from `beta_min` (k = 1) to `beta_max` (k = T).
pub fn linear_schedule<F: Scalar>(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule<F>> {
    if steps == 0 {
        return Err(config("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(config(format!(
            "schedule bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let beta: Vec<F> = (0..steps)
        .map(|i| {
            if steps == 1 {
                F::of(beta_min)
            } else {
                let frac = i as f64 / (steps - 1) as f64;
                F::of(beta_min + (beta_max - beta_min) * frac)
            }
        })
        .collect();
    let alpha: Vec<F> = beta.iter().map(|&b| F::one() - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(F::one(), |acc, &a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_min,
            beta_max,
        },
        beta,
        alpha,
        alpha_bar,
    })
}

/// `√ᾱ_k·x0 + √(1−ᾱ_k)·eps`
pub fn forward_noise<F: Scalar>(x0: Point<F>, k: usize, eps: Point<F>, sched: &NoiseSchedule<F>) -> Result<Point<F>> {
    sched.check(k)?;
    let ab = sched.alpha_bar[k - 1];
    Ok(noise_with_alpha_bar(x0, ab, eps))
}

#[inline]
pub(crate) fn noise_with_alpha_bar<F: Scalar>(x0: Point<F>, alpha_bar: F, eps: Point<F>) -> Point<F> {
    let a = alpha_bar.sqrt();
    let s = (F::one() - alpha_bar).sqrt();
    [a * x0[0] + s * eps[0], a * x0[1] + s * eps[1]]
}

/// Point on the straight path from `z` (s = 0) to `x1` (s = 1), and the
/// path's constant velocity.
pub fn flow_interpolant<F: Scalar>(z: Point<F>, x1: Point<F>, s: F) -> (Point<F>, Point<F>) {
    let r = F::one() - s;
    (
        [r * z[0] + s * x1[0], r * z[1] + s * x1[1]],
        [x1[0] - z[0], x1[1] - z[1]],
    )
}
