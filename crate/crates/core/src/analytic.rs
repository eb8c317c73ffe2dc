//! Exact predictors for isotropic Gaussian data `N(μ, σ²I)`.
//!
//! With Gaussian data the optimal noise and velocity predictions are affine
//! in `x`, so samplers can be checked without training a network.

use crate::diffusion::NoiseSchedule;
use crate::geometry::Point;
use crate::model::{NetTime, Predictor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianData<F> {
    pub mean: Point<F>,
    pub std: F,
}

/// Posterior-mean noise
/// `ε*(x, k) = √(1−ᾱ_k)(x − √ᾱ_k μ) / (ᾱ_k σ² + 1 − ᾱ_k)`.
#[derive(Debug, Clone, Copy)]
pub struct OptimalNoise<'a, F> {
    pub data: GaussianData<F>,
    pub schedule: &'a NoiseSchedule<F>,
}

impl<F: Scalar> Predictor<F> for OptimalNoise<'_, F> {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>> {
        let NetTime::Step { k, .. } = time else {
            panic!("noise predictor called with a path time")
        };
        let ab = self.schedule.alpha_bar(k).expect("step within schedule");
        let var = self.data.std * self.data.std;
        let gain = (F::one() - ab).sqrt() / (ab * var + F::one() - ab);
        let shift = ab.sqrt();
        xs.iter()
            .map(|x| {
                [
                    gain * (x[0] - shift * self.data.mean[0]),
                    gain * (x[1] - shift * self.data.mean[1]),
                ]
            })
            .collect()
    }
}

/// Velocity `E[x1 − z | x_s = x]` of the straight interpolant from
/// `N(0, I)`: `μ + (sσ² − (1−s)) / v_s · (x − sμ)`, `v_s = (1−s)² + s²σ²`.
///
/// Its flow maps `z` to `μ + σz` exactly.
#[derive(Debug, Clone, Copy)]
pub struct OptimalVelocity<F> {
    pub data: GaussianData<F>,
}

impl<F: Scalar> Predictor<F> for OptimalVelocity<F> {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>> {
        let NetTime::Path(s) = time else {
            panic!("velocity predictor called with a diffusion step")
        };
        let var = self.data.std * self.data.std;
        let one_minus = F::one() - s;
        let v_s = one_minus * one_minus + s * s * var;
        let gain = (s * var - one_minus) / v_s;
        let mu = self.data.mean;
        xs.iter()
            .map(|x| [mu[0] + gain * (x[0] - s * mu[0]), mu[1] + gain * (x[1] - s * mu[1])])
            .collect()
    }
}
