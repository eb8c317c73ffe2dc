//! Sample-quality statistics for comparing generated and reference clouds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datasets::{three_dots_centers, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};
use crate::model::DenoiserModel;
use crate::sampling::{sample_trajectories, SamplerKind};
use crate::scalar::Scalar;

/// Samples compared per quality check.
pub const GATE_SAMPLES: usize = 2000;
/// Largest energy distance to fresh data that passes.
pub const ENERGY_GATE: f64 = 0.05;
/// Three-dots samples must lie within this radius of a center...
pub const NEAR_RADIUS: f64 = 0.3;
/// ...at least this often.
pub const NEAR_GATE: f64 = 0.9;

fn mean_pairwise<F: Scalar>(a: &[Point<F>], b: &[Point<F>], same: bool) -> f64 {
    let mut sum = 0.0;
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            if same && i == j {
                continue;
            }
            sum += dist2(*p, *q).to_f64_lossy().sqrt();
        }
    }
    let pairs = if same {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    sum / pairs as f64
}

/// Energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` between two clouds, with
/// the within-sample terms excluding self-pairs (U-statistics).
pub fn energy_distance<F: Scalar>(x: &[Point<F>], y: &[Point<F>]) -> f64 {
    assert!(
        x.len() >= 2 && y.len() >= 2,
        "energy distance needs two points per cloud"
    );
    2.0 * mean_pairwise(x, y, false) - mean_pairwise(x, x, true) - mean_pairwise(y, y, true)
}

/// Fraction of `points` within `radius` of their nearest center.
pub fn fraction_near_centers<F: Scalar>(points: &[Point<F>], centers: &[Point<f64>], radius: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let near = points
        .iter()
        .filter(|p| {
            let p = [p[0].to_f64_lossy(), p[1].to_f64_lossy()];
            centers.iter().any(|c| dist2(p, *c) <= r2)
        })
        .count();
    near as f64 / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    pub energy_distance: f64,
    /// Three-dots only.
    pub near_centers: Option<f64>,
    pub passed: bool,
}

/// Samples [`GATE_SAMPLES`] points with the model's default sampler and
/// compares them with a fresh draw of the builtin dataset.
pub fn quality_gate(model: &DenoiserModel<f64>, kind: DatasetKind, seed: u64) -> Result<QualityReport> {
    if kind == DatasetKind::Custom {
        return Err(Error::Usage("quality gates exist for builtin datasets only".into()));
    }
    let sampler = SamplerKind::default_for(model.objective);
    let steps = sampler.default_steps(model.schedule.as_ref().map(|s| s.steps()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<Point<f64>> = sample_trajectories(model, sampler, GATE_SAMPLES, steps, &mut rng)?
        .into_iter()
        .map(|t| *t.positions.last().expect("nonempty trajectory"))
        .collect();
    let fresh: Dataset<f64> = Dataset::builtin(kind, GATE_SAMPLES, seed.wrapping_add(1_000_003))?;
    let energy = energy_distance(&samples, &fresh.points);
    let near =
        (kind == DatasetKind::ThreeDots).then(|| fraction_near_centers(&samples, &three_dots_centers(), NEAR_RADIUS));
    Ok(QualityReport {
        energy_distance: energy,
        near_centers: near,
        passed: energy < ENERGY_GATE && near.is_none_or(|f| f >= NEAR_GATE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_basics() {
        let a = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        // Cross term keeps the three zero self-distances, within terms drop
        // them: 2·S/9 − 2·S/6 with S = 4 + 2√2.
        let expected = -(4.0 + 2.0 * 2f64.sqrt()) / 9.0;
        assert!((energy_distance(&a, &a) - expected).abs() < 1e-12);
        let far: Vec<_> = a.iter().map(|p| [p[0] + 10.0, p[1]]).collect();
        assert!(energy_distance(&a, &far) > 15.0);
    }

    #[test]
    fn near_centers() {
        let pts = vec![[0.0, 0.05], [1.0, 1.0], [0.29, 0.0], [5.0, 5.0]];
        assert_eq!(fraction_near_centers(&pts, &[[0.0, 0.0]], 0.3), 0.5);
    }
}
