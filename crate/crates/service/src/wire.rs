//! JSON bodies exchanged with clients, and the payload builders shared with
//! the command-line tool.

use std::sync::Arc;

use difflab_core::datasets::Canvas;
use difflab_core::density::{contour_levels, density_of_points, marching_squares, ContourSet, GridDensity, GridSpec};
use difflab_core::sampling::{positions_at_time, sample_trajectories_normalized};
use difflab_core::{Bounds2, DatasetKind, Model, Objective, Point2, SamplerKind, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Contour levels drawn per density frame.
pub const CONTOUR_LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingState {
    Idle,
    Running,
    Cancelling,
    Partial,
    Done,
    Failed,
}

/// Messages on the session event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    EpochSnapshot {
        epoch: usize,
        mean_loss: f64,
        /// Data coordinates.
        preview: Vec<Point2>,
    },
    TrainingDone {
        partial: bool,
    },
    TrainingFailed {
        reason: String,
    },
}

impl Event {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, Event::EpochSnapshot { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingView {
    pub state: TrainingState,
    pub epochs_completed: usize,
    pub epochs_total: usize,
    pub last_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub bounds: Bounds2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelOrigin {
    Trained,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerOption {
    pub kind: SamplerKind,
    pub default_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub objective: Objective,
    pub origin: ModelOrigin,
    /// Registry name for pretrained models.
    pub name: Option<String>,
    /// Samplers this model supports, default first.
    pub samplers: Vec<SamplerOption>,
    pub data_bounds: Bounds2,
}

impl ModelSummary {
    pub fn describe(model: &Model, origin: ModelOrigin, name: Option<String>) -> Self {
        let preferred = SamplerKind::default_for(model.objective);
        let t = model.schedule.as_ref().map(|s| s.steps());
        let samplers = std::iter::once(preferred)
            .chain(
                SamplerKind::ALL
                    .into_iter()
                    .filter(|&k| k != preferred && k.compatible_with(model.objective)),
            )
            .map(|kind| SamplerOption {
                kind,
                default_steps: kind.default_steps(t),
            })
            .collect();
        Self {
            objective: model.objective,
            origin,
            name,
            samplers,
            data_bounds: model.data_bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub created_at_ms: u64,
    pub training: TrainingView,
    pub dataset: Option<DatasetSummary>,
    pub model: Option<ModelSummary>,
}

/// `PUT /sessions/{id}/dataset`. Builtins need `kind` (and optionally `n`,
/// `seed`); `custom` also needs `strokes` and `canvas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRequest {
    pub kind: DatasetKind,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub strokes: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default)]
    pub canvas: Option<Canvas>,
    /// Jitter σ in normalized units, custom datasets only.
    #[serde(default)]
    pub jitter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub bounds: Bounds2,
    /// Data coordinates.
    pub points: Vec<Point2>,
}

/// Training settings a client may override; everything else uses defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub preview_n: Option<usize>,
    pub preview_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub objective: Objective,
    #[serde(default)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedRequest {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainedEntry {
    pub name: String,
    pub objective: Objective,
    pub dataset: Option<DatasetKind>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub kind: Option<SamplerKind>,
    pub n: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

/// Sampled trajectories on a shared UI-time grid, in data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPayload {
    pub objective: Objective,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    /// One position list per trajectory, aligned with `times`.
    pub trajectories: Vec<Vec<Point2>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityQuery {
    pub t: Option<f64>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub sampler: Option<SamplerKind>,
    pub steps: Option<usize>,
}

/// Density frame at one UI time. The grid and contours are in model space;
/// `data_bounds` maps them to data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPayload {
    pub t: f64,
    pub n: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub steps: usize,
    pub data_bounds: Bounds2,
    pub grid: GridDensity<f64>,
    pub contours: ContourSet<f64>,
}

/// Resolved sampler settings: defaults filled in and compatibility checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerChoice {
    pub kind: SamplerKind,
    pub steps: usize,
}

impl SamplerChoice {
    pub fn resolve(model: &Model, kind: Option<SamplerKind>, steps: Option<usize>) -> difflab_core::Result<Self> {
        let kind = kind.unwrap_or_else(|| SamplerKind::default_for(model.objective));
        if !kind.compatible_with(model.objective) {
            return Err(difflab_core::Error::IncompatibleSampler {
                sampler: kind.as_str().into(),
                objective: model.objective.as_str().into(),
            });
        }
        let steps = steps.unwrap_or_else(|| kind.default_steps(model.schedule.as_ref().map(|s| s.steps())));
        Ok(Self { kind, steps })
    }
}

fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Trajectories in model space, as density frames consume them.
pub fn model_space_trajectories(
    model: &Model,
    choice: SamplerChoice,
    n: usize,
    seed: u64,
) -> difflab_core::Result<Vec<Trajectory>> {
    sample_trajectories_normalized(model, choice.kind, n, choice.steps, &mut sampling_rng(seed))
}

pub fn trajectory_payload(
    model: &Model,
    choice: SamplerChoice,
    n: usize,
    seed: u64,
) -> difflab_core::Result<TrajectoryPayload> {
    let trajs = model_space_trajectories(model, choice, n, seed)?;
    let times = trajs.first().map(|t| t.times.clone()).unwrap_or_default();
    let trajectories = trajs
        .into_iter()
        .map(|t| {
            t.positions
                .into_iter()
                .map(|p| model.data_bounds.from_normalized(p))
                .collect()
        })
        .collect();
    Ok(TrajectoryPayload {
        objective: model.objective,
        sampler: choice.kind,
        steps: choice.steps,
        seed,
        times,
        trajectories,
    })
}

/// Density and contours of `trajectories` (model space) at UI time `t`.
pub fn density_payload(
    model: &Model,
    choice: SamplerChoice,
    trajectories: &Arc<Vec<Trajectory>>,
    t: f64,
    seed: u64,
) -> difflab_core::Result<DensityPayload> {
    if !(0.0..=1.0).contains(&t) {
        return Err(difflab_core::Error::Usage(format!("t must lie in [0, 1], got {t}")));
    }
    let (points, _) = positions_at_time(trajectories, t)?;
    let grid = density_of_points(&points, &GridSpec::default())?;
    let contours = marching_squares(&grid, &contour_levels(&grid, CONTOUR_LEVELS));
    Ok(DensityPayload {
        t,
        n: trajectories.len(),
        seed,
        sampler: choice.kind,
        steps: choice.steps,
        data_bounds: model.data_bounds,
        grid,
        contours,
    })
}
