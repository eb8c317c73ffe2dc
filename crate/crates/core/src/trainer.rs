//! Mini-batch training for both objectives with per-epoch snapshots.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::Dataset;
use crate::diffusion::{flow_interpolant, noise_with_alpha_bar, NoiseSchedule, Objective, ScheduleConfig};
use crate::error::{contract, Error, Result};
use crate::geometry::Point;
use crate::model::{DenoiserModel, Provenance};
use crate::nn::{
    adam_step, mlp_backward, mlp_forward, mlp_init, write_time_embedding, AdamConfig, AdamState, Gradients, MlpConfig,
    MlpParams,
};
use crate::sampling::{largest_divisor_at_most, normal2, sample_trajectories, SamplerKind};
use crate::scalar::Scalar;

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Points sampled for each epoch preview.
    pub preview_n: usize,
    /// Sampler steps used for previews.
    pub preview_steps: usize,
    pub net: MlpConfig,
    /// Only used by noise prediction.
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 512,
            steps_per_epoch: 40,
            lr: 8e-3,
            seed: 0,
            preview_n: 400,
            preview_steps: 20,
            net: MlpConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    /// `steps_per_epoch = 0` is accepted: it yields the initialization.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("preview_n", self.preview_n),
            ("preview_steps", self.preview_steps),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.net.validate()?;
        if self.net.output_dim != 2 || self.net.time_embed_dim == 0 {
            return Err(Error::Config("network must map (x, y, embedding) to 2 outputs".into()));
        }
        self.schedule.build::<f64>()?;
        Ok(())
    }
}

/// Emitted after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSnapshot<F> {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: F,
    /// Preview samples in data coordinates.
    pub preview: Vec<Point<F>>,
}

/// Shared flag a training run polls between epochs.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub model: DenoiserModel<F>,
    /// True when the run was cancelled before its last epoch.
    pub partial: bool,
    pub epochs_completed: usize,
}

/// Per-example random draws of the noise-prediction loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDraw<F> {
    pub k: usize,
    pub eps: Point<F>,
}

/// Per-example random draws of the flow-matching loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDraw<F> {
    pub z: Point<F>,
    pub s: F,
}

pub fn draw_noise<F: Scalar, R: Rng + ?Sized>(n: usize, steps: usize, rng: &mut R) -> Vec<NoiseDraw<F>> {
    (0..n)
        .map(|_| NoiseDraw {
            k: rng.random_range(1..=steps),
            eps: normal2(rng),
        })
        .collect()
}

pub fn draw_flow<F: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<FlowDraw<F>> {
    (0..n)
        .map(|_| FlowDraw {
            z: normal2(rng),
            s: F::of(rng.random::<f64>()),
        })
        .collect()
}

/// Mean squared error of the network on `(input point, embed value, target)`
/// triples, and its gradient.
fn regression_loss<F: Scalar>(
    params: &MlpParams<F>,
    examples: &[(Point<F>, F, Point<F>)],
) -> Result<(F, Gradients<F>)> {
    if examples.is_empty() {
        return Err(contract("loss needs a nonempty batch"));
    }
    let width = params.config.input_dim;
    let mut inputs = vec![F::zero(); examples.len() * width];
    for (row, (x, s, _)) in inputs.chunks_exact_mut(width).zip(examples) {
        row[0] = x[0];
        row[1] = x[1];
        write_time_embedding(*s, &mut row[2..]);
    }
    let (out, cache) = mlp_forward(params, &inputs)?;
    let n = F::of(examples.len() as f64);
    let scale = F::of(2.0) / n;
    let mut loss = F::zero();
    let mut out_grad = vec![F::zero(); out.len()];
    for (i, (_, _, target)) in examples.iter().enumerate() {
        for c in 0..2 {
            let r = out[2 * i + c] - target[c];
            loss += r * r;
            out_grad[2 * i + c] = scale * r;
        }
    }
    let grads = mlp_backward(params, &cache, &out_grad)?;
    Ok((loss / n, grads))
}

/// Noise-prediction loss with fixed draws: `mean ‖ε̂(x_k, k/T) − ε‖²`.
pub fn loss_noise_prediction_with<F: Scalar>(
    params: &MlpParams<F>,
    batch: &[Point<F>],
    sched: &NoiseSchedule<F>,
    draws: &[NoiseDraw<F>],
) -> Result<(F, Gradients<F>)> {
    if batch.len() != draws.len() {
        return Err(contract("one draw per batch element required"));
    }
    let t = sched.steps();
    let examples = batch
        .iter()
        .zip(draws)
        .map(|(x0, d)| {
            let ab = sched.alpha_bar(d.k)?;
            let xk = noise_with_alpha_bar(*x0, ab, d.eps);
            Ok((xk, F::of(d.k as f64 / t as f64), d.eps))
        })
        .collect::<Result<Vec<_>>>()?;
    regression_loss(params, &examples)
}

pub fn loss_noise_prediction<F: Scalar, R: Rng + ?Sized>(
    params: &MlpParams<F>,
    batch: &[Point<F>],
    sched: &NoiseSchedule<F>,
    rng: &mut R,
) -> Result<(F, Gradients<F>)> {
    let draws = draw_noise(batch.len(), sched.steps(), rng);
    loss_noise_prediction_with(params, batch, sched, &draws)
}

/// Flow-matching loss with fixed draws: `mean ‖v̂(x_s, s) − (x1 − z)‖²`.
pub fn loss_flow_matching_with<F: Scalar>(
    params: &MlpParams<F>,
    batch: &[Point<F>],
    draws: &[FlowDraw<F>],
) -> Result<(F, Gradients<F>)> {
    if batch.len() != draws.len() {
        return Err(contract("one draw per batch element required"));
    }
    let examples: Vec<_> = batch
        .iter()
        .zip(draws)
        .map(|(x1, d)| {
            let (xs, v) = flow_interpolant(d.z, *x1, d.s);
            (xs, d.s, v)
        })
        .collect();
    regression_loss(params, &examples)
}

pub fn loss_flow_matching<F: Scalar, R: Rng + ?Sized>(
    params: &MlpParams<F>,
    batch: &[Point<F>],
    rng: &mut R,
) -> Result<(F, Gradients<F>)> {
    let draws = draw_flow(batch.len(), rng);
    loss_flow_matching_with(params, batch, &draws)
}

/// Independent ChaCha stream for one purpose of a seeded run.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TRAIN_STREAM: u64 = 1;
const PREVIEW_STREAM: u64 = 2;

/// Trains a denoiser on `dataset`.
///
/// Calls `on_epoch` after every epoch and polls `cancel` between epochs. A
/// cancelled run returns the model trained so far with `partial = true`.
pub fn train<F, C>(
    dataset: &Dataset<F>,
    objective: Objective,
    config: &TrainConfig,
    mut on_epoch: C,
    cancel: Option<&CancelToken>,
) -> Result<TrainOutcome<F>, TrainError>
where
    F: Scalar,
    C: FnMut(&EpochSnapshot<F>),
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("dataset is empty".into()).into());
    }
    let schedule = match objective {
        Objective::NoisePrediction => Some(config.schedule.build::<F>()?),
        Objective::FlowMatching => None,
    };
    let params: MlpParams<F> = mlp_init(&config.net, config.seed)?;
    let mut model = DenoiserModel::new(params, objective, schedule, dataset.bounds)?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = stream_rng(config.seed, TRAIN_STREAM);
    let mut preview_rng = stream_rng(config.seed, PREVIEW_STREAM);
    let (preview_kind, preview_steps) = preview_sampler(&model, config.preview_steps);
    let cancelled = || cancel.is_some_and(|c| c.is_cancelled());

    let mut batch = vec![[F::zero(); 2]; config.batch_size];
    let mut completed = 0;
    let mut partial = false;
    for epoch in 1..=config.epochs {
        if cancelled() {
            partial = true;
            break;
        }
        let mut loss_sum = 0.0;
        for step in 0..config.steps_per_epoch.max(1) {
            for b in batch.iter_mut() {
                *b = dataset.points[rng.random_range(0..dataset.len())];
            }
            let (loss, grads) = match &model.schedule {
                Some(sched) => loss_noise_prediction(&model.params, &batch, sched, &mut rng)?,
                None => loss_flow_matching(&model.params, &batch, &mut rng)?,
            };
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            if config.steps_per_epoch > 0 {
                adam_step(&mut model.params, &grads, &mut adam)?;
            }
        }
        let mean_loss = loss_sum / config.steps_per_epoch.max(1) as f64;
        let preview = sample_trajectories(&model, preview_kind, config.preview_n, preview_steps, &mut preview_rng)?
            .into_iter()
            .map(|t| *t.positions.last().expect("nonempty trajectory"))
            .collect();
        on_epoch(&EpochSnapshot {
            epoch,
            mean_loss: F::of(mean_loss),
            preview,
        });
        completed = epoch;
    }
    if !model.params.all_finite() {
        return Err(TrainError::Diverged {
            epoch: completed,
            step: config.steps_per_epoch,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome {
        model,
        partial,
        epochs_completed: completed,
    })
}

/// Sampler used for epoch previews. Deterministic sampling needs a step count
/// dividing the schedule length, so the preview budget is rounded down to one.
fn preview_sampler<F: Scalar>(model: &DenoiserModel<F>, budget: usize) -> (SamplerKind, usize) {
    let kind = SamplerKind::default_for(model.objective);
    let steps = match &model.schedule {
        Some(s) => largest_divisor_at_most(s.steps(), budget),
        None => budget,
    };
    (kind, steps)
}

/// Trains on a builtin dataset and records where the model came from.
pub fn train_with_provenance<F, C>(
    dataset: &Dataset<F>,
    dataset_n: usize,
    dataset_seed: u64,
    objective: Objective,
    config: &TrainConfig,
    on_epoch: C,
    cancel: Option<&CancelToken>,
) -> Result<TrainOutcome<F>, TrainError>
where
    F: Scalar,
    C: FnMut(&EpochSnapshot<F>),
{
    let mut out = train(dataset, objective, config, on_epoch, cancel)?;
    out.model = out.model.with_provenance(Provenance {
        dataset: dataset.kind,
        dataset_n,
        dataset_seed,
        train: config.clone(),
    });
    Ok(out)
}
