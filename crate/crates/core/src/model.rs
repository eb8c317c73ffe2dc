//! The trained denoiser and the predictor interface samplers consume.

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetKind;
use crate::diffusion::{NoiseSchedule, Objective};
use crate::error::{config, contract, Result};
use crate::geometry::{Bounds, Point};
use crate::nn::{mlp_predict, write_time_embedding, MlpParams};
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

/// Time argument passed to a predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetTime<F> {
    /// Discrete diffusion step `k` of a `T`-step schedule.
    Step { k: usize, steps: usize },
    /// Position `s ∈ [0, 1]` along the flow-matching path.
    Path(F),
}

impl<F: Scalar> NetTime<F> {
    /// Scalar fed to the time embedding: `k/T` or `s`.
    pub fn embed_value(self) -> F {
        match self {
            NetTime::Step { k, steps } => F::of(k as f64 / steps as f64),
            NetTime::Path(s) => s,
        }
    }
}

/// Anything that maps model-space points and a time to 2D predictions
/// (predicted noise or predicted velocity, depending on the objective).
pub trait Predictor<F: Scalar> {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>>;
}

impl<F: Scalar, P: Predictor<F> + ?Sized> Predictor<F> for &P {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>> {
        (**self).predict(xs, time)
    }
}

impl<F: Scalar> Predictor<F> for MlpParams<F> {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>> {
        let width = self.config.input_dim;
        let mut inputs = vec![F::zero(); xs.len() * width];
        let mut embed = vec![F::zero(); self.config.time_embed_dim];
        write_time_embedding(time.embed_value(), &mut embed);
        for (row, x) in inputs.chunks_exact_mut(width).zip(xs) {
            row[0] = x[0];
            row[1] = x[1];
            row[2..].copy_from_slice(&embed);
        }
        let out = mlp_predict(self, &inputs).expect("input width fixed by config");
        out.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
    }
}

/// Where a model came from; enough to retrain it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: DatasetKind,
    pub dataset_n: usize,
    pub dataset_seed: u64,
    pub train: TrainConfig,
}

/// A trained network together with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel<F> {
    pub params: MlpParams<F>,
    pub objective: Objective,
    /// Present iff `objective` is noise prediction.
    pub schedule: Option<NoiseSchedule<F>>,
    /// Box mapping data coordinates onto the normalized model space.
    pub data_bounds: Bounds<F>,
    pub provenance: Option<Provenance>,
}

impl<F: Scalar> DenoiserModel<F> {
    pub fn new(
        params: MlpParams<F>,
        objective: Objective,
        schedule: Option<NoiseSchedule<F>>,
        data_bounds: Bounds<F>,
    ) -> Result<Self> {
        let model = Self {
            params,
            objective,
            schedule,
            data_bounds,
            provenance: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.config.validate()?;
        let shapes = self.params.config.layer_shapes();
        let consistent = shapes.len() == self.params.layers.len()
            && shapes
                .iter()
                .zip(&self.params.layers)
                .all(|(&(i, o), l)| l.in_dim == i && l.out_dim == o && l.weight.len() == i * o && l.bias.len() == o);
        if !consistent {
            return Err(contract("parameters do not match the network config"));
        }
        if self.params.config.output_dim != 2 || self.params.config.time_embed_dim == 0 {
            return Err(config("a denoiser maps (x, y, time embedding) to a 2D output"));
        }
        match (self.objective, &self.schedule) {
            (Objective::NoisePrediction, None) => Err(config("noise prediction models need a noise schedule")),
            (Objective::FlowMatching, Some(_)) => Err(config("flow matching models carry no noise schedule")),
            _ => Ok(()),
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }
}

impl<F: Scalar> Predictor<F> for DenoiserModel<F> {
    fn predict(&self, xs: &[Point<F>], time: NetTime<F>) -> Vec<Point<F>> {
        self.params.predict(xs, time)
    }
}
