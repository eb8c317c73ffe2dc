//! Reverse-process samplers recording full trajectories.
//!
//! Trajectories are indexed by UI time `t ∈ [0, 1]`: `t = 0` is the Gaussian
//! source and `t = 1` the data distribution, whichever direction the
//! underlying step index runs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Objective};
use crate::error::{contract, Error, Result};
use crate::geometry::Point;
use crate::model::{DenoiserModel, NetTime, Predictor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Stochastic reverse steps over the full schedule.
    Ancestral,
    /// Noise-free skip-step updates (DDIM-style).
    Deterministic,
    /// Forward Euler on the learned velocity field.
    EulerOde,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 3] = [
        SamplerKind::Ancestral,
        SamplerKind::Deterministic,
        SamplerKind::EulerOde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ancestral => "ancestral",
            SamplerKind::Deterministic => "deterministic",
            SamplerKind::EulerOde => "euler_ode",
        }
    }

    pub fn compatible_with(self, objective: Objective) -> bool {
        matches!(
            (self, objective),
            (SamplerKind::EulerOde, Objective::FlowMatching)
                | (
                    SamplerKind::Ancestral | SamplerKind::Deterministic,
                    Objective::NoisePrediction
                )
        )
    }

    /// Default sampler for a model objective.
    pub fn default_for(objective: Objective) -> Self {
        match objective {
            Objective::NoisePrediction => SamplerKind::Deterministic,
            Objective::FlowMatching => SamplerKind::EulerOde,
        }
    }

    /// Default number of steps given the schedule length (if any).
    pub fn default_steps(self, schedule_steps: Option<usize>) -> usize {
        let t = schedule_steps.unwrap_or(0);
        match self {
            SamplerKind::Ancestral => t,
            SamplerKind::Deterministic if t > 0 => largest_divisor_at_most(t, 50),
            SamplerKind::Deterministic => 50,
            SamplerKind::EulerOde => 50,
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SamplerKind::Ancestral),
            "deterministic" | "ddim" => Ok(SamplerKind::Deterministic),
            "euler_ode" | "euler" => Ok(SamplerKind::EulerOde),
            other => Err(Error::Usage(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Largest `d ≤ cap` dividing `n` (at least 1).
pub fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n).max(1))
        .rev()
        .find(|d| n.is_multiple_of(*d))
        .unwrap_or(1)
}

/// One sample's path on the uniform UI-time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<F> {
    pub times: Vec<F>,
    pub positions: Vec<Point<F>>,
    pub source_index: usize,
}

#[inline]
pub(crate) fn normal2<F: Scalar, R: Rng + ?Sized>(rng: &mut R) -> Point<F> {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    [F::of(a), F::of(b)]
}

/// `n` i.i.d. draws from `N(0, I₂)`.
pub fn sample_source<F: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<Point<F>>> {
    if n == 0 {
        return Err(contract("sample_source needs n >= 1"));
    }
    Ok((0..n).map(|_| normal2(rng)).collect())
}

/// UI time of diffusion step `k` out of `T`: `1 − k/T`.
pub fn to_ui_time<F: Scalar>(k: usize, steps: usize) -> Result<F> {
    if steps == 0 || k > steps {
        return Err(contract(format!("step {k} outside 0..={steps}")));
    }
    // (T − k)/T is the same rational as 1 − k/T but rounds once.
    Ok(F::of((steps - k) as f64 / steps as f64))
}

/// One stochastic reverse step `x_k → x_{k−1}` with `σ_k = √β_k` (σ_1 = 0).
pub fn ancestral_step<F: Scalar, R: Rng + ?Sized>(
    x: Point<F>,
    k: usize,
    eps_hat: Point<F>,
    sched: &NoiseSchedule<F>,
    rng: &mut R,
) -> Result<Point<F>> {
    let beta = sched.beta(k)?;
    let alpha = sched.alpha(k)?;
    let alpha_bar = sched.alpha_bar(k)?;
    let coef = beta / (F::one() - alpha_bar).sqrt();
    let inv = F::one() / alpha.sqrt();
    let mut out = [(x[0] - coef * eps_hat[0]) * inv, (x[1] - coef * eps_hat[1]) * inv];
    if k > 1 {
        let sigma = beta.sqrt();
        let z: Point<F> = normal2(rng);
        out[0] += sigma * z[0];
        out[1] += sigma * z[1];
    }
    Ok(out)
}

/// Noise-free update from step `k_from` to `k_to < k_from` (DDIM-style).
pub fn deterministic_step<F: Scalar>(
    x: Point<F>,
    k_from: usize,
    k_to: usize,
    eps_hat: Point<F>,
    sched: &NoiseSchedule<F>,
) -> Result<Point<F>> {
    if k_to > k_from || k_from > sched.steps() {
        return Err(contract(format!(
            "deterministic step needs 0 <= k_to <= k_from <= T, got {k_to}, {k_from}"
        )));
    }
    let ab_from = sched.alpha_bar(k_from)?;
    let ab_to = sched.alpha_bar(k_to)?;
    let s_from = (F::one() - ab_from).sqrt();
    let r_from = ab_from.sqrt();
    let (r_to, s_to) = (ab_to.sqrt(), (F::one() - ab_to).sqrt());
    let x0 = [
        (x[0] - s_from * eps_hat[0]) / r_from,
        (x[1] - s_from * eps_hat[1]) / r_from,
    ];
    Ok([r_to * x0[0] + s_to * eps_hat[0], r_to * x0[1] + s_to * eps_hat[1]])
}

/// `x + ds·v_hat`
pub fn euler_flow_step<F: Scalar>(x: Point<F>, s: F, v_hat: Point<F>, ds: F) -> Result<Point<F>> {
    if ds <= F::zero() || s + ds > F::one() + F::of(1e-12) {
        return Err(contract(format!(
            "euler step needs ds > 0 and s + ds <= 1, got s={s}, ds={ds}"
        )));
    }
    Ok([x[0] + ds * v_hat[0], x[1] + ds * v_hat[1]])
}

fn check_steps(
    kind: SamplerKind,
    objective: Objective,
    sched: Option<&NoiseSchedule<impl Scalar>>,
    steps: usize,
) -> Result<()> {
    if !kind.compatible_with(objective) {
        return Err(Error::IncompatibleSampler {
            sampler: kind.as_str().into(),
            objective: objective.as_str().into(),
        });
    }
    if steps == 0 {
        return Err(Error::Usage("steps must be at least 1".into()));
    }
    let t = sched.map(|s| s.steps());
    match (kind, t) {
        (SamplerKind::Ancestral, Some(t)) if steps != t => Err(Error::Usage(format!(
            "ancestral sampling runs every schedule step: steps must equal {t}"
        ))),
        (SamplerKind::Deterministic, Some(t)) if t % steps != 0 => Err(Error::Usage(format!(
            "deterministic steps must divide the schedule length {t}, got {steps}"
        ))),
        (SamplerKind::Ancestral | SamplerKind::Deterministic, None) => {
            Err(contract("noise prediction sampling needs a schedule"))
        }
        _ => Ok(()),
    }
}

/// Runs a sampler from explicit source points, recording every step.
///
/// Positions stay in model space. `rng` is only consumed by the ancestral
/// sampler.
pub fn run_sampler<F, P, R>(
    predictor: &P,
    objective: Objective,
    sched: Option<&NoiseSchedule<F>>,
    kind: SamplerKind,
    sources: &[Point<F>],
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory<F>>>
where
    F: Scalar,
    P: Predictor<F> + ?Sized,
    R: Rng + ?Sized,
{
    check_steps(kind, objective, sched, steps)?;
    let times: Vec<F> = (0..=steps).map(|j| F::of(j as f64 / steps as f64)).collect();
    let mut paths: Vec<Vec<Point<F>>> = sources
        .iter()
        .map(|&p| {
            let mut v = Vec::with_capacity(steps + 1);
            v.push(p);
            v
        })
        .collect();
    let mut xs = sources.to_vec();

    match kind {
        SamplerKind::Ancestral => {
            let sched = sched.expect("checked");
            let t = sched.steps();
            for k in (1..=t).rev() {
                let eps = predictor.predict(&xs, NetTime::Step { k, steps: t });
                for (x, e) in xs.iter_mut().zip(&eps) {
                    *x = ancestral_step(*x, k, *e, sched, rng)?;
                }
                record(&mut paths, &xs);
            }
        }
        SamplerKind::Deterministic => {
            let sched = sched.expect("checked");
            let t = sched.steps();
            let stride = t / steps;
            for j in 0..steps {
                let k_from = t - j * stride;
                let k_to = k_from - stride;
                let eps = predictor.predict(&xs, NetTime::Step { k: k_from, steps: t });
                for (x, e) in xs.iter_mut().zip(&eps) {
                    *x = deterministic_step(*x, k_from, k_to, *e, sched)?;
                }
                record(&mut paths, &xs);
            }
        }
        SamplerKind::EulerOde => {
            for j in 0..steps {
                let s = times[j];
                let ds = times[j + 1] - times[j];
                let v = predictor.predict(&xs, NetTime::Path(s));
                for (x, vi) in xs.iter_mut().zip(&v) {
                    *x = euler_flow_step(*x, s, *vi, ds)?;
                }
                record(&mut paths, &xs);
            }
        }
    }

    if paths.iter().flatten().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(contract("sampler produced non-finite positions"));
    }
    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(i, positions)| Trajectory {
            times: times.clone(),
            positions,
            source_index: i,
        })
        .collect())
}

fn record<F: Copy>(paths: &mut [Vec<Point<F>>], xs: &[Point<F>]) {
    for (p, x) in paths.iter_mut().zip(xs) {
        p.push(*x);
    }
}

/// Samples `n` trajectories in model space (no rescaling).
pub fn sample_trajectories_normalized<F: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<F>,
    kind: SamplerKind,
    n: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory<F>>> {
    check_steps(kind, model.objective, model.schedule.as_ref(), steps)?;
    let sources = sample_source(n, rng)?;
    run_sampler(
        model,
        model.objective,
        model.schedule.as_ref(),
        kind,
        &sources,
        steps,
        rng,
    )
}

/// Samples `n` trajectories and maps them to data coordinates.
pub fn sample_trajectories<F: Scalar, R: Rng + ?Sized>(
    model: &DenoiserModel<F>,
    kind: SamplerKind,
    n: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory<F>>> {
    let mut trajs = sample_trajectories_normalized(model, kind, n, steps, rng)?;
    let bounds = model.data_bounds;
    for t in &mut trajs {
        t.positions.iter_mut().for_each(|p| *p = bounds.from_normalized(*p));
    }
    Ok(trajs)
}

/// Positions at UI time `t`, linearly interpolated between grid nodes.
///
/// `t` outside `[0, 1]` is clamped; the returned flag reports that.
pub fn positions_at_time<F: Scalar>(trajectories: &[Trajectory<F>], t: F) -> Result<(Vec<Point<F>>, bool)> {
    let first = trajectories
        .first()
        .ok_or_else(|| contract("positions_at_time needs at least one trajectory"))?;
    let len = first.positions.len();
    if len < 2 || trajectories.iter().any(|tr| tr.positions.len() != len) {
        return Err(contract("trajectories must share a grid of at least two nodes"));
    }
    let clamped = !(t >= F::zero() && t <= F::one());
    let t = if t.is_nan() {
        F::zero()
    } else {
        t.max(F::zero()).min(F::one())
    };
    let steps = len - 1;
    let pos = t * F::of(steps as f64);
    let i = pos.floor().to_usize().unwrap_or(0).min(steps);
    let out = if i == steps {
        trajectories.iter().map(|tr| tr.positions[steps]).collect()
    } else {
        let w = pos - F::of(i as f64);
        let r = F::one() - w;
        trajectories
            .iter()
            .map(|tr| {
                let (a, b) = (tr.positions[i], tr.positions[i + 1]);
                if w == F::zero() {
                    a
                } else {
                    [r * a[0] + w * b[0], r * a[1] + w * b[1]]
                }
            })
            .collect()
    };
    Ok((out, clamped))
}
