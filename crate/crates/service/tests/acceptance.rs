//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

mod common;

use std::panic::AssertUnwindSafe;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use difflab_core::analytic::{GaussianData, OptimalNoise, OptimalVelocity};
use difflab_core::datasets::Dataset;
use difflab_core::density::{density_of_points, kde, marching_squares, GridSpec};
use difflab_core::diffusion::forward_noise;
use difflab_core::nn::{mlp_backward, mlp_forward, mlp_init, mlp_predict, MlpParams};
use difflab_core::quality::quality_gate;
use difflab_core::sampling::{run_sampler, sample_source, sample_trajectories};
use difflab_core::store::{load_model, model_to_bytes};
use difflab_core::trainer::{train, train_with_provenance};
use difflab_core::{
    Activation, DatasetKind, MlpConfig, Model, Objective, Point2, SamplerKind, Schedule, ScheduleConfig, TrainConfig,
};
use difflab_service::wire::{DatasetView, DensityPayload, Event, SessionView, TrainingState, TrajectoryPayload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;

/// Label, oracle, objective, schedule, sampler, steps.
type OracleRun<'a> = (
    &'a str,
    &'a dyn difflab_core::Predictor<f64>,
    Objective,
    Option<&'a Schedule>,
    SamplerKind,
    usize,
);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: f64, detail: String) -> Outcome {
    let secs = elapsed.as_secs_f64();
    check(secs < limit_s, format!("{detail}, {secs:.2}s (limit {limit_s}s)"))
}

fn mean_std(points: &[Point2]) -> ([f64; 2], [f64; 2]) {
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for c in 0..2 {
        mean[c] = points.iter().map(|p| p[c]).sum::<f64>() / n;
        std[c] = (points.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, std)
}

// Gradient check

const H: f64 = 1e-5;

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn param_mut(p: &mut MlpParams<f64>, mut idx: usize) -> &mut f64 {
    for t in p.tensors_mut() {
        if idx < t.len() {
            return &mut t[idx];
        }
        idx -= t.len();
    }
    panic!("parameter index out of range")
}

fn gradient_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let depth = rng.random_range(0..=3);
    let config = MlpConfig {
        input_dim: rng.random_range(1..=6),
        hidden_dims: (0..depth).map(|_| rng.random_range(1..=12)).collect(),
        output_dim: rng.random_range(1..=3),
        activation: if seed % 3 == 2 {
            Activation::Relu
        } else {
            Activation::Silu
        },
        time_embed_dim: 0,
    };
    let mut params = mlp_init(&config, seed).unwrap();
    for l in &mut params.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let batch = rng.random_range(1..=4);
    let inputs: Vec<f64> = (0..batch * config.input_dim)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let out_grad: Vec<f64> = (0..batch * config.output_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();

    let (_, cache) = mlp_forward(&params, &inputs).unwrap();
    let analytic = mlp_backward(&params, &cache, &out_grad).unwrap().flat();
    let objective = |p: &MlpParams<f64>| -> f64 {
        let y = mlp_predict(p, &inputs).unwrap();
        y.iter().zip(&out_grad).map(|(a, b)| a * b).sum()
    };
    let mut p = params.clone();
    let numeric: Vec<f64> = (0..params.num_params())
        .map(|i| {
            let orig = *param_mut(&mut p, i);
            *param_mut(&mut p, i) = orig + H;
            let up = objective(&p);
            *param_mut(&mut p, i) = orig - H;
            let down = objective(&p);
            *param_mut(&mut p, i) = orig;
            (up - down) / (2.0 * H)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let worst = (0..20).map(gradient_case).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    check(worst < 1e-5, format!("worst relative error {worst:.2e} over 20 cases"))?;
    within(elapsed, 5.0, format!("worst relative error {worst:.2e} over 20 cases"))
}

// Forward marginals

fn forward_marginals() -> Outcome {
    let start = Instant::now();
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let t = sched.steps();
    let x0 = [0.3, -0.7];
    let n = 100_000;
    let eps: Vec<Point2> = sample_source(n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for k in [1, t / 2, t] {
        let ab = sched.alpha_bar(k).unwrap();
        let xs: Vec<Point2> = eps.iter().map(|e| forward_noise(x0, k, *e, &sched).unwrap()).collect();
        let (mean, std) = mean_std(&xs);
        for c in 0..2 {
            let tol = 4.0 * ((1.0 - ab) / n as f64).sqrt();
            worst_mean = worst_mean.max((mean[c] - ab.sqrt() * x0[c]).abs() / tol);
            worst_var = worst_var.max((std[c] * std[c] / (1.0 - ab) - 1.0).abs());
        }
    }
    let detail = format!(
        "mean error {worst_mean:.2} of tolerance, variance error {:.2}%",
        100.0 * worst_var
    );
    check(worst_mean <= 1.0 && worst_var <= 0.02, detail.clone())?;
    within(start.elapsed(), 5.0, detail)
}

// Analytic transport

const GAUSSIAN: GaussianData<f64> = GaussianData {
    mean: [0.5, -0.3],
    std: 0.2,
};

fn analytic_transport() -> Outcome {
    let start = Instant::now();
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let noise = OptimalNoise {
        data: GAUSSIAN,
        schedule: &sched,
    };
    let velocity = OptimalVelocity { data: GAUSSIAN };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sources: Vec<Point2> = sample_source(10_000, &mut rng).unwrap();
    let mut report = Vec::new();
    let mut ok = true;
    let runs: [OracleRun; 2] = [
        (
            "deterministic",
            &noise,
            Objective::NoisePrediction,
            Some(&sched),
            SamplerKind::Deterministic,
            sched.steps(),
        ),
        (
            "euler_ode",
            &velocity,
            Objective::FlowMatching,
            None,
            SamplerKind::EulerOde,
            200,
        ),
    ];
    for (name, pred, objective, schedule, kind, steps) in runs {
        let trajs = run_sampler(
            &pred,
            objective,
            schedule,
            kind,
            &sources,
            steps,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let ends: Vec<Point2> = trajs.iter().map(|t| *t.positions.last().unwrap()).collect();
        let (mean, std) = mean_std(&ends);
        let mean_err = (0..2).map(|c| (mean[c] - GAUSSIAN.mean[c]).abs()).fold(0.0, f64::max);
        let std_err = (0..2).map(|c| (std[c] / GAUSSIAN.std - 1.0).abs()).fold(0.0, f64::max);
        ok &= mean_err < 0.01 && std_err < 0.05;
        report.push(format!(
            "{name} ({steps} steps) mean err {mean_err:.4}, std err {:.2}%",
            100.0 * std_err
        ));
    }
    check(ok, report.join("; "))?;
    within(start.elapsed(), 10.0, report.join("; "))
}

// Euler order

fn euler_order() -> Outcome {
    let velocity = OptimalVelocity { data: GAUSSIAN };
    let sources: Vec<Point2> = sample_source(1000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let error = |steps: usize| {
        let trajs = run_sampler(
            &velocity,
            Objective::FlowMatching,
            None,
            SamplerKind::EulerOde,
            &sources,
            steps,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        trajs
            .iter()
            .zip(&sources)
            .map(|(t, z)| {
                let end = t.positions.last().unwrap();
                let exact = [
                    GAUSSIAN.mean[0] + GAUSSIAN.std * z[0],
                    GAUSSIAN.mean[1] + GAUSSIAN.std * z[1],
                ];
                (end[0] - exact[0]).hypot(end[1] - exact[1])
            })
            .sum::<f64>()
            / sources.len() as f64
    };
    let errs: Vec<f64> = [10, 20, 40].into_iter().map(error).collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    check(
        ratios.iter().all(|r| (1.7..=2.3).contains(r)),
        format!("ratios per doubling {:.3}, {:.3}", ratios[0], ratios[1]),
    )
}

// Training quality

fn training_quality() -> Outcome {
    let mut report = Vec::new();
    let mut ok = true;
    for seed in 0..=2u64 {
        let data: Dataset<f64> = Dataset::builtin(DatasetKind::ThreeDots, 2000, seed).unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let model = train(&data, Objective::FlowMatching, &config, |_| {}, None)
            .unwrap()
            .model;
        let secs = start.elapsed().as_secs_f64();
        let q = quality_gate(&model, DatasetKind::ThreeDots, seed).unwrap();
        let near = q.near_centers.unwrap_or(0.0);
        ok &= secs <= 15.0 && near >= 0.9 && q.energy_distance < 0.05;
        report.push(format!(
            "seed {seed}: {secs:.1}s, {:.1}% near, energy {:.4}",
            100.0 * near,
            q.energy_distance
        ));
    }
    check(ok, report.join("; "))
}

// Density and contours

fn density_contours() -> Outcome {
    let grid = GridSpec::default();
    let pts: Vec<Point2> = sample_source::<f64, _>(2000, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap()
        .into_iter()
        .map(|z| [0.3 * z[0], 0.3 * z[1]])
        .collect();
    let mass = density_of_points(&pts, &grid).unwrap().mass();

    let h = 0.25;
    let d = kde(&[[0.1, -0.05]], &grid, h).unwrap();
    let peak = 1.0 / (2.0 * std::f64::consts::PI * h * h);
    let level = 0.3 * peak;
    let r = h * (2.0 * (peak / level).ln()).sqrt();
    let set = marching_squares(&d, &[level]);
    let chains = &set.levels[0].chains;
    let area = chains.iter().map(|c| c.signed_area().abs()).sum::<f64>();
    let rel = area / (std::f64::consts::PI * r * r) - 1.0;
    check(
        (0.95..=1.0).contains(&mass) && chains.len() == 1 && rel.abs() < 0.03,
        format!("mass {mass:.4}, contour area error {:.2}%", 100.0 * rel),
    )
}

// Persistence

fn persistence() -> Outcome {
    let data: Dataset<f64> = Dataset::builtin(DatasetKind::Smiley, 500, 3).unwrap();
    let config = TrainConfig {
        epochs: 5,
        steps_per_epoch: 10,
        batch_size: 128,
        preview_n: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    let mut report = Vec::new();
    let mut ok = true;
    for (objective, kind) in [
        (Objective::NoisePrediction, SamplerKind::Deterministic),
        (Objective::FlowMatching, SamplerKind::EulerOde),
    ] {
        let model = train_with_provenance(&data, 500, 3, objective, &config, |_| {}, None)
            .unwrap()
            .model;
        let bytes = model_to_bytes(&model).unwrap();
        let loaded: Model = load_model(&bytes).unwrap();
        let ends = |m: &Model| -> Vec<Point2> {
            sample_trajectories(m, kind, 500, 50, &mut ChaCha8Rng::seed_from_u64(8))
                .unwrap()
                .into_iter()
                .map(|t| *t.positions.last().unwrap())
                .collect()
        };
        let worst = ends(&model)
            .iter()
            .zip(ends(&loaded))
            .flat_map(|(a, b)| [(a[0] - b[0]).abs(), (a[1] - b[1]).abs()])
            .fold(0.0, f64::max);
        let stable = model_to_bytes(&loaded).unwrap() == bytes && model_to_bytes(&model).unwrap() == bytes;
        ok &= worst <= 1e-5 && stable;
        report.push(format!(
            "{}: deviation {worst:.1e}, byte-stable {stable}",
            kind.as_str()
        ));
    }
    check(ok, report.join("; "))
}

// Service integration

async fn service_flow() -> Outcome {
    let srv = common::start_default().await;
    let created = srv.post("/sessions", json!({})).await;
    if created.status != 201 {
        return Err(format!("create returned {}", created.status));
    }
    let id = created.json::<SessionView>().id;

    let r = srv
        .put(&format!("/sessions/{id}/dataset"), common::strokes_body(1000))
        .await;
    let data: DatasetView = r.json();
    if r.status != 200 || data.points.len() != 1000 {
        return Err(format!("set_dataset returned {}", r.status));
    }

    let mut events = srv.events(&id).await;
    let epochs = 8;
    let overrides = json!({"epochs": epochs, "steps_per_epoch": 10, "batch_size": 128, "preview_n": 100});
    let r = srv
        .post(
            &format!("/sessions/{id}/train"),
            json!({"objective": "flow_matching", "overrides": overrides}),
        )
        .await;
    if r.status != 202 || r.json::<SessionView>().training.state != TrainingState::Running {
        return Err(format!("train returned {}", r.status));
    }
    let seen = events.until_terminal().await;
    let order: Vec<usize> = seen
        .iter()
        .filter_map(|e| match e {
            Event::EpochSnapshot { epoch, .. } => Some(*epoch),
            _ => None,
        })
        .collect();
    if order != (1..=epochs).collect::<Vec<_>>() {
        return Err(format!("epoch order {order:?}"));
    }
    let terminals = seen.iter().filter(|e| e.is_terminal()).count();
    if terminals != 1 || seen.last() != Some(&Event::TrainingDone { partial: false }) {
        return Err(format!("terminal events {terminals}, last {:?}", seen.last()));
    }
    if !events.quiet_for(Duration::from_millis(300)).await {
        return Err("events after the terminal one".into());
    }
    let view = srv.wait_idle(&id).await;
    if view.training.state != TrainingState::Done || view.model.is_none() {
        return Err(format!("final state {:?}", view.training.state));
    }

    let r = srv
        .post(
            &format!("/sessions/{id}/sample"),
            json!({"n": 200, "steps": 40, "seed": 1}),
        )
        .await;
    let payload: TrajectoryPayload = r.json();
    let shape_ok =
        payload.trajectories.len() == 200 && payload.trajectories.iter().all(|t| t.len() == payload.times.len());
    if r.status != 200 || !shape_ok || payload.times.len() != 41 {
        return Err(format!(
            "sample returned {} with {} times",
            r.status,
            payload.times.len()
        ));
    }

    let r = srv.get(&format!("/sessions/{id}/density?t=0.5&n=1000&seed=1")).await;
    let frame: DensityPayload = r.json();
    if r.status != 200 || frame.grid.values.len() != frame.grid.nx * frame.grid.ny || frame.contours.levels.is_empty() {
        return Err(format!("density returned {}", r.status));
    }
    Ok(format!(
        "{epochs} ordered epochs, 1 terminal event, sample {}x{}, density {}x{} with {} levels",
        payload.trajectories.len(),
        payload.times.len(),
        frame.grid.nx,
        frame.grid.ny,
        frame.contours.levels.len()
    ))
}

fn service_integration() -> Outcome {
    tokio::runtime::Runtime::new().unwrap().block_on(service_flow())
}

type Criterion = fn() -> Outcome;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 8] = [
        ("gradient oracle", gradient_oracle),
        ("forward marginals", forward_marginals),
        ("analytic gaussian transport", analytic_transport),
        ("euler order", euler_order),
        ("training quality gate", training_quality),
        ("kde and contours", density_contours),
        ("persistence", persistence),
        ("service integration", service_integration),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
