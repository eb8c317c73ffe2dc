//! Forward-process statistics and sampler oracles on Gaussian data, where the
//! optimal predictors are known in closed form.

use difflab_core::analytic::{self, GaussianData};
use difflab_core::diffusion::{flow_interpolant, forward_noise, linear_schedule};
use difflab_core::sampling::{deterministic_step, positions_at_time, run_sampler, sample_source, to_ui_time};
use difflab_core::{NetTime, Objective, Point2, Predictor, SamplerKind, Schedule, ScheduleConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MU: Point2 = [0.5, -0.3];
const SIGMA: f64 = 0.2;

const DATA: GaussianData<f64> = GaussianData { mean: MU, std: SIGMA };

fn noise_oracle(schedule: &Schedule) -> analytic::OptimalNoise<'_, f64> {
    analytic::OptimalNoise { data: DATA, schedule }
}

const VELOCITY_ORACLE: analytic::OptimalVelocity<f64> = analytic::OptimalVelocity { data: DATA };

fn mean_std(points: &[Point2]) -> ([f64; 2], [f64; 2]) {
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    let mut std = [0.0; 2];
    for c in 0..2 {
        mean[c] = points.iter().map(|p| p[c]).sum::<f64>() / n;
        std[c] = (points.iter().map(|p| (p[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    }
    (mean, std)
}

fn endpoints(trajs: &[difflab_core::Trajectory]) -> Vec<Point2> {
    trajs.iter().map(|t| *t.positions.last().unwrap()).collect()
}

#[test]
fn source_moments() {
    let pts: Vec<Point2> = sample_source(100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let (mean, std) = mean_std(&pts);
    for c in 0..2 {
        assert!(mean[c].abs() < 0.013, "mean {mean:?}");
        assert!((0.98..=1.02).contains(&(std[c] * std[c])), "std {std:?}");
    }
    assert!(sample_source::<f64, _>(0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

#[test]
fn optimal_noise_matches_monte_carlo_regression() {
    // Least-squares fit of ε on x_k over simulated pairs recovers the affine
    // posterior mean.
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z0: Vec<Point2> = sample_source(n, &mut rng).unwrap();
    let eps: Vec<Point2> = sample_source(n, &mut rng).unwrap();
    for k in [20, 100, 180] {
        let xs: Vec<Point2> = z0
            .iter()
            .zip(&eps)
            .map(|(z, e)| forward_noise([MU[0] + SIGMA * z[0], MU[1] + SIGMA * z[1]], k, *e, &sched).unwrap())
            .collect();
        let (mx, sx) = mean_std(&xs);
        let (me, _) = mean_std(&eps);
        let oracle = noise_oracle(&sched);
        let at_zero = oracle.predict(
            &[[0.0, 0.0]],
            NetTime::Step {
                k,
                steps: sched.steps(),
            },
        )[0];
        let at_one = oracle.predict(
            &[[1.0, 1.0]],
            NetTime::Step {
                k,
                steps: sched.steps(),
            },
        )[0];
        for c in 0..2 {
            let cov = xs
                .iter()
                .zip(&eps)
                .map(|(x, e)| (x[c] - mx[c]) * (e[c] - me[c]))
                .sum::<f64>()
                / (n - 1) as f64;
            let slope = cov / (sx[c] * sx[c]);
            let intercept = me[c] - slope * mx[c];
            let (want_slope, want_intercept) = (at_one[c] - at_zero[c], at_zero[c]);
            assert!(
                (slope / want_slope - 1.0).abs() < 0.02,
                "k={k} slope {slope} vs {want_slope}"
            );
            assert!(
                (intercept - want_intercept).abs() < 0.02,
                "k={k} intercept {intercept} vs {want_intercept}"
            );
        }
    }
}

#[test]
fn forward_marginal_matches_closed_form() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let t = sched.steps();
    let x0 = [0.3, -0.7];
    let n = 100_000;
    let eps: Vec<Point2> = sample_source(n, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for k in [1, t / 2, t] {
        let ab = sched.alpha_bar(k).unwrap();
        let xs: Vec<Point2> = eps.iter().map(|e| forward_noise(x0, k, *e, &sched).unwrap()).collect();
        let (mean, std) = mean_std(&xs);
        for c in 0..2 {
            let tol = 4.0 * ((1.0 - ab) / n as f64).sqrt();
            assert!((mean[c] - ab.sqrt() * x0[c]).abs() <= tol, "k={k} mean {mean:?}");
            let var = std[c] * std[c];
            assert!((var / (1.0 - ab) - 1.0).abs() <= 0.02, "k={k} var {var}");
        }
    }
}

#[test]
fn deterministic_sampler_transports_gaussian_data() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let sources = sample_source(10_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let trajs = run_sampler(
        &noise_oracle(&sched),
        Objective::NoisePrediction,
        Some(&sched),
        SamplerKind::Deterministic,
        &sources,
        sched.steps(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let (mean, std) = mean_std(&endpoints(&trajs));
    for c in 0..2 {
        assert!((mean[c] - MU[c]).abs() < 0.01, "mean {mean:?}");
        assert!((std[c] / SIGMA - 1.0).abs() < 0.05, "std {std:?}");
    }
}

#[test]
fn ancestral_sampler_transports_gaussian_data() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let sources = sample_source(10_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let trajs = run_sampler(
        &noise_oracle(&sched),
        Objective::NoisePrediction,
        Some(&sched),
        SamplerKind::Ancestral,
        &sources,
        sched.steps(),
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .unwrap();
    let (mean, std) = mean_std(&endpoints(&trajs));
    for c in 0..2 {
        assert!((mean[c] - MU[c]).abs() < 0.01, "mean {mean:?}");
        assert!((std[c] / SIGMA - 1.0).abs() < 0.05, "std {std:?}");
    }
}

#[test]
fn euler_sampler_transports_gaussian_data() {
    let sources = sample_source(10_000, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let trajs = run_sampler::<f64, _, _>(
        &VELOCITY_ORACLE,
        Objective::FlowMatching,
        None,
        SamplerKind::EulerOde,
        &sources,
        200,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let (mean, std) = mean_std(&endpoints(&trajs));
    for c in 0..2 {
        assert!((mean[c] - MU[c]).abs() < 0.01, "mean {mean:?}");
        assert!((std[c] / SIGMA - 1.0).abs() < 0.05, "std {std:?}");
    }
}

#[test]
fn endpoint_spread_converges_with_steps() {
    // Coarse grids shrink the σ = 0.2 target; the shortfall must fall with
    // every refinement.
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let sources = sample_source(2000, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let spread = |kind, steps| {
        let (pred, obj, sch): (&dyn Predictor<f64>, _, _) = match kind {
            SamplerKind::Deterministic => (&noise_oracle(&sched) as _, Objective::NoisePrediction, Some(&sched)),
            _ => (&VELOCITY_ORACLE as _, Objective::FlowMatching, None),
        };
        let trajs = run_sampler(
            &pred,
            obj,
            sch,
            kind,
            &sources,
            steps,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let (_, std) = mean_std(&endpoints(&trajs));
        (SIGMA - 0.5 * (std[0] + std[1])).abs()
    };
    for kind in [SamplerKind::Deterministic, SamplerKind::EulerOde] {
        let gaps: Vec<f64> = [25, 50, 100, 200].iter().map(|&s| spread(kind, s)).collect();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{kind:?}: {gaps:?}");
    }
}

/// Mean endpoint distance from the exact flow map `z ↦ μ + σz`.
fn euler_error(steps: usize, sources: &[Point2]) -> f64 {
    let trajs = run_sampler::<f64, _, _>(
        &VELOCITY_ORACLE,
        Objective::FlowMatching,
        None,
        SamplerKind::EulerOde,
        sources,
        steps,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    trajs
        .iter()
        .zip(sources)
        .map(|(t, z)| {
            let end = t.positions.last().unwrap();
            let exact = [MU[0] + SIGMA * z[0], MU[1] + SIGMA * z[1]];
            ((end[0] - exact[0]).powi(2) + (end[1] - exact[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / sources.len() as f64
}

#[test]
fn euler_is_first_order() {
    let sources = sample_source(1000, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let errs: Vec<f64> = [10, 20, 40].iter().map(|&s| euler_error(s, &sources)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.7..=2.3).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn constant_field_is_integrated_exactly() {
    struct Constant;
    impl Predictor<f64> for Constant {
        fn predict(&self, xs: &[Point2], _: NetTime<f64>) -> Vec<Point2> {
            vec![[1.0, 0.0]; xs.len()]
        }
    }
    let trajs = run_sampler::<f64, _, _>(
        &Constant,
        Objective::FlowMatching,
        None,
        SamplerKind::EulerOde,
        &[[0.0, 0.0]],
        10,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    // Ten steps of 0.1 accumulate to 1 up to rounding of the grid.
    let end = trajs[0].positions[10];
    assert!((end[0] - 1.0).abs() < 1e-15 && end[1] == 0.0);
}

#[test]
fn trajectories_use_the_ui_grid() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let sources = sample_source(3, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let trajs = run_sampler(
        &noise_oracle(&sched),
        Objective::NoisePrediction,
        Some(&sched),
        SamplerKind::Deterministic,
        &sources,
        25,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for (i, t) in trajs.iter().enumerate() {
        assert_eq!(t.source_index, i);
        assert_eq!(t.positions[0], sources[i]);
        assert_eq!(t.times.len(), 26);
        for (j, &time) in t.times.iter().enumerate() {
            assert_eq!(time, j as f64 / 25.0);
        }
    }
    assert_eq!(to_ui_time::<f64>(200, 200).unwrap(), 0.0);
    assert_eq!(to_ui_time::<f64>(0, 200).unwrap(), 1.0);
    assert_eq!(to_ui_time::<f64>(25, 50).unwrap(), 0.5);
    assert!(to_ui_time::<f64>(201, 200).is_err());
}

#[test]
fn deterministic_samplers_ignore_the_rng() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let sources = sample_source(20, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let run = |seed| {
        run_sampler(
            &noise_oracle(&sched),
            Objective::NoisePrediction,
            Some(&sched),
            SamplerKind::Deterministic,
            &sources,
            50,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn ancestral_runs_differ_across_seeds_at_every_intermediate_index() {
    let sched = linear_schedule::<f64>(20, 1e-3, 0.2).unwrap();
    let sources = sample_source(5, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let run = |seed| {
        run_sampler(
            &noise_oracle(&sched),
            Objective::NoisePrediction,
            Some(&sched),
            SamplerKind::Ancestral,
            &sources,
            20,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    };
    let (a, b) = (run(1), run(2));
    for (ta, tb) in a.iter().zip(&b) {
        assert_eq!(ta.positions[0], tb.positions[0]);
        // The last step adds no noise but starts from different points.
        for j in 2..=20 {
            assert_ne!(ta.positions[j], tb.positions[j]);
        }
    }
}

#[test]
fn incompatible_samplers_are_usage_errors() {
    let sched: Schedule = ScheduleConfig::default().build().unwrap();
    let r = run_sampler(
        &noise_oracle(&sched),
        Objective::NoisePrediction,
        Some(&sched),
        SamplerKind::EulerOde,
        &[[0.0, 0.0]],
        10,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(r, Err(difflab_core::Error::IncompatibleSampler { .. })));
    let r = run_sampler(
        &noise_oracle(&sched),
        Objective::NoisePrediction,
        Some(&sched),
        SamplerKind::Deterministic,
        &[[0.0, 0.0]],
        7,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(r, Err(difflab_core::Error::Usage(_))));
}

#[test]
fn positions_at_time_endpoints_and_midpoints() {
    let sources = sample_source(4, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let trajs = run_sampler::<f64, _, _>(
        &VELOCITY_ORACLE,
        Objective::FlowMatching,
        None,
        SamplerKind::EulerOde,
        &sources,
        10,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let (start, clamped) = positions_at_time(&trajs, 0.0).unwrap();
    assert!(!clamped);
    assert_eq!(start, sources);
    let (end, _) = positions_at_time(&trajs, 1.0).unwrap();
    assert_eq!(end, endpoints(&trajs));
    let (mid, _) = positions_at_time(&trajs, 0.35).unwrap();
    for (m, t) in mid.iter().zip(&trajs) {
        for (c, got) in m.iter().enumerate() {
            let want = 0.5 * (t.positions[3][c] + t.positions[4][c]);
            assert!((got - want).abs() < 1e-12);
        }
    }
    let (low, clamped) = positions_at_time(&trajs, -0.5).unwrap();
    assert!(clamped);
    assert_eq!(low, sources);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deterministic_chain_equals_coarse_step(
        x0 in prop::array::uniform2(-2.0f64..2.0),
        eps in prop::array::uniform2(-3.0f64..3.0),
        k_from in 1usize..=200,
        frac in 0.0f64..1.0,
    ) {
        let sched: Schedule = ScheduleConfig::default().build().unwrap();
        let k_to = ((k_from as f64) * frac) as usize;
        let x = forward_noise(x0, k_from, eps, &sched).unwrap();
        let coarse = deterministic_step(x, k_from, k_to, eps, &sched).unwrap();
        let mut fine = x;
        for k in (k_to + 1..=k_from).rev() {
            fine = deterministic_step(fine, k, k - 1, eps, &sched).unwrap();
        }
        for c in 0..2 {
            prop_assert!((fine[c] - coarse[c]).abs() < 1e-9);
        }
        if k_to == 0 {
            for c in 0..2 {
                prop_assert!((coarse[c] - x0[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn interpolant_slope_is_the_target(
        z in prop::array::uniform2(-3.0f64..3.0),
        x1 in prop::array::uniform2(-3.0f64..3.0),
        s in 0.0f64..0.99,
    ) {
        let ds = 1e-3;
        let (a, v) = flow_interpolant(z, x1, s);
        let (b, _) = flow_interpolant(z, x1, s + ds);
        for c in 0..2 {
            prop_assert!(((b[c] - a[c]) / ds - v[c]).abs() < 1e-9);
        }
    }
}
