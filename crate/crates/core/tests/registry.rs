use difflab_core::datasets::Dataset;
use difflab_core::quality::{energy_distance, quality_gate, ENERGY_GATE, GATE_SAMPLES};
use difflab_core::sampling::sample_trajectories;
use difflab_core::store::{load_pretrained, model_to_bytes, pretrained_registry};
use difflab_core::trainer::train_with_provenance;
use difflab_core::{DatasetKind, Model, SamplerKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_bundled_model_passes_its_quality_gate() {
    let registry = pretrained_registry().unwrap();
    assert_eq!(registry.len(), 4);
    for (name, file) in registry {
        let model: Model = file.to_model().unwrap();
        let kind = file.dataset.expect("bundled models record their dataset");
        for seed in [0, 1] {
            let report = quality_gate(&model, kind, seed).unwrap();
            assert!(report.passed, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn bundled_models_sample_with_every_compatible_sampler() {
    for (name, file) in pretrained_registry().unwrap() {
        let model: Model = file.to_model().unwrap();
        for kind in SamplerKind::ALL {
            let steps = kind.default_steps(model.schedule.as_ref().map(|s| s.steps()));
            let out = sample_trajectories(&model, kind, 16, steps, &mut ChaCha8Rng::seed_from_u64(0));
            assert_eq!(out.is_ok(), kind.compatible_with(model.objective), "{name} {kind}");
        }
    }
}

#[test]
fn bundled_model_regenerates_from_its_provenance() {
    let name = "smiley_flow";
    let bundled: Model = load_pretrained(name).unwrap();
    let prov = bundled.provenance.clone().unwrap();
    let data: Dataset<f64> = Dataset::builtin(prov.dataset, prov.dataset_n, prov.dataset_seed).unwrap();
    let retrained = train_with_provenance(
        &data,
        prov.dataset_n,
        prov.dataset_seed,
        bundled.objective,
        &prov.train,
        |_| {},
        None,
    )
    .unwrap()
    .model;
    // Training is deterministic, so the single-precision files agree exactly.
    assert_eq!(model_to_bytes(&retrained).unwrap(), model_to_bytes(&bundled).unwrap());
    let stored = retrained.params.flat();
    let worst = stored
        .iter()
        .zip(bundled.params.flat())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-30))
        .fold(0.0, f64::max);
    assert!(worst <= f32::EPSILON as f64, "relative storage error {worst:e}");
}

#[test]
fn independent_true_draws_sit_at_the_energy_floor() {
    for kind in [DatasetKind::ThreeDots, DatasetKind::Smiley] {
        for seed in 0..3 {
            let a: Dataset<f64> = Dataset::builtin(kind, GATE_SAMPLES, seed).unwrap();
            let b: Dataset<f64> = Dataset::builtin(kind, GATE_SAMPLES, seed + 100).unwrap();
            let d = energy_distance(&a.points, &b.points);
            assert!(d.abs() < ENERGY_GATE / 10.0, "{kind:?} seed {seed}: {d}");
        }
    }
}
