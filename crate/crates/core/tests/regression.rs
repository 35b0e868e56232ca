use std::sync::OnceLock;

use tsvdnet_core::dataset::{build_dataset, simulate, MANIFEST};
use tsvdnet_core::network::{network_forward, train};
use tsvdnet_core::phantom::generate_phantom;
use tsvdnet_core::regularization::select_alpha;
use tsvdnet_core::svd::{svd_factorize, DEFAULT_RANK_CUTOFF};
use tsvdnet_core::system_matrix::{assemble_system_matrix, AssemblyOptions};
use tsvdnet_core::{
    Architecture, BasisGrid, Dataset, Error, KaiserBesselParams, MeasurementGeometry, NetworkParams, Role,
    SvdBackend, SvdFactors, SystemMatrix, TrainConfig, TruncationPolicy,
};

fn small() -> &'static (SystemMatrix, SvdFactors) {
    static F: OnceLock<(SystemMatrix, SvdFactors)> = OnceLock::new();
    F.get_or_init(|| {
        let kb = KaiserBesselParams {
            support_radius: 0.4,
            ..KaiserBesselParams::default()
        };
        let grid = BasisGrid::new(8, kb).unwrap();
        let geom = MeasurementGeometry::new(12, 24, 3.75).unwrap();
        let a = assemble_system_matrix(&grid, &geom, &AssemblyOptions::default()).unwrap();
        let f = svd_factorize(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        (a, f)
    })
}

#[test]
fn three_hundred_sample_round_trip() {
    let (a, _) = small();
    let d = build_dataset(300, &a.meta.grid, a, 0.0, Role::Train, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sum = d.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.samples, d.samples);
    assert_eq!(back.id(), d.id());
    assert_eq!(d.save(dir.path()).unwrap(), sum);

    let noisy = simulate(&build_dataset(3, &a.meta.grid, a, 0.0, Role::Test, 42).unwrap(), a, 0.07).unwrap();
    assert_eq!(noisy.samples, build_dataset(3, &a.meta.grid, a, 0.07, Role::Test, 42).unwrap().samples);

    let manifest = Dataset::read_manifest(dir.path()).unwrap();
    let victim = dir.path().join(&manifest.samples[123].y_file);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Checksum { .. })));
    assert!(dir.path().join(MANIFEST).exists());
}

#[test]
fn tiny_training_run_halves_the_loss() {
    let (a, f) = small();
    let data = build_dataset(10, &a.meta.grid, a, 0.0, Role::Train, 3).unwrap();
    let policy = TruncationPolicy::from_kept(f, 20).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.1,
        momentum: 0.9,
        batch_size: 5,
        channels: vec![4, 8],
        ..TrainConfig::default()
    };
    let out = train(&data, f, &policy, &cfg).unwrap();
    let first = out.loss_trace[0];
    let last = *out.loss_trace.last().unwrap();
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    let serial = train(&data, f, &policy, &TrainConfig { parallel: false, ..cfg }).unwrap();
    assert_eq!(serial.loss_trace, out.loss_trace);
    assert_eq!(serial.params.weights, out.params.weights);
}

#[test]
fn noisy_training_data_is_refused_by_default() {
    let (a, f) = small();
    let mut data = build_dataset(2, &a.meta.grid, a, 0.0, Role::Train, 3).unwrap();
    data.noise_fraction = 0.05;
    let policy = TruncationPolicy::from_kept(f, 20).unwrap();
    assert!(train(&data, f, &policy, &TrainConfig::default()).is_err());
    let test = build_dataset(2, &a.meta.grid, a, 0.0, Role::Test, 3).unwrap();
    assert!(matches!(train(&test, f, &policy, &TrainConfig::default()), Err(Error::RoleViolation(_))));
}

/// Frozen outputs of the small fixture; a change means the forward model,
/// factorization, noise stream or selection rule changed.
#[test]
fn pinned_selection_and_network_output() {
    let (a, f) = small();
    let phantoms: Vec<_> = (0..6)
        .map(|i| generate_phantom(Role::Validation.phantom_seed(8, i), &a.meta.grid))
        .collect();
    let sel = select_alpha(f, &phantoms, 0.07, 4, 99).unwrap();
    assert_eq!(sel.policy.kept, PINNED_KEPT);

    let params = NetworkParams::init(Architecture::unet(8), 1).unwrap();
    let out = network_forward(&params, &phantoms[0]).unwrap();
    for (i, expected) in PINNED_OUTPUT {
        let v = out.values[i];
        assert!((v - expected).abs() <= 1e-12 * expected.abs().max(1.0), "output {i}: {v:e}");
    }
}

const PINNED_KEPT: usize = 63;
const PINNED_OUTPUT: [(usize, f64); 3] = [
    (0, -1.3965031410907694e-1),
    (27, -2.619595320210999e-1),
    (63, 1.708340065521225e-2),
];
