use std::sync::OnceLock;

use proptest::prelude::*;

use tsvdnet_core::dataset::Role;
use tsvdnet_core::evaluation::{evaluate, mean, Method, Reconstructions};
use tsvdnet_core::kaiser_bessel::kaiser_bessel_eval;
use tsvdnet_core::network::{network_forward, projected_forward, reconstruct};
use tsvdnet_core::phantom::PhantomSpec;
use tsvdnet_core::regularization::{
    complement_project, image_coefficients, stability_check, tsvd_apply,
};
use tsvdnet_core::svd::{svd_factorize, DEFAULT_RANK_CUTOFF};
use tsvdnet_core::system_matrix::{assemble_system_matrix, forward_apply, AssemblyOptions};
use tsvdnet_core::{
    Architecture, BasisGrid, CoefficientImage, Dataset, KaiserBesselParams, Measurement, MeasurementGeometry,
    NetworkParams, Sample, SvdBackend, SvdFactors, SystemMatrix, TruncationPolicy,
};

struct Fixture {
    grid: BasisGrid,
    geom: MeasurementGeometry,
    a: SystemMatrix,
    f: SvdFactors,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let kb = KaiserBesselParams {
            support_radius: 0.4,
            ..KaiserBesselParams::default()
        };
        let grid = BasisGrid::new(8, kb).unwrap();
        let geom = MeasurementGeometry::new(12, 24, 3.75).unwrap();
        let a = assemble_system_matrix(&grid, &geom, &AssemblyOptions::default()).unwrap();
        let f = svd_factorize(&a, DEFAULT_RANK_CUTOFF, SvdBackend::Deterministic).unwrap();
        Fixture { grid, geom, a, f }
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn image(values: Vec<f64>) -> CoefficientImage {
    let side = (values.len() as f64).sqrt() as usize;
    CoefficientImage::new(side, values).unwrap()
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 64)
}

fn data() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 12 * 24)
}

fn policy(f: &SvdFactors, kept: usize) -> TruncationPolicy {
    TruncationPolicy::from_kept(f, kept.min(f.rank())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kb_is_radial_and_compactly_supported(r in 0.0f64..0.2, t in 0.0f64..6.3) {
        let p = KaiserBesselParams::default();
        let v = kaiser_bessel_eval([r * t.cos(), r * t.sin()], &p);
        let w = kaiser_bessel_eval([r, 0.0], &p);
        prop_assert!((v - w).abs() <= 1e-12 * w.abs().max(1.0));
        prop_assert!(v >= 0.0);
        if r >= p.support_radius {
            prop_assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn grid_centers_and_detectors(side in 2usize..40, n in 1usize..100) {
        let grid = BasisGrid::new(side, KaiserBesselParams::default()).unwrap();
        let c = grid.centers();
        prop_assert_eq!(c.len(), side * side);
        let i = (n * 7919) % c.len();
        let (col, row) = (i % side, i / side);
        let h = 2.0 / (side - 1) as f64;
        prop_assert!((c[i][0] - (-1.0 + h * col as f64)).abs() < 1e-12);
        prop_assert!((c[i][1] - (-1.0 + h * row as f64)).abs() < 1e-12);
        let geom = MeasurementGeometry::new(n, 10, 3.75).unwrap();
        for (k, s) in geom.detector_positions().iter().enumerate() {
            let angle = (k + 1) as f64 * std::f64::consts::PI / n as f64;
            prop_assert!((s[0] - angle.cos()).abs() < 1e-12 && (s[1] - angle.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_model_is_linear(x1 in coeffs(), x2 in coeffs(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let fx = fixture();
        let y1 = forward_apply(&fx.a, &image(x1.clone())).unwrap().values;
        let y2 = forward_apply(&fx.a, &image(x2.clone())).unwrap().values;
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let y = forward_apply(&fx.a, &image(mix)).unwrap().values;
        let expected: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        let diff: Vec<f64> = y.iter().zip(&expected).map(|(p, q)| p - q).collect();
        let scale = a.abs() * norm(&y1) + b.abs() * norm(&y2);
        prop_assert!(norm(&diff) <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    fn truncation_count_is_monotone(a1 in -12.0f64..4.0, a2 in -12.0f64..4.0) {
        let f = &fixture().f;
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let p_lo = TruncationPolicy::from_alpha(f, 10f64.powf(lo) * f.sigma[0] * f.sigma[0]).unwrap();
        let p_hi = TruncationPolicy::from_alpha(f, 10f64.powf(hi) * f.sigma[0] * f.sigma[0]).unwrap();
        prop_assert!(p_lo.kept >= p_hi.kept);
        let r = f.rank();
        let last = f.sigma[r - 1];
        prop_assert_eq!(TruncationPolicy::from_alpha(f, last * last).unwrap().kept, r);
        prop_assert_eq!(TruncationPolicy::from_alpha(f, (f.sigma[0] * f.sigma[0]).next_up()).unwrap().kept, 0);
    }

    #[test]
    fn complement_projection_is_an_orthogonal_projector(z in coeffs(), kept in 0usize..64) {
        let f = &fixture().f;
        let p = policy(f, kept);
        let pz = complement_project(f, &p, &image(z.clone())).unwrap();
        let ppz = complement_project(f, &p, &pz).unwrap();
        let diff: Vec<f64> = pz.values.iter().zip(&ppz.values).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&diff) <= 1e-10 * norm(&z));
        let c = image_coefficients(f, &pz.values).unwrap();
        for ci in &c[..p.kept] {
            prop_assert!(ci.abs() <= 1e-10 * norm(&z));
        }
    }

    #[test]
    fn tsvd_lives_in_the_kept_subspace(y in data(), k1 in 0usize..64, k2 in 0usize..64) {
        let f = &fixture().f;
        let (small, large) = (k1.min(k2), k1.max(k2));
        let p1 = policy(f, small);
        let p2 = policy(f, large);
        let b1 = tsvd_apply(f, &p1, &Measurement::clean(y.clone())).unwrap();
        let b2 = tsvd_apply(f, &p2, &Measurement::clean(y)).unwrap();
        let c = image_coefficients(f, &b1.values).unwrap();
        let scale = norm(&b1.values).max(1e-300);
        for ck in &c[p1.kept..] {
            prop_assert!(ck.abs() <= 1e-10 * scale);
        }
        prop_assert!(norm(&complement_project(f, &p1, &b1).unwrap().values) <= 1e-10 * scale);
        // a larger kept set only adds orthogonal components
        let extra: Vec<f64> = b2.values.iter().zip(&b1.values).map(|(a, b)| a - b).collect();
        prop_assert!(dot(&extra, &b1.values).abs() <= 1e-10 * scale * norm(&b2.values).max(scale));
    }

    #[test]
    fn stability_estimate_holds(x in coeffs(), xi in data(), noise in 0.0f64..0.2, kept in 1usize..64) {
        let f = &fixture().f;
        let p = policy(f, kept);
        let ax = f.apply(&x);
        let peak = ax.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let noise: Vec<f64> = xi.iter().map(|v| v * noise * peak).collect();
        let report = stability_check(f, &p, &image(x), &noise).unwrap();
        prop_assert!(report.holds, "{report:?}");
    }

    #[test]
    fn network_only_touches_truncated_components(y in data(), kept in 0usize..64, seed in 0u64..1000) {
        let f = &fixture().f;
        let p = policy(f, kept);
        let params = NetworkParams::init(Architecture::unet(8), seed).unwrap();
        let y = Measurement::clean(y);
        let b = tsvd_apply(f, &p, &y).unwrap();
        let r = reconstruct(&params, f, &p, &y).unwrap();
        let phi = projected_forward(&params, f, &p, &b).unwrap();
        let u = network_forward(&params, &b).unwrap();
        let cb = image_coefficients(f, &b.values).unwrap();
        let cr = image_coefficients(f, &r.values).unwrap();
        let cphi = image_coefficients(f, &phi.values).unwrap();
        let scale = norm(&u.values).max(norm(&b.values)).max(1e-300);
        for i in 0..p.kept {
            prop_assert!((cb[i] - cr[i]).abs() <= 1e-10 * scale);
            prop_assert!(cphi[i].abs() <= 1e-10 * scale);
        }
        let zero = NetworkParams::zeros(Architecture::unet(8)).unwrap();
        prop_assert_eq!(reconstruct(&zero, f, &p, &y).unwrap(), b);
    }

    #[test]
    fn phantoms_stay_in_range(seed in any::<u64>()) {
        let spec = PhantomSpec::random(seed);
        prop_assert!(spec.ellipses.iter().chain(&spec.fine).all(|e| e.reach() <= 1.0 + 1e-12));
        let img = spec.render(&fixture().grid);
        prop_assert!(img.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn role_seed_domains_never_collide(master in any::<u64>(), i in 0usize..5000, j in 0usize..5000) {
        let roles = [Role::Train, Role::Validation, Role::Test];
        for (a, ra) in roles.iter().enumerate() {
            for rb in &roles[a + 1..] {
                prop_assert_ne!(ra.phantom_seed(master, i), rb.phantom_seed(master, j));
            }
        }
    }

    #[test]
    fn report_mean_is_the_arithmetic_mean(scales in prop::collection::vec(0.0f64..2.0, 1..6)) {
        let fx = fixture();
        let samples: Vec<Sample> = scales
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let x = PhantomSpec::random(Role::Test.phantom_seed(3, i)).render(&fx.grid);
                Sample { phantom_seed: Role::Test.phantom_seed(3, i), y: forward_apply(&fx.a, &x).unwrap(), x }
            })
            .collect();
        let images = samples
            .iter()
            .zip(&scales)
            .map(|(s, k)| image(s.x.values.iter().map(|v| v * k).collect()))
            .collect();
        let test = Dataset {
            role: Role::Test,
            seed: 3,
            noise_fraction: 0.0,
            grid: fx.grid,
            geometry: fx.geom,
            matrix_checksum: fx.a.checksum(),
            samples,
        };
        let recons = Reconstructions { method: Method::Tsvd, images, kept: vec![0; scales.len()] };
        let rep = evaluate(&recons, &test, 0).unwrap();
        prop_assert!((rep.mean - mean(&rep.per_sample)).abs() <= 1e-15);
        for (e, k) in rep.per_sample.iter().zip(&scales) {
            prop_assert!((e - (1.0 - k).abs()).abs() <= 1e-12);
        }
    }
}

#[test]
fn causality_zeros_are_exact() {
    let fx = fixture();
    let a = fx.grid.kb.support_radius;
    for i in 0..fx.grid.len() {
        let r = fx.grid.center(i);
        let col = fx.a.column(i);
        for n in 0..fx.geom.detectors {
            let s = fx.geom.detector(n);
            let d = (s[0] - r[0]).hypot(s[1] - r[1]);
            for j in 0..fx.geom.time_samples {
                if fx.geom.time(j) < d - a {
                    assert_eq!(col[fx.geom.row(n, j)], 0.0);
                }
            }
        }
    }
}
