use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::container::Fnv1a;
use crate::geometry::{Measurement, NoiseDescriptor};

pub(crate) fn gaussian_noise<R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; len];
    }
    (0..len)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// `y + ξ` with `ξ` i.i.d. `N(0, (ρ·max_j y_j)²)`.
pub fn add_noise(y: &Measurement, fraction: f64, seed: u64) -> Measurement {
    assert!(fraction >= 0.0, "noise fraction must be non-negative");
    let peak = y.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = fraction * peak.max(0.0);
    let mut values = y.values.clone();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Measurement {
        values,
        noise: NoiseDescriptor {
            fraction,
            seed: Some(seed),
        },
    }
}

/// Domain-separated child seed: distinct `(tag, index)` pairs give
/// unrelated streams from the same master seed.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = Fnv1a::default();
    h.update(tag.as_bytes());
    h.update(&[0xff]);
    h.update(&master.to_le_bytes());
    h.update(&index.to_le_bytes());
    // splitmix64 finalizer
    let mut z = h.finish().wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
