//! Randomized modified Shepp-Logan phantoms with a smooth random deformation.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BasisGrid, CoefficientImage};

/// Interior ellipse count.
pub const INTERIOR_COUNT: RangeInclusive<usize> = 6..=12;
/// Interior ellipse centers lie within this distance of the skull center.
pub const CENTER_RADIUS: f64 = 0.7;
pub const INTERIOR_AXES: (f64, f64) = (0.05, 0.4);
pub const INTERIOR_INTENSITY: (f64, f64) = (-0.4, 0.8);
pub const FINE_COUNT: RangeInclusive<usize> = 3..=8;
pub const FINE_AXES: (f64, f64) = (0.01, 0.05);
pub const FINE_INTENSITY: (f64, f64) = (0.2, 0.8);
pub const DEFORMATION_AMPLITUDE: f64 = 0.08;
pub const CORRELATION_LENGTH: f64 = 0.3;

/// The deformation lattice covers `[-LATTICE_EXTENT, LATTICE_EXTENT]²`.
const LATTICE_EXTENT: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Rotation of the first semi-axis against the x axis.
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = (dx * c + dy * s) / self.semi_axes[0];
        let v = (-dx * s + dy * c) / self.semi_axes[1];
        u * u + v * v <= 1.0
    }

    /// Radius of the smallest origin-centered disk holding the ellipse.
    pub fn reach(&self) -> f64 {
        self.center[0].hypot(self.center[1]) + self.semi_axes[0].max(self.semi_axes[1])
    }
}

/// The two outer ellipses of the modified Shepp-Logan phantom.
pub fn skull() -> [Ellipse; 2] {
    [
        Ellipse {
            center: [0.0, 0.0],
            semi_axes: [0.69, 0.92],
            angle: 0.0,
            intensity: 1.0,
        },
        Ellipse {
            center: [0.0, -0.0184],
            semi_axes: [0.6624, 0.874],
            angle: 0.0,
            intensity: -0.8,
        },
    ]
}

/// Smooth displacement field: uniform cubic B-spline over a square control
/// lattice whose spacing is the correlation length.
///
/// Control vectors have norm at most one and B-spline weights are a
/// partition of unity, so `|D(p)| ≤ amplitude` everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub amplitude: f64,
    pub correlation_length: f64,
    /// Control points per axis, including one guard node on each side.
    nodes: usize,
    controls: Vec<[f64; 2]>,
}

impl Deformation {
    pub fn random<R: Rng>(rng: &mut R, amplitude: f64, correlation_length: f64) -> Self {
        let cells = (2.0 * LATTICE_EXTENT / correlation_length).ceil().max(1.0) as usize;
        let nodes = cells + 3;
        let controls = (0..nodes * nodes)
            .map(|_| {
                let r = rng.random::<f64>().sqrt();
                let t = 2.0 * PI * rng.random::<f64>();
                [r * t.cos(), r * t.sin()]
            })
            .collect();
        Deformation {
            amplitude,
            correlation_length,
            nodes,
            controls,
        }
    }

    pub fn identity() -> Self {
        Deformation {
            amplitude: 0.0,
            correlation_length: CORRELATION_LENGTH,
            nodes: 0,
            controls: Vec::new(),
        }
    }

    pub fn displacement(&self, p: [f64; 2]) -> [f64; 2] {
        if self.amplitude == 0.0 || self.nodes == 0 {
            return [0.0, 0.0];
        }
        let cells = self.nodes - 3;
        let spacing = 2.0 * LATTICE_EXTENT / cells as f64;
        let locate = |v: f64| {
            let t = ((v + LATTICE_EXTENT) / spacing).clamp(0.0, cells as f64);
            let i = (t.floor() as usize).min(cells - 1);
            (i, bspline_weights(t - i as f64))
        };
        let (ix, wx) = locate(p[0]);
        let (iy, wy) = locate(p[1]);
        let mut d = [0.0, 0.0];
        for (a, wya) in wy.iter().enumerate() {
            let row = (iy + a) * self.nodes;
            for (b, wxb) in wx.iter().enumerate() {
                let c = self.controls[row + ix + b];
                let w = wya * wxb;
                d[0] += w * c[0];
                d[1] += w * c[1];
            }
        }
        [self.amplitude * d[0], self.amplitude * d[1]]
    }
}

fn bspline_weights(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u * u * u - 6.0 * u * u + 4.0) / 6.0,
        (-3.0 * u * u * u + 3.0 * u * u + 3.0 * u + 1.0) / 6.0,
        u * u * u / 6.0,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Skull pair followed by the random interior ellipses.
    pub ellipses: Vec<Ellipse>,
    pub fine: Vec<Ellipse>,
    pub deformation: Deformation,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = skull().to_vec();
        let count = rng.random_range(INTERIOR_COUNT);
        ellipses.extend((0..count).map(|_| random_ellipse(&mut rng, INTERIOR_AXES, INTERIOR_INTENSITY)));
        let count = rng.random_range(FINE_COUNT);
        let fine = (0..count)
            .map(|_| random_ellipse(&mut rng, FINE_AXES, FINE_INTENSITY))
            .collect();
        let deformation = Deformation::random(&mut rng, DEFORMATION_AMPLITUDE, CORRELATION_LENGTH);
        PhantomSpec {
            ellipses,
            fine,
            deformation,
            seed,
        }
    }

    /// Undeformed phantom value at `p`, clamped to `[0, 1]`.
    pub fn value(&self, p: [f64; 2]) -> f64 {
        self.ellipses
            .iter()
            .chain(&self.fine)
            .filter(|e| e.contains(p))
            .map(|e| e.intensity)
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Value after deformation: the undeformed phantom sampled at the
    /// displaced point, clamped back into `[-1, 1]²`.
    pub fn deformed_value(&self, p: [f64; 2]) -> f64 {
        let d = self.deformation.displacement(p);
        self.value([(p[0] + d[0]).clamp(-1.0, 1.0), (p[1] + d[1]).clamp(-1.0, 1.0)])
    }

    pub fn render(&self, grid: &BasisGrid) -> CoefficientImage {
        let values = grid.centers().into_iter().map(|c| self.deformed_value(c)).collect();
        CoefficientImage {
            side: grid.side,
            values,
        }
    }

    pub fn render_undeformed(&self, grid: &BasisGrid) -> CoefficientImage {
        let values = grid.centers().into_iter().map(|c| self.value(c)).collect();
        CoefficientImage {
            side: grid.side,
            values,
        }
    }
}

fn random_ellipse<R: Rng>(rng: &mut R, axes: (f64, f64), intensity: (f64, f64)) -> Ellipse {
    let r = CENTER_RADIUS * rng.random::<f64>().sqrt();
    let t = 2.0 * PI * rng.random::<f64>();
    let center = [r * t.cos(), r * t.sin()];
    // keep the ellipse inside the unit disk
    let hi = axes.1.min(1.0 - r);
    let mut axis = || axes.0 + (hi - axes.0) * rng.random::<f64>();
    let semi_axes = [axis(), axis()];
    Ellipse {
        center,
        semi_axes,
        angle: PI * rng.random::<f64>(),
        intensity: intensity.0 + (intensity.1 - intensity.0) * rng.random::<f64>(),
    }
}

/// Deformed random phantom point-sampled at the grid centers.
pub fn generate_phantom(seed: u64, grid: &BasisGrid) -> CoefficientImage {
    PhantomSpec::random(seed).render(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaiser_bessel::KaiserBesselParams;

    fn grid() -> BasisGrid {
        BasisGrid::new(32, KaiserBesselParams::default()).unwrap()
    }

    #[test]
    fn same_seed_same_phantom() {
        let a = generate_phantom(17, &grid());
        let b = generate_phantom(17, &grid());
        assert_eq!(a, b);
        assert_ne!(a, generate_phantom(18, &grid()));
    }

    #[test]
    fn values_in_unit_interval_and_ellipses_in_disk() {
        for seed in 0..50 {
            let spec = PhantomSpec::random(seed);
            assert!(spec.ellipses.iter().chain(&spec.fine).all(|e| e.reach() <= 1.0 + 1e-12));
            assert!(INTERIOR_COUNT.contains(&(spec.ellipses.len() - 2)));
            assert!(FINE_COUNT.contains(&spec.fine.len()));
            let img = spec.render(&grid());
            assert!(img.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(img.values.iter().any(|v| *v > 0.0));
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let mut spec = PhantomSpec::random(5);
        spec.deformation.amplitude = 0.0;
        assert_eq!(spec.render(&grid()), spec.render_undeformed(&grid()));
    }

    #[test]
    fn displacement_is_bounded_and_smooth() {
        let spec = PhantomSpec::random(9);
        let d = &spec.deformation;
        let mut worst: f64 = 0.0;
        for i in 0..=60 {
            for j in 0..=60 {
                let p = [-1.0 + i as f64 / 30.0, -1.0 + j as f64 / 30.0];
                let v = d.displacement(p);
                worst = worst.max(v[0].hypot(v[1]));
                let q = d.displacement([p[0] + 1e-6, p[1]]);
                assert!((q[0] - v[0]).abs() < 1e-6 && (q[1] - v[1]).abs() < 1e-6);
            }
        }
        assert!(worst <= DEFORMATION_AMPLITUDE + 1e-12);
        assert!(worst > 0.1 * DEFORMATION_AMPLITUDE);
    }

    #[test]
    fn bspline_weights_partition_unity() {
        for k in 0..=10 {
            let w = bspline_weights(k as f64 / 10.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert!(w.iter().all(|x| *x >= 0.0));
        }
    }
}
