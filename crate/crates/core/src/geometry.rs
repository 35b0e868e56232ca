//! Discretization: blob centers on a Cartesian grid over `[-1,1]²` and
//! detectors on the upper unit semicircle.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kaiser_bessel::KaiserBesselParams;

/// `side × side` blob centers covering `[-1,1]²`.
///
/// Coefficient `i` sits at column `i % side`, row `i / side`; its center is
/// `(-1 + 2·col/(side-1), -1 + 2·row/(side-1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisGrid {
    pub side: usize,
    pub kb: KaiserBesselParams,
}

impl BasisGrid {
    pub fn new(side: usize, kb: KaiserBesselParams) -> Result<Self> {
        let grid = BasisGrid { side, kb };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid side must be at least 2, got {}",
                self.side
            )));
        }
        self.kb.validate()
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.side - 1) as f64
    }

    pub fn center(&self, index: usize) -> [f64; 2] {
        let h = self.spacing();
        let col = index % self.side;
        let row = index / self.side;
        [-1.0 + h * col as f64, -1.0 + h * row as f64]
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementGeometry {
    pub detectors: usize,
    pub time_samples: usize,
    pub horizon: f64,
}

impl MeasurementGeometry {
    /// Full-size configuration: 400 detectors, 376 samples on `[0, 3.75]`.
    pub fn full_scale() -> Self {
        MeasurementGeometry {
            detectors: 400,
            time_samples: 376,
            horizon: 3.75,
        }
    }

    pub fn new(detectors: usize, time_samples: usize, horizon: f64) -> Result<Self> {
        let g = MeasurementGeometry {
            detectors,
            time_samples,
            horizon,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detectors == 0 || self.time_samples == 0 {
            return Err(Error::InvalidParameter(
                "detector and time-sample counts must be positive".into(),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Number of data values, `detectors · time_samples`.
    pub fn len(&self) -> usize {
        self.detectors * self.time_samples
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time_step(&self) -> f64 {
        self.horizon / self.time_samples as f64
    }

    /// Zero-based detector `n` at angle `(n+1)π/N_s`.
    pub fn detector(&self, n: usize) -> [f64; 2] {
        let angle = (n + 1) as f64 * PI / self.detectors as f64;
        [angle.cos(), angle.sin()]
    }

    pub fn detector_positions(&self) -> Vec<[f64; 2]> {
        (0..self.detectors).map(|n| self.detector(n)).collect()
    }

    /// Zero-based sample `j` at `(j+1)T/N_t`.
    pub fn time(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.horizon / self.time_samples as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.time_samples).map(|j| self.time(j)).collect()
    }

    /// Row of the system matrix for detector `n`, sample `j`.
    pub fn row(&self, n: usize, j: usize) -> usize {
        self.time_samples * n + j
    }
}

/// Expansion coefficients, viewed as a row-major `side × side` image.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientImage {
    pub side: usize,
    pub values: Vec<f64>,
}

impl CoefficientImage {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        check_len("coefficient image", side * side, values.len())?;
        Ok(CoefficientImage { side, values })
    }

    pub fn zeros(side: usize) -> Self {
        CoefficientImage {
            side,
            values: vec![0.0; side * side],
        }
    }

    pub fn unit(side: usize, index: usize) -> Self {
        let mut img = Self::zeros(side);
        img.values[index] = 1.0;
        img
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct NoiseDescriptor {
    pub fraction: f64,
    pub seed: Option<u64>,
}

/// Sampled pressure data, indexed by [`MeasurementGeometry::row`].
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: Vec<f64>,
    pub noise: NoiseDescriptor,
}

impl Measurement {
    pub fn clean(values: Vec<f64>) -> Self {
        Measurement {
            values,
            noise: NoiseDescriptor::default(),
        }
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_tile_the_square() {
        let g = BasisGrid::new(128, KaiserBesselParams::default()).unwrap();
        assert_eq!(g.len(), 16384);
        assert_eq!(g.center(0), [-1.0, -1.0]);
        let last = g.center(g.len() - 1);
        assert!((last[0] - 1.0).abs() < 1e-15 && (last[1] - 1.0).abs() < 1e-15);
        // row-major: index 1 steps in x, index `side` steps in y
        let c1 = g.center(1);
        let cn = g.center(128);
        assert!((c1[0] - (-1.0 + 2.0 / 127.0)).abs() < 1e-15 && c1[1] == -1.0);
        assert!(cn[0] == -1.0 && (cn[1] - (-1.0 + 2.0 / 127.0)).abs() < 1e-15);
    }

    #[test]
    fn detectors_on_upper_semicircle() {
        let geom = MeasurementGeometry::full_scale();
        assert_eq!(geom.len(), 150_400);
        for s in geom.detector_positions() {
            assert!((s[0].hypot(s[1]) - 1.0).abs() < 1e-15);
            assert!(s[1] >= -1e-15);
        }
        let last = geom.detector(geom.detectors - 1);
        assert!((last[0] + 1.0).abs() < 1e-15);
        assert!((geom.time(geom.time_samples - 1) - 3.75).abs() < 1e-15);
        assert!((geom.time(0) - 3.75 / 376.0).abs() < 1e-15);
        assert_eq!(geom.row(2, 5), 2 * 376 + 5);
    }

    #[test]
    fn image_length_checked() {
        assert!(CoefficientImage::new(4, vec![0.0; 15]).is_err());
        assert!(CoefficientImage::new(4, vec![0.0; 16]).is_ok());
    }
}
