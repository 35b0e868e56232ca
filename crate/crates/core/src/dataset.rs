//! Phantom/data pairs and their on-disk layout.
//!
//! A dataset directory holds `manifest.json` plus `x_NNNNN.bin` and
//! `y_NNNNN.bin` files of little-endian `f64`. The manifest records seeds,
//! the noise level, the grid and geometry, and an FNV-1a checksum for every
//! sample file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{file_checksum, read_f64_file, write_f64_file};
use crate::error::{check_len, Error, Result};
use crate::geometry::{BasisGrid, CoefficientImage, Measurement, MeasurementGeometry, NoiseDescriptor};
use crate::noise::{add_noise, derive_seed};
use crate::pgm::write_pgm;
use crate::phantom::generate_phantom;
use crate::system_matrix::{forward_apply, SystemMatrix};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "tsvdnet-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Test => "test",
        }
    }

    /// Seed of phantom `index`; each role draws from its own domain.
    pub fn phantom_seed(self, master: u64, index: usize) -> u64 {
        derive_seed(master, self.tag(), index as u64)
    }

    pub fn noise_seed(self, master: u64, index: usize) -> u64 {
        derive_seed(master, &format!("{}/noise", self.tag()), index as u64)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            "test" => Ok(Role::Test),
            _ => Err(Error::InvalidParameter(format!("unknown dataset role {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub phantom_seed: u64,
    pub x: CoefficientImage,
    pub y: Measurement,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub seed: u64,
    pub noise_fraction: f64,
    pub grid: BasisGrid,
    pub geometry: MeasurementGeometry,
    pub matrix_checksum: u64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub phantom_seed: u64,
    pub noise_seed: Option<u64>,
    pub x_file: String,
    pub y_file: String,
    pub x_checksum: u64,
    pub y_checksum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub role: Role,
    pub seed: u64,
    pub noise_fraction: f64,
    pub grid: BasisGrid,
    pub geometry: MeasurementGeometry,
    pub matrix_checksum: u64,
    pub count: usize,
    pub samples: Vec<SampleEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> String {
        format!("{}:{:016x}:{}", self.role, self.seed, self.len())
    }

    /// Writes the dataset into `dir` (created if needed) and returns the
    /// checksum of the manifest file.
    pub fn save(&self, dir: &Path) -> Result<u64> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.len());
        for (i, s) in self.samples.iter().enumerate() {
            let x_file = format!("x_{i:05}.bin");
            let y_file = format!("y_{i:05}.bin");
            write_f64_file(&dir.join(&x_file), &s.x.values)?;
            write_f64_file(&dir.join(&y_file), &s.y.values)?;
            entries.push(SampleEntry {
                phantom_seed: s.phantom_seed,
                noise_seed: s.y.noise.seed,
                x_checksum: file_checksum(&dir.join(&x_file))?,
                y_checksum: file_checksum(&dir.join(&y_file))?,
                x_file,
                y_file,
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            role: self.role,
            seed: self.seed,
            noise_fraction: self.noise_fraction,
            grid: self.grid,
            geometry: self.geometry,
            matrix_checksum: self.matrix_checksum,
            count: self.len(),
            samples: entries,
        };
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        file_checksum(&path)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::container(&path, format!("unknown format {:?}", manifest.format)));
        }
        if manifest.count != manifest.samples.len() {
            return Err(Error::container(&path, "sample count disagrees with entry list"));
        }
        Ok(manifest)
    }

    /// Loads a dataset, verifying every sample checksum and length.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::read_manifest(dir)?;
        let mut samples = Vec::with_capacity(m.count);
        for e in &m.samples {
            let x = read_checked(&dir.join(&e.x_file), e.x_checksum)?;
            let y = read_checked(&dir.join(&e.y_file), e.y_checksum)?;
            check_len("dataset coefficients", m.grid.len(), x.len())?;
            check_len("dataset measurement", m.geometry.len(), y.len())?;
            samples.push(Sample {
                phantom_seed: e.phantom_seed,
                x: CoefficientImage {
                    side: m.grid.side,
                    values: x,
                },
                y: Measurement {
                    values: y,
                    noise: NoiseDescriptor {
                        fraction: if e.noise_seed.is_some() { m.noise_fraction } else { 0.0 },
                        seed: e.noise_seed,
                    },
                },
            });
        }
        Ok(Dataset {
            role: m.role,
            seed: m.seed,
            noise_fraction: m.noise_fraction,
            grid: m.grid,
            geometry: m.geometry,
            matrix_checksum: m.matrix_checksum,
            samples,
        })
    }

    /// Writes every phantom as `phantom_NNNNN.pgm` and returns the paths.
    pub fn export_pgm(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p = dir.join(format!("phantom_{i:05}.pgm"));
                write_pgm(&p, s.x.side, s.x.side, &s.x.values)?;
                Ok(p)
            })
            .collect()
    }
}

fn read_checked(path: &Path, expected: u64) -> Result<Vec<f64>> {
    let actual = file_checksum(path)?;
    if actual != expected {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    read_f64_file(path)
}

/// Generates `count` phantoms and their data `A x + ξ`. Training sets are
/// always noise-free regardless of `noise_fraction`.
pub fn build_dataset(
    count: usize,
    grid: &BasisGrid,
    a: &SystemMatrix,
    noise_fraction: f64,
    role: Role,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_fraction >= 0.0 && noise_fraction.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise fraction must be non-negative, got {noise_fraction}"
        )));
    }
    if a.meta.grid != *grid {
        return Err(Error::InvalidParameter(
            "system matrix was assembled for a different basis grid".into(),
        ));
    }
    let rho = if role == Role::Train { 0.0 } else { noise_fraction };
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let phantom_seed = role.phantom_seed(seed, i);
            let x = generate_phantom(phantom_seed, grid);
            let clean = forward_apply(a, &x)?;
            let y = if rho > 0.0 {
                add_noise(&clean, rho, role.noise_seed(seed, i))
            } else {
                clean
            };
            Ok(Sample { phantom_seed, x, y })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        role,
        seed,
        noise_fraction: rho,
        grid: *grid,
        geometry: a.meta.geometry,
        matrix_checksum: a.checksum(),
        samples,
    })
}

/// Recomputes the data of `clean` as `A x + ξ` at noise level
/// `noise_fraction`, with the same per-sample noise seeds
/// [`build_dataset`] would use.
pub fn simulate(clean: &Dataset, a: &SystemMatrix, noise_fraction: f64) -> Result<Dataset> {
    if clean.role == Role::Train && noise_fraction > 0.0 {
        return Err(Error::InvalidParameter("training data stay noise-free".into()));
    }
    if a.meta.grid != clean.grid {
        return Err(Error::InvalidParameter(
            "system matrix was assembled for a different basis grid".into(),
        ));
    }
    let samples = clean
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let y = forward_apply(a, &s.x)?;
            let y = if noise_fraction > 0.0 {
                add_noise(&y, noise_fraction, clean.role.noise_seed(clean.seed, i))
            } else {
                y
            };
            Ok(Sample {
                phantom_seed: s.phantom_seed,
                x: s.x.clone(),
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        noise_fraction,
        geometry: a.meta.geometry,
        matrix_checksum: a.checksum(),
        samples,
        ..clean.clone()
    })
}

/// Fails unless every sample seed of `d` lies in its role's seed domain.
pub fn verify_seed_domain(d: &Dataset) -> Result<()> {
    for (i, s) in d.samples.iter().enumerate() {
        if s.phantom_seed != d.role.phantom_seed(d.seed, i) {
            return Err(Error::RoleViolation(format!(
                "sample {i} of a {} set was not drawn from the {} seed domain",
                d.role, d.role
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaiser_bessel::KaiserBesselParams;
    use crate::system_matrix::{assemble_system_matrix, AssemblyOptions};

    fn small() -> (BasisGrid, SystemMatrix) {
        let grid = BasisGrid::new(6, KaiserBesselParams::default()).unwrap();
        let geom = MeasurementGeometry::new(8, 96, 3.75).unwrap();
        let a = assemble_system_matrix(&grid, &geom, &AssemblyOptions::default()).unwrap();
        (grid, a)
    }

    #[test]
    fn role_round_trip_and_seed_domains() {
        for r in [Role::Train, Role::Validation, Role::Test] {
            assert_eq!(r.tag().parse::<Role>().unwrap(), r);
        }
        assert_ne!(Role::Train.phantom_seed(1, 0), Role::Test.phantom_seed(1, 0));
        assert!("other".parse::<Role>().is_err());
    }

    #[test]
    fn training_is_noise_free_and_exact() {
        let (grid, a) = small();
        let d = build_dataset(3, &grid, &a, 0.07, Role::Train, 11).unwrap();
        assert_eq!(d.noise_fraction, 0.0);
        for s in &d.samples {
            assert_eq!(s.y.values, forward_apply(&a, &s.x).unwrap().values);
        }
        let t = build_dataset(2, &grid, &a, 0.07, Role::Test, 11).unwrap();
        assert_eq!(t.noise_fraction, 0.07);
        assert_ne!(t.samples[0].y.values, forward_apply(&a, &t.samples[0].x).unwrap().values);
        assert!(build_dataset(0, &grid, &a, 0.0, Role::Test, 1).unwrap().is_empty());
    }

    #[test]
    fn save_load_and_corruption() {
        let (grid, a) = small();
        let d = build_dataset(4, &grid, &a, 0.05, Role::Validation, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
        let px = d.export_pgm(&dir.path().join("pgm")).unwrap();
        assert_eq!(px.len(), 4);
        std::fs::write(dir.path().join("y_00002.bin"), [0u8; 8]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn simulate_matches_direct_build() {
        let (grid, a) = small();
        let clean = build_dataset(3, &grid, &a, 0.0, Role::Test, 8).unwrap();
        let noisy = build_dataset(3, &grid, &a, 0.07, Role::Test, 8).unwrap();
        assert_eq!(simulate(&clean, &a, 0.07).unwrap(), noisy);
        verify_seed_domain(&noisy).unwrap();
        let mut moved = noisy.clone();
        moved.role = Role::Validation;
        assert!(matches!(verify_seed_domain(&moved), Err(Error::RoleViolation(_))));
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let (_, a) = small();
        let other = BasisGrid::new(5, KaiserBesselParams::default()).unwrap();
        assert!(build_dataset(1, &other, &a, 0.0, Role::Test, 1).is_err());
    }
}
