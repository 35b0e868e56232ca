//! Shared fixtures for the benchmarks.

use tsvdnet_core::system_matrix::{assemble_system_matrix, AssemblyOptions};
use tsvdnet_core::{BasisGrid, KaiserBesselParams, MeasurementGeometry, SystemMatrix};

/// 16² blobs seen by 32 detectors over 48 time samples.
pub fn small_problem() -> (BasisGrid, MeasurementGeometry) {
    let kb = KaiserBesselParams {
        support_radius: 0.5,
        ..KaiserBesselParams::default()
    };
    let grid = BasisGrid::new(16, kb).expect("valid grid");
    let geom = MeasurementGeometry::new(32, 48, 3.75).expect("valid geometry");
    (grid, geom)
}

pub fn small_matrix() -> SystemMatrix {
    let (grid, geom) = small_problem();
    assemble_system_matrix(&grid, &geom, &AssemblyOptions::default()).expect("assembly")
}
