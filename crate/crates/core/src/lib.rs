pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kaiser_bessel;
pub mod network;
pub mod noise;
pub mod oracle;
pub mod pgm;
pub mod phantom;
pub mod pipeline;
pub mod profile;
pub mod quadrature;
pub mod regularization;
pub mod svd;
pub mod system_matrix;

pub use dataset::{Dataset, Role, Sample};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, Method};
pub use geometry::{BasisGrid, CoefficientImage, Measurement, MeasurementGeometry};
pub use kaiser_bessel::KaiserBesselParams;
pub use network::{Architecture, NetworkParams, TrainConfig};
pub use pipeline::{run_pipeline, RunConfig};
pub use regularization::TruncationPolicy;
pub use svd::{SvdBackend, SvdFactors};
pub use system_matrix::SystemMatrix;
