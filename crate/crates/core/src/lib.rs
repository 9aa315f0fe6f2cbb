//! Penalized-likelihood 2D PET reconstruction with a relative difference
//! prior: system model, simulation, objective, BSREM and its
//! subiteration-dependent preconditioned variants, and metrics.

pub mod error;
pub mod experiments;
pub mod image;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod preconditioner;
pub mod projector;
pub mod simulator;

pub use error::{ReconError, Result};
pub use image::Image;
pub use metrics::{nrmsd, vector_angle, AngleDiagnostics, AngleTracker, IterationTrace, Roi, TraceRecorder};
pub use objective::{Neighborhood, ObjectiveSpec, RelativeDifferencePrior};
pub use optimizer::{AlgorithmConfig, Bounds, Checkpoint, Observer, Reconstructor, Snapshot};
pub use preconditioner::Variant;
pub use projector::{build_system_matrix, partition_subsets, ScannerGeometry, SubsetPartition, SystemMatrix};
pub use simulator::{make_uniform_phantom, simulate_data, EmissionData, Phantom, SimulationSpec};
