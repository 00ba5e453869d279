//! Markerless stereo extrinsic self-calibration.
//!
//! Given per-frame left/right correspondences and fixed pinhole intrinsics, the
//! crate refines the 5-DOF relative pose of a stereo rig (rotation plus unit
//! translation direction) by weighted Gauss-Newton on SO(3) x S2, reports the
//! first-order covariance of the estimate, and decides when the calibration is
//! accurate enough to stop.
//!
//! Module map:
//!
//! - [`geometry`]: pinhole model, essential matrix, epipolar residuals.
//! - [`manifold`]: tangent bases on the sphere, exponential map, retraction.
//! - [`optimizer`]: residual/Jacobian assembly and the Gauss-Newton loop.
//! - [`covariance`]: full and approximate estimate covariance, termination test.
//! - [`pipeline`]: outlier rejection, grid bucketing and the per-frame session.
//! - [`simulator`]: synthetic stereo scenes with known ground truth.
//! - [`io`] and [`cli`]: file formats and the `selfcal` command line.

pub mod cli;
pub mod covariance;
pub mod error;
pub mod geometry;
pub mod io;
pub mod manifold;
pub mod optimizer;
pub mod pipeline;
pub mod selfcheck;
pub mod simulator;

pub use covariance::{CalibrationCovariance, NoiseModel};
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, EssentialMatrix, ExtrinsicEstimate, NormalizedMatch, PixelMatch};
pub use manifold::{ErrorState, TangentBasis};
pub use optimizer::{OptimizationResult, OptimizerConfig};
pub use pipeline::{GridConfig, PipelineConfig, RejectionConfig, SessionState};
pub use simulator::{GroundTruth, SceneConfig};
