//! Microscopic urban traffic simulation driven by a history-masked,
//! graph-attention driving policy.
//!
//! The crate is organised bottom-up:
//!
//! * [`geom`]: points and polylines.
//! * [`road`]: road network geometry, projection and the segment index.
//! * [`ingest`]: recording parsers, resampling, day split, signal estimation.
//! * [`graph`]: per-timestep agent graphs in ego-perturbed goal frames.
//! * [`egat`]: edge-enhanced graph attention model, Gaussian head, NLL and gradients.
//! * [`train`]: Adam and the offline training loop.
//! * [`sim`]: closed-loop stepping (sample, project, LQ tracking).
//! * [`rulebase`]: IDM/MOBIL baseline and IDM calibration.
//! * [`metrics`]: microscopic and macroscopic similarity metrics.
//! * [`synth`]: synthetic grid/ring networks with IDM-generated traffic.
//! * [`config`]: the run configuration shared by every CLI command.
//!
//! Data-parallel loops go through [`Exec`]; the sequential and parallel
//! paths return identical results.

pub mod config;
pub mod egat;
pub mod error;
pub mod exec;
pub mod geom;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod road;
pub mod rulebase;
pub mod sim;
pub mod synth;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use exec::{derive_seed, Exec};
pub use geom::Vec2;
