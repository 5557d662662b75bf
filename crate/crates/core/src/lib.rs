//! GSLI: missing-value imputation for spatial-temporal sensor data through
//! multi-scale graph structure learning.
//!
//! The crate is organized around the imputation pipeline:
//!
//! * [`datamodel`]: datasets, adjacency construction, normalization, windowing
//! * [`masking`]: evaluation splits (MCAR/MAR/MNAR) and training label masks
//! * [`tape`]: reverse-mode differentiation over f64 tensors
//! * [`graphlearn`]: prominence-refined meta-graph learning
//! * [`spatialconv`]: node-scale / feature-scale / canonical diffusion convolution
//! * [`attention`]: cross-temporal and cross-feature attention stages
//! * [`model`]: the assembled imputation model, training loop, checkpoints
//! * [`evaluation`]: metrics, experiment grids, ablation registry
//! * [`oracle`]: independent reference implementations and verification probes

pub mod attention;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod graphlearn;
pub mod masking;
pub mod model;
pub mod oracle;
pub mod spatialconv;
pub mod tape;

pub use error::{Error, Result};
