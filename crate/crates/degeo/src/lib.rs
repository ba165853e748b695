//! Detection of embryonic gene expression onset on cell lineage trees.
//!
//! The pipeline runs in four steps: per-cell fluorescence series are
//! summarized into cell scores ([`scoring`]), a Bayesian change-point model
//! is fitted on the score tree by MCMC ([`model`], [`sampler`]), detected
//! branches are accepted or rejected by a trained regression classifier
//! that doubles as the stopping rule ([`svr`], [`detector`]), and accepted
//! branches are refined to exact onset and end time points ([`refine`]).
//!
//! [`synth`] generates benchmark data with known ground truth, [`eval`]
//! scores predictions against it, and [`render`] draws lineage trees as
//! SVG for reports.

pub mod detector;
pub mod error;
pub mod eval;
pub mod lineage;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod render;
pub mod sampler;
pub mod scoring;
pub mod svr;
pub mod synth;

pub use error::{Error, Result};
pub use lineage::{CellId, CellRecord, LineageTree};
pub use scoring::ScoreTree;
