//! Cleaning of noisy multi-annotator 3D detection annotations.
//!
//! The pipeline scores annotators against panels of their peers, scores
//! every annotated object by its owner's reliability and nearby support from
//! other annotators, merges overlapping objects through Gaussian moment
//! matching, and drops objects whose confidence stays below a threshold.
//!
//! ```text
//! AnnotationTable ─► score_annotators ─► score_nodules ─► group + merge ─► filter
//! ```
//!
//! A seeded synthetic benchmark ([`synthetic`]) and voxel metrics
//! ([`evaluation`]) are included to measure the effect end to end.
//!
//! ```
//! use annoclean::synthetic::scenario;
//! use annoclean::{clean, evaluate, CleanConfig, Scenario};
//!
//! let (truth, noisy) = scenario(Scenario::A1, 2, 0)?;
//! let cleaned = clean(&noisy, &CleanConfig::default())?;
//! let before = evaluate(&noisy, &truth, [2.0; 3])?.aggregate;
//! let after = evaluate(&cleaned, &truth, [2.0; 3])?.aggregate;
//! assert!(after.iou() >= before.iou());
//! # Ok::<(), annoclean::Error>(())
//! ```

// Axis loops over `0..3` index several arrays at once, and `!(x >= 0.0)`
// deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod annotations;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod merging;
pub mod nodule_scoring;
pub mod rasterize;
pub mod scoring;
pub mod synthetic;

pub use annotations::{AnnotationTable, NoduleRecord, RadiusMode, ReviewRecord, MERGED_ANNOTATOR};
pub use config::Config;
pub use error::{Error, Result};
pub use evaluation::{evaluate, MetricsReport};
pub use geometry::{Ellipsoid, GaussianComponent, Vec3};
pub use merging::{clean, CleanConfig};
pub use nodule_scoring::{score_nodules, KernelSpec, NoduleConfidence, NoduleScoringConfig};
pub use rasterize::{dice, VoxelGrid, VoxelMask};
pub use scoring::{score_annotators, ScoreState, ScoringConfig};
pub use synthetic::{GroundTruth, Scenario};
