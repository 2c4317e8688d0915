//! Shared fixtures for the pipeline benchmarks.

use annoclean::synthetic::scenario;
use annoclean::{AnnotationTable, Scenario};

/// Noisy table of a benchmark scenario with a fixed seed.
pub fn fixture(name: Scenario, n_images: usize) -> AnnotationTable {
    scenario(name, n_images, 7).expect("scenario generation").1
}
