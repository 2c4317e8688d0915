//! Per-nodule confidence.
//!
//! `C(n) = α·s_owner + (1 − α)·(1/m)·Σ_a K(‖c_n − c_a‖)·s_a`, where the sum runs
//! over the `m` other annotators of the image and `c_a` is the center of the
//! nodule of annotator `a` nearest to `n`. Annotators who reviewed the image
//! without marking anything count in `m` but add nothing to the sum.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationTable, NoduleRecord};
use crate::error::{Error, Result};
use crate::geometry::distance;
use crate::scoring::Scores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Epanechnikov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub bandwidth_mm: f64,
}

impl KernelSpec {
    pub fn epanechnikov(bandwidth_mm: f64) -> Result<Self> {
        if !(bandwidth_mm.is_finite() && bandwidth_mm > 0.0) {
            return Err(Error::Config(format!(
                "kernel bandwidth must be positive, got {bandwidth_mm}"
            )));
        }
        Ok(KernelSpec {
            kind: KernelKind::Epanechnikov,
            bandwidth_mm,
        })
    }
}

/// Kernel weight at distance `r`, scaled so that `K(0) = 1`.
pub fn kernel_eval(spec: &KernelSpec, r: f64) -> f64 {
    match spec.kind {
        KernelKind::Epanechnikov => {
            let u = r / spec.bandwidth_mm;
            (1.0 - u * u).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoduleScoringConfig {
    pub alpha: f64,
    pub kernel: KernelKind,
    pub kernel_bandwidth_mm: f64,
    /// Skip the division of the support sum by the number of other annotators.
    pub raw_sum: bool,
}

impl Default for NoduleScoringConfig {
    fn default() -> Self {
        NoduleScoringConfig {
            alpha: 0.7,
            kernel: KernelKind::Epanechnikov,
            kernel_bandwidth_mm: 20.0,
            raw_sum: false,
        }
    }
}

impl NoduleScoringConfig {
    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let mut spec = KernelSpec::epanechnikov(self.kernel_bandwidth_mm)?;
        spec.kind = self.kernel;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        self.kernel_spec().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoduleConfidence<'a> {
    pub nodule: &'a NoduleRecord,
    pub confidence: f64,
}

/// Confidence of every nodule in `table`, in table order.
pub fn score_nodules<'a>(
    table: &'a AnnotationTable,
    scores: &Scores,
    config: &NoduleScoringConfig,
) -> Result<Vec<NoduleConfidence<'a>>> {
    config.validate()?;
    let kernel = config.kernel_spec()?;
    for a in table.annotators() {
        if !scores.contains_key(a) {
            return Err(Error::MissingScore(a.to_string()));
        }
    }
    let images: Vec<_> = table.by_image().into_iter().collect();
    let per_image: Vec<Vec<NoduleConfidence<'a>>> = images
        .into_par_iter()
        .map(|(_, by_annotator)| {
            let mut out = Vec::new();
            for (owner, nodules) in &by_annotator {
                let others = by_annotator.len() - 1;
                let norm = if config.raw_sum { 1.0 } else { others.max(1) as f64 };
                for n in nodules {
                    let mut support = 0.0;
                    for (other, theirs) in &by_annotator {
                        if other == owner {
                            continue;
                        }
                        let nearest = theirs
                            .iter()
                            .map(|m| distance(n.center, m.center))
                            .fold(f64::INFINITY, f64::min);
                        if nearest.is_finite() {
                            support += kernel_eval(&kernel, nearest) * scores[*other];
                        }
                    }
                    let confidence = config.alpha * scores[*owner] + (1.0 - config.alpha) * support / norm;
                    out.push(NoduleConfidence { nodule: n, confidence });
                }
            }
            out
        })
        .collect();
    Ok(per_image.into_iter().flatten().collect())
}

/// Copy of the table with each nodule's confidence filled in.
pub fn with_confidences(table: &AnnotationTable, confidences: &[NoduleConfidence<'_>]) -> Result<AnnotationTable> {
    let nodules = confidences
        .iter()
        .map(|c| c.nodule.clone().with_confidence(c.confidence))
        .collect();
    AnnotationTable::new(nodules, table.reviews().to_vec())
}

/// Writes `image_id,annotator_id,z_mm,y_mm,x_mm,confidence`.
pub fn write_nodule_scores(confidences: &[NoduleConfidence<'_>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_nodule_scores_to(confidences, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_nodule_scores_to<W: Write>(confidences: &[NoduleConfidence<'_>], writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["image_id", "annotator_id", "z_mm", "y_mm", "x_mm", "confidence"])?;
    for c in confidences {
        let n = c.nodule;
        w.write_record([
            n.image_id.clone(),
            n.annotator_id.clone(),
            n.center[0].to_string(),
            n.center[1].to_string(),
            n.center[2].to_string(),
            c.confidence.to_string(),
        ])?;
    }
    w.flush()
}
