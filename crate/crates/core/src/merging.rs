//! Grouping of duplicate marks and their fusion into one ellipsoid.
//!
//! On every image the nodules form an overlap graph; each connected component
//! is one physical object. Members become diagonal Gaussians (their
//! `q`-quantile ellipsoids are the marks themselves), the Gaussians form a
//! mixture weighted by confidence, and the mixture is collapsed to a single
//! Gaussian by matching its mean and per-axis variance. The merged nodule is
//! that Gaussian's `q`-quantile ellipsoid and carries the highest member
//! confidence. Objects below the confidence threshold are dropped last.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationTable, NoduleRecord, ReviewRecord, MERGED_ANNOTATOR};
use crate::error::{Error, Result};
use crate::geometry::{gaussian_to_nodule, nodule_to_gaussian, overlaps, GaussianComponent};
use crate::nodule_scoring::{score_nodules, NoduleConfidence, NoduleScoringConfig};
use crate::scoring::{score_annotators, ScoreState, ScoringConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleGroup {
    pub image_id: String,
    pub members: Vec<(NoduleRecord, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub components: Vec<GaussianComponent>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    /// Probability mass of a nodule under its associated Gaussian.
    pub q: f64,
    /// Merged nodules with confidence strictly below this are removed.
    pub threshold: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { q: 0.5, threshold: 0.1 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::Config(format!("merging.q must lie in (0, 1), got {}", self.q)));
        }
        if !self.threshold.is_finite() {
            return Err(Error::Config("merging.threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Connected components of the overlap graph of one image's nodules.
///
/// Members keep their input order inside a group; groups are ordered by
/// their first member.
pub fn group_nodules(nodules: &[(NoduleRecord, f64)], image_id: &str) -> Result<Vec<NoduleGroup>> {
    if let Some((n, _)) = nodules.iter().find(|(n, _)| n.image_id != image_id) {
        return Err(Error::Validation(format!(
            "nodule from image {:?} grouped with image {image_id:?}",
            n.image_id
        )));
    }
    let mut parent: Vec<usize> = (0..nodules.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let shapes: Vec<_> = nodules.iter().map(|(n, _)| n.ellipsoid()).collect();
    for i in 0..shapes.len() {
        for j in (i + 1)..shapes.len() {
            if overlaps(&shapes[i], &shapes[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    // keep the smaller index as root so roots are first members
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut slot_of_root = vec![usize::MAX; nodules.len()];
    let mut groups: Vec<NoduleGroup> = Vec::new();
    for i in 0..nodules.len() {
        let root = find(&mut parent, i);
        if slot_of_root[root] == usize::MAX {
            slot_of_root[root] = groups.len();
            groups.push(NoduleGroup {
                image_id: image_id.to_string(),
                members: Vec::new(),
            });
        }
        groups[slot_of_root[root]].members.push(nodules[i].clone());
    }
    Ok(groups)
}

/// Mixture of the members' quantile-set Gaussians weighted by confidence.
pub fn build_mixture(group: &NoduleGroup, q: f64) -> Result<GaussianMixture> {
    if group.members.is_empty() {
        return Err(Error::Validation("empty nodule group".into()));
    }
    let components = group
        .members
        .iter()
        .map(|(n, _)| nodule_to_gaussian(&n.ellipsoid(), q))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = group.members.iter().map(|(_, c)| c).sum();
    let weights = if total > 0.0 {
        group.members.iter().map(|(_, c)| c / total).collect()
    } else {
        log::warn!(
            "all {} nodules of a group on {:?} have zero confidence; using equal weights",
            group.members.len(),
            group.image_id
        );
        vec![1.0 / group.members.len() as f64; group.members.len()]
    };
    Ok(GaussianMixture { components, weights })
}

/// Single diagonal Gaussian with the mixture's mean and per-axis variance.
pub fn moment_match(mix: &GaussianMixture) -> GaussianComponent {
    let mut mean = [0.0; 3];
    for (g, w) in mix.components.iter().zip(&mix.weights) {
        for i in 0..3 {
            mean[i] += w * g.mean[i];
        }
    }
    let mut variances = [0.0; 3];
    for (g, w) in mix.components.iter().zip(&mix.weights) {
        for i in 0..3 {
            let d = g.mean[i] - mean[i];
            variances[i] += w * (g.variances[i] + d * d);
        }
    }
    GaussianComponent { mean, variances }
}

/// Fuses a group into one nodule owned by the `merged` pseudo-annotator.
pub fn merge_group(group: &NoduleGroup, q: f64) -> Result<NoduleRecord> {
    let fused = moment_match(&build_mixture(group, q)?);
    let shape = gaussian_to_nodule(&fused, q)?;
    let confidence = group.members.iter().map(|(_, c)| *c).fold(f64::NEG_INFINITY, f64::max);
    Ok(NoduleRecord {
        image_id: group.image_id.clone(),
        annotator_id: MERGED_ANNOTATOR.to_string(),
        center: shape.center,
        radii: shape.radii,
        confidence: Some(confidence),
    })
}

/// Groups, merges and filters scored nodules. Every image in `images` is
/// kept in the output, with a review row when nothing survives.
pub fn merge_scored<'a, I>(images: I, scored: &[(NoduleRecord, f64)], config: &MergeConfig) -> Result<AnnotationTable>
where
    I: IntoIterator<Item = &'a str>,
{
    config.validate()?;
    let mut per_image: std::collections::BTreeMap<&str, Vec<(NoduleRecord, f64)>> =
        images.into_iter().map(|i| (i, Vec::new())).collect();
    for (n, c) in scored {
        per_image.entry(n.image_id.as_str()).or_default().push((n.clone(), *c));
    }
    let work: Vec<_> = per_image.into_iter().collect();
    let merged: Vec<(String, Vec<NoduleRecord>)> = work
        .into_par_iter()
        .map(|(image, nodules)| {
            let mut out = Vec::new();
            for group in group_nodules(&nodules, image)? {
                let m = merge_group(&group, config.q)?;
                if m.confidence.unwrap_or(0.0) >= config.threshold {
                    out.push(m);
                }
            }
            Ok((image.to_string(), out))
        })
        .collect::<Result<_>>()?;
    let mut nodules = Vec::new();
    let mut reviews = Vec::new();
    for (image, ns) in merged {
        if ns.is_empty() {
            reviews.push(ReviewRecord::new(image, MERGED_ANNOTATOR));
        }
        nodules.extend(ns);
    }
    AnnotationTable::new(nodules, reviews)
}

/// Merge step on a table whose nodules already carry confidences.
pub fn merge_table(table: &AnnotationTable, config: &MergeConfig) -> Result<AnnotationTable> {
    let scored = table
        .nodules()
        .iter()
        .map(|n| {
            n.confidence.map(|c| (n.clone(), c)).ok_or_else(|| {
                Error::Validation(format!(
                    "nodule of {:?} on {:?} has no confidence",
                    n.annotator_id, n.image_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    merge_scored(table.images(), &scored, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    pub scoring: ScoringConfig,
    pub nodule_scoring: NoduleScoringConfig,
    pub merging: MergeConfig,
}

/// Everything the pipeline computes on the way to the cleaned table.
#[derive(Debug, Clone)]
pub struct CleanOutput<'a> {
    pub annotator_scores: ScoreState,
    pub nodule_confidences: Vec<NoduleConfidence<'a>>,
    pub cleaned: AnnotationTable,
}

pub fn clean_detailed<'a>(table: &'a AnnotationTable, config: &CleanConfig) -> Result<CleanOutput<'a>> {
    config.scoring.validate()?;
    config.nodule_scoring.validate()?;
    config.merging.validate()?;
    let annotator_scores = score_annotators(table, &config.scoring)?;
    let nodule_confidences = score_nodules(table, &annotator_scores.scores, &config.nodule_scoring)?;
    let scored: Vec<(NoduleRecord, f64)> = nodule_confidences
        .iter()
        .map(|c| (c.nodule.clone(), c.confidence))
        .collect();
    let cleaned = merge_scored(table.images(), &scored, &config.merging)?;
    Ok(CleanOutput {
        annotator_scores,
        nodule_confidences,
        cleaned,
    })
}

/// Full pipeline: annotator scores, nodule confidences, merging, filtering.
pub fn clean(table: &AnnotationTable, config: &CleanConfig) -> Result<AnnotationTable> {
    Ok(clean_detailed(table, config)?.cleaned)
}
