//! Annotator reliability from panels of peers.
//!
//! A consilium judges one annotator (the subject) on one image against two
//! other annotators of the same image. The subject's binary mask is compared
//! by Dice with the score-weighted mix of the pair's masks,
//! `w₁ M₁ + w₂ M₂` with `wᵢ = sᵢ / (s₁ + s₂)`. A new score is the flat mean
//! over all consiliums of the subject, using only the previous iteration's
//! scores (Jacobi update). Starting from uniform scores the first iteration
//! is the unweighted `½ M₁ + ½ M₂` variant.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationTable;
use crate::error::{Error, Result};
use crate::geometry::{Ellipsoid, Vec3};
use crate::rasterize::{bounding_grid, dice, dice_from_sums, rasterize_nodules, soft_combine, VoxelSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    /// Voxel size in mm, (z, y, x).
    pub spacing: Vec3,
    /// Margin added around the nodules when building a dense bounding grid.
    pub pad: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            spacing: [1.0; 3],
            pad: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub iterations: usize,
    /// Stop once no score moves by this much or more in one iteration.
    pub tol: f64,
    pub initial_score: f64,
    pub raster: RasterConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            iterations: 10,
            tol: 1e-4,
            initial_score: 0.5,
            raster: RasterConfig::default(),
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("scoring.iterations must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("scoring.tol must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_score) {
            return Err(Error::Config("scoring.initial_score must lie in [0, 1]".into()));
        }
        if self.raster.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("scoring.spacing must be positive".into()));
        }
        if !(self.raster.pad >= 0.0) {
            return Err(Error::Config("scoring.pad must be non-negative".into()));
        }
        Ok(())
    }
}

pub type Scores = BTreeMap<String, f64>;

/// Current annotator scores plus every earlier iterate, starting with `s⁰`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreState {
    pub scores: Scores,
    pub iteration: usize,
    pub history: Vec<Scores>,
}

impl ScoreState {
    pub fn uniform<'a>(annotators: impl IntoIterator<Item = &'a str>, score: f64) -> Self {
        let scores: Scores = annotators.into_iter().map(|a| (a.to_string(), score)).collect();
        Self::from_scores(scores)
    }

    pub fn from_scores(scores: Scores) -> Self {
        ScoreState {
            history: vec![scores.clone()],
            scores,
            iteration: 0,
        }
    }

    pub fn get(&self, annotator: &str) -> Result<f64> {
        self.scores
            .get(annotator)
            .copied()
            .ok_or_else(|| Error::MissingScore(annotator.to_string()))
    }

    fn advance(&self, scores: Scores) -> Self {
        let mut history = self.history.clone();
        history.push(scores.clone());
        ScoreState {
            scores,
            iteration: self.iteration + 1,
            history,
        }
    }

    /// Largest absolute score change of the last iteration.
    pub fn last_change(&self) -> f64 {
        match self.history.as_slice() {
            [.., prev, last] => max_change(prev, last),
            _ => 0.0,
        }
    }
}

fn max_change(a: &Scores, b: &Scores) -> f64 {
    b.iter()
        .map(|(k, v)| (v - a.get(k).copied().unwrap_or(*v)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Consilium {
    pub image_id: String,
    pub subject: String,
    /// Ordered so that `pair.0 < pair.1`.
    pub pair: (String, String),
}

/// All (image, pair) panels for `subject`, sorted by image then pair.
pub fn enumerate_consiliums(table: &AnnotationTable, subject: &str) -> Vec<Consilium> {
    let mut out = Vec::new();
    for (image, by_annotator) in table.by_image() {
        if !by_annotator.contains_key(subject) {
            continue;
        }
        let others: Vec<&str> = by_annotator.keys().copied().filter(|a| *a != subject).collect();
        for (i, a) in others.iter().enumerate() {
            for b in &others[i + 1..] {
                out.push(Consilium {
                    image_id: image.to_string(),
                    subject: subject.to_string(),
                    pair: (a.to_string(), b.to_string()),
                });
            }
        }
    }
    out
}

fn pair_weights(s1: f64, s2: f64, c: &Consilium) -> (f64, f64) {
    let total = s1 + s2;
    if total > 0.0 {
        (s1 / total, s2 / total)
    } else {
        log::warn!(
            "both panel members {:?} and {:?} score 0 on {:?}; using equal weights",
            c.pair.0,
            c.pair.1,
            c.image_id
        );
        (0.5, 0.5)
    }
}

fn ellipsoids_of(table: &AnnotationTable, image: &str, annotator: &str) -> Vec<Ellipsoid> {
    table
        .nodules()
        .iter()
        .filter(|n| n.image_id == image && n.annotator_id == annotator)
        .map(|n| n.ellipsoid())
        .collect()
}

/// Dice of one consilium, rasterized densely on the bounding grid of the
/// three participants' nodules.
pub fn consilium_dice(
    table: &AnnotationTable,
    c: &Consilium,
    scores: &ScoreState,
    raster: &RasterConfig,
) -> Result<f64> {
    let (w1, w2) = pair_weights(scores.get(&c.pair.0)?, scores.get(&c.pair.1)?, c);
    let subject = ellipsoids_of(table, &c.image_id, &c.subject);
    let first = ellipsoids_of(table, &c.image_id, &c.pair.0);
    let second = ellipsoids_of(table, &c.image_id, &c.pair.1);
    let all: Vec<Ellipsoid> = subject.iter().chain(&first).chain(&second).copied().collect();
    if all.is_empty() {
        return Ok(1.0);
    }
    let grid = bounding_grid(&all, raster.spacing, raster.pad)?;
    let m = rasterize_nodules(&subject, &grid);
    let m1 = rasterize_nodules(&first, &grid);
    let m2 = rasterize_nodules(&second, &grid);
    let soft = soft_combine(&[&m1, &m2], &[w1, w2])?;
    dice(&m, &soft)
}

/// Voxel counts of every annotator's mask on one image and of every pairwise
/// intersection. Weighted consilium Dice only depends on these numbers.
#[derive(Debug, Clone)]
struct ImageOverlaps {
    annotators: Vec<String>,
    sizes: Vec<f64>,
    inter: Vec<f64>,
}

impl ImageOverlaps {
    fn index(&self, annotator: &str) -> Option<usize> {
        self.annotators.binary_search_by(|a| a.as_str().cmp(annotator)).ok()
    }

    fn inter(&self, a: usize, b: usize) -> f64 {
        self.inter[a * self.annotators.len() + b]
    }
}

/// Precomputed overlap statistics for a whole table.
#[derive(Debug, Clone)]
pub struct OverlapCache {
    images: Vec<ImageOverlaps>,
    annotators: Vec<String>,
}

impl OverlapCache {
    pub fn build(table: &AnnotationTable, raster: &RasterConfig) -> Self {
        let by_image = table.by_image();
        let images: Vec<_> = by_image.into_iter().collect();
        let images = images
            .into_par_iter()
            .map(|(_, by_annotator)| {
                let annotators: Vec<String> = by_annotator.keys().map(|a| a.to_string()).collect();
                let sets: Vec<VoxelSet> = by_annotator
                    .values()
                    .map(|ns| {
                        let es: Vec<Ellipsoid> = ns.iter().map(|n| n.ellipsoid()).collect();
                        VoxelSet::from_nodules(&es, raster.spacing)
                    })
                    .collect();
                let n = sets.len();
                let mut inter = vec![0.0; n * n];
                for a in 0..n {
                    for b in a..n {
                        let v = if a == b {
                            sets[a].len()
                        } else {
                            sets[a].intersection_len(&sets[b])
                        };
                        inter[a * n + b] = v as f64;
                        inter[b * n + a] = v as f64;
                    }
                }
                ImageOverlaps {
                    sizes: sets.iter().map(|s| s.len() as f64).collect(),
                    annotators,
                    inter,
                }
            })
            .collect();
        let annotators = table.annotators().into_iter().map(str::to_string).collect();
        OverlapCache { images, annotators }
    }

    /// Mean consilium Dice of `subject`, plus how many of its panels fell
    /// back to equal weights.
    fn subject_mean(&self, subject: &str, prev: &Scores) -> Result<(Option<f64>, usize)> {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut fallbacks = 0usize;
        for img in &self.images {
            let Some(d) = img.index(subject) else { continue };
            let n = img.annotators.len();
            for a in 0..n {
                if a == d {
                    continue;
                }
                for b in (a + 1)..n {
                    if b == d {
                        continue;
                    }
                    let s1 = score_of(prev, &img.annotators[a])?;
                    let s2 = score_of(prev, &img.annotators[b])?;
                    let (w1, w2) = if s1 + s2 > 0.0 {
                        (s1 / (s1 + s2), s2 / (s1 + s2))
                    } else {
                        fallbacks += 1;
                        (0.5, 0.5)
                    };
                    let intersection = w1 * img.inter(d, a) + w2 * img.inter(d, b);
                    let soft_sum = w1 * img.sizes[a] + w2 * img.sizes[b];
                    sum += dice_from_sums(intersection, img.sizes[d], soft_sum);
                    count += 1;
                }
            }
        }
        Ok(((count > 0).then(|| sum / count as f64), fallbacks))
    }

    /// One Jacobi update of every annotator's score.
    pub fn iterate(&self, state: &ScoreState) -> Result<ScoreState> {
        for a in &self.annotators {
            state.get(a)?;
        }
        let prev = &state.scores;
        let updated: Vec<(String, f64, usize)> = self
            .annotators
            .par_iter()
            .map(|a| {
                let (mean, fallbacks) = self.subject_mean(a, prev)?;
                Ok((a.clone(), mean.unwrap_or(prev[a]), fallbacks))
            })
            .collect::<Result<_>>()?;
        let fallbacks: usize = updated.iter().map(|u| u.2).sum();
        if fallbacks > 0 {
            log::warn!("{fallbacks} panels had two zero-score members; used equal weights");
        }
        let mut scores = prev.clone();
        scores.extend(updated.into_iter().map(|(a, s, _)| (a, s)));
        Ok(state.advance(scores))
    }
}

fn score_of(scores: &Scores, annotator: &str) -> Result<f64> {
    scores
        .get(annotator)
        .copied()
        .ok_or_else(|| Error::MissingScore(annotator.to_string()))
}

/// One iteration of the weighted consilium update.
pub fn score_iteration(table: &AnnotationTable, state: &ScoreState, raster: &RasterConfig) -> Result<ScoreState> {
    OverlapCache::build(table, raster).iterate(state)
}

/// Runs the update from uniform initial scores until `tol` or `iterations`.
pub fn score_annotators(table: &AnnotationTable, config: &ScoringConfig) -> Result<ScoreState> {
    let start = ScoreState::uniform(table.annotators(), config.initial_score);
    score_annotators_from(table, start, config)
}

pub fn score_annotators_from(table: &AnnotationTable, start: ScoreState, config: &ScoringConfig) -> Result<ScoreState> {
    config.validate()?;
    let cache = OverlapCache::build(table, &config.raster);
    let mut state = start;
    for _ in 0..config.iterations {
        state = cache.iterate(&state)?;
        let change = state.last_change();
        log::debug!("scoring iteration {}: max change {change:.3e}", state.iteration);
        if change < config.tol {
            break;
        }
    }
    Ok(state)
}

/// Writes `iteration,annotator_id,score` rows for every stored iterate.
pub fn write_score_history(state: &ScoreState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_score_history_to(state, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_score_history_to<W: Write>(state: &ScoreState, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "annotator_id", "score"])?;
    for (k, scores) in state.history.iter().enumerate() {
        for (a, s) in scores {
            w.write_record([k.to_string(), a.clone(), s.to_string()])?;
        }
    }
    w.flush()
}

/// Reads a score history file back; the last iteration becomes current.
pub fn read_score_history(path: impl AsRef<Path>) -> Result<ScoreState> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_score_history(BufReader::new(file), path)
}

pub fn parse_score_history<R: Read>(reader: R, source: &Path) -> Result<ScoreState> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["iteration", "annotator_id", "score"] {
        return Err(err(1, "expected header iteration,annotator_id,score".into()));
    }
    let mut history: Vec<Scores> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let k: usize = rec[0].parse().map_err(|_| err(line, "bad iteration".into()))?;
        let s: f64 = rec[2].parse().map_err(|_| err(line, "bad score".into()))?;
        if !(0.0..=1.0).contains(&s) {
            return Err(err(line, format!("score {s} outside [0, 1]")));
        }
        if k > history.len() {
            return Err(err(line, format!("iteration {k} skips an earlier iteration")));
        }
        if k == history.len() {
            history.push(Scores::new());
        }
        history[k].insert(rec[1].to_string(), s);
    }
    if history.is_empty() {
        history.push(Scores::new());
    }
    let scores = history[history.len() - 1].clone();
    Ok(ScoreState {
        iteration: history.len() - 1,
        scores,
        history,
    })
}
