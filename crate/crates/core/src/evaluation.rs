//! Voxelwise sensitivity, specificity and IoU against a ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::annotations::AnnotationTable;
use crate::error::{Error, Result};
use crate::geometry::{Ellipsoid, Vec3};
use crate::rasterize::{VoxelGrid, VoxelSet};
use crate::synthetic::GroundTruth;

/// Voxel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Sensitivity, TP / (TP + FN); 1 when there is nothing to find.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, 1.0)
    }

    /// FP / (FP + TN); 0 on an all-positive volume.
    pub fn one_minus_specificity(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn, 0.0)
    }

    /// TP / (TP + FP + FN); 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, 1.0)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub counts: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    /// Counts pooled over all images.
    pub aggregate: Confusion,
}

/// Confusion counts of `candidate` against `truth` on the full image grid.
pub fn image_confusion(
    candidate: &[Ellipsoid],
    truth: &[Ellipsoid],
    volume_mm: Vec3,
    spacing: Vec3,
) -> Result<Confusion> {
    let grid = VoxelGrid::covering_volume(volume_mm, spacing)?;
    let t = VoxelSet::from_nodules_clipped(truth, &grid);
    let c = VoxelSet::from_nodules_clipped(candidate, &grid);
    let tp = t.intersection_len(&c) as u64;
    let union = (t.len() + c.len()) as u64 - tp;
    Ok(Confusion {
        tp,
        fp: c.len() as u64 - tp,
        fn_: t.len() as u64 - tp,
        tn: grid.len() as u64 - union,
    })
}

/// Scores the union of all candidate nodules, whatever their annotator,
/// against the truth of every image in `truth`.
pub fn evaluate(candidate: &AnnotationTable, truth: &GroundTruth, spacing: Vec3) -> Result<MetricsReport> {
    let mut by_image: BTreeMap<&str, Vec<Ellipsoid>> = BTreeMap::new();
    for n in candidate.nodules() {
        by_image.entry(&n.image_id).or_default().push(n.ellipsoid());
    }
    for id in candidate.images() {
        if truth.image(id).is_none() {
            return Err(Error::UnknownImage(id.to_string()));
        }
    }
    let per_image = truth
        .images
        .par_iter()
        .map(|img| {
            let cand = by_image.get(img.image_id.as_str()).map_or(&[][..], Vec::as_slice);
            Ok(ImageMetrics {
                image_id: img.image_id.clone(),
                counts: image_confusion(cand, &img.nodules, img.volume_mm, spacing)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = per_image.iter().fold(Confusion::default(), |acc, m| acc + m.counts);
    Ok(MetricsReport { per_image, aggregate })
}

pub fn write_metrics(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_metrics_to(report, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with one row per image and a final `ALL` row of pooled metrics.
pub fn write_metrics_to<W: Write>(report: &MetricsReport, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["image_id", "sensitivity", "one_minus_specificity", "iou"])?;
    let rows = report
        .per_image
        .iter()
        .map(|m| (m.image_id.as_str(), &m.counts))
        .chain(std::iter::once(("ALL", &report.aggregate)));
    for (id, c) in rows {
        w.write_record([
            id.to_string(),
            c.sensitivity().to_string(),
            c.one_minus_specificity().to_string(),
            c.iou().to_string(),
        ])?;
    }
    w.flush()
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = &self.aggregate;
        writeln!(f, "images:           {}", self.per_image.len())?;
        writeln!(f, "sensitivity:      {:.4}", a.sensitivity())?;
        writeln!(f, "1 - specificity:  {:.3e}", a.one_minus_specificity())?;
        write!(f, "IoU:              {:.4}", a.iou())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{NoduleRecord, ReviewRecord};
    use crate::synthetic::TruthImage;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sphere(c: Vec3, r: f64) -> Ellipsoid {
        Ellipsoid::sphere(c, r).unwrap()
    }

    /// Per-voxel triple loop over the full volume.
    fn brute(cand: &[Ellipsoid], truth: &[Ellipsoid], volume: Vec3, spacing: Vec3) -> Confusion {
        let n = [0, 1, 2].map(|a| (volume[a] / spacing[a]).ceil() as usize);
        let mut c = Confusion::default();
        for k in 0..n[0] {
            for j in 0..n[1] {
                for i in 0..n[2] {
                    let p = [
                        (k as f64 + 0.5) * spacing[0],
                        (j as f64 + 0.5) * spacing[1],
                        (i as f64 + 0.5) * spacing[2],
                    ];
                    let t = truth.iter().any(|e| e.contains(p));
                    let x = cand.iter().any(|e| e.contains(p));
                    match (t, x) {
                        (true, true) => c.tp += 1,
                        (false, true) => c.fp += 1,
                        (true, false) => c.fn_ += 1,
                        (false, false) => c.tn += 1,
                    }
                }
            }
        }
        c
    }

    fn truth_of(volume: Vec3, nodules: Vec<Ellipsoid>) -> GroundTruth {
        GroundTruth {
            images: vec![TruthImage {
                image_id: "i".into(),
                volume_mm: volume,
                nodules,
            }],
        }
    }

    fn table_of(nodules: &[(&str, Ellipsoid)]) -> AnnotationTable {
        let recs = nodules
            .iter()
            .map(|(a, e)| NoduleRecord::new("i", *a, e.center, e.radii).unwrap())
            .collect();
        AnnotationTable::new(recs, vec![]).unwrap()
    }

    #[test]
    fn perfect_candidate() {
        let t = vec![sphere([10.0, 12.0, 9.0], 4.0)];
        let gt = truth_of([40.0; 3], t.clone());
        let r = evaluate(&table_of(&[("a", t[0])]), &gt, [1.0; 3]).unwrap();
        assert_eq!(r.aggregate.sensitivity(), 1.0);
        assert_eq!(r.aggregate.one_minus_specificity(), 0.0);
        assert_eq!(r.aggregate.iou(), 1.0);
    }

    #[test]
    fn empty_candidate() {
        let gt = truth_of([40.0; 3], vec![sphere([20.0; 3], 5.0)]);
        let table = AnnotationTable::new(vec![], vec![ReviewRecord::new("i", "a")]).unwrap();
        let r = evaluate(&table, &gt, [1.0; 3]).unwrap();
        assert_eq!(r.aggregate.sensitivity(), 0.0);
        assert_eq!(r.aggregate.iou(), 0.0);
        assert_eq!(r.aggregate.one_minus_specificity(), 0.0);
        assert_eq!(r.aggregate.total(), 40 * 40 * 40);
    }

    #[test]
    fn half_overlap_matches_brute_force() {
        let t = vec![sphere([20.0, 20.0, 15.0], 6.0)];
        let c = sphere([20.0, 20.0, 21.0], 6.0);
        let gt = truth_of([40.0; 3], t.clone());
        let r = evaluate(&table_of(&[("a", c)]), &gt, [1.0; 3]).unwrap();
        let b = brute(&[c], &t, [40.0; 3], [1.0; 3]);
        assert_eq!(r.aggregate, b);
        assert!(b.tp > 0 && b.fp > 0 && b.fn_ > 0);
    }

    #[test]
    fn annotators_are_pooled() {
        let t = vec![sphere([10.0; 3], 4.0), sphere([30.0; 3], 4.0)];
        let gt = truth_of([40.0; 3], t.clone());
        let table = table_of(&[("a", t[0]), ("b", t[1])]);
        assert_eq!(evaluate(&table, &gt, [1.0; 3]).unwrap().aggregate.iou(), 1.0);
    }

    #[test]
    fn clipped_at_volume_border() {
        let t = vec![sphere([2.0, 20.0, 20.0], 2.0)];
        let c = sphere([0.0, 20.0, 20.0], 6.0);
        let gt = truth_of([30.0, 40.0, 35.0], t.clone());
        let r = evaluate(&table_of(&[("a", c)]), &gt, [2.0, 1.0, 1.5]).unwrap();
        assert_eq!(r.aggregate, brute(&[c], &t, [30.0, 40.0, 35.0], [2.0, 1.0, 1.5]));
    }

    #[test]
    fn unknown_image() {
        let gt = truth_of([40.0; 3], vec![]);
        let table = AnnotationTable::new(vec![], vec![ReviewRecord::new("other", "a")]).unwrap();
        assert!(matches!(evaluate(&table, &gt, [1.0; 3]), Err(Error::UnknownImage(id)) if id == "other"));
    }

    #[test]
    fn pooled_not_averaged() {
        let gt = GroundTruth {
            images: vec![
                TruthImage {
                    image_id: "i".into(),
                    volume_mm: [20.0; 3],
                    nodules: vec![sphere([10.0; 3], 5.0)],
                },
                TruthImage {
                    image_id: "j".into(),
                    volume_mm: [20.0; 3],
                    nodules: vec![sphere([10.0; 3], 2.0)],
                },
            ],
        };
        let table = AnnotationTable::new(
            vec![NoduleRecord::new("i", "a", [10.0; 3], [5.0; 3]).unwrap()],
            vec![ReviewRecord::new("j", "a")],
        )
        .unwrap();
        let r = evaluate(&table, &gt, [1.0; 3]).unwrap();
        let (a, b) = (r.per_image[0].counts, r.per_image[1].counts);
        assert_eq!(a.sensitivity(), 1.0);
        assert_eq!(b.sensitivity(), 0.0);
        assert_abs_diff_eq!(
            r.aggregate.sensitivity(),
            a.tp as f64 / (a.tp + b.fn_) as f64,
            epsilon = 1e-15
        );
    }

    #[test]
    fn csv_has_all_row() {
        let gt = truth_of([20.0; 3], vec![sphere([10.0; 3], 3.0)]);
        let r = evaluate(&table_of(&[("a", sphere([10.0; 3], 3.0))]), &gt, [1.0; 3]).unwrap();
        let mut buf = Vec::new();
        write_metrics_to(&r, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "image_id,sensitivity,one_minus_specificity,iou\ni,1,0,1\nALL,1,0,1\n"
        );
    }

    fn arb_sphere() -> impl Strategy<Value = Ellipsoid> {
        ([0.0..30.0f64, 0.0..30.0f64, 0.0..30.0f64], 0.5..8.0f64).prop_map(|(c, r)| sphere(c, r))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn agrees_with_brute_force(
            truth in prop::collection::vec(arb_sphere(), 0..3),
            cand in prop::collection::vec(arb_sphere(), 0..4),
            spacing in prop::sample::select(vec![1.0, 1.5, 2.0]),
        ) {
            let got = image_confusion(&cand, &truth, [30.0; 3], [spacing; 3]).unwrap();
            prop_assert_eq!(got, brute(&cand, &truth, [30.0; 3], [spacing; 3]));
        }

        #[test]
        fn false_positive_never_helps(
            truth in prop::collection::vec(arb_sphere(), 1..3),
            cand in prop::collection::vec(arb_sphere(), 0..3),
            extra in arb_sphere(),
        ) {
            let before = image_confusion(&cand, &truth, [30.0; 3], [1.0; 3]).unwrap();
            let mut more = cand.clone();
            more.push(extra);
            let after = image_confusion(&more, &truth, [30.0; 3], [1.0; 3]).unwrap();
            prop_assert!(after.one_minus_specificity() >= before.one_minus_specificity());
            prop_assert!(after.sensitivity() >= before.sensitivity());
            for v in [after.sensitivity(), after.one_minus_specificity(), after.iou()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(after.iou() <= after.sensitivity());
            let disjoint = truth
                .iter()
                .all(|t| crate::geometry::distance(t.center, extra.center) > t.radii[0] + extra.radii[0]);
            if disjoint {
                prop_assert!(after.iou() <= before.iou());
                prop_assert_eq!(after.sensitivity(), before.sensitivity());
            }
        }
    }
}
