//! Seeded ground truth and noisy multi-annotator tables for benchmarking.
//!
//! Three annotator profiles are simulated. Bad annotators only emit false
//! nodules scattered around the image center; perfect annotators copy the
//! true nodules (optionally jittered and randomly dropped); normal annotators
//! do both. Every (image, annotator) draw uses its own random stream, so the
//! output does not depend on thread count or on which other annotators exist.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationTable, NoduleRecord, ReviewRecord};
use crate::error::{Error, Result};
use crate::geometry::{Ellipsoid, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    Bad,
    Normal,
    Perfect,
}

impl AnnotatorKind {
    fn emits_false(self) -> bool {
        matches!(self, AnnotatorKind::Bad | AnnotatorKind::Normal)
    }

    fn copies_truth(self) -> bool {
        matches!(self, AnnotatorKind::Normal | AnnotatorKind::Perfect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatorProfile {
    pub id: String,
    pub kind: AnnotatorKind,
}

impl AnnotatorProfile {
    pub fn new(id: impl Into<String>, kind: AnnotatorKind) -> Self {
        AnnotatorProfile { id: id.into(), kind }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// False nodules per image are uniform on `0..=false_count_max`.
    pub false_count_max: u32,
    /// Diagonal covariance (z, y, x) of false nodule centers around the image center, mm².
    pub false_center_cov: Vec3,
    /// False nodule diameters are uniform on this interval, mm.
    pub false_diameter_range: (f64, f64),
    /// Diagonal covariance of the jitter added to true centers, mm².
    pub loc_cov: Vec3,
    /// Standard deviation of the jitter added to true diameters, mm.
    pub diam_sigma: f64,
    /// Probability that a copied true nodule is kept.
    pub keep_prob: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::setting(Setting::Exact, 0)
    }
}

/// The two noise levels of the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// Exact copies of the truth.
    Exact,
    /// Unit-variance center jitter, 0.5 mm diameter jitter, 70% recall.
    Noisy,
}

impl NoiseConfig {
    pub fn setting(setting: Setting, seed: u64) -> Self {
        let (loc_cov, diam_sigma, keep_prob) = match setting {
            Setting::Exact => ([0.0; 3], 0.0, 1.0),
            Setting::Noisy => ([1.0; 3], 0.5, 0.7),
        };
        NoiseConfig {
            false_count_max: 4,
            false_center_cov: [200.0, 100.0, 100.0],
            false_diameter_range: (4.0, 15.0),
            loc_cov,
            diam_sigma,
            keep_prob,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::Config(format!(
                "keep_prob must lie in [0, 1], got {}",
                self.keep_prob
            )));
        }
        if self
            .false_center_cov
            .iter()
            .chain(&self.loc_cov)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("covariances must be non-negative".into()));
        }
        if !(self.diam_sigma.is_finite() && self.diam_sigma >= 0.0) {
            return Err(Error::Config("diam_sigma must be non-negative".into()));
        }
        let (lo, hi) = self.false_diameter_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad false diameter range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthImage {
    pub image_id: String,
    pub volume_mm: Vec3,
    pub nodules: Vec<Ellipsoid>,
}

impl TruthImage {
    pub fn center(&self) -> Vec3 {
        self.volume_mm.map(|v| v / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub images: Vec<TruthImage>,
}

impl GroundTruth {
    pub fn image(&self, image_id: &str) -> Option<&TruthImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub n_images: usize,
    pub volume_mm: Vec3,
    /// Inclusive range of true nodules per image.
    pub nodules_per_image: (usize, usize),
    pub diameter_mm: (f64, f64),
    pub seed: u64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            n_images: 20,
            volume_mm: [400.0; 3],
            nodules_per_image: (1, 3),
            diameter_mm: (8.0, 30.0),
            seed: 0,
        }
    }
}

const TRUTH_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one position in the (stream, image, annotator)
/// hierarchy.
fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for p in path {
        h = splitmix64(h ^ splitmix64(*p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn image_id(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(4);
    format!("img{index:0width$}")
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_ground_truth(config: &TruthConfig) -> Result<GroundTruth> {
    let (dlo, dhi) = config.diameter_mm;
    let (nlo, nhi) = config.nodules_per_image;
    if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
        return Err(Error::Config(format!("bad diameter range ({dlo}, {dhi})")));
    }
    if nlo > nhi {
        return Err(Error::Config(format!("bad nodule count range ({nlo}, {nhi})")));
    }
    if config.volume_mm.iter().any(|v| !(v.is_finite() && *v >= dhi)) {
        return Err(Error::Config(format!(
            "nodules of diameter {dhi} mm do not fit in volume {:?}",
            config.volume_mm
        )));
    }
    let images = (0..config.n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.seed, &[TRUTH_STREAM, i as u64]);
            let count = rng.random_range(nlo..=nhi);
            let nodules = (0..count)
                .map(|_| {
                    let r = uniform(&mut rng, dlo, dhi) / 2.0;
                    let center = config.volume_mm.map(|v| uniform(&mut rng, r, v - r));
                    Ellipsoid::sphere(center, r)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TruthImage {
                image_id: image_id(i, config.n_images),
                volume_mm: config.volume_mm,
                nodules,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GroundTruth { images })
}

fn annotate(
    image: &TruthImage,
    profile: &AnnotatorProfile,
    config: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<NoduleRecord>> {
    let mut out = Vec::new();
    if profile.kind.emits_false() {
        let mu = image.center();
        let count = rng.random_range(0..=config.false_count_max);
        for _ in 0..count {
            let mut center = [0.0; 3];
            for i in 0..3 {
                center[i] = mu[i] + config.false_center_cov[i].sqrt() * normal(rng);
            }
            let d = uniform(rng, config.false_diameter_range.0, config.false_diameter_range.1);
            out.push(NoduleRecord::new(&image.image_id, &profile.id, center, [d / 2.0; 3])?);
        }
    }
    if profile.kind.copies_truth() {
        for n in &image.nodules {
            let mut center = n.center;
            for i in 0..3 {
                center[i] += config.loc_cov[i].sqrt() * normal(rng);
            }
            let diameter = (2.0 * n.radii[0] + config.diam_sigma * normal(rng)).max(1.0);
            if rng.random_bool(config.keep_prob) {
                out.push(NoduleRecord::new(
                    &image.image_id,
                    &profile.id,
                    center,
                    [diameter / 2.0; 3],
                )?);
            }
        }
    }
    Ok(out)
}

/// Simulates every profile on every image of `truth`.
pub fn generate_noisy(
    truth: &GroundTruth,
    profiles: &[AnnotatorProfile],
    config: &NoiseConfig,
) -> Result<AnnotationTable> {
    if profiles.is_empty() {
        return Err(Error::Config("at least one annotator profile is required".into()));
    }
    config.validate()?;
    let per_image: Vec<(Vec<NoduleRecord>, Vec<ReviewRecord>)> = truth
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image)| {
            let mut nodules = Vec::new();
            let mut reviews = Vec::new();
            for (a, profile) in profiles.iter().enumerate() {
                let mut rng = stream_rng(config.seed, &[NOISE_STREAM, i as u64, a as u64]);
                let marks = annotate(image, profile, config, &mut rng)?;
                if marks.is_empty() {
                    reviews.push(ReviewRecord::new(&image.image_id, &profile.id));
                }
                nodules.extend(marks);
            }
            Ok((nodules, reviews))
        })
        .collect::<Result<_>>()?;
    let (nodules, reviews): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    AnnotationTable::new(
        nodules.into_iter().flatten().collect(),
        reviews.into_iter().flatten().collect(),
    )
}

/// The four benchmark scenarios: group layout (A without normal annotators,
/// B with two) crossed with the noise setting (1 exact, 2 noisy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    A1,
    A2,
    B1,
    B2,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::A1, Scenario::A2, Scenario::B1, Scenario::B2];

    pub fn setting(self) -> Setting {
        match self {
            Scenario::A1 | Scenario::B1 => Setting::Exact,
            Scenario::A2 | Scenario::B2 => Setting::Noisy,
        }
    }

    /// Ten annotators named "0".."9".
    pub fn profiles(self) -> Vec<AnnotatorProfile> {
        let with_middle = matches!(self, Scenario::B1 | Scenario::B2);
        (0..10)
            .map(|i| {
                let kind = match i {
                    0 | 1 => AnnotatorKind::Bad,
                    2 | 3 if with_middle => AnnotatorKind::Normal,
                    _ => AnnotatorKind::Perfect,
                };
                AnnotatorProfile::new(i.to_string(), kind)
            })
            .collect()
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(Scenario::A1),
            "A2" => Ok(Scenario::A2),
            "B1" => Ok(Scenario::B1),
            "B2" => Ok(Scenario::B2),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

/// Truth plus noisy table for a scenario with default truth parameters.
pub fn scenario(name: Scenario, n_images: usize, seed: u64) -> Result<(GroundTruth, AnnotationTable)> {
    let truth = TruthConfig {
        n_images,
        seed,
        ..TruthConfig::default()
    };
    scenario_with(name, &truth, &NoiseConfig::setting(name.setting(), seed))
}

pub fn scenario_with(
    name: Scenario,
    truth: &TruthConfig,
    noise: &NoiseConfig,
) -> Result<(GroundTruth, AnnotationTable)> {
    let gt = generate_ground_truth(truth)?;
    let table = generate_noisy(&gt, &name.profiles(), noise)?;
    Ok((gt, table))
}

const TRUTH_HEADER: [&str; 10] = [
    "image_id",
    "volume_z_mm",
    "volume_y_mm",
    "volume_x_mm",
    "z_mm",
    "y_mm",
    "x_mm",
    "rz_mm",
    "ry_mm",
    "rx_mm",
];

/// Writes one row per true nodule, or one row with empty nodule cells for an
/// image without nodules.
pub fn write_truth(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_truth_to(truth, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_truth_to<W: Write>(truth: &GroundTruth, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRUTH_HEADER)?;
    for img in &truth.images {
        let head: Vec<String> = std::iter::once(img.image_id.clone())
            .chain(img.volume_mm.iter().map(f64::to_string))
            .collect();
        if img.nodules.is_empty() {
            let mut row = head.clone();
            row.extend(std::iter::repeat_n(String::new(), 6));
            w.write_record(&row)?;
        }
        for n in &img.nodules {
            let mut row = head.clone();
            row.extend(n.center.iter().chain(&n.radii).map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_truth(BufReader::new(file), path)
}

pub fn parse_truth<R: Read>(reader: R, source: &Path) -> Result<GroundTruth> {
    let err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != TRUTH_HEADER {
        return Err(err(1, format!("expected header {}", TRUTH_HEADER.join(","))));
    }
    let mut images: Vec<TruthImage> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != TRUTH_HEADER.len() {
            return Err(err(
                line,
                format!("expected {} columns, found {}", TRUTH_HEADER.len(), rec.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = rec[k]
                .trim()
                .parse()
                .map_err(|_| err(line, format!("column {}: not a number: {:?}", k + 1, &rec[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(err(line, format!("column {}: non-finite value", k + 1)))
            }
        };
        let id = rec[0].to_string();
        let volume = [num(1)?, num(2)?, num(3)?];
        if volume.iter().any(|v| *v <= 0.0) {
            return Err(err(line, "volume must be positive".into()));
        }
        let idx = match images.iter().position(|i| i.image_id == id) {
            Some(idx) => {
                if images[idx].volume_mm != volume {
                    return Err(err(line, format!("conflicting volume for image {id:?}")));
                }
                idx
            }
            None => {
                images.push(TruthImage {
                    image_id: id,
                    volume_mm: volume,
                    nodules: Vec::new(),
                });
                images.len() - 1
            }
        };
        if (4..10).all(|k| rec[k].trim().is_empty()) {
            continue;
        }
        let center = [num(4)?, num(5)?, num(6)?];
        let radii = [num(7)?, num(8)?, num(9)?];
        let e = Ellipsoid::new(center, radii).map_err(|e| err(line, e.to_string()))?;
        images[idx].nodules.push(e);
    }
    Ok(GroundTruth { images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_is_deterministic_and_contained() {
        let cfg = TruthConfig {
            n_images: 30,
            seed: 9,
            ..Default::default()
        };
        let a = generate_ground_truth(&cfg).unwrap();
        assert_eq!(a, generate_ground_truth(&cfg).unwrap());
        assert_ne!(a, generate_ground_truth(&TruthConfig { seed: 10, ..cfg }).unwrap());
        for img in &a.images {
            assert!((1..=3).contains(&img.nodules.len()));
            for n in &img.nodules {
                for i in 0..3 {
                    assert!(n.center[i] - n.radii[i] >= 0.0);
                    assert!(n.center[i] + n.radii[i] <= img.volume_mm[i]);
                }
                assert!(2.0 * n.radii[0] >= 8.0 && 2.0 * n.radii[0] <= 30.0);
            }
        }
    }

    #[test]
    fn zero_nodule_images() {
        let cfg = TruthConfig {
            n_images: 5,
            nodules_per_image: (0, 0),
            ..Default::default()
        };
        let gt = generate_ground_truth(&cfg).unwrap();
        assert!(gt.images.iter().all(|i| i.nodules.is_empty()));
    }

    #[test]
    fn impossible_fit_rejected() {
        let cfg = TruthConfig {
            volume_mm: [10.0, 400.0, 400.0],
            diameter_mm: (8.0, 20.0),
            ..Default::default()
        };
        assert!(matches!(generate_ground_truth(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn exact_setting_copies_truth() {
        let (truth, table) = scenario(Scenario::A1, 10, 3).unwrap();
        let by_image = table.by_image();
        for img in &truth.images {
            let marks = &by_image[img.image_id.as_str()];
            for p in 2..10 {
                let got: Vec<Ellipsoid> = marks[p.to_string().as_str()].iter().map(|n| n.ellipsoid()).collect();
                let mut want = img.nodules.clone();
                let key = |e: &Ellipsoid| (e.center[0].to_bits(), e.center[1].to_bits(), e.center[2].to_bits());
                want.sort_by_key(key);
                let mut got = got;
                got.sort_by_key(key);
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn bad_annotators_only_emit_false_nodules() {
        for s in Scenario::ALL {
            let (truth, table) = scenario(s, 15, 21).unwrap();
            let by_image = table.by_image();
            for img in &truth.images {
                let marks = &by_image[img.image_id.as_str()];
                assert_eq!(marks.len(), 10, "every annotator reviews every image");
                for bad in ["0", "1"] {
                    let ns = &marks[bad];
                    assert!(ns.len() <= 4);
                    for n in ns {
                        let d = 2.0 * n.radii[0];
                        assert!((4.0..=15.0).contains(&d));
                        assert!(!img.nodules.iter().any(|t| t.center == n.center));
                    }
                }
            }
        }
    }

    #[test]
    fn keep_probability() {
        let truth = GroundTruth {
            images: (0..100)
                .map(|i| TruthImage {
                    image_id: format!("img{i:03}"),
                    volume_mm: [400.0; 3],
                    nodules: (0..100)
                        .map(|k| Ellipsoid::sphere([200.0, 2.0 * k as f64 + 50.0, 200.0], 3.0).unwrap())
                        .collect(),
                })
                .collect(),
        };
        let profiles = [AnnotatorProfile::new("p", AnnotatorKind::Perfect)];
        let cfg = NoiseConfig::setting(Setting::Noisy, 77);
        let table = generate_noisy(&truth, &profiles, &cfg).unwrap();
        let frac = table.nodules().len() as f64 / 10_000.0;
        assert!((frac - 0.7).abs() <= 0.02, "kept fraction {frac}");
    }

    #[test]
    fn adding_annotators_keeps_existing_draws() {
        let truth = generate_ground_truth(&TruthConfig {
            n_images: 6,
            ..Default::default()
        })
        .unwrap();
        let cfg = NoiseConfig::setting(Setting::Noisy, 5);
        let few = vec![
            AnnotatorProfile::new("x", AnnotatorKind::Bad),
            AnnotatorProfile::new("y", AnnotatorKind::Normal),
        ];
        let mut more = few.clone();
        more.push(AnnotatorProfile::new("z", AnnotatorKind::Perfect));
        let a = generate_noisy(&truth, &few, &cfg).unwrap();
        let b = generate_noisy(&truth, &more, &cfg).unwrap();
        let keep: Vec<_> = b.nodules().iter().filter(|n| n.annotator_id != "z").cloned().collect();
        assert_eq!(a.nodules(), keep.as_slice());
    }

    #[test]
    fn scenario_groups() {
        let kinds = |s: Scenario| s.profiles().into_iter().map(|p| p.kind).collect::<Vec<_>>();
        use AnnotatorKind::*;
        assert_eq!(
            kinds(Scenario::A1),
            [Bad, Bad, Perfect, Perfect, Perfect, Perfect, Perfect, Perfect, Perfect, Perfect]
        );
        assert_eq!(
            kinds(Scenario::B2),
            [Bad, Bad, Normal, Normal, Perfect, Perfect, Perfect, Perfect, Perfect, Perfect]
        );
        let b2 = NoiseConfig::setting(Scenario::B2.setting(), 0);
        assert_eq!((b2.loc_cov, b2.diam_sigma, b2.keep_prob), ([1.0; 3], 0.5, 0.7));
        let a1 = NoiseConfig::setting(Scenario::A1.setting(), 0);
        assert_eq!((a1.loc_cov, a1.diam_sigma, a1.keep_prob), ([0.0; 3], 0.0, 1.0));
        assert_eq!(
            scenario(Scenario::B2, 8, 4).unwrap(),
            scenario(Scenario::B2, 8, 4).unwrap()
        );
        assert_eq!("b1".parse::<Scenario>().unwrap(), Scenario::B1);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| scenario(Scenario::B2, 12, 99).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn truth_csv_round_trip() {
        let mut gt = generate_ground_truth(&TruthConfig {
            n_images: 4,
            ..Default::default()
        })
        .unwrap();
        gt.images[2].nodules.clear();
        let mut buf = Vec::new();
        write_truth_to(&gt, &mut buf).unwrap();
        assert_eq!(parse_truth(buf.as_slice(), Path::new("mem")).unwrap(), gt);
    }
}
