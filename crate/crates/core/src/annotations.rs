//! Multi-annotator annotation tables and their CSV form.
//!
//! A table holds nodule marks plus "reviewed, found nothing" rows, so the set
//! of annotators who looked at an image is known even when some of them
//! reported no nodules. In CSV those rows carry empty geometry cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Ellipsoid, Vec3};

/// Annotator id given to merged nodules; reserved in input tables.
pub const MERGED_ANNOTATOR: &str = "merged";

/// How the single `size_mm` column of the one-size layout is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusMode {
    #[default]
    Radius,
    Diameter,
}

impl std::str::FromStr for RadiusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(RadiusMode::Radius),
            "diameter" => Ok(RadiusMode::Diameter),
            other => Err(Error::Config(format!("unknown radius mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleRecord {
    pub image_id: String,
    pub annotator_id: String,
    pub center: Vec3,
    pub radii: Vec3,
    pub confidence: Option<f64>,
}

impl NoduleRecord {
    pub fn new(
        image_id: impl Into<String>,
        annotator_id: impl Into<String>,
        center: Vec3,
        radii: Vec3,
    ) -> Result<Self> {
        let rec = NoduleRecord {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
            center,
            radii,
            confidence: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn ellipsoid(&self) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: self.radii,
        }
    }

    fn validate(&self) -> Result<()> {
        Ellipsoid::new(self.center, self.radii)
            .map_err(|e| Error::Validation(format!("nodule of {:?} on {:?}: {e}", self.annotator_id, self.image_id)))?;
        if let Some(c) = self.confidence {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::Validation(format!(
                    "confidence {c} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    fn sort_key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.image_id
            .cmp(&other.image_id)
            .then_with(|| self.annotator_id.cmp(&other.annotator_id))
            .then_with(|| cmp_vec3(&self.center, &other.center))
            .then_with(|| cmp_vec3(&self.radii, &other.radii))
            .then_with(|| {
                let a = self.confidence.unwrap_or(f64::NEG_INFINITY);
                let b = other.confidence.unwrap_or(f64::NEG_INFINITY);
                a.total_cmp(&b)
            })
    }
}

fn cmp_vec3(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then_with(|| a[1].total_cmp(&b[1]))
        .then_with(|| a[2].total_cmp(&b[2]))
}

/// An annotator examined an image and reported no nodules.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReviewRecord {
    pub image_id: String,
    pub annotator_id: String,
}

impl ReviewRecord {
    pub fn new(image_id: impl Into<String>, annotator_id: impl Into<String>) -> Self {
        ReviewRecord {
            image_id: image_id.into(),
            annotator_id: annotator_id.into(),
        }
    }
}

/// Validated table of nodule and review rows, kept in canonical
/// `(image, annotator, z, y, x)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    nodules: Vec<NoduleRecord>,
    reviews: Vec<ReviewRecord>,
}

/// Nodules of one image keyed by annotator; review-only annotators map to an
/// empty list.
pub type ImageAnnotations<'a> = BTreeMap<&'a str, Vec<&'a NoduleRecord>>;

impl AnnotationTable {
    pub fn new(mut nodules: Vec<NoduleRecord>, mut reviews: Vec<ReviewRecord>) -> Result<Self> {
        for n in &nodules {
            n.validate()?;
        }
        reviews.sort();
        if let Some(w) = reviews.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!(
                "duplicate review row for annotator {:?} on image {:?}",
                w[0].annotator_id, w[0].image_id
            )));
        }
        let with_nodules: BTreeSet<(&str, &str)> = nodules
            .iter()
            .map(|n| (n.image_id.as_str(), n.annotator_id.as_str()))
            .collect();
        if let Some(r) = reviews
            .iter()
            .find(|r| with_nodules.contains(&(r.image_id.as_str(), r.annotator_id.as_str())))
        {
            return Err(Error::Validation(format!(
                "annotator {:?} has both nodules and an empty review row on image {:?}",
                r.annotator_id, r.image_id
            )));
        }
        nodules.sort_by(|a, b| a.sort_key_cmp(b));
        Ok(AnnotationTable { nodules, reviews })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nodules(&self) -> &[NoduleRecord] {
        &self.nodules
    }

    pub fn reviews(&self) -> &[ReviewRecord] {
        &self.reviews
    }

    pub fn is_empty(&self) -> bool {
        self.nodules.is_empty() && self.reviews.is_empty()
    }

    pub fn into_parts(self) -> (Vec<NoduleRecord>, Vec<ReviewRecord>) {
        (self.nodules, self.reviews)
    }

    /// All image ids, sorted.
    pub fn images(&self) -> BTreeSet<&str> {
        self.nodules
            .iter()
            .map(|n| n.image_id.as_str())
            .chain(self.reviews.iter().map(|r| r.image_id.as_str()))
            .collect()
    }

    /// All annotator ids, sorted.
    pub fn annotators(&self) -> BTreeSet<&str> {
        self.nodules
            .iter()
            .map(|n| n.annotator_id.as_str())
            .chain(self.reviews.iter().map(|r| r.annotator_id.as_str()))
            .collect()
    }

    /// Annotators who looked at `image_id`, whether or not they marked anything.
    pub fn annotators_of(&self, image_id: &str) -> BTreeSet<String> {
        self.nodules
            .iter()
            .filter(|n| n.image_id == image_id)
            .map(|n| n.annotator_id.clone())
            .chain(
                self.reviews
                    .iter()
                    .filter(|r| r.image_id == image_id)
                    .map(|r| r.annotator_id.clone()),
            )
            .collect()
    }

    /// Per-image view: image → annotator → nodules.
    pub fn by_image(&self) -> BTreeMap<&str, ImageAnnotations<'_>> {
        let mut out: BTreeMap<&str, ImageAnnotations<'_>> = BTreeMap::new();
        for r in &self.reviews {
            out.entry(r.image_id.as_str())
                .or_default()
                .entry(r.annotator_id.as_str())
                .or_default();
        }
        for n in &self.nodules {
            out.entry(n.image_id.as_str())
                .or_default()
                .entry(n.annotator_id.as_str())
                .or_default()
                .push(n);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    /// image_id,annotator_id,z_mm,y_mm,x_mm,size_mm
    SingleSize,
    /// image_id,annotator_id,z_mm,y_mm,x_mm,rz_mm,ry_mm,rx_mm[,confidence]
    Radii { confidence: bool },
    /// image_id,z_mm,y_mm,x_mm,rz_mm,ry_mm,rx_mm,confidence
    Cleaned,
}

const SINGLE_SIZE_HEADER: &[&str] = &["image_id", "annotator_id", "z_mm", "y_mm", "x_mm", "size_mm"];
const RADII_HEADER: &[&str] = &[
    "image_id",
    "annotator_id",
    "z_mm",
    "y_mm",
    "x_mm",
    "rz_mm",
    "ry_mm",
    "rx_mm",
    "confidence",
];
const CLEANED_HEADER: &[&str] = &[
    "image_id",
    "z_mm",
    "y_mm",
    "x_mm",
    "rz_mm",
    "ry_mm",
    "rx_mm",
    "confidence",
];

impl Layout {
    fn detect(header: &csv::StringRecord) -> Option<Self> {
        let fields: Vec<&str> = header.iter().map(str::trim).collect();
        if fields == SINGLE_SIZE_HEADER {
            Some(Layout::SingleSize)
        } else if fields == RADII_HEADER[..8] {
            Some(Layout::Radii { confidence: false })
        } else if fields == RADII_HEADER {
            Some(Layout::Radii { confidence: true })
        } else if fields == CLEANED_HEADER {
            Some(Layout::Cleaned)
        } else {
            None
        }
    }

    fn width(self) -> usize {
        match self {
            Layout::SingleSize => 6,
            Layout::Radii { confidence: false } => 8,
            Layout::Radii { confidence: true } => 9,
            Layout::Cleaned => 8,
        }
    }
}

/// Reads an annotation table from a CSV file.
pub fn read_table(path: impl AsRef<Path>, radius_mode: RadiusMode) -> Result<AnnotationTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_table(BufReader::new(file), path, radius_mode)
}

/// Parses CSV from any reader; `source` only labels error messages.
pub fn parse_table<R: Read>(reader: R, source: impl AsRef<Path>, radius_mode: RadiusMode) -> Result<AnnotationTable> {
    let source = source.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let layout = Layout::detect(&header).ok_or_else(|| {
        parse_err(
            1,
            format!("unrecognized header {:?}", header.iter().collect::<Vec<_>>()),
        )
    })?;

    let mut nodules = Vec::new();
    let mut reviews = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != layout.width() {
            return Err(parse_err(
                line,
                format!("expected {} columns, found {}", layout.width(), record.len()),
            ));
        }
        let (image_id, annotator_id, geometry) = match layout {
            Layout::Cleaned => (&record[0], MERGED_ANNOTATOR, 1),
            _ => (&record[0], &record[1], 2),
        };
        if image_id.is_empty() {
            return Err(parse_err(line, "empty image_id".into()));
        }
        if annotator_id.is_empty() {
            return Err(parse_err(line, "empty annotator_id".into()));
        }
        if layout != Layout::Cleaned && annotator_id == MERGED_ANNOTATOR {
            return Err(parse_err(
                line,
                format!("annotator id {MERGED_ANNOTATOR:?} is reserved for merged output"),
            ));
        }
        let cells: Vec<&str> = record.iter().skip(geometry).map(str::trim).collect();
        let n_geom = match layout {
            Layout::SingleSize => 4,
            _ => 6,
        };
        let (geom_cells, rest) = cells.split_at(n_geom);
        if geom_cells.iter().all(|c| c.is_empty()) {
            reviews.push(ReviewRecord::new(image_id, annotator_id));
            continue;
        }
        let mut values = Vec::with_capacity(n_geom);
        for (k, c) in geom_cells.iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| parse_err(line, format!("column {}: not a number: {c:?}", geometry + k + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column {}: non-finite value", geometry + k + 1),
                ));
            }
            values.push(v);
        }
        let center = [values[0], values[1], values[2]];
        let radii = match layout {
            Layout::SingleSize => {
                let r = match radius_mode {
                    RadiusMode::Radius => values[3],
                    RadiusMode::Diameter => values[3] / 2.0,
                };
                [r; 3]
            }
            _ => [values[3], values[4], values[5]],
        };
        if radii.iter().any(|r| *r <= 0.0) {
            return Err(parse_err(line, format!("non-positive size {radii:?}")));
        }
        let confidence = match rest.first() {
            Some(c) if !c.is_empty() => {
                let v: f64 = c
                    .parse()
                    .map_err(|_| parse_err(line, format!("confidence not a number: {c:?}")))?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(parse_err(
                        line,
                        format!("confidence {v} must be finite and non-negative"),
                    ));
                }
                Some(v)
            }
            _ => None,
        };
        nodules.push(NoduleRecord {
            image_id: image_id.to_string(),
            annotator_id: annotator_id.to_string(),
            center,
            radii,
            confidence,
        });
    }
    AnnotationTable::new(nodules, reviews)
}

fn is_merged_output(table: &AnnotationTable) -> bool {
    !table.is_empty()
        && table.nodules.iter().all(|n| n.annotator_id == MERGED_ANNOTATOR)
        && table.reviews.iter().all(|r| r.annotator_id == MERGED_ANNOTATOR)
}

fn opt(v: Option<f64>) -> String {
    v.map(|c| c.to_string()).unwrap_or_default()
}

/// Writes a table as CSV. Tables made only of merged output use the cleaned
/// layout, everything else the three-radius layout with a confidence column.
pub fn write_table(table: &AnnotationTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_table_to(table, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_table_to<W: Write>(table: &AnnotationTable, writer: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    // canonical row order: nodules and reviews interleaved by (image, annotator)
    enum Row<'a> {
        Nodule(&'a NoduleRecord),
        Review(&'a ReviewRecord),
    }
    let mut rows: Vec<Row<'_>> = table
        .nodules
        .iter()
        .map(Row::Nodule)
        .chain(table.reviews.iter().map(Row::Review))
        .collect();
    let key = |r: &Row<'_>| -> (String, String) {
        match r {
            Row::Nodule(n) => (n.image_id.clone(), n.annotator_id.clone()),
            Row::Review(r) => (r.image_id.clone(), r.annotator_id.clone()),
        }
    };
    rows.sort_by_key(key);

    let cleaned = is_merged_output(table);
    w.write_record(if cleaned { CLEANED_HEADER } else { RADII_HEADER })?;
    for row in rows {
        let mut fields: Vec<String> = Vec::with_capacity(9);
        match row {
            Row::Nodule(n) => {
                fields.push(n.image_id.clone());
                if !cleaned {
                    fields.push(n.annotator_id.clone());
                }
                fields.extend(n.center.iter().map(f64::to_string));
                fields.extend(n.radii.iter().map(f64::to_string));
                fields.push(opt(n.confidence));
            }
            Row::Review(r) => {
                fields.push(r.image_id.clone());
                if !cleaned {
                    fields.push(r.annotator_id.clone());
                }
                fields.extend(std::iter::repeat_n(String::new(), 7));
            }
        }
        w.write_record(&fields)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, mode: RadiusMode) -> Result<AnnotationTable> {
        parse_table(text.as_bytes(), "test.csv", mode)
    }

    const HEADER: &str = "image_id,annotator_id,z_mm,y_mm,x_mm,size_mm\n";

    #[test]
    fn empty_geometry_is_review() {
        let t = parse(&format!("{HEADER}img1,d3,,,,\n"), RadiusMode::Radius).unwrap();
        assert!(t.nodules().is_empty());
        assert_eq!(t.reviews(), &[ReviewRecord::new("img1", "d3")]);
    }

    #[test]
    fn single_size_modes() {
        let text = format!("{HEADER}img1,d3,10,20,30,5\n");
        let t = parse(&text, RadiusMode::Radius).unwrap();
        assert_eq!(t.nodules()[0].center, [10.0, 20.0, 30.0]);
        assert_eq!(t.nodules()[0].radii, [5.0; 3]);
        let t = parse(&text, RadiusMode::Diameter).unwrap();
        assert_eq!(t.nodules()[0].radii, [2.5; 3]);
    }

    #[test]
    fn parse_errors_name_line() {
        let cases = [
            format!("{HEADER}img1,d1,1,2,3,4\nimg1,d2,1,2,3\n"),
            format!("{HEADER}img1,d1,1,2,3,4\nimg1,d2,1,x,3,4\n"),
            format!("{HEADER}img1,d1,1,2,3,4\nimg1,d2,1,2,3,0\n"),
            format!("{HEADER}img1,d1,1,2,3,4\nimg1,d2,1,2,3,-1\n"),
            format!("{HEADER}img1,d1,1,2,3,4\nimg1,d2,1,,3,4\n"),
        ];
        for text in cases {
            match parse(&text, RadiusMode::Radius) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 3, "{text}"),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_header_rejected() {
        assert!(matches!(
            parse("a,b,c\n1,2,3\n", RadiusMode::Radius),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_review_rejected() {
        let text = format!("{HEADER}img1,d1,,,,\nimg1,d1,,,,\n");
        assert!(matches!(parse(&text, RadiusMode::Radius), Err(Error::Validation(_))));
    }

    #[test]
    fn review_with_nodules_rejected() {
        let text = format!("{HEADER}img1,d1,,,,\nimg1,d1,1,2,3,4\n");
        assert!(matches!(parse(&text, RadiusMode::Radius), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_nodules_kept() {
        let text = format!("{HEADER}img1,d1,1,2,3,4\nimg1,d1,1,2,3,4\n");
        assert_eq!(parse(&text, RadiusMode::Radius).unwrap().nodules().len(), 2);
    }

    #[test]
    fn reserved_annotator_rejected() {
        let text = format!("{HEADER}img1,merged,1,2,3,4\n");
        assert!(matches!(
            parse(&text, RadiusMode::Radius),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn annotators_of_image() {
        let text = format!("{HEADER}img1,d1,1,2,3,4\nimg1,d1,5,2,3,4\nimg1,d1,9,2,3,4\nimg1,d2,,,,\nimg2,d3,1,1,1,1\n");
        let t = parse(&text, RadiusMode::Radius).unwrap();
        let got: Vec<_> = t.annotators_of("img1").into_iter().collect();
        assert_eq!(got, vec!["d1".to_string(), "d2".to_string()]);
        assert!(t.annotators_of("nope").is_empty());
    }

    #[test]
    fn empty_table_writes_header_only() {
        let mut buf = Vec::new();
        write_table_to(&AnnotationTable::empty(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "image_id,annotator_id,z_mm,y_mm,x_mm,rz_mm,ry_mm,rx_mm,confidence\n"
        );
    }

    #[test]
    fn merged_table_uses_cleaned_layout() {
        let n = NoduleRecord::new("img1", MERGED_ANNOTATOR, [1.0, 2.0, 3.0], [1.5, 2.25, 3.0])
            .unwrap()
            .with_confidence(0.9);
        let t = AnnotationTable::new(vec![n], vec![ReviewRecord::new("img2", MERGED_ANNOTATOR)]).unwrap();
        let mut buf = Vec::new();
        write_table_to(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "image_id,z_mm,y_mm,x_mm,rz_mm,ry_mm,rx_mm,confidence\n\
             img1,1,2,3,1.5,2.25,3,0.9\n\
             img2,,,,,,,\n"
        );
        assert_eq!(parse(&text, RadiusMode::Radius).unwrap(), t);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.csv");
        std::fs::write(
            &src,
            format!("{HEADER}img2,b,1.25,2,3,4\nimg1,a,0.1,0.2,0.3,7\nimg1,c,,,,\n"),
        )
        .unwrap();
        let t = read_table(&src, RadiusMode::Radius).unwrap();
        let out = dir.path().join("out.csv");
        write_table(&t, &out).unwrap();
        assert_eq!(read_table(&out, RadiusMode::Radius).unwrap(), t);
        assert!(matches!(
            read_table(dir.path().join("missing.csv"), RadiusMode::Radius),
            Err(Error::Io { .. })
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn table() -> impl Strategy<Value = AnnotationTable> {
            let nodule = (
                0..4usize,
                0..5usize,
                prop::array::uniform3(-500.0..500.0f64),
                prop::array::uniform3(0.01..50.0f64),
                prop::option::of(0.0..=1.0f64),
            );
            (
                prop::collection::vec(nodule, 0..25),
                prop::collection::vec((0..4usize, 5..8usize), 0..6),
            )
                .prop_map(|(ns, rs)| {
                    let nodules = ns
                        .into_iter()
                        .map(|(i, a, c, r, conf)| NoduleRecord {
                            image_id: format!("img,{i}"),
                            annotator_id: format!("d\"{a}"),
                            center: c,
                            radii: r,
                            confidence: conf,
                        })
                        .collect();
                    let mut reviews: Vec<_> = rs
                        .into_iter()
                        .map(|(i, a)| ReviewRecord::new(format!("img,{i}"), format!("d\"{a}")))
                        .collect();
                    reviews.sort();
                    reviews.dedup();
                    AnnotationTable::new(nodules, reviews).unwrap()
                })
        }

        proptest! {
            #[test]
            fn write_read_identity(t in table()) {
                let mut buf = Vec::new();
                write_table_to(&t, &mut buf).unwrap();
                let back = parse_table(buf.as_slice(), "mem", RadiusMode::Radius).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn diameter_mode_halves(d in 0.01..100.0f64) {
                let text = format!("image_id,annotator_id,z_mm,y_mm,x_mm,size_mm\ni,a,0,0,0,{d}\n");
                let t = parse_table(text.as_bytes(), "mem", RadiusMode::Diameter).unwrap();
                prop_assert_eq!(t.nodules()[0].radii, [d / 2.0; 3]);
            }

            #[test]
            fn annotators_of_covers_nodule_owners(t in table()) {
                for n in t.nodules() {
                    prop_assert!(t.annotators_of(&n.image_id).contains(&n.annotator_id));
                }
            }
        }
    }
}
