//! COCO annotation ingestion, object-size statistics and table export.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbb::BBox;
use crate::simlab::{AssignSummary, Curves, Trace};

/// Half-open size interval `[lo, hi)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeRange {
    pub lo: f64,
    pub hi: f64,
}

impl SizeRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
            return Err(Error::Config(format!("invalid size range [{lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, size: f64) -> bool {
        self.lo <= size && size < self.hi
    }
}

impl fmt::Display for SizeRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo, self.hi)
    }
}

impl FromStr for SizeRange {
    type Err = Error;

    /// Parses `lo-hi`, e.g. `2-8`.
    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("size range {s:?} must look like lo-hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("size range {s:?}: {v:?} is not a number")))
        };
        SizeRange::new(parse(lo)?, parse(hi)?)
    }
}

/// Very tiny, tiny and small object ranges, by `√(w·h)`.
pub fn default_buckets() -> Vec<SizeRange> {
    vec![
        SizeRange { lo: 2.0, hi: 8.0 },
        SizeRange { lo: 8.0, hi: 16.0 },
        SizeRange { lo: 16.0, hi: 32.0 },
    ]
}

/// Buckets must be ascending and pairwise disjoint.
pub fn validate_buckets(buckets: &[SizeRange]) -> Result<()> {
    for b in buckets {
        SizeRange::new(b.lo, b.hi)?;
    }
    for pair in buckets.windows(2) {
        if pair[1].lo < pair[0].hi {
            return Err(Error::Config(format!(
                "size buckets must be ordered and non-overlapping: [{}, {}) then [{}, {})",
                pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    /// Annotations dropped for having `w` or `h` below the box minimum.
    pub skipped_count: usize,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

pub fn load_coco(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_coco(&text)
}

/// Parses COCO detection JSON. `bbox` is `[x, y, w, h]` with `(x, y)` the
/// top-left corner; unknown fields are ignored.
pub fn parse_coco(text: &str) -> Result<Dataset> {
    let file: CocoFile = serde_json::from_str(text)?;

    let mut ids = HashSet::with_capacity(file.images.len());
    let mut images = Vec::with_capacity(file.images.len());
    for img in file.images {
        if !ids.insert(img.id) {
            return Err(Error::Structure(format!("duplicate image id {}", img.id)));
        }
        images.push(ImageInfo {
            id: img.id,
            width: img.width,
            height: img.height,
        });
    }

    let mut annotations = Vec::with_capacity(file.annotations.len());
    let mut skipped_count = 0;
    for (i, ann) in file.annotations.into_iter().enumerate() {
        if !ids.contains(&ann.image_id) {
            let id = ann.id.map(|id| format!(" (id {id})")).unwrap_or_default();
            return Err(Error::Structure(format!(
                "annotation #{i}{id} references unknown image id {}",
                ann.image_id
            )));
        }
        let [x, y, w, h] = ann.bbox;
        match BBox::from_corner(x, y, w, h) {
            Ok(bbox) => annotations.push(Annotation {
                image_id: ann.image_id,
                category_id: ann.category_id,
                bbox,
            }),
            Err(_) => skipped_count += 1,
        }
    }
    Ok(Dataset {
        images,
        annotations,
        skipped_count,
    })
}

impl Dataset {
    /// Boxes belonging to `image_id`, in file order.
    pub fn boxes_for(&self, image_id: u64) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| a.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketCount {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeStats {
    pub total: usize,
    /// Arithmetic mean of `√(w·h)`; `None` for an empty dataset.
    pub mean_size: Option<f64>,
    pub buckets: Vec<BucketCount>,
    /// Sizes outside every bucket.
    pub overflow: usize,
}

impl SizeStats {
    pub fn histogram(&self) -> Vec<usize> {
        self.buckets.iter().map(|b| b.count).collect()
    }
}

pub fn dataset_stats(d: &Dataset, buckets: &[SizeRange]) -> Result<SizeStats> {
    validate_buckets(buckets)?;
    let mut counts: Vec<BucketCount> = buckets
        .iter()
        .map(|b| BucketCount {
            lo: b.lo,
            hi: b.hi,
            count: 0,
        })
        .collect();
    let mut overflow = 0;
    let mut sum = 0.0;
    for ann in &d.annotations {
        let size = ann.bbox.size();
        sum += size;
        match buckets.iter().position(|b| b.contains(size)) {
            Some(k) => counts[k].count += 1,
            None => overflow += 1,
        }
    }
    let total = d.annotations.len();
    Ok(SizeStats {
        total,
        mean_size: (total > 0).then(|| sum / total as f64),
        buckets: counts,
        overflow,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    Csv,
    #[default]
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown table format {s:?}"))),
        }
    }
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Something that can be written as a CSV table or a JSON document.
///
/// JSON output is the serde representation (fields in declaration order);
/// CSV output is `header()` followed by `rows()`.
pub trait Table: Serialize {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

pub fn render_table<T: Table + ?Sized>(table: &T, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut out = serde_json::to_vec_pretty(table)?;
            out.push(b'\n');
            Ok(out)
        }
        Format::Csv => {
            let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
            w.write_record(table.header())?;
            for row in table.rows() {
                w.write_record(row)?;
            }
            w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
        }
    }
}

/// Writes `table` to `path`. Identical input gives byte-identical files.
pub fn export_table<T: Table + ?Sized>(table: &T, format: Format, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_table(table, format)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Table for Curves {
    fn header(&self) -> Vec<String> {
        let mut h = vec!["size".to_string(), "offset".to_string()];
        h.extend(self.kinds.iter().map(|k| k.to_string()));
        h
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::with_capacity(self.sizes.len() * self.offsets.len());
        for (i, &s) in self.sizes.iter().enumerate() {
            for (j, &d) in self.offsets.iter().enumerate() {
                let mut row = vec![fmt_num(s), fmt_num(d)];
                row.extend((0..self.kinds.len()).map(|k| fmt_num(self.get(i, j, k))));
                rows.push(row);
            }
        }
        rows
    }
}

impl Table for Trace {
    fn header(&self) -> Vec<String> {
        ["step", "loss", "cx", "cy", "w", "h", "iou", "stalled"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.records
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    fmt_num(r.loss),
                    fmt_num(r.cx),
                    fmt_num(r.cy),
                    fmt_num(r.w),
                    fmt_num(r.h),
                    fmt_num(r.iou),
                    r.stalled.to_string(),
                ]
            })
            .collect()
    }
}

impl Table for AssignSummary {
    fn header(&self) -> Vec<String> {
        [
            "metric",
            "lo",
            "hi",
            "gt_count",
            "mean_positives",
            "zero_positive_gts",
            "num_anchors",
            "num_gts",
            "num_positive",
            "num_negative",
            "num_ignore",
        ]
        .map(String::from)
        .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.buckets
            .iter()
            .map(|b| {
                vec![
                    self.metric.to_string(),
                    fmt_num(b.lo),
                    fmt_num(b.hi),
                    b.gt_count.to_string(),
                    fmt_opt(b.mean_positives),
                    b.zero_positive_gts.to_string(),
                    self.num_anchors.to_string(),
                    self.num_gts.to_string(),
                    self.num_positive.to_string(),
                    self.num_negative.to_string(),
                    self.num_ignore.to_string(),
                ]
            })
            .collect()
    }
}

impl Table for SizeStats {
    fn header(&self) -> Vec<String> {
        ["lo", "hi", "count", "total", "mean_size"].map(String::from).to_vec()
    }

    /// One row per bucket plus an `overflow` row with empty bounds.
    fn rows(&self) -> Vec<Vec<String>> {
        let tail = [self.total.to_string(), fmt_opt(self.mean_size)];
        let mut rows: Vec<Vec<String>> = self
            .buckets
            .iter()
            .map(|b| {
                let mut row = vec![fmt_num(b.lo), fmt_num(b.hi), b.count.to_string()];
                row.extend(tail.iter().cloned());
                row
            })
            .collect();
        let mut overflow = vec![String::new(), String::new(), self.overflow.to_string()];
        overflow.extend(tail);
        rows.push(overflow);
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{MetricConfig, MetricKind};
    use crate::simlab::{self, RegressionConfig};

    const ONE: &str = r#"{"images":[{"id":1,"width":64,"height":64,"file_name":"a.png"}],
        "annotations":[{"id":7,"image_id":1,"category_id":3,"bbox":[0,0,4,4],"area":16,"iscrowd":0}],
        "categories":[{"id":3,"name":"car"}]}"#;

    #[test]
    fn parses_single_annotation() {
        let d = parse_coco(ONE).unwrap();
        assert_eq!(d.images.len(), 1);
        assert_eq!(d.annotations[0].bbox, BBox::new(2.0, 2.0, 4.0, 4.0).unwrap());
        assert_eq!(d.annotations[0].category_id, 3);
        assert_eq!(d.skipped_count, 0);
    }

    #[test]
    fn skips_degenerate() {
        let d = parse_coco(
            r#"{"images":[{"id":1,"width":8,"height":8}],
                "annotations":[{"image_id":1,"category_id":1,"bbox":[0,0,0,4]},
                               {"image_id":1,"category_id":1,"bbox":[0,0,2,-1]}]}"#,
        )
        .unwrap();
        assert!(d.annotations.is_empty());
        assert_eq!(d.skipped_count, 2);
    }

    #[test]
    fn rejects_unknown_image() {
        let err = parse_coco(
            r#"{"images":[{"id":1,"width":8,"height":8}],
                "annotations":[{"id":5,"image_id":99,"category_id":1,"bbox":[0,0,2,2]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
        assert!(err.to_string().contains("annotation #0 (id 5)"), "{err}");
        assert!(err.to_string().contains("99"));
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_coco("{not json"), Err(Error::Json(_))));
        assert!(matches!(parse_coco(r#"{"images":[]}"#), Err(Error::Json(_))));
        assert!(parse_coco(r#"{"images":[{"id":1,"width":1,"height":1},{"id":1,"width":1,"height":1}],"annotations":[]}"#).is_err());
        assert!(matches!(load_coco("/nonexistent/file.json"), Err(Error::Io { .. })));
    }

    fn dataset(boxes: &[(f64, f64)]) -> Dataset {
        Dataset {
            images: vec![ImageInfo {
                id: 1,
                width: 100.0,
                height: 100.0,
            }],
            annotations: boxes
                .iter()
                .map(|&(w, h)| Annotation {
                    image_id: 1,
                    category_id: 1,
                    bbox: BBox::new(0.0, 0.0, w, h).unwrap(),
                })
                .collect(),
            skipped_count: 0,
        }
    }

    #[test]
    fn stats_examples() {
        let two = [SizeRange::new(2.0, 8.0).unwrap(), SizeRange::new(8.0, 16.0).unwrap()];
        let s = dataset_stats(&dataset(&[(4.0, 4.0), (16.0, 16.0)]), &two).unwrap();
        assert_eq!(s.mean_size, Some(10.0));
        assert_eq!(s.histogram(), vec![1, 0]);
        assert_eq!(s.overflow, 1);

        let s = dataset_stats(&dataset(&[(4.0, 4.0)]), &two).unwrap();
        assert_eq!(s.histogram(), vec![1, 0]);

        let s = dataset_stats(&dataset(&[]), &two).unwrap();
        assert_eq!((s.total, s.mean_size), (0, None));

        // √(2·8) = 4 falls in [2, 8)
        let s = dataset_stats(&dataset(&[(2.0, 8.0), (1.0, 1.0)]), &two).unwrap();
        assert_eq!((s.histogram(), s.overflow), (vec![1, 0], 1));
        assert_eq!(s.histogram().iter().sum::<usize>() + s.overflow, s.total);

        let bad = [SizeRange::new(8.0, 16.0).unwrap(), SizeRange::new(2.0, 8.0).unwrap()];
        assert!(dataset_stats(&dataset(&[]), &bad).is_err());
    }

    #[test]
    fn size_range_parsing() {
        assert_eq!("2-8".parse::<SizeRange>().unwrap(), SizeRange::new(2.0, 8.0).unwrap());
        assert!("8-2".parse::<SizeRange>().is_err());
        assert!("8".parse::<SizeRange>().is_err());
        assert!("a-b".parse::<SizeRange>().is_err());
    }

    #[test]
    fn csv_row_counts() {
        let curves = simlab::sweep_sensitivity(&[4.0], &[0.0, 1.0], &[MetricKind::Iou], &MetricConfig::default()).unwrap();
        let text = String::from_utf8(render_table(&curves, Format::Csv).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next(), Some("size,offset,iou"));
        assert_eq!(text.lines().nth(2), Some("4.0,1.0,0.6"));

        let t = BBox::new(1.0, 0.0, 2.0, 2.0).unwrap();
        let mut cfg = RegressionConfig::new(BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), t, MetricKind::Gcd);
        cfg.steps = 3;
        let trace = simlab::run_regression(&cfg).unwrap();
        let text = String::from_utf8(render_table(&trace, Format::Csv).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn export_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let curves = simlab::sweep_sensitivity(
            &[4.0, 32.0],
            &[0.0, 0.5, 1.0],
            &MetricKind::ALL,
            &MetricConfig::default(),
        )
        .unwrap();
        for format in [Format::Csv, Format::Json] {
            let a = dir.path().join("a");
            let b = dir.path().join("b");
            export_table(&curves, format, &a).unwrap();
            export_table(&curves, format, &b).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        }
        let err = export_table(&curves, Format::Csv, dir.path().join("missing/dir/x.csv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn json_field_order() {
        let s = dataset_stats(&dataset(&[(4.0, 4.0)]), &default_buckets()).unwrap();
        let text = String::from_utf8(render_table(&s, Format::Json).unwrap()).unwrap();
        let total = text.find("\"total\"").unwrap();
        let mean = text.find("\"mean_size\"").unwrap();
        let buckets = text.find("\"buckets\"").unwrap();
        assert!(total < mean && mean < buckets);
    }

    #[test]
    fn fmt_num_round_trips() {
        for v in [0.0, 1.0, 0.1, 1e-7, 0.6065306597126334, 1e300, -2.5] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_num(0.6), "0.6");
    }
}
