//! MOTChallenge-style text files, appearance feature sidecars and checkpoints.
//!
//! Every reader has a `parse_*` twin that works on text already in memory and
//! also returns [`ParseStats`], so callers can report skipped lines.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{GroundTruth, GtObject};
use crate::tracker::{BBox, Detection, ResultRow};
use crate::Vector;

/// Detections grouped by frame, keeping file order within a frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionSet {
    frames: BTreeMap<u32, Vec<Detection>>,
}

impl DetectionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, detection: Detection) {
        self.frames.entry(detection.frame).or_default().push(detection);
    }

    pub fn frame(&self, frame: u32) -> &[Detection] {
        self.frames.get(&frame).map_or(&[], |v| v.as_slice())
    }

    pub fn frames(&self) -> impl Iterator<Item = (u32, &[Detection])> {
        self.frames.iter().map(|(&f, v)| (f, v.as_slice()))
    }

    pub fn frames_mut(&mut self) -> impl Iterator<Item = (u32, &mut Vec<Detection>)> {
        self.frames.iter_mut().map(|(&f, v)| (f, v))
    }

    /// First and last frame holding a detection.
    pub fn frame_range(&self) -> Option<(u32, u32)> {
        Some((*self.frames.keys().next()?, *self.frames.keys().next_back()?))
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.frames.values().flat_map(|v| v.iter())
    }

    /// Drops any attached appearance features.
    pub fn without_features(&self) -> Self {
        let mut out = self.clone();
        for (_, dets) in out.frames_mut() {
            for d in dets.iter_mut() {
                d.appearance = None;
            }
        }
        out
    }
}

/// Line accounting for one parsed file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub rows: usize,
    /// Blank and `#` comment lines.
    pub skipped: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Splits a CSV file into numbered, trimmed field lists, counting skips.
fn csv_rows<'a>(text: &'a str, stats: &mut ParseStats) -> Vec<(usize, Vec<&'a str>)> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            stats.skipped += 1;
            continue;
        }
        stats.rows += 1;
        rows.push((i + 1, line.split(',').map(str::trim).collect()));
    }
    rows
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    fields: &'a [&'a str],
}

impl Fields<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn require(&self, count: usize) -> Result<()> {
        if self.fields.len() < count {
            return Err(self.error(format!(
                "expected at least {count} fields, found {}",
                self.fields.len()
            )));
        }
        Ok(())
    }

    fn float(&self, i: usize, name: &str) -> Result<f64> {
        let v: f64 = self.fields[i]
            .parse()
            .map_err(|_| self.error(format!("{name}: cannot parse {:?}", self.fields[i])))?;
        if !v.is_finite() {
            return Err(self.error(format!("{name} is not finite")));
        }
        Ok(v)
    }

    /// Integers may be written as `3` or `3.0`.
    fn integer(&self, i: usize, name: &str) -> Result<i64> {
        let raw = self.fields[i];
        if let Ok(v) = raw.parse::<i64>() {
            return Ok(v);
        }
        match raw.parse::<f64>() {
            Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
            _ => Err(self.error(format!("{name}: expected an integer, found {raw:?}"))),
        }
    }

    fn frame(&self) -> Result<u32> {
        let f = self.integer(0, "frame")?;
        if f < 1 || f > u32::MAX as i64 {
            return Err(self.error(format!("frame {f} out of range (frames start at 1)")));
        }
        Ok(f as u32)
    }

    fn bbox(&self) -> Result<BBox> {
        let x = self.float(2, "x")?;
        let y = self.float(3, "y")?;
        let w = self.float(4, "w")?;
        let h = self.float(5, "h")?;
        BBox::new(x, y, w, h).map_err(|e| self.error(e.to_string()))
    }
}

/// Parses `frame,id,x,y,w,h,conf[,...]`; the id column is ignored.
pub fn parse_detections(text: &str, path: &Path) -> Result<(DetectionSet, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut set = DetectionSet::new();
    for (line, fields) in csv_rows(text, &mut stats) {
        let f = Fields {
            path,
            line,
            fields: &fields,
        };
        f.require(7)?;
        set.push(Detection {
            frame: f.frame()?,
            bbox: f.bbox()?,
            confidence: f.float(6, "confidence")?,
            appearance: None,
        });
    }
    Ok((set, stats))
}

pub fn read_detections(path: &Path) -> Result<DetectionSet> {
    Ok(parse_detections(&read_text(path)?, path)?.0)
}

/// Canonical detection text: shortest round-trip decimal for every value.
pub fn format_detections(set: &DetectionSet) -> String {
    let mut out = String::new();
    for d in set.iter() {
        let b = d.bbox;
        let _ = writeln!(
            out,
            "{},-1,{},{},{},{},{},-1,-1,-1",
            d.frame, b.x, b.y, b.w, b.h, d.confidence
        );
    }
    out
}

pub fn write_detections(path: &Path, set: &DetectionSet) -> Result<()> {
    write_text(path, &format_detections(set))
}

/// Classes that mark a non-pedestrian or distractor annotation.
const IGNORED_CLASSES: [i64; 4] = [2, 7, 8, 12];

/// Parses `frame,id,x,y,w,h,flag[,class,visibility,...]`.
///
/// A row is kept but marked invisible when its flag is 0, its class is an
/// ignored class, or its visibility ratio is exactly 0.
pub fn parse_ground_truth(text: &str, path: &Path) -> Result<(GroundTruth, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut gt = GroundTruth::new();
    for (line, fields) in csv_rows(text, &mut stats) {
        let f = Fields {
            path,
            line,
            fields: &fields,
        };
        f.require(7)?;
        let frame = f.frame()?;
        let id = f.integer(1, "id")?;
        if id < 0 {
            return Err(f.error(format!("ground-truth id {id} is negative")));
        }
        let mut visible = f.float(6, "flag")? != 0.0;
        if fields.len() > 7 {
            if let Ok(class) = f.integer(7, "class") {
                visible &= !IGNORED_CLASSES.contains(&class);
            }
        }
        if fields.len() > 8 {
            visible &= f.float(8, "visibility")? != 0.0;
        }
        gt.insert(
            frame,
            GtObject {
                id: id as u64,
                bbox: f.bbox()?,
                visible,
            },
        )
        .map_err(|e| f.error(e.to_string()))?;
    }
    Ok((gt, stats))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    Ok(parse_ground_truth(&read_text(path)?, path)?.0)
}

/// Canonical ground-truth text: flag 1 for visible rows, 0 otherwise.
pub fn format_ground_truth(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for (frame, objects) in gt.frames() {
        for o in objects {
            let b = o.bbox;
            let _ = writeln!(
                out,
                "{frame},{},{},{},{},{},{},-1,-1,-1",
                o.id,
                b.x,
                b.y,
                b.w,
                b.h,
                u8::from(o.visible)
            );
        }
    }
    out
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    write_text(path, &format_ground_truth(gt))
}

/// Joins `frame,det_index,v1,...,vN` rows onto detections by frame and
/// 0-based position within the frame. Every detection needs exactly one row.
pub fn parse_features(
    text: &str,
    path: &Path,
    dets: &DetectionSet,
) -> Result<(DetectionSet, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut out = dets.clone();
    let mut dim: Option<usize> = None;
    let mut rows = 0usize;
    for (line, fields) in csv_rows(text, &mut stats) {
        let f = Fields {
            path,
            line,
            fields: &fields,
        };
        f.require(3)?;
        let frame = f.frame()?;
        let index = f.integer(1, "det_index")?;
        let n = fields.len() - 2;
        match dim {
            None => dim = Some(n),
            Some(d) if d != n => {
                return Err(f.error(format!("feature has {n} values, earlier rows have {d}")))
            }
            _ => {}
        }
        let values = (2..fields.len())
            .map(|i| f.float(i, "feature value"))
            .collect::<Result<Vec<_>>>()?;
        let slot = usize::try_from(index)
            .ok()
            .and_then(|i| out.frames.get_mut(&frame)?.get_mut(i))
            .ok_or_else(|| f.error(format!("no detection at (frame {frame}, index {index})")))?;
        if slot.appearance.is_some() {
            return Err(f.error(format!("duplicate feature for (frame {frame}, index {index})")));
        }
        slot.appearance = Some(Vector::from(values));
        rows += 1;
    }
    if let Some(missing) = out
        .frames()
        .flat_map(|(frame, dets)| {
            dets.iter()
                .enumerate()
                .filter(|(_, d)| d.appearance.is_none())
                .map(move |(i, _)| (frame, i))
        })
        .next()
    {
        return Err(Error::Features(format!(
            "{}: {rows} feature rows for {} detections; missing (frame {}, index {})",
            path.display(),
            dets.len(),
            missing.0,
            missing.1
        )));
    }
    Ok((out, stats))
}

pub fn read_features(path: &Path, dets: &DetectionSet) -> Result<DetectionSet> {
    Ok(parse_features(&read_text(path)?, path, dets)?.0)
}

/// Canonical sidecar text for detections that all carry features.
pub fn format_features(set: &DetectionSet) -> Result<String> {
    let mut out = String::new();
    for (frame, dets) in set.frames() {
        for (i, d) in dets.iter().enumerate() {
            let v = d.appearance.as_ref().ok_or_else(|| {
                Error::Features(format!("detection (frame {frame}, index {i}) has no feature"))
            })?;
            let _ = write!(out, "{frame},{i}");
            for x in v.iter() {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_features(path: &Path, set: &DetectionSet) -> Result<()> {
    write_text(path, &format_features(set)?)
}

/// Tracker output rows, sorted by frame then track id, two decimals.
pub fn format_results(rows: &[ResultRow]) -> String {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.frame, r.track_id));
    let mut out = String::new();
    for r in sorted {
        let b = r.bbox;
        let _ = writeln!(
            out,
            "{},{},{:.2},{:.2},{:.2},{:.2},1,-1,-1,-1",
            r.frame, r.track_id, b.x, b.y, b.w, b.h
        );
    }
    out
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_text(path, &format_results(rows))
}

pub fn parse_results(text: &str, path: &Path) -> Result<(Vec<ResultRow>, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut rows = Vec::new();
    for (line, fields) in csv_rows(text, &mut stats) {
        let f = Fields {
            path,
            line,
            fields: &fields,
        };
        f.require(6)?;
        let id = f.integer(1, "track id")?;
        if id < 0 {
            return Err(f.error(format!("track id {id} is negative")));
        }
        // extrapolated boxes may shrink to tiny sizes that print as 0.00
        let bbox = BBox {
            x: f.float(2, "x")?,
            y: f.float(3, "y")?,
            w: f.float(4, "w")?,
            h: f.float(5, "h")?,
        };
        rows.push(ResultRow {
            frame: f.frame()?,
            track_id: id as u64,
            bbox,
        });
    }
    Ok((rows, stats))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    Ok(parse_results(&read_text(path)?, path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    #[test]
    fn detection_line_example() {
        let (set, stats) = parse_detections("1,-1,10,20,30,40,0.9,-1,-1,-1\n", p()).unwrap();
        assert_eq!(stats, ParseStats { rows: 1, skipped: 0 });
        let d = &set.frame(1)[0];
        assert_eq!(d.bbox, BBox { x: 10.0, y: 20.0, w: 30.0, h: 40.0 });
        assert_eq!(d.confidence, 0.9);
        assert!(d.appearance.is_none());
    }

    #[test]
    fn empty_file_gives_empty_set() {
        let (set, stats) = parse_detections("", p()).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.frame_range(), None);
        assert_eq!(stats.rows, 0);
    }

    #[test]
    fn blank_lines_are_counted() {
        let (set, stats) =
            parse_detections("\n# note\n2,-1,1,2,3,4,0.5\n\n", p()).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(stats, ParseStats { rows: 1, skipped: 3 });
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_detections("1,-1,1,2,3,4,0.5\n1,-1,x,2,3,4,0.5\n", p()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_detections("1,-1,1,2\n", p()).is_err());
        assert!(parse_detections("0,-1,1,2,3,4,1\n", p()).is_err());
    }

    #[test]
    fn within_frame_order_is_kept() {
        let text = "3,-1,5,0,1,1,1\n1,-1,0,0,1,1,1\n3,-1,2,0,1,1,1\n";
        let (set, _) = parse_detections(text, p()).unwrap();
        let xs: Vec<f64> = set.frame(3).iter().map(|d| d.bbox.x).collect();
        assert_eq!(xs, vec![5.0, 2.0]);
        assert_eq!(set.frame_range(), Some((1, 3)));
    }

    #[test]
    fn ground_truth_flags() {
        let text = "1,1,0,0,10,10,1,1,1\n1,2,0,0,10,10,0,1,1\n1,3,0,0,10,10,1,7,1\n1,4,0,0,10,10,1,1,0\n1,5,0,0,10,10,1,-1,-1,-1\n";
        let (gt, _) = parse_ground_truth(text, p()).unwrap();
        let vis: Vec<bool> = gt.frame(1).iter().map(|o| o.visible).collect();
        assert_eq!(vis, vec![true, false, false, false, true]);
    }

    #[test]
    fn duplicate_ground_truth_rejected() {
        let text = "1,1,0,0,10,10,1\n1,1,5,5,10,10,1\n";
        assert!(matches!(
            parse_ground_truth(text, p()),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn features_join_and_errors() {
        let (dets, _) = parse_detections("1,-1,0,0,1,1,1\n1,-1,5,5,1,1,1\n", p()).unwrap();
        let (joined, _) = parse_features("1,1,0.5,-2\n1,0,1,2\n", p(), &dets).unwrap();
        assert_eq!(joined.frame(1)[0].appearance.as_deref(), Some(&[1.0, 2.0][..]));
        assert_eq!(joined.frame(1)[1].appearance.as_deref(), Some(&[0.5, -2.0][..]));

        let err = parse_features("1,0,1,2\n", p(), &dets).unwrap_err();
        assert!(err.to_string().contains("frame 1, index 1"), "{err}");
        assert!(parse_features("1,0,1,2\n1,1,1\n", p(), &dets).is_err());
        assert!(parse_features("1,0,1,2\n1,1,1,2\n1,2,1,2\n", p(), &dets).is_err());
        assert!(parse_features("1,0,1,2\n1,0,1,2\n", p(), &dets).is_err());
    }

    #[test]
    fn results_sorted_with_two_decimals() {
        let b = BBox { x: 1.234, y: 5.0, w: 10.0, h: 20.005 };
        let rows = vec![
            ResultRow { frame: 2, track_id: 1, bbox: b },
            ResultRow { frame: 1, track_id: 9, bbox: b },
            ResultRow { frame: 1, track_id: 3, bbox: b },
        ];
        let text = format_results(&rows);
        let keys: Vec<&str> = text.lines().map(|l| &l[..4]).collect();
        assert_eq!(keys, vec!["1,3,", "1,9,", "2,1,"]);
        assert!(text.starts_with("1,3,1.23,5.00,10.00,"));
        assert!(!text.contains('e'));
        assert_eq!(format_results(&[]), "");
    }

    #[test]
    fn results_round_trip_on_canonical_form() {
        let b = BBox { x: 1.234, y: -0.5, w: 10.0, h: 20.0 };
        let text = format_results(&[ResultRow { frame: 4, track_id: 2, bbox: b }]);
        let (rows, _) = parse_results(&text, p()).unwrap();
        assert_eq!(format_results(&rows), text);
    }

    #[test]
    fn detections_round_trip_bitwise() {
        let text = "1,-1,0.1,0.2,30.000000000000004,40,0.9,-1,-1,-1\n2,-1,1e-7,3,4,5,1,-1,-1,-1\n";
        let (set, _) = parse_detections(text, p()).unwrap();
        let again = parse_detections(&format_detections(&set), p()).unwrap().0;
        assert_eq!(again, set);
        for (a, b) in set.iter().zip(again.iter()) {
            assert_eq!(a.bbox.w.to_bits(), b.bbox.w.to_bits());
        }
    }
}
