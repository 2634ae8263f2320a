//! Crash report domain types: frames, stack traces, content hashing,
//! dataset parsing in the native JSON-lines schema, and chronological splits.

use std::io::BufRead;

use crate::{Error, Result};

/// One entry of a stack trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    /// Frame text as it appeared in the source record.
    pub raw: String,
    /// Canonical form used for identity comparisons.
    pub normalized: String,
}

impl Frame {
    pub fn new(raw: impl Into<String>) -> Frame {
        let raw = raw.into();
        let normalized = normalize_frame(&raw);
        Frame { raw, normalized }
    }
}

/// Strips surrounding whitespace and one trailing source-location suffix of
/// the form `(File.ext:123)`. A frame consisting only of a location keeps its
/// trimmed raw text, so normalized frames are never empty for non-blank input.
pub fn normalize_frame(raw: &str) -> String {
    let trimmed = raw.trim();
    if trimmed.ends_with(')') {
        if let Some(start) = trimmed.rfind('(') {
            let inner = &trimmed[start + 1..trimmed.len() - 1];
            if let Some(colon) = inner.rfind(':') {
                let (file, line) = (&inner[..colon], &inner[colon + 1..]);
                if !file.is_empty()
                    && !line.is_empty()
                    && line.bytes().all(|b| b.is_ascii_digit())
                {
                    let head = trimmed[..start].trim_end();
                    if !head.is_empty() {
                        return head.to_string();
                    }
                }
            }
        }
    }
    trimmed.to_string()
}

/// A crash report: ordered frames (top of stack first) plus metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackTrace {
    pub report_id: String,
    /// Milliseconds since epoch.
    pub timestamp: i64,
    pub frames: Vec<Frame>,
    /// Ground-truth category when known.
    pub category_id: Option<String>,
}

impl StackTrace {
    /// Builds a trace from raw frame strings, rejecting empty inputs.
    pub fn new(
        report_id: impl Into<String>,
        timestamp: i64,
        raw_frames: Vec<String>,
        category_id: Option<String>,
    ) -> Result<StackTrace> {
        let report_id = report_id.into();
        if report_id.is_empty() {
            return Err(Error::Dataset("report_id is empty".into()));
        }
        if timestamp < 0 {
            return Err(Error::Dataset(format!(
                "report {report_id}: negative timestamp {timestamp}"
            )));
        }
        if raw_frames.is_empty() {
            return Err(Error::Dataset(format!("report {report_id}: frames empty")));
        }
        let mut frames = Vec::with_capacity(raw_frames.len());
        for raw in raw_frames {
            if raw.trim().is_empty() {
                return Err(Error::Dataset(format!(
                    "report {report_id}: frames contains a blank frame"
                )));
            }
            frames.push(Frame::new(raw));
        }
        Ok(StackTrace { report_id, timestamp, frames, category_id })
    }

    pub fn normalized_frames(&self) -> impl Iterator<Item = &str> {
        self.frames.iter().map(|f| f.normalized.as_str())
    }

    pub fn content_hash(&self) -> ContentHash {
        content_hash(&self.frames)
    }

    /// Serializes to one line of the native dataset schema.
    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("report_id".into(), self.report_id.clone().into());
        obj.insert("timestamp".into(), self.timestamp.into());
        let frames: Vec<serde_json::Value> =
            self.frames.iter().map(|f| f.raw.clone().into()).collect();
        obj.insert("frames".into(), frames.into());
        if let Some(cat) = &self.category_id {
            obj.insert("category_id".into(), cat.clone().into());
        }
        serde_json::Value::Object(obj).to_string()
    }
}

/// 64-bit digest of the normalized frame sequence.
///
/// Uses FNV-1a with per-frame length prefixes so frame boundaries are part of
/// the digest; stable across platforms and releases, unlike the std hasher.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub u64);

impl std::fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ContentHash({:016x})", self.0)
    }
}

impl std::fmt::Display for ContentHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

pub fn content_hash(frames: &[Frame]) -> ContentHash {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let eat = |h: u64, bytes: &[u8]| {
        let mut h = h;
        for &b in bytes {
            h = (h ^ u64::from(b)).wrapping_mul(PRIME);
        }
        h
    };
    for frame in frames {
        h = eat(h, &(frame.normalized.len() as u64).to_le_bytes());
        h = eat(h, frame.normalized.as_bytes());
    }
    ContentHash(h)
}

/// Parses one native-schema record. `line_no` is 1-based and appears in errors.
pub fn parse_report(line: &str, line_no: usize) -> Result<StackTrace> {
    let fail = |message: String| Error::Parse { line: line_no, message };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| fail(format!("invalid json: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| fail("record is not a json object".into()))?;

    let report_id = obj
        .get("report_id")
        .ok_or_else(|| fail("missing field \"report_id\"".into()))?
        .as_str()
        .ok_or_else(|| fail("\"report_id\" is not a string".into()))?;
    if report_id.is_empty() {
        return Err(fail("\"report_id\" is empty".into()));
    }

    let timestamp = obj
        .get("timestamp")
        .ok_or_else(|| fail("missing field \"timestamp\"".into()))?
        .as_i64()
        .ok_or_else(|| fail("\"timestamp\" is not an integer".into()))?;
    if timestamp < 0 {
        return Err(fail(format!("\"timestamp\" is negative: {timestamp}")));
    }

    let frames_value = obj
        .get("frames")
        .ok_or_else(|| fail("missing field \"frames\"".into()))?
        .as_array()
        .ok_or_else(|| fail("\"frames\" is not an array".into()))?;
    if frames_value.is_empty() {
        return Err(fail("\"frames\" empty".into()));
    }
    let mut frames = Vec::with_capacity(frames_value.len());
    for (i, fv) in frames_value.iter().enumerate() {
        let raw = fv
            .as_str()
            .ok_or_else(|| fail(format!("\"frames\"[{i}] is not a string")))?;
        if raw.trim().is_empty() {
            return Err(fail(format!("\"frames\"[{i}] is blank")));
        }
        frames.push(Frame::new(raw));
    }

    let category_id = match obj.get("category_id") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| fail("\"category_id\" is not a string".into()))?
                .to_string(),
        ),
    };

    Ok(StackTrace {
        report_id: report_id.to_string(),
        timestamp,
        frames,
        category_id,
    })
}

/// Reads a whole native-schema dataset; blank lines are ignored.
pub fn parse_dataset(reader: impl BufRead) -> Result<Vec<StackTrace>> {
    let mut reports = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(parse_report(&line, idx + 1)?);
    }
    Ok(reports)
}

pub fn write_dataset(mut writer: impl std::io::Write, reports: &[StackTrace]) -> Result<()> {
    for report in reports {
        writeln!(writer, "{}", report.to_json_line())?;
    }
    Ok(())
}

/// Train/validation/test segments in arrival order.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<StackTrace>,
    pub validation: Vec<StackTrace>,
    pub test: Vec<StackTrace>,
    /// Timestamps of the last train and last validation report.
    pub boundaries: (i64, i64),
}

pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Splits reports by arrival time into contiguous train/validation/test
/// segments. Sort key is (timestamp, report_id); segment sizes follow the
/// ratios by report count, with every segment kept non-empty.
pub fn chronological_split(
    reports: &[StackTrace],
    ratios: (f64, f64, f64),
) -> Result<DatasetSplit> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(Error::Dataset("split ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Dataset("split ratios must sum to 1".into()));
    }
    let n = reports.len();
    if n < 3 {
        return Err(Error::Dataset(format!(
            "need at least 3 reports to form three non-empty splits, got {n}"
        )));
    }

    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.report_id.cmp(&b.report_id))
    });

    let train_n = ((n as f64 * r_train).round() as usize).clamp(1, n - 2);
    let val_n = ((n as f64 * r_val).round() as usize).clamp(1, n - 1 - train_n);

    let test = sorted.split_off(train_n + val_n);
    let validation = sorted.split_off(train_n);
    let train = sorted;
    let boundaries = (
        train.last().expect("train non-empty").timestamp,
        validation.last().expect("validation non-empty").timestamp,
    );
    Ok(DatasetSplit { train, validation, test, boundaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(id: &str, ts: i64, frames: &[&str]) -> StackTrace {
        StackTrace::new(
            id,
            ts,
            frames.iter().map(|s| s.to_string()).collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn normalize_strips_source_location() {
        assert_eq!(normalize_frame("com.example.Foo.bar(Foo.java:42)"), "com.example.Foo.bar");
        assert_eq!(normalize_frame("  com.example.Foo.bar (Foo.java:42) "), "com.example.Foo.bar");
        assert_eq!(normalize_frame("g_main_loop_run"), "g_main_loop_run");
    }

    #[test]
    fn normalize_keeps_non_location_parens() {
        assert_eq!(normalize_frame("Foo.bar(Unknown Source)"), "Foo.bar(Unknown Source)");
        assert_eq!(normalize_frame("Foo.bar(Native Method)"), "Foo.bar(Native Method)");
        // line part is not all digits
        assert_eq!(normalize_frame("Foo.bar(Foo.java:4a)"), "Foo.bar(Foo.java:4a)");
    }

    #[test]
    fn normalize_keeps_pure_location_frame() {
        assert_eq!(normalize_frame("(Foo.java:42)"), "(Foo.java:42)");
    }

    #[test]
    fn parse_report_maps_fields() {
        let t = parse_report(
            r#"{"report_id":"r1","timestamp":5,"frames":["a.B.c"],"category_id":"g1"}"#,
            1,
        )
        .unwrap();
        assert_eq!(t.report_id, "r1");
        assert_eq!(t.timestamp, 5);
        assert_eq!(t.frames.len(), 1);
        assert_eq!(t.frames[0].normalized, "a.B.c");
        assert_eq!(t.category_id.as_deref(), Some("g1"));
    }

    #[test]
    fn parse_report_missing_category_is_none() {
        let t = parse_report(r#"{"report_id":"r1","timestamp":0,"frames":["a"]}"#, 1).unwrap();
        assert_eq!(t.category_id, None);
        let t = parse_report(
            r#"{"report_id":"r1","timestamp":0,"frames":["a"],"category_id":null}"#,
            1,
        )
        .unwrap();
        assert_eq!(t.category_id, None);
    }

    #[test]
    fn parse_report_errors_name_field_and_line() {
        let err = parse_report(r#"{"report_id":"r1","timestamp":5}"#, 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frames"), "{msg}");
        assert!(msg.contains("line 7"), "{msg}");

        let err =
            parse_report(r#"{"report_id":"r1","timestamp":5,"frames":[]}"#, 3).unwrap_err();
        assert!(err.to_string().contains("\"frames\" empty"), "{err}");

        let err = parse_report(
            r#"{"report_id":"r1","timestamp":"x","frames":["a"]}"#,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("timestamp"), "{err}");
    }

    #[test]
    fn content_hash_ignores_metadata() {
        let a = trace("r1", 1, &["a.b", "c.d"]);
        let b = trace("r2", 99, &["a.b", "c.d"]);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn content_hash_sees_frame_differences_and_order() {
        let a = trace("r1", 1, &["a.b", "c.d"]);
        let b = trace("r1", 1, &["a.b", "c.e"]);
        let c = trace("r1", 1, &["c.d", "a.b"]);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn content_hash_respects_frame_boundaries() {
        let a = trace("r1", 1, &["ab", "c"]);
        let b = trace("r1", 1, &["a", "bc"]);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn content_hash_uses_normalized_frames() {
        let a = trace("r1", 1, &["x.y(F.java:1)"]);
        let b = trace("r2", 2, &["x.y(F.java:999)"]);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn split_ten_reports_is_7_1_2() {
        let reports: Vec<_> = (1..=10).map(|i| trace(&format!("r{i:02}"), i, &["f"])).collect();
        let split = chronological_split(&reports, DEFAULT_SPLIT_RATIOS).unwrap();
        assert_eq!(split.train.len(), 7);
        assert_eq!(split.validation.len(), 1);
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.train.last().unwrap().timestamp, 7);
        assert_eq!(split.validation[0].timestamp, 8);
        assert_eq!(split.boundaries, (7, 8));
    }

    #[test]
    fn split_hundred_reports_is_70_10_20() {
        let reports: Vec<_> =
            (1..=100).map(|i| trace(&format!("r{i:03}"), i, &["f"])).collect();
        let split = chronological_split(&reports, DEFAULT_SPLIT_RATIOS).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (70, 10, 20)
        );
    }

    #[test]
    fn split_ties_break_by_report_id() {
        let reports = vec![
            trace("r3", 5, &["f"]),
            trace("r1", 5, &["f"]),
            trace("r2", 5, &["f"]),
        ];
        let split = chronological_split(&reports, DEFAULT_SPLIT_RATIOS).unwrap();
        assert_eq!(split.train[0].report_id, "r1");
        assert_eq!(split.validation[0].report_id, "r2");
        assert_eq!(split.test[0].report_id, "r3");
    }

    #[test]
    fn split_rejects_too_few() {
        let reports = vec![trace("r1", 1, &["f"]), trace("r2", 2, &["f"])];
        assert!(chronological_split(&reports, DEFAULT_SPLIT_RATIOS).is_err());
    }

    #[test]
    fn minimal_split_keeps_every_segment_nonempty() {
        for n in 3..=9usize {
            let reports: Vec<_> =
                (0..n).map(|i| trace(&format!("r{i}"), i as i64, &["f"])).collect();
            let split = chronological_split(&reports, DEFAULT_SPLIT_RATIOS).unwrap();
            assert!(!split.train.is_empty());
            assert!(!split.validation.is_empty());
            assert!(!split.test.is_empty());
            assert_eq!(
                split.train.len() + split.validation.len() + split.test.len(),
                n
            );
        }
    }

    fn arb_frame() -> impl Strategy<Value = String> {
        "[a-zA-Z][a-zA-Z0-9_.]{0,20}"
    }

    proptest! {
        #[test]
        fn parse_serialize_roundtrip(
            id in "[a-z0-9]{1,12}",
            ts in 0i64..1_000_000_000_000,
            frames in prop::collection::vec(arb_frame(), 1..8),
            cat in prop::option::of("[a-z0-9]{1,8}"),
        ) {
            let t = StackTrace::new(id, ts, frames, cat).unwrap();
            let line = t.to_json_line();
            let back = parse_report(&line, 1).unwrap();
            prop_assert_eq!(t, back);
        }

        #[test]
        fn split_is_a_permutation(
            n in 3usize..40,
            seed in 0u64..1000,
        ) {
            // Deterministic pseudo-random timestamps with duplicates.
            let reports: Vec<_> = (0..n)
                .map(|i| {
                    let ts = ((i as u64).wrapping_mul(seed + 7) % 13) as i64;
                    trace(&format!("r{i:03}"), ts, &["f"])
                })
                .collect();
            let split = chronological_split(&reports, DEFAULT_SPLIT_RATIOS).unwrap();
            let mut all: Vec<String> = split
                .train
                .iter()
                .chain(&split.validation)
                .chain(&split.test)
                .map(|t| t.report_id.clone())
                .collect();
            all.sort();
            let mut expect: Vec<String> = reports.iter().map(|t| t.report_id.clone()).collect();
            expect.sort();
            prop_assert_eq!(all, expect);

            // Segment boundaries respect time ordering.
            let last_train = split.train.last().unwrap();
            let first_val = split.validation.first().unwrap();
            let last_val = split.validation.last().unwrap();
            let first_test = split.test.first().unwrap();
            prop_assert!(last_train.timestamp <= first_val.timestamp);
            prop_assert!(last_val.timestamp <= first_test.timestamp);
        }

        #[test]
        fn hash_depends_only_on_normalized_frames(
            frames in prop::collection::vec(arb_frame(), 1..6),
        ) {
            let a = StackTrace::new("a", 1, frames.clone(), None).unwrap();
            let b = StackTrace::new("b", 2, frames, Some("g".into())).unwrap();
            prop_assert_eq!(a.content_hash(), b.content_hash());
        }
    }
}
