//! Converters from public bug-tracker exports into the native JSON-lines
//! schema.
//!
//! The engine itself only ever reads the native schema; these adapters are
//! the single place where third-party format differences live. Each tracker
//! export is JSON-per-line, but field names and frame encodings vary, so an
//! adapter is a preference-ordered alias table plus shared coercion logic.
//! By default malformed records are counted and skipped; `strict` turns the
//! first malformed record into an error naming its line.

use std::collections::HashSet;
use std::io::BufRead;
use std::str::FromStr;

use serde_json::Value;
use tracedup_core::trace::{parse_report, StackTrace};
use tracedup_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    Native,
    Ubuntu,
    Eclipse,
    Netbeans,
    Gnome,
}

impl FromStr for Adapter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Adapter> {
        match s {
            "native" => Ok(Adapter::Native),
            "ubuntu" => Ok(Adapter::Ubuntu),
            "eclipse" => Ok(Adapter::Eclipse),
            "netbeans" => Ok(Adapter::Netbeans),
            "gnome" => Ok(Adapter::Gnome),
            other => Err(Error::Dataset(format!(
                "unknown adapter {other:?} (expected native, ubuntu, eclipse, netbeans, or gnome)"
            ))),
        }
    }
}

impl std::fmt::Display for Adapter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Adapter::Native => "native",
            Adapter::Ubuntu => "ubuntu",
            Adapter::Eclipse => "eclipse",
            Adapter::Netbeans => "netbeans",
            Adapter::Gnome => "gnome",
        };
        f.write_str(name)
    }
}

/// Field alias preferences for one tracker export.
struct FieldMap {
    id: &'static [&'static str],
    timestamp: &'static [&'static str],
    frames: &'static [&'static str],
    category: &'static [&'static str],
}

const UBUNTU: FieldMap = FieldMap {
    id: &["report_id", "id", "crash_id"],
    timestamp: &["timestamp", "creation_ts", "time", "date"],
    frames: &["frames", "stacktrace", "stack_trace", "backtrace"],
    category: &["category_id", "bucket", "dup_id", "duplicate_of"],
};
const ECLIPSE: FieldMap = FieldMap {
    id: &["report_id", "bug_id", "id"],
    timestamp: &["timestamp", "creation_time", "creation_ts", "time"],
    frames: &["frames", "stacktrace", "stack_trace", "trace"],
    category: &["category_id", "dup_id", "duplicate_of", "bucket"],
};
const NETBEANS: FieldMap = FieldMap {
    id: &["report_id", "issue_id", "id"],
    timestamp: &["timestamp", "reported_at", "creation_ts", "time"],
    frames: &["frames", "stacktrace", "stack_trace", "trace"],
    category: &["category_id", "duplicate_of", "dup_id", "bucket"],
};
const GNOME: FieldMap = FieldMap {
    id: &["report_id", "bug_id", "id"],
    timestamp: &["timestamp", "creation_ts", "reported", "time"],
    frames: &["frames", "backtrace", "stacktrace", "stack_trace"],
    category: &["category_id", "dup_id", "bucket", "duplicate_of"],
};

impl Adapter {
    /// Converts one input line; `Ok(None)` for blank lines.
    pub fn parse_line(&self, line: &str, line_no: usize) -> Result<Option<StackTrace>> {
        if line.trim().is_empty() {
            return Ok(None);
        }
        match self {
            Adapter::Native => parse_report(line, line_no).map(Some),
            Adapter::Ubuntu => convert_line(line, line_no, &UBUNTU).map(Some),
            Adapter::Eclipse => convert_line(line, line_no, &ECLIPSE).map(Some),
            Adapter::Netbeans => convert_line(line, line_no, &NETBEANS).map(Some),
            Adapter::Gnome => convert_line(line, line_no, &GNOME).map(Some),
        }
    }
}

fn bad(line_no: usize, message: impl Into<String>) -> Error {
    Error::Parse { line: line_no, message: message.into() }
}

fn lookup<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k)).filter(|v| !v.is_null())
}

/// Accepts integer milliseconds, integer seconds (scaled up), or a numeric
/// string of either.
fn coerce_timestamp(value: &Value, line_no: usize) -> Result<i64> {
    let n = match value {
        Value::Number(n) => {
            n.as_i64().ok_or_else(|| bad(line_no, "timestamp is not an integer"))?
        }
        Value::String(s) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| bad(line_no, format!("timestamp {s:?} is not an integer")))?,
        _ => return Err(bad(line_no, "timestamp must be a number or numeric string")),
    };
    if n < 0 {
        return Err(bad(line_no, "timestamp is negative"));
    }
    // Heuristic: epoch seconds stay below 1e11 until the year 5138.
    Ok(if n < 100_000_000_000 { n * 1000 } else { n })
}

fn coerce_id(value: &Value, line_no: usize) -> Result<String> {
    match value {
        Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(bad(line_no, "report id must be a non-empty string or number")),
    }
}

/// One frame may be a plain string or an object carrying the function name.
fn coerce_frame(value: &Value) -> Option<String> {
    match value {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Object(obj) => ["function", "fn", "method", "frame", "symbol"]
            .iter()
            .find_map(|k| obj.get(*k))
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty()),
        _ => None,
    }
}

/// Frames may arrive as a list (of strings or objects) or one newline-joined
/// string.
fn coerce_frames(value: &Value, line_no: usize) -> Result<Vec<String>> {
    let frames: Vec<String> = match value {
        Value::Array(items) => items.iter().filter_map(coerce_frame).collect(),
        Value::String(s) => s
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.strip_prefix("at ").unwrap_or(l).to_string())
            .collect(),
        _ => return Err(bad(line_no, "frames must be a list or a newline-joined string")),
    };
    if frames.is_empty() {
        return Err(bad(line_no, "no usable frames"));
    }
    Ok(frames)
}

fn coerce_category(value: &Value) -> Option<String> {
    match value {
        Value::String(s) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn convert_line(line: &str, line_no: usize, fields: &FieldMap) -> Result<StackTrace> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| bad(line_no, format!("not a JSON object: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad(line_no, "record is not a JSON object"))?;

    let id = coerce_id(
        lookup(obj, fields.id).ok_or_else(|| bad(line_no, "missing report id"))?,
        line_no,
    )?;
    let timestamp = coerce_timestamp(
        lookup(obj, fields.timestamp).ok_or_else(|| bad(line_no, "missing timestamp"))?,
        line_no,
    )?;
    let frames = coerce_frames(
        lookup(obj, fields.frames).ok_or_else(|| bad(line_no, "missing frames"))?,
        line_no,
    )?;
    let category = lookup(obj, fields.category).and_then(coerce_category);

    StackTrace::new(id, timestamp, frames, category)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConvertStats {
    pub reports: usize,
    pub categories: usize,
    pub malformed: usize,
}

/// Converts a whole input stream. In strict mode the first malformed record
/// aborts; otherwise malformed records are counted and skipped. Duplicate
/// report ids are malformed (the engine requires unique ids).
pub fn convert_stream(
    reader: impl BufRead,
    adapter: Adapter,
    strict: bool,
    seen_ids: &mut HashSet<String>,
    out: &mut Vec<StackTrace>,
) -> Result<ConvertStats> {
    let mut stats = ConvertStats::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let parsed = adapter.parse_line(&line, line_no).and_then(|r| match r {
            Some(report) if !seen_ids.insert(report.report_id.clone()) => {
                Err(bad(line_no, format!("duplicate report id {:?}", report.report_id)))
            }
            other => Ok(other),
        });
        match parsed {
            Ok(Some(report)) => {
                stats.reports += 1;
                out.push(report);
            }
            Ok(None) => {}
            Err(e) if strict => return Err(e),
            Err(_) => stats.malformed += 1,
        }
    }
    stats.categories = out
        .iter()
        .filter_map(|r| r.category_id.as_deref())
        .collect::<HashSet<_>>()
        .len();
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn convert_all(text: &str, adapter: Adapter, strict: bool) -> Result<(Vec<StackTrace>, ConvertStats)> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let stats = convert_stream(Cursor::new(text), adapter, strict, &mut seen, &mut out)?;
        Ok((out, stats))
    }

    #[test]
    fn native_lines_pass_through() {
        let text = r#"{"report_id":"r1","timestamp":5,"frames":["a.b","c.d"],"category_id":"g1"}
{"report_id":"r2","timestamp":6,"frames":["e.f"]}
"#;
        let (reports, stats) = convert_all(text, Adapter::Native, true).unwrap();
        assert_eq!(stats, ConvertStats { reports: 2, categories: 1, malformed: 0 });
        assert_eq!(reports[0].report_id, "r1");
        assert_eq!(reports[1].category_id, None);
    }

    #[test]
    fn ubuntu_objects_with_function_frames_convert() {
        let text = r#"{"id": 4821, "time": 1650000000, "stacktrace": [{"function": "g_main_loop_run"}, {"function": "gtk_main"}], "bucket": "b-17"}"#;
        let (reports, stats) = convert_all(text, Adapter::Ubuntu, true).unwrap();
        assert_eq!(stats.reports, 1);
        let r = &reports[0];
        assert_eq!(r.report_id, "4821");
        // Epoch seconds are scaled to milliseconds.
        assert_eq!(r.timestamp, 1_650_000_000_000);
        assert_eq!(r.frames.len(), 2);
        assert_eq!(r.frames[0].normalized, "g_main_loop_run");
        assert_eq!(r.category_id.as_deref(), Some("b-17"));
    }

    #[test]
    fn eclipse_newline_joined_trace_converts() {
        let text = r#"{"bug_id": "77", "creation_time": "1650000000123", "stacktrace": "at com.example.Foo.bar(Foo.java:10)\nat com.example.Baz.qux(Baz.java:20)", "dup_id": 12}"#;
        let (reports, _) = convert_all(text, Adapter::Eclipse, true).unwrap();
        let r = &reports[0];
        assert_eq!(r.timestamp, 1_650_000_000_123);
        assert_eq!(r.frames[0].raw, "com.example.Foo.bar(Foo.java:10)");
        assert_eq!(r.frames[0].normalized, "com.example.Foo.bar");
        assert_eq!(r.category_id.as_deref(), Some("12"));
    }

    #[test]
    fn tolerant_mode_counts_malformed_and_continues() {
        let text = "not json\n{\"id\":\"a\",\"time\":1,\"frames\":[\"x.y\"]}\n{\"id\":\"b\",\"time\":2}\n";
        let (reports, stats) = convert_all(text, Adapter::Ubuntu, false).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(stats.malformed, 2);
    }

    #[test]
    fn strict_mode_names_the_offending_line() {
        let text = "{\"id\":\"a\",\"time\":1,\"frames\":[\"x.y\"]}\ngarbage\n";
        let err = convert_all(text, Adapter::Ubuntu, true).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_ids_are_malformed() {
        let text = "{\"id\":\"a\",\"time\":1,\"frames\":[\"x.y\"]}\n{\"id\":\"a\",\"time\":2,\"frames\":[\"z.w\"]}\n";
        let (reports, stats) = convert_all(text, Adapter::Ubuntu, false).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(stats.malformed, 1);
        assert!(convert_all(text, Adapter::Ubuntu, true).is_err());
    }

    #[test]
    fn unknown_adapter_name_is_rejected() {
        assert!("mozilla".parse::<Adapter>().is_err());
        assert_eq!("gnome".parse::<Adapter>().unwrap(), Adapter::Gnome);
    }

    #[test]
    fn blank_lines_are_ignored() {
        let text = "\n\n{\"id\":\"a\",\"time\":1,\"frames\":[\"x.y\"]}\n\n";
        let (reports, stats) = convert_all(text, Adapter::Ubuntu, true).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(stats.malformed, 0);
    }
}
