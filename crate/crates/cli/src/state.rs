//! Persistent state directory: one directory per deployment holding the
//! dataset, trained artifacts, and the category store.
//!
//! Binary artifacts (weights, index) and the vocabulary carry their own
//! version headers; the JSON-lines artifacts written here get a one-line
//! JSON header `{"artifact": <kind>, "version": N}` for the same fail-fast
//! behaviour. A lock file serializes commands: only one command touches a
//! state directory at a time.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracedup_core::trace::{parse_report, StackTrace};
use tracedup_core::{Error, Result};

pub const STATE_VERSION: u32 = 1;

const LOCK_NAME: &str = ".lock";

/// Removes its lock file when dropped.
#[derive(Debug)]
struct LockFile {
    path: PathBuf,
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct StateDir {
    root: PathBuf,
    _lock: LockFile,
}

impl StateDir {
    /// Creates the directory if needed and takes the command lock.
    pub fn open(root: impl Into<PathBuf>) -> Result<StateDir> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let lock_path = root.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::artifact(
                    &lock_path,
                    "state directory is locked by another command \
                     (remove the lock file if that command crashed)",
                ));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(StateDir { root, _lock: LockFile { path: lock_path } })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    /// Reports absorbed by `dedup` after training.
    pub fn observed_path(&self) -> PathBuf {
        self.root.join("observed.jsonl")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn embedder_path(&self) -> PathBuf {
        self.root.join("embedder.weights")
    }

    pub fn reranker_path(&self) -> PathBuf {
        self.root.join("reranker.weights")
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join("index.bin")
    }

    pub fn categories_path(&self) -> PathBuf {
        self.root.join("categories.jsonl")
    }

    pub fn threshold_path(&self) -> PathBuf {
        self.root.join("threshold.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn save_dataset(&self, reports: &[StackTrace]) -> Result<()> {
        write_report_lines(&self.dataset_path(), "dataset", reports)
    }

    pub fn load_dataset(&self) -> Result<Vec<StackTrace>> {
        read_report_lines(&self.dataset_path(), "dataset")
    }

    pub fn save_observed(&self, reports: &[StackTrace]) -> Result<()> {
        write_report_lines(&self.observed_path(), "observed", reports)
    }

    pub fn load_observed(&self) -> Result<Vec<StackTrace>> {
        if !self.observed_path().exists() {
            return Ok(Vec::new());
        }
        read_report_lines(&self.observed_path(), "observed")
    }

    pub fn save_categories(&self, records: &[CategoryRecord]) -> Result<()> {
        let path = self.categories_path();
        let mut w = BufWriter::new(File::create(&path)?);
        write_header(&mut w, &path, "categories")?;
        for record in records {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_categories(&self) -> Result<Vec<CategoryRecord>> {
        let path = self.categories_path();
        let reader = BufReader::new(open_artifact(&path)?);
        let mut lines = reader.lines();
        check_header(&path, "categories", &mut lines)?;
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CategoryRecord = serde_json::from_str(&line).map_err(|e| {
                Error::artifact(&path, format!("bad category record on line {}: {e}", i + 2))
            })?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn save_threshold(&self, file: &ThresholdFile) -> Result<()> {
        let path = self.threshold_path();
        let text = serde_json::to_string_pretty(file)?;
        fs::write(&path, text)?;
        Ok(())
    }

    pub fn load_threshold(&self) -> Result<ThresholdFile> {
        let path = self.threshold_path();
        let text = fs::read_to_string(open_err(&path)?)?;
        let file: ThresholdFile = serde_json::from_str(&text)
            .map_err(|e| Error::artifact(&path, format!("bad threshold file: {e}")))?;
        if file.version != STATE_VERSION {
            return Err(Error::artifact(
                &path,
                format!("threshold version {} unsupported (expected {STATE_VERSION})", file.version),
            ));
        }
        Ok(file)
    }

    /// Paths a training run writes, for cleanup on failure.
    pub fn trained_artifact_paths(&self) -> Vec<PathBuf> {
        vec![
            self.vocab_path(),
            self.embedder_path(),
            self.reranker_path(),
            self.index_path(),
            self.categories_path(),
            self.threshold_path(),
            self.config_path(),
        ]
    }
}

/// One category and the reports filed under it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub category_id: String,
    pub report_ids: Vec<String>,
    pub created_by: CreatedBy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CreatedBy {
    /// Ground-truth label from the ingested dataset.
    Human,
    /// Category opened by a dedup decision.
    Engine,
}

/// Calibrated attach/new cutoff. The threshold may legitimately be infinite
/// (every score on one side), which JSON numbers cannot hold, so it is
/// stored as a string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub version: u32,
    #[serde(with = "f64_as_string")]
    pub threshold: f64,
    pub f1: f64,
    /// Which pipeline's scores calibration ran on.
    pub scores_from: String,
}

impl ThresholdFile {
    pub fn new(threshold: f64, f1: f64, scores_from: &str) -> ThresholdFile {
        ThresholdFile {
            version: STATE_VERSION,
            threshold,
            f1,
            scores_from: scores_from.to_string(),
        }
    }
}

mod f64_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Deserialize)]
struct ArtifactHeader {
    artifact: String,
    version: u32,
}

fn open_err(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::artifact(path, "artifact not found (run the producing command first)"))
    }
}

fn open_artifact(path: &Path) -> Result<File> {
    Ok(File::open(open_err(path)?)?)
}

fn write_header(w: &mut impl Write, path: &Path, kind: &str) -> Result<()> {
    writeln!(w, "{{\"artifact\":\"{kind}\",\"version\":{STATE_VERSION}}}")
        .map_err(|e| Error::artifact(path, format!("write failed: {e}")))
}

fn check_header(
    path: &Path,
    kind: &str,
    lines: &mut std::io::Lines<impl BufRead>,
) -> Result<()> {
    let first = lines
        .next()
        .ok_or_else(|| Error::artifact(path, "empty artifact file"))??;
    let header: ArtifactHeader = serde_json::from_str(&first)
        .map_err(|e| Error::artifact(path, format!("missing artifact header: {e}")))?;
    if header.artifact != kind {
        return Err(Error::artifact(
            path,
            format!("artifact kind {:?} found where {kind:?} was expected", header.artifact),
        ));
    }
    if header.version != STATE_VERSION {
        return Err(Error::artifact(
            path,
            format!("artifact version {} unsupported (expected {STATE_VERSION})", header.version),
        ));
    }
    Ok(())
}

fn write_report_lines(path: &Path, kind: &str, reports: &[StackTrace]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, path, kind)?;
    for report in reports {
        writeln!(w, "{}", report.to_json_line())?;
    }
    w.flush()?;
    Ok(())
}

fn read_report_lines(path: &Path, kind: &str) -> Result<Vec<StackTrace>> {
    let reader = BufReader::new(open_artifact(path)?);
    let mut lines = reader.lines();
    check_header(path, kind, &mut lines)?;
    let mut reports = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Header occupies line 1; records start at line 2.
        reports.push(parse_report(&line, i + 2)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample_reports() -> Vec<StackTrace> {
        vec![
            StackTrace::new("r1", 10, vec!["a.b".into(), "c.d".into()], Some("g1".into()))
                .unwrap(),
            StackTrace::new("r2", 20, vec!["e.f".into()], None).unwrap(),
        ]
    }

    #[test]
    fn dataset_round_trips_with_header() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        let reports = sample_reports();
        state.save_dataset(&reports).unwrap();

        let text = std::fs::read_to_string(state.dataset_path()).unwrap();
        assert!(text.starts_with("{\"artifact\":\"dataset\",\"version\":1}"));

        let back = state.load_dataset().unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn version_mismatch_fails_fast() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        std::fs::write(
            state.dataset_path(),
            "{\"artifact\":\"dataset\",\"version\":99}\n",
        )
        .unwrap();
        let err = state.load_dataset().unwrap_err();
        assert!(matches!(err, Error::Artifact { .. }), "{err}");
        assert!(err.to_string().contains("version 99"));
    }

    #[test]
    fn wrong_artifact_kind_fails_fast() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        std::fs::write(
            state.dataset_path(),
            "{\"artifact\":\"categories\",\"version\":1}\n",
        )
        .unwrap();
        assert!(state.load_dataset().is_err());
    }

    #[test]
    fn missing_artifact_is_an_artifact_error() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        let err = state.load_dataset().unwrap_err();
        assert!(matches!(err, Error::Artifact { .. }));
        assert!(state.load_observed().unwrap().is_empty());
    }

    #[test]
    fn lock_excludes_second_opener_and_releases_on_drop() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("s");
        let first = StateDir::open(&path).unwrap();
        let err = StateDir::open(&path).unwrap_err();
        assert!(err.to_string().contains("locked"));
        drop(first);
        StateDir::open(&path).unwrap();
    }

    #[test]
    fn categories_round_trip() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        let records = vec![
            CategoryRecord {
                category_id: "g1".into(),
                report_ids: vec!["r1".into(), "r3".into()],
                created_by: CreatedBy::Human,
            },
            CategoryRecord {
                category_id: "engine-0001".into(),
                report_ids: vec!["r9".into()],
                created_by: CreatedBy::Engine,
            },
        ];
        state.save_categories(&records).unwrap();
        assert_eq!(state.load_categories().unwrap(), records);
    }

    #[test]
    fn threshold_survives_infinities() {
        let dir = TempDir::new().unwrap();
        let state = StateDir::open(dir.path().join("s")).unwrap();
        for t in [0.42, f64::INFINITY, f64::NEG_INFINITY] {
            let file = ThresholdFile::new(t, 0.9, "reranked");
            state.save_threshold(&file).unwrap();
            let back = state.load_threshold().unwrap();
            assert_eq!(back.threshold, t);
            assert_eq!(back.scores_from, "reranked");
        }
    }
}
