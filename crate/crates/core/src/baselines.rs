//! Non-neural similarity baselines: frame-level TF-IDF scoring, normalized
//! edit distance, and an optional remote embeddings-API client.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedder::TraceEmbedding;
use crate::trace::StackTrace;
use crate::{Error, Result};

/// Document statistics for TF-IDF scoring over whole normalized frames.
#[derive(Debug, Clone, Default)]
pub struct TfIdfIndex {
    /// Number of indexed documents containing each frame at least once.
    df: HashMap<String, u32>,
    docs: Vec<TfIdfDoc>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct TfIdfDoc {
    pub report_id: String,
    pub category_id: String,
    tf: HashMap<String, u32>,
}

impl TfIdfIndex {
    pub fn new() -> TfIdfIndex {
        TfIdfIndex::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn add_document(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        if self.by_id.contains_key(&report.report_id) {
            return Err(Error::Index(format!("duplicate report id {:?}", report.report_id)));
        }
        let mut tf: HashMap<String, u32> = HashMap::new();
        for frame in report.normalized_frames() {
            *tf.entry(frame.to_string()).or_insert(0) += 1;
        }
        for frame in tf.keys() {
            *self.df.entry(frame.clone()).or_insert(0) += 1;
        }
        self.by_id.insert(report.report_id.clone(), self.docs.len());
        self.docs.push(TfIdfDoc {
            report_id: report.report_id.clone(),
            category_id: category_id.to_string(),
            tf,
        });
        Ok(())
    }

    /// Natural-log inverse document frequency, df floored at 1 so frames
    /// never seen in the corpus still get a finite weight.
    pub fn idf(&self, frame: &str) -> f64 {
        let df = self.df.get(frame).copied().unwrap_or(0).max(1);
        ((self.docs.len() as f64) / f64::from(df)).ln()
    }

    pub fn docs(&self) -> &[TfIdfDoc] {
        &self.docs
    }

    pub fn doc(&self, report_id: &str) -> Option<&TfIdfDoc> {
        self.by_id.get(report_id).map(|&i| &self.docs[i])
    }

    /// Score of a query against one indexed document by stored term counts.
    pub fn score_doc(&self, query_frames: &[&str], doc: &TfIdfDoc) -> f64 {
        let distinct: HashSet<&str> = query_frames.iter().copied().collect();
        distinct
            .into_iter()
            .map(|f| {
                let tf = doc.tf.get(f).copied().unwrap_or(0);
                let idf = self.idf(f);
                f64::from(tf) * idf * idf
            })
            .sum()
    }
}

/// Sum over the distinct frames of `q` of tf_d(frame) * idf(frame)^2, with
/// term counts taken from `d` directly and document statistics from `idx`.
pub fn lerch_score(q: &StackTrace, d: &StackTrace, idx: &TfIdfIndex) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Index("tf-idf index is empty".into()));
    }
    let mut tf_d: HashMap<&str, u32> = HashMap::new();
    for frame in d.normalized_frames() {
        *tf_d.entry(frame).or_insert(0) += 1;
    }
    let distinct: HashSet<&str> = q.normalized_frames().collect();
    Ok(distinct
        .into_iter()
        .map(|f| {
            let tf = tf_d.get(f).copied().unwrap_or(0);
            let idf = idx.idf(f);
            f64::from(tf) * idf * idf
        })
        .sum())
}

/// 1 - levenshtein(q.frames, d.frames) / max(|q|, |d|), comparing whole
/// normalized frames as the edit alphabet.
pub fn edit_similarity(q: &StackTrace, d: &StackTrace) -> f64 {
    let a: Vec<&str> = q.normalized_frames().collect();
    let b: Vec<&str> = d.normalized_frames().collect();
    let max_len = a.len().max(b.len());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - (frame_levenshtein(&a, &b) as f64) / (max_len as f64)
}

fn frame_levenshtein(a: &[&str], b: &[&str]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, fa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, fb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(fa != fb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Base backoff delay, doubled per retry.
    pub retry_base_ms: u64,
    /// When set, embedding requests fail immediately; nothing leaves the
    /// machine.
    pub offline: bool,
}

impl Default for RemoteConfig {
    fn default() -> RemoteConfig {
        RemoteConfig {
            endpoint: String::new(),
            model: "text-embedding-3-small".to_string(),
            api_key: None,
            timeout_secs: 30,
            max_retries: 3,
            retry_base_ms: 200,
            offline: false,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    hash: String,
    vector: Vec<f32>,
}

/// Client for an embeddings HTTP API. Frames are joined with newlines into
/// one input string; responses are cached by trace content hash, and a cache
/// hit never issues a request.
pub struct RemoteEmbedderClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: HashMap<u64, Vec<f32>>,
    cache_path: Option<PathBuf>,
    dim: Option<usize>,
    requests_made: u64,
}

impl RemoteEmbedderClient {
    pub fn new(config: RemoteConfig) -> RemoteEmbedderClient {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build();
        RemoteEmbedderClient {
            config,
            agent: agent_config.into(),
            cache: HashMap::new(),
            cache_path: None,
            dim: None,
            requests_made: 0,
        }
    }

    /// Attaches a JSONL cache file, loading any existing entries.
    pub fn with_cache_file(config: RemoteConfig, path: &Path) -> Result<RemoteEmbedderClient> {
        let mut client = RemoteEmbedderClient::new(config);
        if path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::artifact(path, format!("cannot read cache: {e}")))?;
            for (no, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(line).map_err(|e| {
                    Error::artifact(path, format!("cache line {}: {e}", no + 1))
                })?;
                let hash = u64::from_str_radix(&entry.hash, 16).map_err(|_| {
                    Error::artifact(path, format!("cache line {}: bad hash", no + 1))
                })?;
                client.dim.get_or_insert(entry.vector.len());
                client.cache.insert(hash, entry.vector);
            }
        }
        client.cache_path = Some(path.to_path_buf());
        Ok(client)
    }

    pub fn requests_made(&self) -> u64 {
        self.requests_made
    }

    pub fn cached_len(&self) -> usize {
        self.cache.len()
    }

    pub fn embed(&mut self, trace: &StackTrace) -> Result<TraceEmbedding> {
        let hash = trace.content_hash();
        if let Some(vector) = self.cache.get(&hash.0) {
            return Ok(TraceEmbedding {
                report_id: trace.report_id.clone(),
                vector: vector.clone(),
            });
        }
        if self.config.offline {
            return Err(Error::Remote(
                "offline mode: refusing to send report contents to a remote service".into(),
            ));
        }
        if self.config.endpoint.is_empty() {
            return Err(Error::Remote("remote embedding endpoint not configured".into()));
        }

        let input: String =
            trace.normalized_frames().collect::<Vec<_>>().join("\n");
        let body = serde_json::json!({
            "model": self.config.model,
            "input": [input],
        })
        .to_string();

        let mut attempt = 0u32;
        let vector = loop {
            match self.request(&body) {
                Ok(v) => break v,
                Err(RequestFailure::Fatal(e)) => return Err(e),
                Err(RequestFailure::Transient(e)) => {
                    if attempt >= self.config.max_retries {
                        return Err(e);
                    }
                    let delay = self.config.retry_base_ms.saturating_mul(1 << attempt);
                    std::thread::sleep(Duration::from_millis(delay));
                    attempt += 1;
                }
            }
        };

        if let Some(dim) = self.dim {
            if vector.len() != dim {
                return Err(Error::Remote(format!(
                    "service returned dimension {} but earlier responses had {dim}",
                    vector.len()
                )));
            }
        } else {
            self.dim = Some(vector.len());
        }

        self.cache.insert(hash.0, vector.clone());
        if let Some(path) = &self.cache_path {
            let line = serde_json::to_string(&CacheLine {
                hash: format!("{:016x}", hash.0),
                vector: vector.clone(),
            })?;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::artifact(path, format!("cannot append cache: {e}")))?;
            writeln!(file, "{line}")?;
        }
        Ok(TraceEmbedding { report_id: trace.report_id.clone(), vector })
    }

    fn request(&mut self, body: &str) -> std::result::Result<Vec<f32>, RequestFailure> {
        self.requests_made += 1;
        let mut builder = self
            .agent
            .post(&self.config.endpoint)
            .content_type("application/json");
        if let Some(key) = &self.config.api_key {
            builder = builder.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = builder.send(body).map_err(classify_transport)?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| RequestFailure::Transient(Error::Remote(format!("read failed: {e}"))))?;
        parse_embedding_response(&text).map_err(RequestFailure::Fatal)
    }
}

enum RequestFailure {
    /// Retry with backoff.
    Transient(Error),
    Fatal(Error),
}

fn classify_transport(err: ureq::Error) -> RequestFailure {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            RequestFailure::Transient(Error::Remote(format!("service returned HTTP {code}")))
        }
        ureq::Error::StatusCode(code) => {
            RequestFailure::Fatal(Error::Remote(format!("service returned HTTP {code}")))
        }
        other => RequestFailure::Transient(Error::Remote(format!("request failed: {other}"))),
    }
}

fn parse_embedding_response(text: &str) -> Result<Vec<f32>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Remote(format!("response is not valid JSON: {e}")))?;
    let data = value
        .get("data")
        .and_then(|d| d.as_array())
        .ok_or_else(|| Error::Remote("response has no data array".into()))?;
    let first = data
        .first()
        .ok_or_else(|| Error::Remote("response data array is empty".into()))?;
    let embedding = first
        .get("embedding")
        .and_then(|e| e.as_array())
        .ok_or_else(|| Error::Remote("response entry has no embedding array".into()))?;
    if embedding.is_empty() {
        return Err(Error::Remote("service returned an empty embedding".into()));
    }
    embedding
        .iter()
        .map(|v| {
            v.as_f64()
                .map(|f| f as f32)
                .ok_or_else(|| Error::Remote("embedding contains a non-numeric value".into()))
        })
        .collect()
}
