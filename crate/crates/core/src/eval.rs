//! Chronological replay and the metrics computed over it.
//!
//! Replay simulates a triage queue: the pipeline state is seeded with every
//! report that arrived before the evaluation window (under its true
//! category), then held-out reports are presented strictly in arrival order.
//! Each one is ranked against the state as it existed at that moment and the
//! state is then updated with the report's true category, so a mistake on one
//! report never contaminates the next (teacher forcing).
//!
//! Reports whose normalized frame content exactly matches something already
//! seen are counted as skipped: such duplicates are resolved by a hash
//! lookup in practice and would inflate every metric if scored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::index::CategoryScore;
use crate::pipeline::{SimilarityPipeline, StageTimings};
use crate::trace::{ContentHash, DatasetSplit, StackTrace};
use crate::{Error, Result};

/// Ground truth for one replayed report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    /// The report's category already existed when it arrived.
    Attach { category_id: String },
    /// The report opened its category.
    New,
}

/// One replayed report with the ranking the pipeline produced for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub report_id: String,
    pub timestamp: i64,
    pub truth: Truth,
    /// Ranked categories, best first; `None` when no categories existed yet
    /// or the report was skipped.
    pub prediction: Option<Vec<CategoryScore>>,
    /// Content-identical to an earlier report; excluded from all metrics.
    pub skipped: bool,
    pub timings: StageTimings,
}

impl EvalEvent {
    pub fn top(&self) -> Option<&CategoryScore> {
        self.prediction.as_deref().and_then(|p| p.first())
    }

    /// Top-1 similarity; events without a prediction score minus infinity
    /// (nothing existed to be similar to).
    pub fn top_score(&self) -> f64 {
        self.top().map_or(f64::NEG_INFINITY, |c| c.score)
    }

    pub fn is_attach_truth(&self) -> bool {
        matches!(self.truth, Truth::Attach { .. })
    }
}

fn seed_pipeline(
    pipeline: &mut dyn SimilarityPipeline,
    parts: &[&[StackTrace]],
    seen_hashes: &mut HashSet<ContentHash>,
    seen_categories: &mut HashSet<String>,
) -> Result<()> {
    pipeline.reset();
    for part in parts {
        for report in *part {
            let category = report.category_id.as_deref().ok_or_else(|| {
                Error::Eval(format!(
                    "report {:?} has no category to seed replay state with",
                    report.report_id
                ))
            })?;
            pipeline.observe(report, category)?;
            seen_hashes.insert(report.content_hash());
            seen_categories.insert(category.to_string());
        }
    }
    Ok(())
}

fn replay_over(
    pipeline: &mut dyn SimilarityPipeline,
    seed: &[&[StackTrace]],
    queries: &[StackTrace],
) -> Result<Vec<EvalEvent>> {
    let mut seen_hashes = HashSet::new();
    let mut seen_categories = HashSet::new();
    seed_pipeline(pipeline, seed, &mut seen_hashes, &mut seen_categories)?;

    let mut order: Vec<&StackTrace> = queries.iter().collect();
    order.sort_by(|a, b| (a.timestamp, &a.report_id).cmp(&(b.timestamp, &b.report_id)));

    let mut events = Vec::with_capacity(order.len());
    for report in order {
        let category = report.category_id.clone().ok_or_else(|| {
            Error::Eval(format!(
                "replayed report {:?} has no ground-truth category",
                report.report_id
            ))
        })?;
        let truth = if seen_categories.contains(&category) {
            Truth::Attach { category_id: category.clone() }
        } else {
            Truth::New
        };
        let hash = report.content_hash();
        let (prediction, timings, skipped) = if seen_hashes.contains(&hash) {
            (None, StageTimings::default(), true)
        } else {
            let outcome = pipeline.rank(report)?;
            let prediction =
                (!outcome.categories.is_empty()).then_some(outcome.categories);
            (prediction, outcome.timings, false)
        };
        events.push(EvalEvent {
            report_id: report.report_id.clone(),
            timestamp: report.timestamp,
            truth,
            prediction,
            skipped,
            timings,
        });
        pipeline.observe(report, &category)?;
        seen_hashes.insert(hash);
        seen_categories.insert(category);
    }
    Ok(events)
}

/// Replays the test partition against state seeded with train + validation.
pub fn replay(
    split: &DatasetSplit,
    pipeline: &mut dyn SimilarityPipeline,
) -> Result<Vec<EvalEvent>> {
    replay_over(pipeline, &[&split.train, &split.validation], &split.test)
}

/// Replays the validation partition against state seeded with train only;
/// the resulting events feed [`calibrate_threshold`].
pub fn calibration_replay(
    split: &DatasetSplit,
    pipeline: &mut dyn SimilarityPipeline,
) -> Result<Vec<EvalEvent>> {
    replay_over(pipeline, &[&split.train], &split.validation)
}

/// Fraction of non-skipped attach-truth events whose top-ranked category is
/// the true one; `None` when no such event exists.
pub fn acc_at_1(events: &[EvalEvent]) -> Option<f64> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for event in events.iter().filter(|e| !e.skipped) {
        if let Truth::Attach { category_id } = &event.truth {
            total += 1;
            if event.top().is_some_and(|top| &top.category_id == category_id) {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Area under the ROC curve for new-category detection with the top-1
/// similarity as the score (low similarity means likely new).
///
/// Computed as the rank statistic: the probability that a random attach
/// event scores above a random new-category event, ties counting one half.
pub fn roc_auc_new_category(events: &[EvalEvent]) -> Result<f64> {
    let mut scored: Vec<(f64, bool)> = events
        .iter()
        .filter(|e| !e.skipped)
        .map(|e| (e.top_score(), e.is_attach_truth()))
        .collect();
    let n_attach = scored.iter().filter(|&&(_, attach)| attach).count();
    let n_new = scored.len() - n_attach;
    if n_attach == 0 || n_new == 0 {
        return Err(Error::Eval(
            "ROC-AUC needs at least one attach and one new-category event".into(),
        ));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are never NaN"));
    let mut attach_rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the tie; each gets the average.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for entry in &scored[i..j] {
            if entry.1 {
                attach_rank_sum += midrank;
            }
        }
        i = j;
    }
    let (na, nn) = (n_attach as f64, n_new as f64);
    Ok((attach_rank_sum - na * (na + 1.0) / 2.0) / (na * nn))
}

/// F1 of the new-category class when attaching strictly above `threshold`.
pub fn f1_at_threshold(events: &[EvalEvent], threshold: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut missed = 0usize;
    for event in events.iter().filter(|e| !e.skipped) {
        let predicted_new = !(event.top_score() > threshold);
        match (!event.is_attach_truth(), predicted_new) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => missed += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + missed;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Picks the attach/new threshold maximizing new-category F1.
///
/// Candidates are midpoints between consecutive distinct top-1 scores plus
/// both infinities, so every achievable confusion matrix is visited; ties
/// resolve to the smallest candidate. Returns `(threshold, f1)`.
pub fn calibrate_threshold(events: &[EvalEvent]) -> Result<(f64, f64)> {
    let live: Vec<&EvalEvent> = events.iter().filter(|e| !e.skipped).collect();
    let n_new = live.iter().filter(|e| !e.is_attach_truth()).count();
    if n_new == 0 || n_new == live.len() {
        return Err(Error::Eval(
            "threshold calibration needs both attach and new-category events".into(),
        ));
    }
    let mut scores: Vec<f64> = live.iter().map(|e| e.top_score()).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("scores are never NaN"));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(f64::NEG_INFINITY);
    candidates.extend(scores.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(f64::INFINITY);

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &t in &candidates {
        let f1 = f1_at_threshold(events, t);
        // Ascending candidates: strict improvement keeps the smallest tie.
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub attached: usize,
    pub new_categories: usize,
    pub skipped: usize,
}

impl DecisionCounts {
    pub fn total(&self) -> usize {
        self.attached + self.new_categories + self.skipped
    }
}

/// Attach/new/skip outcomes at a threshold; totals match the event count.
pub fn decision_counts(events: &[EvalEvent], threshold: f64) -> DecisionCounts {
    let mut counts = DecisionCounts::default();
    for event in events {
        if event.skipped {
            counts.skipped += 1;
        } else if event.top_score() > threshold {
            counts.attached += 1;
        } else {
            counts.new_categories += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub queries: usize,
    pub retrieval: StatSummary,
    pub rerank: StatSummary,
}

fn summarize(samples: &mut [f64]) -> StatSummary {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are never NaN"));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    StatSummary {
        mean_ms: mean,
        p50_ms: percentile(samples, 50.0),
        p95_ms: percentile(samples, 95.0),
    }
}

/// Nearest-rank percentile over an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Times each query against the pipeline's current (frozen) state.
///
/// The first `warmup` queries run once untimed before the measured pass, so
/// lazy one-time work (index construction, page faults) is excluded. State
/// is never updated. Single-stage pipelines report zeros for the rerank
/// stage.
pub fn time_queries(
    pipeline: &mut dyn SimilarityPipeline,
    queries: &[StackTrace],
    warmup: usize,
) -> Result<LatencyStats> {
    if queries.is_empty() {
        return Err(Error::Eval("latency measurement needs at least one query".into()));
    }
    for query in queries.iter().take(warmup) {
        pipeline.rank(query)?;
    }
    let mut retrieval = Vec::with_capacity(queries.len());
    let mut rerank = Vec::with_capacity(queries.len());
    for query in queries {
        let outcome = pipeline.rank(query)?;
        retrieval.push(outcome.timings.retrieval_ms);
        rerank.push(outcome.timings.rerank_ms);
    }
    Ok(LatencyStats {
        queries: queries.len(),
        retrieval: summarize(&mut retrieval),
        rerank: summarize(&mut rerank),
    })
}

/// Seeds frozen train + validation state, then times every test query with
/// warm-up; see [`time_queries`].
pub fn measure_latency(
    split: &DatasetSplit,
    pipeline: &mut dyn SimilarityPipeline,
    warmup: usize,
) -> Result<LatencyStats> {
    if split.test.is_empty() {
        return Err(Error::Eval("latency measurement needs at least one test query".into()));
    }
    let mut hashes = HashSet::new();
    let mut categories = HashSet::new();
    seed_pipeline(pipeline, &[&split.train, &split.validation], &mut hashes, &mut categories)?;
    time_queries(pipeline, &split.test, warmup)
}

/// Per-stage statistics from the timings already recorded during a replay
/// (skipped events never invoked the model, so they are excluded). Cheaper
/// than [`measure_latency`] but includes state-growth effects; `None` when
/// every event was skipped.
pub fn latency_from_events(events: &[EvalEvent]) -> Option<LatencyStats> {
    let live: Vec<&EvalEvent> = events.iter().filter(|e| !e.skipped).collect();
    if live.is_empty() {
        return None;
    }
    let mut retrieval: Vec<f64> = live.iter().map(|e| e.timings.retrieval_ms).collect();
    let mut rerank: Vec<f64> = live.iter().map(|e| e.timings.rerank_ms).collect();
    Some(LatencyStats {
        queries: live.len(),
        retrieval: summarize(&mut retrieval),
        rerank: summarize(&mut rerank),
    })
}

/// Everything one pipeline scored on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pipeline: String,
    pub events: usize,
    pub acc_at_1: Option<f64>,
    pub roc_auc: Option<f64>,
    pub threshold: f64,
    pub f1_new: f64,
    pub counts: DecisionCounts,
    pub latency: Option<LatencyStats>,
}

impl MetricsReport {
    pub fn from_events(
        pipeline: &str,
        events: &[EvalEvent],
        threshold: f64,
        latency: Option<LatencyStats>,
    ) -> MetricsReport {
        MetricsReport {
            pipeline: pipeline.to_string(),
            events: events.len(),
            acc_at_1: acc_at_1(events),
            roc_auc: roc_auc_new_category(events).ok(),
            threshold,
            f1_new: f1_at_threshold(events, threshold),
            counts: decision_counts(events, threshold),
            latency,
        }
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

/// Renders reports as an aligned text table, one row per pipeline.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let header =
        ["pipeline", "acc@1", "roc-auc", "f1(new)", "threshold", "attach", "new", "skip", "retrieval mean ms", "rerank mean ms"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        rows.push(vec![
            r.pipeline.clone(),
            fmt_opt(r.acc_at_1),
            fmt_opt(r.roc_auc),
            format!("{:.4}", r.f1_new),
            format!("{:.4}", r.threshold),
            r.counts.attached.to_string(),
            r.counts.new_categories.to_string(),
            r.counts.skipped.to_string(),
            fmt_opt(r.latency.map(|l| l.retrieval.mean_ms)),
            fmt_opt(r.latency.map(|l| l.rerank.mean_ms)),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            if c == 0 {
                out.push_str(&format!("{cell:<width$}", width = widths[c]));
            } else {
                out.push_str(&format!("{cell:>width$}", width = widths[c]));
            }
        }
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
