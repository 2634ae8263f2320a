//! Command implementations behind the CLI surface.
//!
//! Everything here is a library function over a [`StateDir`] so integration
//! tests can drive the full lifecycle without spawning processes; `main`
//! only parses flags and maps errors to exit codes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use tracedup_core::baselines::RemoteEmbedderClient;
use tracedup_core::embedder::{train_embedder, EmbedderModel};
use tracedup_core::eval::{
    calibrate_threshold, calibration_replay, comparison_table, latency_from_events, replay,
    time_queries, LatencyStats, MetricsReport,
};
use tracedup_core::index::{EmbeddingStore, SearchMode, ANN_AUTO_THRESHOLD};
use tracedup_core::nn::WeightsFile;
use tracedup_core::pipeline::{
    EditPipeline, EmbedderPipeline, LerchPipeline, RankOutcome, RemotePipeline, RerankedPipeline,
    SimilarityPipeline,
};
use tracedup_core::reranker::{train_reranker, RerankerModel};
use tracedup_core::synth::{self, SynthConfig};
use tracedup_core::tokenizer::{train_bpe, BpeVocab};
use tracedup_core::trace::{chronological_split, parse_report, ContentHash, StackTrace};
use tracedup_core::{Error, Result};

use crate::adapters::{convert_stream, Adapter, ConvertStats};
use crate::config::PipelineConfig;
use crate::state::{CategoryRecord, CreatedBy, StateDir, ThresholdFile};

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::artifact(path, "artifact not found (run the producing command first)"))
    }
}

// ---------------------------------------------------------------- ingest --

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestSummary {
    pub reports: usize,
    pub categories: usize,
    pub malformed: usize,
}

impl std::fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ingested {} reports across {} categories ({} malformed records skipped)",
            self.reports, self.categories, self.malformed
        )
    }
}

/// Converts the inputs through an adapter and writes the native dataset.
pub fn run_ingest(
    state: &StateDir,
    inputs: &[PathBuf],
    adapter: Adapter,
    strict: bool,
) -> Result<IngestSummary> {
    if inputs.is_empty() {
        return Err(Error::Dataset("ingest needs at least one input file".into()));
    }
    let mut reports = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut total = ConvertStats::default();
    for input in inputs {
        let file = fs::File::open(input).map_err(|e| {
            Error::artifact(input, format!("unreadable input: {e}"))
        })?;
        let stats = convert_stream(
            std::io::BufReader::new(file),
            adapter,
            strict,
            &mut seen_ids,
            &mut reports,
        )
        .map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", input.display()),
            },
            other => other,
        })?;
        total.reports += stats.reports;
        total.malformed += stats.malformed;
    }
    total.categories = reports
        .iter()
        .filter_map(|r| r.category_id.as_deref())
        .collect::<HashSet<_>>()
        .len();
    state.save_dataset(&reports)?;
    Ok(IngestSummary {
        reports: total.reports,
        categories: total.categories,
        malformed: total.malformed,
    })
}

// ----------------------------------------------------------------- train --

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub train_reports: usize,
    pub validation_reports: usize,
    pub test_reports: usize,
    pub vocab_size: usize,
    pub embedder_epochs: usize,
    pub reranker_epochs: Option<usize>,
    pub indexed: usize,
    #[serde(skip)]
    pub threshold: f64,
    pub calibration_f1: f64,
}

impl std::fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "split: {} train / {} validation / {} test",
            self.train_reports, self.validation_reports, self.test_reports
        )?;
        writeln!(f, "vocabulary: {} symbols", self.vocab_size)?;
        write!(f, "embedder: {} epochs", self.embedder_epochs)?;
        match self.reranker_epochs {
            Some(e) => writeln!(f, "; reranker: {e} epochs")?,
            None => writeln!(f, "; reranker: disabled")?,
        }
        writeln!(f, "indexed {} reports", self.indexed)?;
        write!(
            f,
            "threshold {} (validation F1 {:.4})",
            self.threshold, self.calibration_f1
        )
    }
}

/// Trains every artifact from the ingested dataset. On failure all partial
/// outputs of this run are removed so the directory never holds a half
/// trained state.
pub fn run_train(state: &StateDir, config: &PipelineConfig) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = {
        require(&state.dataset_path())?;
        state.load_dataset()?
    };
    let mut written: Vec<PathBuf> = Vec::new();
    let result = train_inner(state, config, &dataset, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn train_inner(
    state: &StateDir,
    config: &PipelineConfig,
    dataset: &[StackTrace],
    written: &mut Vec<PathBuf>,
) -> Result<TrainSummary> {
    let split = chronological_split(dataset, config.split_ratios)?;
    for report in split.train.iter().chain(&split.validation) {
        if report.category_id.is_none() {
            return Err(Error::Dataset(format!(
                "report {:?} has no category; training needs labeled history",
                report.report_id
            )));
        }
    }

    let vocab = train_bpe(&split.train, config.tokenizer.vocab_size)?;
    written.push(state.vocab_path());
    vocab.save(&state.vocab_path())?;

    let (embedder, embed_report) =
        train_embedder::<f32>(&split, &vocab, &config.tokenizer, &config.embedder)?;
    written.push(state.embedder_path());
    embedder.to_weights().save(&state.embedder_path())?;

    let reranker = if config.use_reranker {
        let (model, report) =
            train_reranker::<f32>(&split, &vocab, &config.tokenizer, &config.reranker)?;
        written.push(state.reranker_path());
        model.to_weights().save(&state.reranker_path())?;
        Some((model, report))
    } else {
        None
    };

    // Historical index: train + validation under their true categories.
    let mut store = EmbeddingStore::with_ann_params(embedder.embedding_dim(), config.ann);
    for report in split.train.iter().chain(&split.validation) {
        let tokens = tokenize(&vocab, config, report);
        let emb = embedder.embed_trace(&tokens, &report.report_id)?;
        store.add(&report.report_id, &emb.vector, report.category_id.as_deref().unwrap())?;
    }
    let build_graph = match config.search_mode {
        SearchMode::Ann => true,
        SearchMode::Auto => store.len() >= ANN_AUTO_THRESHOLD,
        SearchMode::Exact => false,
    };
    if build_graph {
        store.ensure_ann();
    }
    let indexed = store.len();
    written.push(state.index_path());
    store.save(&state.index_path())?;

    written.push(state.categories_path());
    state.save_categories(&category_records(
        split.train.iter().chain(&split.validation),
    ))?;

    // Calibrate on validation events replayed against train-only state,
    // scored by the pipeline dedup will actually run.
    let events = if let Some((model, _)) = &reranker {
        let mut pipeline = RerankedPipeline::new(
            neural_retriever(&embedder, &vocab, config),
            model.clone(),
        );
        calibration_replay(&split, &mut pipeline)?
    } else {
        let mut pipeline = neural_retriever(&embedder, &vocab, config);
        calibration_replay(&split, &mut pipeline)?
    };
    let (threshold, f1) = calibrate_threshold(&events)?;
    written.push(state.threshold_path());
    let scores_from = if reranker.is_some() { "reranked" } else { "embedder" };
    state.save_threshold(&ThresholdFile::new(threshold, f1, scores_from))?;

    written.push(state.config_path());
    config.save(&state.config_path())?;

    Ok(TrainSummary {
        train_reports: split.train.len(),
        validation_reports: split.validation.len(),
        test_reports: split.test.len(),
        vocab_size: vocab.size(),
        embedder_epochs: embed_report.epochs_run,
        reranker_epochs: reranker.as_ref().map(|(_, r)| r.epochs_run),
        indexed,
        threshold,
        calibration_f1: f1,
    })
}

fn tokenize(
    vocab: &BpeVocab,
    config: &PipelineConfig,
    report: &StackTrace,
) -> tracedup_core::tokenizer::TokenizedTrace {
    tracedup_core::tokenizer::encode_trace(
        report,
        vocab,
        config.tokenizer.max_frames,
        config.tokenizer.max_tokens_per_frame,
    )
}

fn category_records<'a>(
    reports: impl Iterator<Item = &'a StackTrace>,
) -> Vec<CategoryRecord> {
    let mut by_category: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for report in reports {
        if let Some(cat) = &report.category_id {
            by_category.entry(cat.clone()).or_default().push(report.report_id.clone());
        }
    }
    by_category
        .into_iter()
        .map(|(category_id, report_ids)| CategoryRecord {
            category_id,
            report_ids,
            created_by: CreatedBy::Human,
        })
        .collect()
}

fn neural_retriever(
    embedder: &EmbedderModel<f32>,
    vocab: &BpeVocab,
    config: &PipelineConfig,
) -> EmbedderPipeline {
    let store = EmbeddingStore::with_ann_params(embedder.embedding_dim(), config.ann);
    EmbedderPipeline::with_store(
        embedder.clone(),
        vocab.clone(),
        config.tokenizer.clone(),
        config.k,
        config.search_mode,
        store,
    )
    .expect("fresh store always matches the model dimension")
}

fn load_embedder(state: &StateDir) -> Result<(EmbedderModel<f32>, BpeVocab)> {
    let vocab = BpeVocab::load(require(&state.vocab_path())?)?;
    let weights = WeightsFile::load(require(&state.embedder_path())?)?;
    Ok((EmbedderModel::from_weights(&weights)?, vocab))
}

fn load_reranker(state: &StateDir) -> Result<RerankerModel<f32>> {
    let weights = WeightsFile::load(require(&state.reranker_path())?)?;
    RerankerModel::from_weights(&weights)
}

// ----------------------------------------------------------------- dedup --

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionAction {
    Attach,
    New,
}

/// One line of the dedup output stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub report_id: String,
    pub action: DecisionAction,
    pub category_id: String,
    /// Best candidate similarity; absent when nothing was scored.
    pub top_score: Option<f64>,
    pub latency_ms: f64,
    /// False when an exact content match short-circuited the models.
    pub model_invoked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DedupSummary {
    pub processed: usize,
    pub attached: usize,
    pub new_categories: usize,
    pub short_circuited: usize,
    pub errors: usize,
}

impl std::fmt::Display for DedupSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "processed {} reports: {} attached ({} by exact content), {} new categories, {} malformed",
            self.processed, self.attached, self.short_circuited, self.new_categories, self.errors
        )
    }
}

/// The two trained pipeline shapes dedup can run.
enum NeuralPipeline {
    Plain(EmbedderPipeline),
    Reranked(RerankedPipeline),
}

impl NeuralPipeline {
    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        match self {
            NeuralPipeline::Plain(p) => p.rank(query),
            NeuralPipeline::Reranked(p) => p.rank(query),
        }
    }

    fn observe(&mut self, report: &StackTrace, category: &str) -> Result<()> {
        match self {
            NeuralPipeline::Plain(p) => p.observe(report, category),
            NeuralPipeline::Reranked(p) => p.observe(report, category),
        }
    }

    fn into_store(self) -> EmbeddingStore {
        match self {
            NeuralPipeline::Plain(p) => p.into_store(),
            NeuralPipeline::Reranked(p) => p.into_store(),
        }
    }
}

/// Streams reports, emits one JSON decision (or error object) per line, and
/// persists the grown index, category store, and observation log at the end.
pub fn run_dedup(
    state: &StateDir,
    input: impl BufRead,
    output: &mut impl Write,
) -> Result<DedupSummary> {
    let config = PipelineConfig::load(require(&state.config_path())?)?;
    let (embedder, vocab) = load_embedder(state)?;
    let store = EmbeddingStore::load(require(&state.index_path())?)?;
    let threshold = state.load_threshold()?.threshold;
    let mut categories = state.load_categories()?;
    let mut observed = state.load_observed()?;

    // Reports that are members of categories, for hashes and rerank frames.
    let dataset = state.load_dataset()?;
    let member_of: HashMap<&str, &str> = categories
        .iter()
        .flat_map(|c| c.report_ids.iter().map(move |r| (r.as_str(), c.category_id.as_str())))
        .collect();
    let members: Vec<StackTrace> = dataset
        .iter()
        .chain(&observed)
        .filter(|r| member_of.contains_key(r.report_id.as_str()))
        .cloned()
        .collect();

    let mut seen_hashes: HashMap<ContentHash, String> = members
        .iter()
        .map(|r| (r.content_hash(), member_of[r.report_id.as_str()].to_string()))
        .collect();
    let mut seen_ids: HashSet<String> =
        members.iter().map(|r| r.report_id.clone()).collect();

    let retriever = EmbedderPipeline::with_store(
        embedder,
        vocab,
        config.tokenizer.clone(),
        config.k,
        config.search_mode,
        store,
    )?;
    let mut pipeline = if config.use_reranker {
        NeuralPipeline::Reranked(RerankedPipeline::with_state(
            retriever,
            load_reranker(state)?,
            &members,
        )?)
    } else {
        NeuralPipeline::Plain(retriever)
    };

    let mut slots: BTreeMap<String, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.category_id.clone(), i))
        .collect();
    let mut next_engine_id = 1 + categories
        .iter()
        .filter_map(|c| c.category_id.strip_prefix("engine-"))
        .filter_map(|suffix| suffix.parse::<u64>().ok())
        .max()
        .unwrap_or(0);

    let mut summary = DedupSummary::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let started = Instant::now();
        let report = match parse_report(&line, i + 1).and_then(|r| {
            if seen_ids.contains(&r.report_id) {
                Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate report id {:?}", r.report_id),
                })
            } else {
                Ok(r)
            }
        }) {
            Ok(r) => r,
            Err(e) => {
                summary.errors += 1;
                writeln!(
                    output,
                    "{}",
                    serde_json::json!({ "line": i + 1, "error": e.to_string() })
                )?;
                continue;
            }
        };

        let hash = report.content_hash();
        let decision = if let Some(category) = seen_hashes.get(&hash).cloned() {
            // Exact content already filed: same category, no model work.
            // The twin's embedding already represents this content in the
            // index, so only the category store grows.
            summary.attached += 1;
            summary.short_circuited += 1;
            attach_member(&mut categories, &mut slots, &category, &report, CreatedBy::Engine);
            Decision {
                report_id: report.report_id.clone(),
                action: DecisionAction::Attach,
                category_id: category,
                top_score: None,
                latency_ms: ms_since(started),
                model_invoked: false,
            }
        } else {
            let outcome = match pipeline.rank(&report) {
                Ok(o) => o,
                Err(e) => {
                    summary.errors += 1;
                    writeln!(
                        output,
                        "{}",
                        serde_json::json!({ "line": i + 1, "error": e.to_string() })
                    )?;
                    continue;
                }
            };
            let top = outcome.categories.first();
            let (action, category) = match top {
                Some(c) if c.score > threshold => {
                    summary.attached += 1;
                    (DecisionAction::Attach, c.category_id.clone())
                }
                _ => {
                    summary.new_categories += 1;
                    let id = format!("engine-{next_engine_id:04}");
                    next_engine_id += 1;
                    (DecisionAction::New, id)
                }
            };
            pipeline.observe(&report, &category)?;
            attach_member(&mut categories, &mut slots, &category, &report, CreatedBy::Engine);
            Decision {
                report_id: report.report_id.clone(),
                action,
                category_id: category,
                top_score: top.map(|c| c.score),
                latency_ms: ms_since(started),
                model_invoked: true,
            }
        };
        summary.processed += 1;
        seen_hashes.insert(hash, decision.category_id.clone());
        seen_ids.insert(report.report_id.clone());
        let mut filed = report;
        filed.category_id = Some(decision.category_id.clone());
        observed.push(filed);
        writeln!(output, "{}", serde_json::to_string(&decision)?)?;
        output.flush()?;
    }

    pipeline.into_store().save(&state.index_path())?;
    state.save_categories(&categories)?;
    state.save_observed(&observed)?;
    Ok(summary)
}

fn attach_member(
    categories: &mut Vec<CategoryRecord>,
    slots: &mut BTreeMap<String, usize>,
    category: &str,
    report: &StackTrace,
    created_by_if_new: CreatedBy,
) {
    match slots.get(category) {
        Some(&i) => categories[i].report_ids.push(report.report_id.clone()),
        None => {
            slots.insert(category.to_string(), categories.len());
            categories.push(CategoryRecord {
                category_id: category.to_string(),
                report_ids: vec![report.report_id.clone()],
                created_by: created_by_if_new,
            });
        }
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

// ------------------------------------------------------------------ eval --

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Embedder,
    Reranked,
    Lerch,
    Edit,
    Remote,
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Embedder => "embedder",
            PipelineKind::Reranked => "reranked",
            PipelineKind::Lerch => "lerch",
            PipelineKind::Edit => "edit",
            PipelineKind::Remote => "remote",
        }
    }
}

impl FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PipelineKind> {
        match s {
            "embedder" => Ok(PipelineKind::Embedder),
            "reranked" => Ok(PipelineKind::Reranked),
            "lerch" => Ok(PipelineKind::Lerch),
            "edit" => Ok(PipelineKind::Edit),
            "remote" => Ok(PipelineKind::Remote),
            other => Err(Error::Dataset(format!(
                "unknown pipeline {other:?} (expected embedder, reranked, lerch, edit, or remote)"
            ))),
        }
    }
}

/// Replays the held-out window once per requested variant. Each variant
/// calibrates its own threshold on validation events against train-only
/// state, then replays the test window; per-variant reports land in the
/// state directory's `reports/` folder beside the comparison table.
pub fn run_eval(state: &StateDir, kinds: &[PipelineKind]) -> Result<(Vec<MetricsReport>, String)> {
    if kinds.is_empty() {
        return Err(Error::Eval("no pipeline variants requested".into()));
    }
    let mut config = if state.config_path().exists() {
        PipelineConfig::load(&state.config_path())?
    } else {
        PipelineConfig::default()
    };
    config.apply_remote_env();
    let dataset = {
        require(&state.dataset_path())?;
        state.load_dataset()?
    };
    let split = chronological_split(&dataset, config.split_ratios)?;

    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let mut pipeline = build_eval_pipeline(state, &config, *kind)?;
        let cal_events = calibration_replay(&split, pipeline.as_mut())?;
        let (threshold, _) = calibrate_threshold(&cal_events)?;
        let events = replay(&split, pipeline.as_mut())?;
        let latency = latency_from_events(&events);
        reports.push(MetricsReport::from_events(kind.name(), &events, threshold, latency));
    }
    let table = comparison_table(&reports);

    let dir = state.reports_dir();
    fs::create_dir_all(&dir)?;
    for report in &reports {
        let path = dir.join(format!("{}.json", report.pipeline));
        fs::write(&path, serde_json::to_string_pretty(report)?)?;
    }
    fs::write(dir.join("comparison.txt"), &table)?;
    Ok((reports, table))
}

fn build_eval_pipeline(
    state: &StateDir,
    config: &PipelineConfig,
    kind: PipelineKind,
) -> Result<Box<dyn SimilarityPipeline>> {
    Ok(match kind {
        PipelineKind::Embedder => {
            let (embedder, vocab) = load_embedder(state)?;
            Box::new(neural_retriever(&embedder, &vocab, config))
        }
        PipelineKind::Reranked => {
            let (embedder, vocab) = load_embedder(state)?;
            let reranker = load_reranker(state)?;
            Box::new(RerankedPipeline::new(
                neural_retriever(&embedder, &vocab, config),
                reranker,
            ))
        }
        PipelineKind::Lerch => Box::new(LerchPipeline::new()),
        PipelineKind::Edit => Box::new(EditPipeline::new()),
        PipelineKind::Remote => {
            if config.remote.endpoint.is_empty() {
                return Err(Error::Remote(
                    "remote pipeline needs an endpoint (REMOTE_EMBED_ENDPOINT or config)".into(),
                ));
            }
            let client = RemoteEmbedderClient::new(config.remote.clone());
            Box::new(RemotePipeline::new(client, config.k, config.search_mode))
        }
    })
}

// ----------------------------------------------------------------- bench --

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStage {
    /// Mean per-query latency of each run, milliseconds.
    pub run_means_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Variance of the per-run means.
    pub variance: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchVariant {
    pub pipeline: String,
    pub total: BenchStage,
    pub retrieval: BenchStage,
    pub rerank: BenchStage,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub store_size: usize,
    pub queries: usize,
    pub runs: usize,
    pub variants: Vec<BenchVariant>,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "store {} entries, {} queries, {} runs",
            self.store_size, self.queries, self.runs
        )?;
        for v in &self.variants {
            writeln!(
                f,
                "{:<10} total mean {:.3} ms (variance {:.5}), p50 {:.3} ms, p95 {:.3} ms",
                v.pipeline, v.total.mean_ms, v.total.variance, v.total.p50_ms, v.total.p95_ms
            )?;
            writeln!(
                f,
                "{:<10}   retrieval mean {:.3} ms | rerank mean {:.3} ms",
                "", v.retrieval.mean_ms, v.rerank.mean_ms
            )?;
        }
        Ok(())
    }
}

const BENCH_MEMORY_BUDGET_BYTES: usize = 2_000_000_000;

/// Builds a store of the requested size (synthetic corpus, trained models if
/// present, randomly initialized otherwise) and times both pipeline shapes.
pub fn run_bench(
    state: &StateDir,
    store_size: usize,
    query_count: usize,
    runs: usize,
) -> Result<BenchReport> {
    if query_count == 0 {
        return Err(Error::Eval("bench needs at least one query".into()));
    }
    if store_size == 0 {
        return Err(Error::Eval("bench needs a non-empty store".into()));
    }
    if runs == 0 {
        return Err(Error::Eval("bench needs at least one run".into()));
    }

    let config = if state.config_path().exists() {
        PipelineConfig::load(&state.config_path())?
    } else {
        PipelineConfig::default()
    };

    let total = store_size + query_count;
    let synth_config = SynthConfig {
        categories: total.div_ceil(40).max(2),
        reports_per_category: 40,
        late_categories: 0,
        reports_per_late_category: 0,
        near_duplicate_pairs: 0,
        ..SynthConfig::default()
    };
    let corpus = synth::generate(&synth_config)?;
    debug_assert!(corpus.len() >= total);
    let stored = &corpus[..store_size];
    let queries: Vec<StackTrace> = corpus[store_size..store_size + query_count].to_vec();

    // Trained artifacts when available; otherwise random initialization
    // (latency does not depend on weight values).
    let (embedder, vocab) = if state.embedder_path().exists() && state.vocab_path().exists() {
        load_embedder(state)?
    } else {
        let vocab = train_bpe(stored, config.tokenizer.vocab_size.min(2000))?;
        let model = EmbedderModel::new(config.embedder.clone(), vocab.size());
        (model, vocab)
    };
    let dim = embedder.embedding_dim();
    let estimated = store_size * (dim * 4 + 64 * config.ann.m);
    if estimated > BENCH_MEMORY_BUDGET_BYTES {
        return Err(Error::Index(format!(
            "store of {store_size} x {dim} would need roughly {estimated} bytes, over the bench budget"
        )));
    }
    let reranker: RerankerModel<f32> = if state.reranker_path().exists() {
        load_reranker(state)?
    } else {
        RerankerModel::new(config.reranker.clone(), vocab.size())
    };

    // Seed once; both variants share the same store contents.
    let mut retriever = neural_retriever(&embedder, &vocab, &config);
    retriever.seed_state(stored)?;
    if matches!(config.search_mode, SearchMode::Ann) {
        retriever.store_mut().ensure_ann();
    }
    let reranked_retriever = EmbedderPipeline::with_store(
        embedder.clone(),
        vocab.clone(),
        config.tokenizer.clone(),
        config.k,
        config.search_mode,
        retriever.store().clone(),
    )?;
    let mut reranked = RerankedPipeline::with_state(reranked_retriever, reranker, stored)?;

    let mut variants = Vec::new();
    let mut plain_runs = Vec::with_capacity(runs);
    for _ in 0..runs {
        plain_runs.push(time_queries(&mut retriever, &queries, config.latency_warmup)?);
    }
    variants.push(bench_variant("embedder", &plain_runs));

    let mut reranked_runs = Vec::with_capacity(runs);
    for _ in 0..runs {
        reranked_runs.push(time_queries(&mut reranked, &queries, config.latency_warmup)?);
    }
    variants.push(bench_variant("reranked", &reranked_runs));

    Ok(BenchReport { store_size, queries: query_count, runs, variants })
}

fn bench_stage(means: Vec<f64>, p50: f64, p95: f64) -> BenchStage {
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let variance = if means.len() < 2 {
        0.0
    } else {
        means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    BenchStage { run_means_ms: means, mean_ms: mean, variance, p50_ms: p50, p95_ms: p95 }
}

fn bench_variant(name: &str, runs: &[LatencyStats]) -> BenchVariant {
    let last = runs.last().expect("at least one run");
    let retrieval_means: Vec<f64> = runs.iter().map(|r| r.retrieval.mean_ms).collect();
    let rerank_means: Vec<f64> = runs.iter().map(|r| r.rerank.mean_ms).collect();
    let total_means: Vec<f64> =
        runs.iter().map(|r| r.retrieval.mean_ms + r.rerank.mean_ms).collect();
    BenchVariant {
        pipeline: name.to_string(),
        total: bench_stage(
            total_means,
            last.retrieval.p50_ms + last.rerank.p50_ms,
            last.retrieval.p95_ms + last.rerank.p95_ms,
        ),
        retrieval: bench_stage(retrieval_means, last.retrieval.p50_ms, last.retrieval.p95_ms),
        rerank: bench_stage(rerank_means, last.rerank.p50_ms, last.rerank.p95_ms),
    }
}

// --------------------------------------------------------------- inspect --

/// One line per artifact: version and headline numbers, or why it failed to
/// load. Never errors on individual artifacts; diagnostics should not die
/// on the first corrupt file.
pub fn run_inspect(state: &StateDir) -> Result<String> {
    let mut lines = Vec::new();
    let describe = |present: bool, detail: std::result::Result<String, Error>| match (present, detail) {
        (false, _) => "missing".to_string(),
        (true, Ok(d)) => d,
        (true, Err(e)) => format!("unreadable: {e}"),
    };

    let dataset = state.dataset_path();
    lines.push(format!(
        "dataset.jsonl: {}",
        describe(
            dataset.exists(),
            state.load_dataset().map(|d| format!("version 1, {} reports", d.len())),
        )
    ));
    let observed = state.observed_path();
    lines.push(format!(
        "observed.jsonl: {}",
        describe(
            observed.exists(),
            state.load_observed().map(|d| format!("version 1, {} reports", d.len())),
        )
    ));
    lines.push(format!(
        "vocab.json: {}",
        describe(
            state.vocab_path().exists(),
            BpeVocab::load(&state.vocab_path())
                .map(|v| format!("{} symbols, {} merges", v.size(), v.merges().len())),
        )
    ));
    lines.push(format!(
        "embedder.weights: {}",
        describe(
            state.embedder_path().exists(),
            WeightsFile::load(&state.embedder_path()).map(describe_weights),
        )
    ));
    lines.push(format!(
        "reranker.weights: {}",
        describe(
            state.reranker_path().exists(),
            WeightsFile::load(&state.reranker_path()).map(describe_weights),
        )
    ));
    lines.push(format!(
        "index.bin: {}",
        describe(
            state.index_path().exists(),
            EmbeddingStore::load(&state.index_path()).map(|s| {
                format!(
                    "{} entries, dim {}, graph {}",
                    s.len(),
                    s.dim(),
                    if s.ann_built() { "built" } else { "not built" }
                )
            }),
        )
    ));
    lines.push(format!(
        "threshold.json: {}",
        describe(
            state.threshold_path().exists(),
            state.load_threshold().map(|t| {
                format!("threshold {} (F1 {:.4}, scores from {})", t.threshold, t.f1, t.scores_from)
            }),
        )
    ));
    lines.push(format!(
        "categories.jsonl: {}",
        describe(
            state.categories_path().exists(),
            state.load_categories().map(|c| {
                let engine = c.iter().filter(|r| r.created_by == CreatedBy::Engine).count();
                format!("{} categories ({} engine-created)", c.len(), engine)
            }),
        )
    ));
    lines.push(format!(
        "config.toml: {}",
        describe(
            state.config_path().exists(),
            PipelineConfig::load(&state.config_path()).map(|c| {
                format!(
                    "version {}, k {}, reranker {}, search {:?}",
                    c.config_version,
                    c.k,
                    if c.use_reranker { "on" } else { "off" },
                    c.search_mode
                )
            }),
        )
    ));
    Ok(lines.join("\n"))
}

fn describe_weights(file: WeightsFile) -> String {
    format!("kind {}, {} tensors", file.model_kind, file.tensors.len())
}
