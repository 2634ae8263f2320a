//! Pluggable similarity pipelines over a growing report store.
//!
//! Each pipeline answers ranked category suggestions for an incoming trace
//! and absorbs decided reports into its state. The two-stage neural variant
//! reports retrieval and reranking time separately; single-stage pipelines
//! report zero rerank time.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{edit_similarity, RemoteEmbedderClient, TfIdfIndex};
use crate::embedder::EmbedderModel;
use crate::index::{CategoryScore, EmbeddingStore, SearchHit, SearchMode};
use crate::reranker::{rerank, RerankerModel};
use crate::tokenizer::{encode_trace, BpeVocab, TokenizedTrace, TokenizerConfig};
use crate::trace::StackTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Query embedding plus candidate retrieval.
    pub retrieval_ms: f64,
    /// Candidate rescoring; zero for pipelines without a second stage.
    pub rerank_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RankOutcome {
    /// Categories, best first; empty when the state holds no reports.
    pub categories: Vec<CategoryScore>,
    pub timings: StageTimings,
}

pub trait SimilarityPipeline {
    fn name(&self) -> &str;

    /// Drops all absorbed reports.
    fn reset(&mut self);

    /// Adds a report under its decided (or true) category.
    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()>;

    /// Ranks known categories for a query without changing state.
    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome>;

    /// Resets and absorbs labeled reports; every report must carry a
    /// category.
    fn seed_state(&mut self, reports: &[StackTrace]) -> Result<()> {
        self.reset();
        for report in reports {
            let category = report.category_id.as_deref().ok_or_else(|| {
                Error::Eval(format!("report {:?} has no category to seed state with", report.report_id))
            })?;
            self.observe(report, category)?;
        }
        Ok(())
    }
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Collapses a ranked (category, score) stream: first occurrence of each
/// category keeps its (maximal) score, and order follows the stream.
pub fn collapse_categories<'a>(
    ranked: impl Iterator<Item = (&'a str, f64)>,
) -> Vec<CategoryScore> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<CategoryScore> = Vec::new();
    for (category, score) in ranked {
        match seen.get(category) {
            Some(&i) => {
                if score > out[i].score {
                    out[i].score = score;
                }
            }
            None => {
                seen.insert(category, out.len());
                out.push(CategoryScore { category_id: category.to_string(), score });
            }
        }
    }
    out
}

/// Bi-encoder retrieval only: embed, search, collapse to categories.
pub struct EmbedderPipeline {
    model: EmbedderModel<f32>,
    vocab: BpeVocab,
    tok: TokenizerConfig,
    store: EmbeddingStore,
    k: usize,
    mode: SearchMode,
}

impl EmbedderPipeline {
    pub fn new(
        model: EmbedderModel<f32>,
        vocab: BpeVocab,
        tok: TokenizerConfig,
        k: usize,
        mode: SearchMode,
    ) -> EmbedderPipeline {
        let store = EmbeddingStore::new(model.embedding_dim());
        EmbedderPipeline { model, vocab, tok, store, k, mode }
    }

    /// Wraps a prebuilt store (for example one loaded from disk) instead of
    /// starting empty.
    pub fn with_store(
        model: EmbedderModel<f32>,
        vocab: BpeVocab,
        tok: TokenizerConfig,
        k: usize,
        mode: SearchMode,
        store: EmbeddingStore,
    ) -> Result<EmbedderPipeline> {
        if store.dim() != model.embedding_dim() {
            return Err(Error::Index(format!(
                "store dimension {} does not match the model's embedding width {}",
                store.dim(),
                model.embedding_dim()
            )));
        }
        Ok(EmbedderPipeline { model, vocab, tok, store, k, mode })
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut EmbeddingStore {
        &mut self.store
    }

    /// Surrenders the store, for persisting accumulated state.
    pub fn into_store(self) -> EmbeddingStore {
        self.store
    }

    fn tokenize(&self, report: &StackTrace) -> TokenizedTrace {
        encode_trace(report, &self.vocab, self.tok.max_frames, self.tok.max_tokens_per_frame)
    }
}

impl SimilarityPipeline for EmbedderPipeline {
    fn name(&self) -> &str {
        "embedder"
    }

    fn reset(&mut self) {
        self.store = EmbeddingStore::with_ann_params(self.store.dim(), self.store.ann_params());
    }

    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        let tokens = self.tokenize(report);
        let emb = self.model.embed_trace(&tokens, &report.report_id)?;
        self.store.add(&report.report_id, &emb.vector, category_id)
    }

    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        if self.store.is_empty() {
            return Ok(RankOutcome::default());
        }
        let start = Instant::now();
        let tokens = self.tokenize(query);
        let emb = self.model.embed_trace(&tokens, &query.report_id)?;
        let hits = self.store.search(&emb.vector, self.k, self.mode)?;
        let retrieval_ms = ms_since(start);
        Ok(RankOutcome {
            categories: self.store.category_scores(&hits),
            timings: StageTimings { retrieval_ms, rerank_ms: 0.0 },
        })
    }
}

/// Two-stage pipeline: bi-encoder retrieval, cross-encoder rescoring.
pub struct RerankedPipeline {
    retriever: EmbedderPipeline,
    reranker: RerankerModel<f32>,
    tokenized: HashMap<String, TokenizedTrace>,
}

impl RerankedPipeline {
    pub fn new(retriever: EmbedderPipeline, reranker: RerankerModel<f32>) -> RerankedPipeline {
        RerankedPipeline { retriever, reranker, tokenized: HashMap::new() }
    }

    /// Builds the candidate token cache for a retriever that already holds a
    /// populated store; every stored report must appear in `reports`.
    pub fn with_state(
        retriever: EmbedderPipeline,
        reranker: RerankerModel<f32>,
        reports: &[StackTrace],
    ) -> Result<RerankedPipeline> {
        let mut pipeline = RerankedPipeline::new(retriever, reranker);
        for report in reports {
            pipeline
                .tokenized
                .insert(report.report_id.clone(), pipeline.retriever.tokenize(report));
        }
        for id in pipeline.retriever.store.report_ids() {
            if !pipeline.tokenized.contains_key(id) {
                return Err(Error::Index(format!(
                    "stored report {id:?} has no frames available for reranking"
                )));
            }
        }
        Ok(pipeline)
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.retriever.store()
    }

    /// Surrenders the store, for persisting accumulated state.
    pub fn into_store(self) -> EmbeddingStore {
        self.retriever.store
    }
}

impl SimilarityPipeline for RerankedPipeline {
    fn name(&self) -> &str {
        "reranked"
    }

    fn reset(&mut self) {
        self.retriever.reset();
        self.tokenized.clear();
    }

    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        self.retriever.observe(report, category_id)?;
        self.tokenized.insert(report.report_id.clone(), self.retriever.tokenize(report));
        Ok(())
    }

    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        if self.retriever.store.is_empty() {
            return Ok(RankOutcome::default());
        }
        let start = Instant::now();
        let tokens = self.retriever.tokenize(query);
        let emb = self.retriever.model.embed_trace(&tokens, &query.report_id)?;
        let hits = self.retriever.store.search(&emb.vector, self.retriever.k, self.retriever.mode)?;
        let retrieval_ms = ms_since(start);

        let start = Instant::now();
        let candidates: Vec<(String, &TokenizedTrace)> = hits
            .iter()
            .map(|h| {
                let t = self.tokenized.get(&h.report_id).ok_or_else(|| {
                    Error::Eval(format!("no token cache for stored report {:?}", h.report_id))
                })?;
                Ok((h.report_id.clone(), t))
            })
            .collect::<Result<_>>()?;
        let rescored = rerank(&self.reranker, &tokens, &candidates)?;
        let rerank_ms = ms_since(start);

        let as_hits: Vec<SearchHit> = rescored
            .into_iter()
            .map(|(report_id, score)| SearchHit { report_id, score })
            .collect();
        Ok(RankOutcome {
            categories: self.retriever.store.category_scores(&as_hits),
            timings: StageTimings { retrieval_ms, rerank_ms },
        })
    }
}

/// TF-IDF scoring against every stored document.
#[derive(Default)]
pub struct LerchPipeline {
    index: TfIdfIndex,
}

impl LerchPipeline {
    pub fn new() -> LerchPipeline {
        LerchPipeline::default()
    }
}

impl SimilarityPipeline for LerchPipeline {
    fn name(&self) -> &str {
        "lerch"
    }

    fn reset(&mut self) {
        self.index = TfIdfIndex::new();
    }

    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        self.index.add_document(report, category_id)
    }

    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        if self.index.is_empty() {
            return Ok(RankOutcome::default());
        }
        let start = Instant::now();
        let frames: Vec<&str> = query.normalized_frames().collect();
        let mut scored: Vec<(usize, f64)> = self
            .index
            .docs()
            .iter()
            .enumerate()
            .map(|(i, doc)| (i, self.index.score_doc(&frames, doc)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are never NaN"));
        let categories = collapse_categories(
            scored
                .iter()
                .map(|&(i, s)| (self.index.docs()[i].category_id.as_str(), s)),
        );
        Ok(RankOutcome {
            categories,
            timings: StageTimings { retrieval_ms: ms_since(start), rerank_ms: 0.0 },
        })
    }
}

/// Frame-level normalized edit similarity against every stored trace.
#[derive(Default)]
pub struct EditPipeline {
    docs: Vec<(StackTrace, String)>,
    ids: HashMap<String, usize>,
}

impl EditPipeline {
    pub fn new() -> EditPipeline {
        EditPipeline::default()
    }
}

impl SimilarityPipeline for EditPipeline {
    fn name(&self) -> &str {
        "edit"
    }

    fn reset(&mut self) {
        self.docs.clear();
        self.ids.clear();
    }

    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        if self.ids.contains_key(&report.report_id) {
            return Err(Error::Index(format!("duplicate report id {:?}", report.report_id)));
        }
        self.ids.insert(report.report_id.clone(), self.docs.len());
        self.docs.push((report.clone(), category_id.to_string()));
        Ok(())
    }

    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        if self.docs.is_empty() {
            return Ok(RankOutcome::default());
        }
        let start = Instant::now();
        let mut scored: Vec<(usize, f64)> = self
            .docs
            .iter()
            .enumerate()
            .map(|(i, (doc, _))| (i, edit_similarity(query, doc)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are never NaN"));
        let categories =
            collapse_categories(scored.iter().map(|&(i, s)| (self.docs[i].1.as_str(), s)));
        Ok(RankOutcome {
            categories,
            timings: StageTimings { retrieval_ms: ms_since(start), rerank_ms: 0.0 },
        })
    }
}

/// Remote embeddings: service vectors in the same store/search machinery.
pub struct RemotePipeline {
    client: RemoteEmbedderClient,
    store: Option<EmbeddingStore>,
    k: usize,
    mode: SearchMode,
}

impl RemotePipeline {
    pub fn new(client: RemoteEmbedderClient, k: usize, mode: SearchMode) -> RemotePipeline {
        RemotePipeline { client, store: None, k, mode }
    }
}

impl SimilarityPipeline for RemotePipeline {
    fn name(&self) -> &str {
        "remote"
    }

    fn reset(&mut self) {
        self.store = None;
    }

    fn observe(&mut self, report: &StackTrace, category_id: &str) -> Result<()> {
        let emb = self.client.embed(report)?;
        let store = self
            .store
            .get_or_insert_with(|| EmbeddingStore::new(emb.vector.len()));
        store.add(&report.report_id, &emb.vector, category_id)
    }

    fn rank(&mut self, query: &StackTrace) -> Result<RankOutcome> {
        let Some(store) = &mut self.store else {
            return Ok(RankOutcome::default());
        };
        let start = Instant::now();
        let emb = self.client.embed(query)?;
        let hits = store.search(&emb.vector, self.k, self.mode)?;
        let retrieval_ms = ms_since(start);
        Ok(RankOutcome {
            categories: store.category_scores(&hits),
            timings: StageTimings { retrieval_ms, rerank_ms: 0.0 },
        })
    }
}
