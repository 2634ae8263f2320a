//! Bi-encoder for whole stack traces.
//!
//! Tokens feed an embedding table, a frame-level biLSTM turns each frame's
//! tokens into a frame vector, and a trace-level biLSTM turns the frame
//! vectors into one trace embedding. Both levels share an aggregation mode
//! over the biLSTM outputs. Training pulls same-category pairs together
//! against in-batch negatives with a temperature-scaled contrastive loss.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    uniform_tensor, Adam, AdamConfig, BiLstmLayer, BiLstmOutput, Element, Parameter, Tape,
    Tensor, Var, WeightsFile,
};
use crate::tokenizer::{encode_trace, BpeVocab, TokenizedTrace, TokenizerConfig};
use crate::trace::{DatasetSplit, StackTrace};
use crate::{Error, Result};

/// How per-position biLSTM outputs become one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Mean of the output vectors.
    Avg,
    /// Per-dimension max of the output vectors.
    Max,
    /// Concatenated final hidden states of both directions.
    Hidden,
    /// [avg | max | hidden], in that order.
    ConcatAll,
}

impl Aggregation {
    pub fn output_width(self, hidden_dim: usize) -> usize {
        match self {
            Aggregation::Avg | Aggregation::Max | Aggregation::Hidden => 2 * hidden_dim,
            Aggregation::ConcatAll => 6 * hidden_dim,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Aggregation> {
        match s {
            "avg" => Ok(Aggregation::Avg),
            "max" => Ok(Aggregation::Max),
            "hidden" => Ok(Aggregation::Hidden),
            "concat-all" => Ok(Aggregation::ConcatAll),
            other => Err(Error::Model(format!(
                "unknown aggregation {other:?} (expected avg|max|hidden|concat-all)"
            ))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Aggregation::Avg => "avg",
            Aggregation::Max => "max",
            Aggregation::Hidden => "hidden",
            Aggregation::ConcatAll => "concat-all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub d_tok: usize,
    pub hidden_dim: usize,
    pub aggregation: Aggregation,
    pub temperature: f64,
    /// Use the contrastive denominator without the positive term.
    pub infonce_literal: bool,
    pub batch_size: usize,
    pub max_pairs_per_category: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            d_tok: 100,
            hidden_dim: 100,
            aggregation: Aggregation::ConcatAll,
            temperature: 0.05,
            infonce_literal: false,
            batch_size: 64,
            max_pairs_per_category: 100,
            lr: 1e-3,
            patience: 3,
            max_epochs: 20,
            seed: 42,
        }
    }
}

/// Token table plus the two biLSTM levels. Shared between the bi-encoder and
/// the cross-encoder (which adds its own extras on top).
#[derive(Debug, Clone)]
pub struct TraceEncoder<T: Element> {
    pub token_table: Parameter<T>,
    pub frame_lstm: BiLstmLayer<T>,
    pub trace_lstm: BiLstmLayer<T>,
    pub aggregation: Aggregation,
}

impl<T: Element> TraceEncoder<T> {
    pub fn new<R: Rng>(
        prefix: &str,
        vocab_size: usize,
        d_tok: usize,
        hidden_dim: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> TraceEncoder<T> {
        assert!(vocab_size > 0 && d_tok > 0 && hidden_dim > 0);
        let token_table = Parameter::new(
            format!("{prefix}.tokens"),
            uniform_tensor(rng, &[vocab_size, d_tok], 1.0 / (d_tok as f64).sqrt()),
        );
        let frame_lstm = BiLstmLayer::new(&format!("{prefix}.frame"), d_tok, hidden_dim, rng);
        let frame_width = aggregation.output_width(hidden_dim);
        let trace_lstm = BiLstmLayer::new(&format!("{prefix}.trace"), frame_width, hidden_dim, rng);
        TraceEncoder { token_table, frame_lstm, trace_lstm, aggregation }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.value.rows()
    }

    pub fn frame_width(&self) -> usize {
        self.aggregation.output_width(self.frame_lstm.hidden_dim)
    }

    pub fn embedding_width(&self) -> usize {
        self.aggregation.output_width(self.trace_lstm.hidden_dim)
    }

    fn aggregate(&self, tape: &mut Tape<T>, out: BiLstmOutput) -> Var {
        match self.aggregation {
            Aggregation::Avg => tape.row_mean(out.outputs),
            Aggregation::Max => tape.row_max(out.outputs),
            Aggregation::Hidden => out.final_hidden,
            Aggregation::ConcatAll => {
                let avg = tape.row_mean(out.outputs);
                let max = tape.row_max(out.outputs);
                tape.concat_vecs(&[avg, max, out.final_hidden])
            }
        }
    }

    /// Encodes one frame's token ids into a frame vector.
    pub fn encode_frame(&self, tape: &mut Tape<T>, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Model("cannot encode an empty token sequence".into()));
        }
        let table = tape.param(&self.token_table);
        let rows = tape.gather(table, tokens);
        let out = self.frame_lstm.forward(tape, rows)?;
        Ok(self.aggregate(tape, out))
    }

    /// Encodes every frame of a trace; the result feeds the trace level.
    pub fn frame_vectors(&self, tape: &mut Tape<T>, trace: &TokenizedTrace) -> Result<Vec<Var>> {
        if trace.frames.is_empty() {
            return Err(Error::Model("cannot encode a trace with no frames".into()));
        }
        trace.frames.iter().map(|tokens| self.encode_frame(tape, tokens)).collect()
    }

    /// Runs the trace-level biLSTM over a stacked [n x frame_width] matrix.
    pub fn encode_rows(&self, tape: &mut Tape<T>, rows: Var) -> Result<Var> {
        let out = self.trace_lstm.forward(tape, rows)?;
        Ok(self.aggregate(tape, out))
    }

    /// Full trace encoding: tokens -> frame vectors -> trace vector.
    pub fn encode(&self, tape: &mut Tape<T>, trace: &TokenizedTrace) -> Result<Var> {
        let frames = self.frame_vectors(tape, trace)?;
        let rows = tape.stack_rows(&frames);
        self.encode_rows(tape, rows)
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut ps = vec![&self.token_table];
        ps.extend(self.frame_lstm.parameters());
        ps.extend(self.trace_lstm.parameters());
        ps
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = vec![&mut self.token_table];
        ps.extend(self.frame_lstm.parameters_mut());
        ps.extend(self.trace_lstm.parameters_mut());
        ps
    }
}

/// A trace embedding ready for the index (always 32-bit for storage).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEmbedding {
    pub report_id: String,
    pub vector: Vec<f32>,
}

/// Cosine similarity, accumulated in f64.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Model(format!(
            "similarity dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += f64::from(x) * f64::from(y);
        na += f64::from(x) * f64::from(x);
        nb += f64::from(y) * f64::from(y);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Model("similarity of a zero vector is undefined".into()));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

pub fn similarity(a: &TraceEmbedding, b: &TraceEmbedding) -> Result<f64> {
    cosine_similarity(&a.vector, &b.vector)
}

#[derive(Debug, Clone)]
pub struct EmbedderModel<T: Element> {
    pub encoder: TraceEncoder<T>,
    pub config: EmbedderConfig,
}

pub const EMBEDDER_MODEL_KIND: &str = "embedder";

impl<T: Element> EmbedderModel<T> {
    pub fn new(config: EmbedderConfig, vocab_size: usize) -> EmbedderModel<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = TraceEncoder::new(
            "embedder",
            vocab_size,
            config.d_tok,
            config.hidden_dim,
            config.aggregation,
            &mut rng,
        );
        EmbedderModel { encoder, config }
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_width()
    }

    /// Encodes one frame on a throwaway tape.
    pub fn embed_frame(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.encoder.encode_frame(&mut tape, tokens)?;
        Ok(tape.value(v).clone())
    }

    /// Encodes a whole trace on a throwaway tape.
    pub fn embed_trace(&self, trace: &TokenizedTrace, report_id: &str) -> Result<TraceEmbedding> {
        let mut tape = Tape::new();
        let v = self.encoder.encode(&mut tape, trace)?;
        Ok(TraceEmbedding {
            report_id: report_id.to_string(),
            vector: tape.value(v).to_f32_data(),
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        self.encoder.parameters()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.encoder.parameters_mut()
    }

    pub fn to_weights(&self) -> WeightsFile {
        let hp = serde_json::json!({
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "vocab_size": self.encoder.vocab_size(),
        });
        WeightsFile::from_params(EMBEDDER_MODEL_KIND, hp, self.parameters())
    }

    pub fn from_weights(file: &WeightsFile) -> Result<EmbedderModel<T>> {
        if file.model_kind != EMBEDDER_MODEL_KIND {
            return Err(Error::Model(format!(
                "weight file holds a {:?} model, expected {EMBEDDER_MODEL_KIND:?}",
                file.model_kind
            )));
        }
        let config: EmbedderConfig =
            serde_json::from_value(file.hyperparameters.get("config").cloned().ok_or_else(
                || Error::Model("weight file header missing config".into()),
            )?)?;
        let vocab_size = file
            .hyperparameters
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Model("weight file header missing vocab_size".into()))?
            as usize;
        let mut model = EmbedderModel::new(config, vocab_size);
        file.load_into(model.parameters_mut())?;
        Ok(model)
    }
}

/// Parallel anchor/positive lists; pair i shares a category, and no two
/// pairs in a batch share one, so every off-pair trace is a true negative.
pub struct TrainPairBatch<'a> {
    pub anchors: Vec<&'a TokenizedTrace>,
    pub positives: Vec<&'a TokenizedTrace>,
}

impl<'a> TrainPairBatch<'a> {
    pub fn new(
        anchors: Vec<&'a TokenizedTrace>,
        positives: Vec<&'a TokenizedTrace>,
    ) -> Result<TrainPairBatch<'a>> {
        if anchors.len() != positives.len() {
            return Err(Error::Model("anchor/positive lists differ in length".into()));
        }
        if anchors.len() < 2 {
            return Err(Error::Model(format!(
                "contrastive batch needs at least 2 pairs, got {}",
                anchors.len()
            )));
        }
        Ok(TrainPairBatch { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Builds the contrastive loss graph for one batch: embeddings are
/// L2-normalized, the similarity matrix has anchor-positive scores on its
/// diagonal, and the loss is averaged over anchors.
pub fn info_nce_loss<T: Element>(
    tape: &mut Tape<T>,
    encoder: &TraceEncoder<T>,
    batch: &TrainPairBatch<'_>,
    temperature: f64,
    literal: bool,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Model(format!("temperature must be positive, got {temperature}")));
    }
    let anchor_vecs: Vec<Var> = batch
        .anchors
        .iter()
        .map(|t| encoder.encode(tape, t))
        .collect::<Result<_>>()?;
    let positive_vecs: Vec<Var> = batch
        .positives
        .iter()
        .map(|t| encoder.encode(tape, t))
        .collect::<Result<_>>()?;
    let a = tape.stack_rows(&anchor_vecs);
    let p = tape.stack_rows(&positive_vecs);
    let a = tape.row_l2_normalize(a);
    let p = tape.row_l2_normalize(p);
    let sims = tape.matmul_t(a, p);
    Ok(tape.info_nce(sims, T::from_f64(temperature), literal))
}

/// One sampled training pair: indices into the training slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainPair {
    pub anchor: usize,
    pub positive: usize,
    pub category: String,
}

/// Samples anchor-positive pairs per category.
///
/// Reports with identical content collapse to one representative, so a pair
/// never joins two identical traces. Categories with at most
/// `max_pairs_per_category` possible pairs contribute all of them; larger
/// ones contribute a uniform sample of exactly that many. The global order
/// is shuffled.
pub fn sample_training_pairs(
    train: &[StackTrace],
    max_pairs_per_category: usize,
    seed: u64,
) -> Result<Vec<TrainPair>> {
    if max_pairs_per_category == 0 {
        return Err(Error::Model("max_pairs_per_category must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, report) in train.iter().enumerate() {
        if let Some(cat) = &report.category_id {
            by_category.entry(cat).or_default().push(i);
        }
    }

    let mut pairs = Vec::new();
    for (category, members) in by_category {
        // Distinct-content representatives, in arrival order.
        let mut seen = std::collections::HashSet::new();
        let unique: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&i| seen.insert(train[i].content_hash()))
            .collect();
        let u = unique.len();
        if u < 2 {
            continue;
        }
        let total = u * (u - 1) / 2;
        if total <= max_pairs_per_category {
            for i in 0..u {
                for j in i + 1..u {
                    pairs.push(TrainPair {
                        anchor: unique[i],
                        positive: unique[j],
                        category: category.to_string(),
                    });
                }
            }
        } else {
            // Uniform sample of distinct index pairs by rejection; the pair
            // space is far larger than the cap, so this terminates fast.
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < max_pairs_per_category {
                let a = rng.gen_range(0..u);
                let b = rng.gen_range(0..u);
                if a == b {
                    continue;
                }
                let key = (a.min(b), a.max(b));
                chosen.insert(key);
            }
            for (a, b) in chosen {
                pairs.push(TrainPair {
                    anchor: unique[a],
                    positive: unique[b],
                    category: category.to_string(),
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(
            "no category has two distinct-content reports; cannot sample training pairs".into(),
        ));
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Greedily packs pairs into batches with unique categories per batch.
/// Returns batches of index ranges into a reordered pair list.
pub(crate) fn pack_batches(pairs: &[TrainPair], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut pending: Vec<usize> = (0..pairs.len()).collect();
    while !pending.is_empty() {
        let mut batch: Vec<usize> = Vec::new();
        let mut cats: std::collections::HashSet<&str> = std::collections::HashSet::new();
        let mut leftover = Vec::new();
        for idx in pending {
            if batch.len() < batch_size && cats.insert(pairs[idx].category.as_str()) {
                batch.push(idx);
            } else {
                leftover.push(idx);
            }
        }
        if batch.len() >= 2 {
            batches.push(batch);
        }
        // A single leftover pair cannot form a contrastive batch; drop it.
        if leftover.len() < 2 {
            break;
        }
        pending = leftover;
    }
    batches
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Mean reciprocal rank on the validation retrieval task, per epoch.
    pub validation_mrr: Vec<Option<f64>>,
    pub epoch_loss: Vec<f64>,
}

/// Validation retrieval task: embed all train reports, then for every
/// validation report whose category exists in train, rank categories by max
/// member similarity and take the reciprocal rank of the true category.
/// Returns None when no validation report is eligible.
pub fn validation_mrr<T: Element>(
    model: &EmbedderModel<T>,
    train_tok: &[(String, TokenizedTrace)],
    train_refs: &[StackTrace],
    val_tok: &[(String, TokenizedTrace)],
    val_refs: &[StackTrace],
) -> Result<Option<f64>> {
    let mut member_vecs: Vec<(usize, Vec<f32>)> = Vec::with_capacity(train_tok.len());
    let mut categories: Vec<&str> = Vec::new();
    let mut cat_index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (report_id, tok)) in train_tok.iter().enumerate() {
        let Some(cat) = train_refs[i].category_id.as_deref() else { continue };
        let emb = model.embed_trace(tok, report_id)?;
        let ci = *cat_index.entry(cat).or_insert_with(|| {
            categories.push(cat);
            categories.len() - 1
        });
        member_vecs.push((ci, emb.vector));
    }
    if member_vecs.is_empty() {
        return Ok(None);
    }

    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (report_id, tok)) in val_tok.iter().enumerate() {
        let Some(true_cat) = val_refs[i].category_id.as_deref() else { continue };
        let Some(&true_ci) = cat_index.get(true_cat) else { continue };
        let q = model.embed_trace(tok, report_id)?;
        let mut best = vec![f64::NEG_INFINITY; categories.len()];
        for (ci, vec) in &member_vecs {
            let s = cosine_similarity(&q.vector, vec)?;
            if s > best[*ci] {
                best[*ci] = s;
            }
        }
        let true_score = best[true_ci];
        let rank = 1 + best.iter().filter(|&&s| s > true_score).count();
        total += 1.0 / rank as f64;
        count += 1;
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(total / count as f64))
}

/// Trains the bi-encoder on the chronological split.
///
/// Epochs iterate shuffled category-unique batches; after each epoch the
/// validation retrieval score decides early stopping, and the weights from
/// the best epoch are restored at the end.
pub fn train_embedder<T: Element>(
    split: &DatasetSplit,
    vocab: &BpeVocab,
    tok_cfg: &TokenizerConfig,
    config: &EmbedderConfig,
) -> Result<(EmbedderModel<T>, TrainReport)> {
    let mut model: EmbedderModel<T> = EmbedderModel::new(config.clone(), vocab.size());
    let mut report = TrainReport {
        epochs_run: 0,
        best_epoch: 0,
        validation_mrr: Vec::new(),
        epoch_loss: Vec::new(),
    };
    if config.max_epochs == 0 {
        return Ok((model, report));
    }

    let pairs = sample_training_pairs(&split.train, config.max_pairs_per_category, config.seed)?;
    let tokenize = |reports: &[StackTrace]| -> Vec<(String, TokenizedTrace)> {
        reports
            .iter()
            .map(|r| {
                (
                    r.report_id.clone(),
                    encode_trace(r, vocab, tok_cfg.max_frames, tok_cfg.max_tokens_per_frame),
                )
            })
            .collect()
    };
    let train_tok = tokenize(&split.train);
    let val_tok = tokenize(&split.validation);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt: Adam<T> = Adam::new(AdamConfig::with_lr(config.lr));
    let mut best: Option<(f64, Vec<(String, Tensor<T>)>)> = None;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let shuffled: Vec<TrainPair> = order.iter().map(|&i| pairs[i].clone()).collect();
        let batches = pack_batches(&shuffled, config.batch_size);

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for batch_idx in &batches {
            let anchors: Vec<&TokenizedTrace> =
                batch_idx.iter().map(|&i| &train_tok[shuffled[i].anchor].1).collect();
            let positives: Vec<&TokenizedTrace> =
                batch_idx.iter().map(|&i| &train_tok[shuffled[i].positive].1).collect();
            let batch = TrainPairBatch::new(anchors, positives)?;

            let mut tape = Tape::new();
            let loss = info_nce_loss(
                &mut tape,
                &model.encoder,
                &batch,
                config.temperature,
                config.infonce_literal,
            )?;
            loss_sum += tape.value(loss).item().into_f64();
            loss_count += 1;
            let grads = tape.backward(loss);
            grads.accumulate_into(model.parameters_mut());
            opt.step(model.parameters_mut());
        }
        report.epoch_loss.push(if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 });
        report.epochs_run = epoch;

        let mrr = validation_mrr(&model, &train_tok, &split.train, &val_tok, &split.validation)?;
        report.validation_mrr.push(mrr);
        match (mrr, &best) {
            (Some(m), Some((bm, _))) if m <= *bm => {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
            (Some(m), _) => {
                let snapshot = model
                    .parameters()
                    .iter()
                    .map(|p| (p.name.clone(), p.value.clone()))
                    .collect();
                best = Some((m, snapshot));
                report.best_epoch = epoch;
                since_best = 0;
            }
            (None, _) => {}
        }
    }

    if let Some((_, snapshot)) = best {
        let by_name: BTreeMap<String, Tensor<T>> = snapshot.into_iter().collect();
        for p in model.parameters_mut() {
            if let Some(v) = by_name.get(&p.name) {
                p.value = v.clone();
            }
            p.zero_grad();
        }
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;
    use crate::trace::chronological_split;

    fn tiny_vocab() -> BpeVocab {
        let corpus: Vec<StackTrace> = (0..4)
            .map(|i| {
                StackTrace::new(
                    format!("r{i}"),
                    i,
                    vec!["com.example.Foo.bar".into(), "com.example.Baz.qux".into()],
                    None,
                )
                .unwrap()
            })
            .collect();
        train_bpe(&corpus, 64).unwrap()
    }

    fn tiny_model(aggregation: Aggregation) -> EmbedderModel<f64> {
        let cfg = EmbedderConfig {
            d_tok: 6,
            hidden_dim: 5,
            aggregation,
            seed: 7,
            ..EmbedderConfig::default()
        };
        EmbedderModel::new(cfg, 64)
    }

    fn tok(frames: &[&str], vocab: &BpeVocab) -> TokenizedTrace {
        let t = StackTrace::new(
            "q",
            0,
            frames.iter().map(|s| s.to_string()).collect(),
            None,
        )
        .unwrap();
        encode_trace(&t, vocab, 128, 32)
    }

    #[test]
    fn embedding_widths_by_aggregation() {
        assert_eq!(tiny_model(Aggregation::Avg).embedding_dim(), 10);
        assert_eq!(tiny_model(Aggregation::Max).embedding_dim(), 10);
        assert_eq!(tiny_model(Aggregation::Hidden).embedding_dim(), 10);
        assert_eq!(tiny_model(Aggregation::ConcatAll).embedding_dim(), 30);
    }

    #[test]
    fn zero_weight_model_embeds_to_zero() {
        let mut model = tiny_model(Aggregation::ConcatAll);
        for p in model.parameters_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let emb = model.embed_frame(&[2, 3, 4]).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_inputs_are_errors() {
        let model = tiny_model(Aggregation::Avg);
        assert!(model.embed_frame(&[]).is_err());
        let empty = TokenizedTrace { frames: vec![], frame_keys: vec![] };
        assert!(model.embed_trace(&empty, "q").is_err());
    }

    #[test]
    fn permuting_tokens_changes_frame_embedding() {
        let model = tiny_model(Aggregation::ConcatAll);
        let a = model.embed_frame(&[2, 3, 4, 5]).unwrap();
        let b = model.embed_frame(&[5, 4, 3, 2]).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "permutation produced identical embeddings");
    }

    #[test]
    fn aggregation_identities_on_identical_rows() {
        // All output rows identical => avg == max == that row.
        let mut tape: Tape<f64> = Tape::new();
        let rows = tape.leaf(Tensor::from_vec(&[3, 4], vec![0.3, -1.0, 2.0, 0.5].repeat(3)));
        let avg = tape.row_mean(rows);
        let max = tape.row_max(rows);
        for (got, want) in tape.value(avg).data().iter().zip([0.3, -1.0, 2.0, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(tape.value(max).data(), &[0.3, -1.0, 2.0, 0.5]);
    }

    #[test]
    fn max_aggregation_is_row_permutation_invariant_avg_too() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 3], vec![1.0, 5.0, -2.0, 4.0, 0.0, 7.0]));
        let b = tape.leaf(Tensor::from_vec(&[2, 3], vec![4.0, 0.0, 7.0, 1.0, 5.0, -2.0]));
        let max_a = tape.row_max(a);
        let max_b = tape.row_max(b);
        assert_eq!(tape.value(max_a).data(), tape.value(max_b).data());
        let avg_a = tape.row_mean(a);
        let avg_b = tape.row_mean(b);
        assert_eq!(tape.value(avg_a).data(), tape.value(avg_b).data());
    }

    #[test]
    fn hidden_aggregation_is_order_sensitive() {
        let vocab = tiny_vocab();
        let model = tiny_model(Aggregation::Hidden);
        let t1 = tok(&["com.example.Foo.bar", "com.example.Baz.qux"], &vocab);
        let t2 = tok(&["com.example.Baz.qux", "com.example.Foo.bar"], &vocab);
        let e1 = model.embed_trace(&t1, "a").unwrap();
        let e2 = model.embed_trace(&t2, "b").unwrap();
        assert_ne!(e1.vector, e2.vector);
    }

    #[test]
    fn similarity_identities() {
        let x = TraceEmbedding { report_id: "a".into(), vector: vec![0.6, 0.8, 0.0] };
        let neg = TraceEmbedding { report_id: "b".into(), vector: vec![-0.6, -0.8, 0.0] };
        let ortho = TraceEmbedding { report_id: "c".into(), vector: vec![0.0, 0.0, 1.0] };
        assert!((similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(similarity(&x, &ortho).unwrap().abs() < 1e-12);
        let zero = TraceEmbedding { report_id: "z".into(), vector: vec![0.0, 0.0, 0.0] };
        assert!(similarity(&x, &zero).is_err());
    }

    #[test]
    fn info_nce_graph_matches_scalar_oracle() {
        let vocab = tiny_vocab();
        let model = tiny_model(Aggregation::ConcatAll);
        let traces: Vec<TokenizedTrace> = vec![
            tok(&["com.example.Foo.bar"], &vocab),
            tok(&["com.example.Baz.qux"], &vocab),
            tok(&["com.example.Foo.bar", "com.example.Baz.qux"], &vocab),
            tok(&["com.example.Baz.qux", "com.example.Foo.bar"], &vocab),
            tok(&["com.example.Foo.bar", "com.example.Foo.bar"], &vocab),
            tok(&["com.example.Baz.qux", "com.example.Baz.qux"], &vocab),
        ];
        let batch =
            TrainPairBatch::new(vec![&traces[0], &traces[1], &traces[2]], vec![&traces[3], &traces[4], &traces[5]])
                .unwrap();
        let tau = 0.07;

        let mut tape = Tape::new();
        let loss = info_nce_loss(&mut tape, &model.encoder, &batch, tau, false).unwrap();
        let graph_loss = tape.value(loss).item();

        // Independent scalar recomputation from detached embeddings.
        let embed = |t: &TokenizedTrace, id: &str| model.embed_trace(t, id).unwrap().vector;
        let anchors: Vec<Vec<f32>> = batch.anchors.iter().enumerate().map(|(i, t)| embed(t, &format!("a{i}"))).collect();
        let positives: Vec<Vec<f32>> = batch.positives.iter().enumerate().map(|(i, t)| embed(t, &format!("p{i}"))).collect();
        let n = anchors.len();
        let mut expect = 0.0f64;
        for i in 0..n {
            let mut denom = 0.0f64;
            for j in 0..n {
                let s = cosine_similarity(&anchors[i], &positives[j]).unwrap();
                denom += (s / tau).exp();
            }
            let sp = cosine_similarity(&anchors[i], &positives[i]).unwrap();
            expect += -( (sp / tau).exp() / denom ).ln();
        }
        expect /= n as f64;
        assert!(
            (graph_loss - expect).abs() < 1e-5,
            "graph {graph_loss} vs oracle {expect}"
        );
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let vocab = tiny_vocab();
        let t = tok(&["com.example.Foo.bar"], &vocab);
        assert!(TrainPairBatch::new(vec![&t], vec![&t]).is_err());
    }

    fn labeled(id: &str, ts: i64, frames: &[&str], cat: &str) -> StackTrace {
        StackTrace::new(
            id,
            ts,
            frames.iter().map(|s| s.to_string()).collect(),
            Some(cat.to_string()),
        )
        .unwrap()
    }

    #[test]
    fn pair_sampling_respects_cap_and_content() {
        // 3 unique reports, cap 10 -> all 3 pairs.
        let train = vec![
            labeled("r1", 1, &["a.b"], "g1"),
            labeled("r2", 2, &["c.d"], "g1"),
            labeled("r3", 3, &["e.f"], "g1"),
        ];
        let pairs = sample_training_pairs(&train, 10, 1).unwrap();
        assert_eq!(pairs.len(), 3);

        // identical-content duplicates never pair together
        let train = vec![
            labeled("r1", 1, &["a.b"], "g1"),
            labeled("r2", 2, &["a.b"], "g1"),
            labeled("r3", 3, &["x.y"], "g1"),
        ];
        let pairs = sample_training_pairs(&train, 10, 1).unwrap();
        assert_eq!(pairs.len(), 1, "duplicates collapse to one representative");
        for p in &pairs {
            assert_ne!(
                train[p.anchor].content_hash(),
                train[p.positive].content_hash()
            );
        }
    }

    #[test]
    fn pair_sampling_caps_large_categories() {
        let mut train = Vec::new();
        for i in 0..30 {
            train.push(labeled(&format!("r{i:02}"), i, &[&format!("f{i}.m{i}")], "g1"));
        }
        let pairs = sample_training_pairs(&train, 50, 9).unwrap();
        assert_eq!(pairs.len(), 50, "C(30,2)=435 capped to 50");
        assert!(pairs.iter().all(|p| p.category == "g1"));
        // Deterministic given the seed.
        let again = sample_training_pairs(&train, 50, 9).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn pair_sampling_needs_an_eligible_category() {
        let train = vec![labeled("r1", 1, &["a.b"], "g1"), labeled("r2", 2, &["a.b"], "g1")];
        assert!(sample_training_pairs(&train, 10, 1).is_err());
    }

    #[test]
    fn batches_never_repeat_a_category() {
        let pairs: Vec<TrainPair> = (0..20)
            .map(|i| TrainPair { anchor: i, positive: i, category: format!("g{}", i % 5) })
            .collect();
        for batch in pack_batches(&pairs, 8) {
            let mut seen = std::collections::HashSet::new();
            for idx in batch {
                assert!(seen.insert(pairs[idx].category.clone()));
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let vocab = tiny_vocab();
        let reports: Vec<StackTrace> = (0..10)
            .map(|i| {
                labeled(
                    &format!("r{i}"),
                    i,
                    &["com.example.Foo.bar", "com.example.Baz.qux"],
                    if i % 2 == 0 { "g1" } else { "g2" },
                )
            })
            .collect();
        let split = chronological_split(&reports, crate::trace::DEFAULT_SPLIT_RATIOS).unwrap();
        let cfg = EmbedderConfig {
            d_tok: 4,
            hidden_dim: 3,
            max_epochs: 0,
            seed: 11,
            ..EmbedderConfig::default()
        };
        let (trained, report) = train_embedder::<f64>(&split, &vocab, &TokenizerConfig::default(), &cfg).unwrap();
        assert_eq!(report.epochs_run, 0);
        let fresh: EmbedderModel<f64> = EmbedderModel::new(cfg, vocab.size());
        for (a, b) in trained.parameters().iter().zip(fresh.parameters()) {
            assert_eq!(a.value, b.value, "parameter {} changed", a.name);
        }
    }

    #[test]
    fn weights_roundtrip_preserves_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let vocab = tiny_vocab();
        let cfg = EmbedderConfig { d_tok: 6, hidden_dim: 5, seed: 3, ..EmbedderConfig::default() };
        let model: EmbedderModel<f32> = EmbedderModel::new(cfg, vocab.size());
        model.to_weights().save(&path).unwrap();
        let back = EmbedderModel::<f32>::from_weights(&WeightsFile::load(&path).unwrap()).unwrap();
        let t = tok(&["com.example.Foo.bar", "com.example.Baz.qux"], &vocab);
        assert_eq!(
            model.embed_trace(&t, "q").unwrap().vector,
            back.embed_trace(&t, "q").unwrap().vector
        );
    }
}
