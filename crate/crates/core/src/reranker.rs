//! Cross-encoder that rescores retrieval candidates.
//!
//! A separate model from the bi-encoder, with its own token table and
//! biLSTMs. Before the trace-level pass, frames present in both traces get a
//! learned significance vector added to their embeddings; the two resulting
//! trace vectors are concatenated and scored by an MLP. Training minimizes a
//! pairwise binary cross-entropy over (anchor, positive, negative) triplets.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{sample_training_pairs, Aggregation, TraceEncoder};
use crate::nn::{Adam, AdamConfig, Element, Mlp, Parameter, Tape, Tensor, Var, WeightsFile};
use crate::tokenizer::{encode_trace, BpeVocab, TokenizedTrace, TokenizerConfig};
use crate::trace::{DatasetSplit, StackTrace};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerConfig {
    pub d_tok: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: Vec<usize>,
    /// Triplets per optimizer step (gradients are averaged).
    pub batch_size: usize,
    pub max_pairs_per_category: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        RerankerConfig {
            d_tok: 100,
            hidden_dim: 100,
            mlp_hidden: vec![256, 64],
            batch_size: 32,
            max_pairs_per_category: 100,
            lr: 1e-3,
            patience: 3,
            max_epochs: 20,
            seed: 43,
        }
    }
}

pub const RERANKER_MODEL_KIND: &str = "reranker";

/// Cross-encoder weights. Both encoder levels aggregate with
/// [avg | max | hidden]; the significance vector matches the frame-vector
/// width and starts at zero so marking is a no-op until trained.
#[derive(Debug, Clone)]
pub struct RerankerModel<T: Element> {
    pub encoder: TraceEncoder<T>,
    pub significance: Parameter<T>,
    pub mlp: Mlp<T>,
    pub config: RerankerConfig,
}

impl<T: Element> RerankerModel<T> {
    pub fn new(config: RerankerConfig, vocab_size: usize) -> RerankerModel<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = TraceEncoder::new(
            "reranker",
            vocab_size,
            config.d_tok,
            config.hidden_dim,
            Aggregation::ConcatAll,
            &mut rng,
        );
        let significance = Parameter::new(
            "reranker.significance".to_string(),
            Tensor::zeros(&[encoder.frame_width()]),
        );
        let mut sizes = vec![2 * encoder.embedding_width()];
        sizes.extend_from_slice(&config.mlp_hidden);
        sizes.push(1);
        let mlp = Mlp::new("reranker.mlp", &sizes, &mut rng);
        RerankerModel { encoder, significance, mlp, config }
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut ps = self.encoder.parameters();
        ps.push(&self.significance);
        ps.extend(self.mlp.parameters());
        ps
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut ps = self.encoder.parameters_mut();
        ps.push(&mut self.significance);
        ps.extend(self.mlp.parameters_mut());
        ps
    }

    /// Encodes one side of the pair with significance marking applied.
    fn encode_marked(
        &self,
        tape: &mut Tape<T>,
        trace: &TokenizedTrace,
        flags: &[bool],
    ) -> Result<Var> {
        let frames = self.encoder.frame_vectors(tape, trace)?;
        let mut rows = tape.stack_rows(&frames);
        let flagged: Vec<usize> =
            flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
        if !flagged.is_empty() {
            let v = tape.param(&self.significance);
            rows = tape.add_to_rows(rows, v, &flagged);
        }
        self.encoder.encode_rows(tape, rows)
    }

    /// Builds the scoring graph for a pair; output is a scalar logit.
    pub fn score_pair_graph(
        &self,
        tape: &mut Tape<T>,
        q: &TokenizedTrace,
        k: &TokenizedTrace,
    ) -> Result<Var> {
        let (flags_q, flags_k) = mark_shared_frames(q, k);
        let eq = self.encode_marked(tape, q, &flags_q)?;
        let ek = self.encode_marked(tape, k, &flags_k)?;
        let joint = tape.concat_vecs(&[eq, ek]);
        let out = self.mlp.forward(tape, joint);
        Ok(tape.sum(out))
    }

    /// Inference-only score on a throwaway tape.
    pub fn score_pair(&self, q: &TokenizedTrace, k: &TokenizedTrace) -> Result<f64> {
        let mut tape = Tape::new();
        let s = self.score_pair_graph(&mut tape, q, k)?;
        Ok(tape.value(s).item().into_f64())
    }

    pub fn to_weights(&self) -> WeightsFile {
        let hp = serde_json::json!({
            "config": serde_json::to_value(&self.config).expect("config serializes"),
            "vocab_size": self.encoder.vocab_size(),
        });
        WeightsFile::from_params(RERANKER_MODEL_KIND, hp, self.parameters())
    }

    pub fn from_weights(file: &WeightsFile) -> Result<RerankerModel<T>> {
        if file.model_kind != RERANKER_MODEL_KIND {
            return Err(Error::Model(format!(
                "weight file holds a {:?} model, expected {RERANKER_MODEL_KIND:?}",
                file.model_kind
            )));
        }
        let config: RerankerConfig =
            serde_json::from_value(file.hyperparameters.get("config").cloned().ok_or_else(
                || Error::Model("weight file header missing config".into()),
            )?)?;
        let vocab_size = file
            .hyperparameters
            .get("vocab_size")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Model("weight file header missing vocab_size".into()))?
            as usize;
        let mut model = RerankerModel::new(config, vocab_size);
        file.load_into(model.parameters_mut())?;
        Ok(model)
    }
}

/// Flags, for each side, the frames whose normalized string also occurs
/// anywhere on the other side. Every occurrence is flagged.
pub fn mark_shared_frames(q: &TokenizedTrace, k: &TokenizedTrace) -> (Vec<bool>, Vec<bool>) {
    let q_keys: HashSet<&str> = q.frame_keys.iter().map(String::as_str).collect();
    let k_keys: HashSet<&str> = k.frame_keys.iter().map(String::as_str).collect();
    let flags_q = q.frame_keys.iter().map(|f| k_keys.contains(f.as_str())).collect();
    let flags_k = k.frame_keys.iter().map(|f| q_keys.contains(f.as_str())).collect();
    (flags_q, flags_k)
}

/// Indices into the training slice; anchor and positive share a category,
/// the negative comes from a different one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub category: String,
}

/// Extends sampled positive pairs with one random report from a random
/// other category each.
pub fn sample_triplets(
    train: &[StackTrace],
    max_pairs_per_category: usize,
    seed: u64,
) -> Result<Vec<TrainTriplet>> {
    let pairs = sample_training_pairs(train, max_pairs_per_category, seed)?;
    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, report) in train.iter().enumerate() {
        if let Some(cat) = &report.category_id {
            by_category.entry(cat).or_default().push(i);
        }
    }
    if by_category.len() < 2 {
        return Err(Error::Dataset(
            "triplet sampling needs at least two categories in train".into(),
        ));
    }
    let categories: Vec<&str> = by_category.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7157));
    let mut triplets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let other = loop {
            let c = categories[rng.gen_range(0..categories.len())];
            if c != pair.category {
                break c;
            }
        };
        let members = &by_category[other];
        let negative = members[rng.gen_range(0..members.len())];
        triplets.push(TrainTriplet {
            anchor: pair.anchor,
            positive: pair.positive,
            negative,
            category: pair.category,
        });
    }
    Ok(triplets)
}

/// Pairwise BCE on the two scored pairs of a triplet:
/// softplus(-score(anchor, positive)) + softplus(score(anchor, negative)).
pub fn bce_triplet_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &RerankerModel<T>,
    anchor: &TokenizedTrace,
    positive: &TokenizedTrace,
    negative: &TokenizedTrace,
) -> Result<Var> {
    let s_p = model.score_pair_graph(tape, anchor, positive)?;
    let s_n = model.score_pair_graph(tape, anchor, negative)?;
    Ok(tape.bce_pair(s_p, s_n))
}

/// Rescores retrieval candidates; ties keep the incoming candidate order.
pub fn rerank<T: Element>(
    model: &RerankerModel<T>,
    q: &TokenizedTrace,
    candidates: &[(String, &TokenizedTrace)],
) -> Result<Vec<(String, f64)>> {
    if candidates.is_empty() {
        return Err(Error::Model("rerank needs at least one candidate".into()));
    }
    let mut scored: Vec<(String, f64)> = candidates
        .iter()
        .map(|(id, k)| Ok((id.clone(), model.score_pair(q, k)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("scores are never NaN"));
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    /// Attach to the category of this top-ranked report.
    Attach { report_id: String, score: f64 },
    NewCategory,
}

/// Attach iff the top score strictly exceeds the threshold.
pub fn decide(ranked: &[(String, f64)], threshold: f64) -> Decision {
    match ranked.first() {
        Some((id, score)) if *score > threshold => {
            Decision::Attach { report_id: id.clone(), score: *score }
        }
        _ => Decision::NewCategory,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RerankTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub epoch_loss: Vec<f64>,
    pub validation_loss: Vec<Option<f64>>,
}

fn mean_triplet_loss<T: Element>(
    model: &RerankerModel<T>,
    triplets: &[TrainTriplet],
    tokenized: &[TokenizedTrace],
) -> Result<f64> {
    let mut sum = 0.0f64;
    for t in triplets {
        let mut tape = Tape::new();
        let loss = bce_triplet_loss(
            &mut tape,
            model,
            &tokenized[t.anchor],
            &tokenized[t.positive],
            &tokenized[t.negative],
        )?;
        sum += tape.value(loss).item().into_f64();
    }
    Ok(sum / triplets.len() as f64)
}

/// Trains the cross-encoder on sampled triplets with averaged-gradient
/// steps. Early stopping watches mean triplet loss on validation-sampled
/// triplets when the validation split supports them; the best-epoch weights
/// are restored at the end.
pub fn train_reranker<T: Element>(
    split: &DatasetSplit,
    vocab: &BpeVocab,
    tok_cfg: &TokenizerConfig,
    config: &RerankerConfig,
) -> Result<(RerankerModel<T>, RerankTrainReport)> {
    let mut model: RerankerModel<T> = RerankerModel::new(config.clone(), vocab.size());
    let mut report = RerankTrainReport {
        epochs_run: 0,
        best_epoch: 0,
        epoch_loss: Vec::new(),
        validation_loss: Vec::new(),
    };
    if config.max_epochs == 0 {
        return Ok((model, report));
    }

    let mut triplets = sample_triplets(&split.train, config.max_pairs_per_category, config.seed)?;
    let tokenize = |reports: &[StackTrace]| -> Vec<TokenizedTrace> {
        reports
            .iter()
            .map(|r| encode_trace(r, vocab, tok_cfg.max_frames, tok_cfg.max_tokens_per_frame))
            .collect()
    };
    let train_tok = tokenize(&split.train);
    let val_tok = tokenize(&split.validation);
    let val_triplets = sample_triplets(
        &split.validation,
        config.max_pairs_per_category,
        config.seed.wrapping_add(1),
    )
    .ok();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut opt: Adam<T> = Adam::new(AdamConfig::with_lr(config.lr));
    let mut best: Option<(f64, Vec<(String, Tensor<T>)>)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        triplets.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in triplets.chunks(config.batch_size.max(1)) {
            for t in chunk {
                let mut tape = Tape::new();
                let loss = bce_triplet_loss(
                    &mut tape,
                    &model,
                    &train_tok[t.anchor],
                    &train_tok[t.positive],
                    &train_tok[t.negative],
                )?;
                loss_sum += tape.value(loss).item().into_f64();
                let grads = tape.backward(loss);
                grads.accumulate_into(model.parameters_mut());
            }
            let inv = T::from_f64(1.0 / chunk.len() as f64);
            for p in model.parameters_mut() {
                for g in p.grad.data_mut() {
                    *g *= inv;
                }
            }
            opt.step(model.parameters_mut());
        }
        report.epoch_loss.push(loss_sum / triplets.len() as f64);
        report.epochs_run = epoch;

        let val_loss = match &val_triplets {
            Some(vt) => Some(mean_triplet_loss(&model, vt, &val_tok)?),
            None => None,
        };
        report.validation_loss.push(val_loss);
        match (val_loss, &best) {
            (Some(v), Some((bv, _))) if v >= *bv => {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
            (Some(v), _) => {
                let snapshot = model
                    .parameters()
                    .iter()
                    .map(|p| (p.name.clone(), p.value.clone()))
                    .collect();
                best = Some((v, snapshot));
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

    fn toks(frames: &[(&str, &[u32])]) -> TokenizedTrace {
        TokenizedTrace {
            frames: frames.iter().map(|(_, t)| t.to_vec()).collect(),
            frame_keys: frames.iter().map(|(k, _)| k.to_string()).collect(),
        }
    }

    fn tiny_model() -> RerankerModel<f64> {
        let cfg = RerankerConfig {
            d_tok: 4,
            hidden_dim: 3,
            mlp_hidden: vec![5],
            seed: 17,
            ..RerankerConfig::default()
        };
        RerankerModel::new(cfg, 32)
    }

    #[test]
    fn shared_frame_marking_examples() {
        let q = toks(&[("a", &[1]), ("b", &[2])]);
        let k = toks(&[("b", &[2]), ("c", &[3])]);
        assert_eq!(mark_shared_frames(&q, &k), (vec![false, true], vec![true, false]));

        let (fq, fk) = mark_shared_frames(&q, &q);
        assert!(fq.iter().all(|&f| f) && fk.iter().all(|&f| f));

        let disjoint = toks(&[("x", &[4]), ("y", &[5])]);
        let (fq, fk) = mark_shared_frames(&q, &disjoint);
        assert!(fq.iter().all(|&f| !f) && fk.iter().all(|&f| !f));
    }

    #[test]
    fn repeated_shared_frames_flag_every_occurrence() {
        let q = toks(&[("a", &[1]), ("a", &[1]), ("b", &[2])]);
        let k = toks(&[("a", &[1])]);
        let (fq, fk) = mark_shared_frames(&q, &k);
        assert_eq!(fq, vec![true, true, false]);
        assert_eq!(fk, vec![true]);
    }

    #[test]
    fn zero_significance_makes_marking_a_no_op() {
        let model = tiny_model();
        assert!(model.significance.value.data().iter().all(|&v| v == 0.0));
        let q = toks(&[("a.b", &[2, 3])]);
        // Same token content, different frame keys: k1 shares a frame with
        // q, k2 shares none, embeddings identical.
        let k1 = toks(&[("a.b", &[2, 3]), ("c.d", &[4])]);
        let k2 = toks(&[("x.y", &[2, 3]), ("c.d", &[4])]);
        let s1 = model.score_pair(&q, &k1).unwrap();
        let s2 = model.score_pair(&q, &k2).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn nonzero_significance_distinguishes_shared_frames() {
        let mut model = tiny_model();
        for v in model.significance.value.data_mut() {
            *v = 0.5;
        }
        let q = toks(&[("a.b", &[2, 3])]);
        let k1 = toks(&[("a.b", &[2, 3]), ("c.d", &[4])]);
        let k2 = toks(&[("x.y", &[2, 3]), ("c.d", &[4])]);
        let s1 = model.score_pair(&q, &k1).unwrap();
        let s2 = model.score_pair(&q, &k2).unwrap();
        assert_ne!(s1, s2);
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = tiny_model();
        let q = toks(&[("a", &[2, 5]), ("b", &[7])]);
        let k = toks(&[("b", &[7]), ("c", &[9, 9])]);
        assert_eq!(model.score_pair(&q, &k).unwrap(), model.score_pair(&q, &k).unwrap());
    }

    #[test]
    fn triplet_loss_closed_form_at_zero_scores() {
        let mut model = tiny_model();
        // Zero the MLP so every score is exactly 0.
        for p in model.mlp.parameters_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let a = toks(&[("a", &[2])]);
        let p = toks(&[("b", &[3])]);
        let n = toks(&[("c", &[4])]);
        let mut tape = Tape::new();
        let loss = bce_triplet_loss(&mut tape, &model, &a, &p, &n).unwrap();
        let got = tape.value(loss).item();
        assert!((got - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn triplet_loss_matches_scalar_recomputation() {
        let model = tiny_model();
        let a = toks(&[("a", &[2, 5]), ("b", &[7])]);
        let p = toks(&[("b", &[7]), ("d", &[11])]);
        let n = toks(&[("e", &[13]), ("f", &[1, 8])]);
        let mut tape = Tape::new();
        let loss = bce_triplet_loss(&mut tape, &model, &a, &p, &n).unwrap();
        let graph = tape.value(loss).item();

        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let s_p = model.score_pair(&a, &p).unwrap();
        let s_n = model.score_pair(&a, &n).unwrap();
        let oracle = softplus(-s_p) + softplus(s_n);
        assert!((graph - oracle).abs() < 1e-9, "graph {graph} vs oracle {oracle}");
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
    fn triplet_sampling_invariants() {
        let train = vec![
            labeled("r1", 1, &["a.b"], "g1"),
            labeled("r2", 2, &["c.d"], "g1"),
            labeled("r3", 3, &["e.f"], "g2"),
            labeled("r4", 4, &["g.h"], "g2"),
        ];
        let triplets = sample_triplets(&train, 10, 3).unwrap();
        assert!(!triplets.is_empty());
        for t in &triplets {
            assert_eq!(train[t.anchor].category_id, train[t.positive].category_id);
            assert_ne!(train[t.anchor].category_id, train[t.negative].category_id);
        }
        // Two categories: every negative is forced into the other one.
        for t in &triplets {
            let anchor_cat = train[t.anchor].category_id.as_deref().unwrap();
            let neg_cat = train[t.negative].category_id.as_deref().unwrap();
            assert_eq!(neg_cat, if anchor_cat == "g1" { "g2" } else { "g1" });
        }
        assert_eq!(triplets, sample_triplets(&train, 10, 3).unwrap(), "seeded determinism");
    }

    #[test]
    fn triplet_sampling_requires_two_categories() {
        let train = vec![labeled("r1", 1, &["a.b"], "g1"), labeled("r2", 2, &["c.d"], "g1")];
        assert!(sample_triplets(&train, 10, 3).is_err());
    }

    #[test]
    fn rerank_orders_scores_and_preserves_ties() {
        let mut model = tiny_model();
        let q = toks(&[("a", &[2])]);
        let k1 = toks(&[("b", &[3])]);
        let k2 = toks(&[("c", &[4])]);
        let out = rerank(&model, &q, &[("k1".into(), &k1), ("k2".into(), &k2)]).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].1 >= out[1].1);
        let mut ids: Vec<&str> = out.iter().map(|(id, _)| id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, vec!["k1", "k2"]);

        // All-zero weights give identical scores; incoming order is kept.
        for p in model.parameters_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let out = rerank(&model, &q, &[("k2".into(), &k2), ("k1".into(), &k1)]).unwrap();
        assert_eq!(out[0].0, "k2");
        assert_eq!(out[1].0, "k1");

        assert!(rerank(&model, &q, &[]).is_err());
    }

    #[test]
    fn decision_thresholding_is_strict() {
        let ranked = vec![("r1".to_string(), 0.9), ("r2".to_string(), 0.1)];
        assert_eq!(
            decide(&ranked, 0.5),
            Decision::Attach { report_id: "r1".into(), score: 0.9 }
        );
        assert_eq!(decide(&[("r1".to_string(), 0.4)], 0.5), Decision::NewCategory);
        assert_eq!(decide(&[("r1".to_string(), 0.5)], 0.5), Decision::NewCategory);
    }

    fn crossed_dataset() -> Vec<StackTrace> {
        // Two well-separated categories, several distinct members each.
        let mut reports = Vec::new();
        for i in 0..6 {
            reports.push(labeled(
                &format!("a{i}"),
                i,
                &[&format!("alpha.load{i}"), "alpha.core", "alpha.main"],
                "g-alpha",
            ));
            reports.push(labeled(
                &format!("b{i}"),
                100 + i,
                &[&format!("beta.save{i}"), "beta.util", "beta.main"],
                "g-beta",
            ));
        }
        reports
    }

    #[test]
    fn training_reduces_triplet_loss_in_first_epoch() {
        let reports = crossed_dataset();
        let vocab = crate::tokenizer::train_bpe(&reports, 80).unwrap();
        let split = DatasetSplit {
            train: reports.clone(),
            validation: vec![],
            test: vec![],
            boundaries: (0, 0),
        };
        let cfg = RerankerConfig {
            d_tok: 4,
            hidden_dim: 3,
            mlp_hidden: vec![5],
            max_pairs_per_category: 10,
            max_epochs: 1,
            lr: 5e-3,
            seed: 19,
            ..RerankerConfig::default()
        };
        let tok_cfg = TokenizerConfig::default();

        let initial: RerankerModel<f64> = RerankerModel::new(cfg.clone(), vocab.size());
        let triplets = sample_triplets(&reports, cfg.max_pairs_per_category, cfg.seed).unwrap();
        let tokenized: Vec<TokenizedTrace> = reports
            .iter()
            .map(|r| encode_trace(r, &vocab, tok_cfg.max_frames, tok_cfg.max_tokens_per_frame))
            .collect();
        let before = mean_triplet_loss(&initial, &triplets, &tokenized).unwrap();

        let (trained, report) = train_reranker::<f64>(&split, &vocab, &tok_cfg, &cfg).unwrap();
        assert_eq!(report.epochs_run, 1);
        let after = mean_triplet_loss(&trained, &triplets, &tokenized).unwrap();
        assert!(after < before, "loss did not decrease: {before} -> {after}");
        assert!(after >= 0.0);
    }

    #[test]
    fn trained_model_separates_positives_from_negatives() {
        let reports = crossed_dataset();
        let vocab = crate::tokenizer::train_bpe(&reports, 80).unwrap();
        let split = DatasetSplit {
            train: reports.clone(),
            validation: vec![],
            test: vec![],
            boundaries: (0, 0),
        };
        let cfg = RerankerConfig {
            d_tok: 6,
            hidden_dim: 4,
            mlp_hidden: vec![8],
            max_pairs_per_category: 15,
            max_epochs: 8,
            lr: 5e-3,
            seed: 23,
            ..RerankerConfig::default()
        };
        let tok_cfg = TokenizerConfig::default();
        let (model, _) = train_reranker::<f64>(&split, &vocab, &tok_cfg, &cfg).unwrap();

        let tokenized: Vec<TokenizedTrace> = reports
            .iter()
            .map(|r| encode_trace(r, &vocab, tok_cfg.max_frames, tok_cfg.max_tokens_per_frame))
            .collect();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for i in 0..reports.len() {
            for j in 0..reports.len() {
                if i == j {
                    continue;
                }
                let s = model.score_pair(&tokenized[i], &tokenized[j]).unwrap();
                if reports[i].category_id == reports[j].category_id {
                    pos.push(s);
                } else {
                    neg.push(s);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&pos) > mean(&neg),
            "positive mean {} not above negative mean {}",
            mean(&pos),
            mean(&neg)
        );
    }

    #[test]
    fn zero_epochs_training_returns_initial_model() {
        let reports = crossed_dataset();
        let vocab = crate::tokenizer::train_bpe(&reports, 80).unwrap();
        let split = DatasetSplit {
            train: reports,
            validation: vec![],
            test: vec![],
            boundaries: (0, 0),
        };
        let cfg = RerankerConfig {
            d_tok: 4,
            hidden_dim: 3,
            mlp_hidden: vec![5],
            max_epochs: 0,
            seed: 29,
            ..RerankerConfig::default()
        };
        let (model, report) =
            train_reranker::<f64>(&split, &vocab, &TokenizerConfig::default(), &cfg).unwrap();
        assert_eq!(report.epochs_run, 0);
        let fresh: RerankerModel<f64> = RerankerModel::new(cfg, vocab.size());
        for (a, b) in model.parameters().iter().zip(fresh.parameters()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn weights_roundtrip_preserves_scores() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rr.bin");
        let cfg = RerankerConfig {
            d_tok: 4,
            hidden_dim: 3,
            mlp_hidden: vec![5],
            seed: 31,
            ..RerankerConfig::default()
        };
        let model: RerankerModel<f32> = RerankerModel::new(cfg, 32);
        model.to_weights().save(&path).unwrap();
        let back = RerankerModel::<f32>::from_weights(&WeightsFile::load(&path).unwrap()).unwrap();
        let q = toks(&[("a", &[2, 5]), ("b", &[7])]);
        let k = toks(&[("b", &[7]), ("c", &[9])]);
        assert_eq!(model.score_pair(&q, &k).unwrap(), back.score_pair(&q, &k).unwrap());
    }
}
