//! Finite-difference validation of every hand-derived backward pass, run in
//! both scalar precisions with their respective tolerances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tracedup_core::embedder::{
    info_nce_loss, Aggregation, EmbedderConfig, EmbedderModel, TrainPairBatch,
};
use tracedup_core::nn::{
    finite_difference_check, sample_coordinates, uniform_tensor, BiLstmLayer, CheckSettings,
    Element, Mlp, Tape, Tensor,
};
use tracedup_core::tokenizer::TokenizedTrace;

fn settings_for<T: Element>() -> CheckSettings {
    match std::mem::size_of::<T>() {
        4 => CheckSettings::for_f32(),
        _ => CheckSettings::for_f64(),
    }
}

/// Checks one scalar-loss graph over a bag of parameters.
fn check_loss<T: Element, M>(
    label: &str,
    model: &mut M,
    params_of: impl FnMut(&mut M) -> Vec<&mut Parameter<T>> + Copy,
    build: impl Fn(&M, &mut Tape<T>) -> tracedup_core::nn::Var,
    per_param: usize,
    seed: u64,
) {
    let mut tape = Tape::new();
    let loss = build(model, &mut tape);
    let grads = tape.backward(loss);

    let coords = {
        let mut pf = params_of;
        let ps = pf(model);
        let refs: Vec<&Parameter<T>> = ps.iter().map(|p| &**p).collect();
        sample_coordinates(&refs, per_param, seed)
    };
    let report = finite_difference_check(
        model,
        params_of,
        |m| {
            let mut t = Tape::new();
            let l = build(m, &mut t);
            t.value(l).item().into_f64()
        },
        &grads,
        &coords,
        settings_for::<T>(),
    );
    assert!(report.passed(), "{label} ({}):\n{report}", T::DTYPE);
}

use tracedup_core::nn::Parameter;

fn random_input<T: Element>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform_tensor(&mut rng, &[rows, cols], 0.8)
}

fn bilstm_checks<T: Element>() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut layer: BiLstmLayer<T> = BiLstmLayer::new("g", 3, 4, &mut rng);
    let input = random_input::<T>(5, 3, 6);

    let outputs_input = input.clone();
    check_loss(
        "bilstm sum(outputs)",
        &mut layer,
        |l: &mut BiLstmLayer<T>| l.parameters_mut(),
        move |l, tape| {
            let x = tape.leaf(outputs_input.clone());
            let out = l.forward(tape, x).unwrap();
            tape.sum(out.outputs)
        },
        6,
        7,
    );
    check_loss(
        "bilstm sum(final_hidden)",
        &mut layer,
        |l: &mut BiLstmLayer<T>| l.parameters_mut(),
        move |l, tape| {
            let x = tape.leaf(input.clone());
            let out = l.forward(tape, x).unwrap();
            tape.sum(out.final_hidden)
        },
        6,
        8,
    );
}

#[test]
fn bilstm_backward_matches_finite_differences_f64() {
    bilstm_checks::<f64>();
}

#[test]
fn bilstm_backward_matches_finite_differences_f32() {
    bilstm_checks::<f32>();
}

fn frame_encoder_checks<T: Element>(aggregation: Aggregation) {
    let cfg = EmbedderConfig {
        d_tok: 4,
        hidden_dim: 3,
        aggregation,
        seed: 21,
        ..EmbedderConfig::default()
    };
    let mut model: EmbedderModel<T> = EmbedderModel::new(cfg, 16);
    let tokens: Vec<u32> = vec![2, 7, 3, 2, 11];
    check_loss(
        &format!("frame encoder [{aggregation}]"),
        &mut model,
        |m: &mut EmbedderModel<T>| m.parameters_mut(),
        move |m, tape| {
            let v = m.encoder.encode_frame(tape, &tokens).unwrap();
            tape.sum(v)
        },
        4,
        22,
    );
}

#[test]
fn frame_encoder_backward_all_aggregations_f64() {
    for agg in [
        Aggregation::Avg,
        Aggregation::Max,
        Aggregation::Hidden,
        Aggregation::ConcatAll,
    ] {
        frame_encoder_checks::<f64>(agg);
    }
}

#[test]
fn frame_encoder_backward_all_aggregations_f32() {
    for agg in [
        Aggregation::Avg,
        Aggregation::Max,
        Aggregation::Hidden,
        Aggregation::ConcatAll,
    ] {
        frame_encoder_checks::<f32>(agg);
    }
}

fn toy_trace(frames: &[&[u32]]) -> TokenizedTrace {
    TokenizedTrace {
        frames: frames.iter().map(|f| f.to_vec()).collect(),
        frame_keys: frames.iter().map(|f| format!("{f:?}")).collect(),
    }
}

fn trace_encoder_check<T: Element>() {
    let cfg = EmbedderConfig {
        d_tok: 4,
        hidden_dim: 3,
        aggregation: Aggregation::ConcatAll,
        seed: 31,
        ..EmbedderConfig::default()
    };
    let mut model: EmbedderModel<T> = EmbedderModel::new(cfg, 16);
    let trace = toy_trace(&[&[2, 5, 9], &[4, 4], &[12, 1, 3, 8]]);
    check_loss(
        "trace encoder",
        &mut model,
        |m: &mut EmbedderModel<T>| m.parameters_mut(),
        move |m, tape| {
            let v = m.encoder.encode(tape, &trace).unwrap();
            tape.sum(v)
        },
        4,
        32,
    );
}

#[test]
fn trace_encoder_backward_f64() {
    trace_encoder_check::<f64>();
}

#[test]
fn trace_encoder_backward_f32() {
    trace_encoder_check::<f32>();
}

fn info_nce_check<T: Element>(literal: bool) {
    let cfg = EmbedderConfig {
        d_tok: 4,
        hidden_dim: 3,
        aggregation: Aggregation::ConcatAll,
        seed: 41,
        ..EmbedderConfig::default()
    };
    let mut model: EmbedderModel<T> = EmbedderModel::new(cfg, 16);
    // Deeper graphs push f32 finite differences into round-off noise, so the
    // f32 variant keeps traces short and the temperature mild; f64 gets the
    // sharper setup.
    let (anchors, positives, tau) = if T::DTYPE == "f32" {
        (
            vec![toy_trace(&[&[2, 5]]), toy_trace(&[&[9, 4]])],
            vec![toy_trace(&[&[2, 5, 5]]), toy_trace(&[&[9]])],
            0.5,
        )
    } else {
        (
            vec![
                toy_trace(&[&[2, 5], &[7, 3, 1]]),
                toy_trace(&[&[9, 4]]),
                toy_trace(&[&[11, 2, 6], &[3]]),
            ],
            vec![
                toy_trace(&[&[2, 5, 5]]),
                toy_trace(&[&[9], &[4, 10]]),
                toy_trace(&[&[11, 6], &[3, 3]]),
            ],
            0.1,
        )
    };
    check_loss(
        if literal { "info-nce (literal)" } else { "info-nce" },
        &mut model,
        |m: &mut EmbedderModel<T>| m.parameters_mut(),
        move |m, tape| {
            let batch = TrainPairBatch::new(anchors.iter().collect(), positives.iter().collect())
                .unwrap();
            info_nce_loss(tape, &m.encoder, &batch, tau, literal).unwrap()
        },
        4,
        42,
    );
}

#[test]
fn info_nce_backward_standard_and_literal_f64() {
    info_nce_check::<f64>(false);
    info_nce_check::<f64>(true);
}

#[test]
fn info_nce_backward_standard_and_literal_f32() {
    info_nce_check::<f32>(false);
    info_nce_check::<f32>(true);
}

fn reranker_triplet_check<T: Element>() {
    use tracedup_core::reranker::{bce_triplet_loss, RerankerConfig, RerankerModel};
    let cfg = RerankerConfig {
        d_tok: 4,
        hidden_dim: 3,
        mlp_hidden: vec![5],
        seed: 61,
        ..RerankerConfig::default()
    };
    let mut model: RerankerModel<T> = RerankerModel::new(cfg, 16);
    // Nonzero significance so the marking path carries gradient.
    for v in model.significance.value.data_mut() {
        *v = T::from_f64(0.3);
    }
    let anchor = TokenizedTrace {
        frames: vec![vec![2, 5], vec![7]],
        frame_keys: vec!["a".into(), "b".into()],
    };
    let positive = TokenizedTrace {
        frames: vec![vec![7], vec![9, 4]],
        frame_keys: vec!["b".into(), "c".into()],
    };
    let negative = TokenizedTrace {
        frames: vec![vec![11, 3]],
        frame_keys: vec!["d".into()],
    };
    check_loss(
        "reranker triplet bce",
        &mut model,
        |m: &mut RerankerModel<T>| m.parameters_mut(),
        move |m, tape| bce_triplet_loss(tape, m, &anchor, &positive, &negative).unwrap(),
        4,
        62,
    );
}

#[test]
fn reranker_triplet_backward_f64() {
    reranker_triplet_check::<f64>();
}

#[test]
fn reranker_triplet_backward_f32() {
    reranker_triplet_check::<f32>();
}

fn mlp_bce_check<T: Element>() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut mlp: Mlp<T> = Mlp::new("m", &[6, 5, 3, 1], &mut rng);
    let xp = uniform_tensor::<T, _>(&mut rng, &[6], 1.0);
    let xn = uniform_tensor::<T, _>(&mut rng, &[6], 1.0);
    check_loss(
        "mlp + pairwise bce",
        &mut mlp,
        |m: &mut Mlp<T>| m.parameters_mut(),
        move |m, tape| {
            let p = tape.leaf(xp.clone());
            let n = tape.leaf(xn.clone());
            let sp = m.forward(tape, p);
            let sn = m.forward(tape, n);
            let sp = tape.sum(sp);
            let sn = tape.sum(sn);
            tape.bce_pair(sp, sn)
        },
        6,
        52,
    );
}

#[test]
fn mlp_bce_backward_f64() {
    mlp_bce_check::<f64>();
}

#[test]
fn mlp_bce_backward_f32() {
    mlp_bce_check::<f32>();
}
