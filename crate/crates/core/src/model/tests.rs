use rand::Rng;

use super::*;
use crate::autograd::{finite_diff_check, FreezeMask, Graph, Tensor};
use crate::params::{names, ParamStore};
use crate::rng::{rng_with_stream, Stream};

fn tokens(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut r = rng_with_stream(seed, Stream::Probe as u64);
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}

/// Adds small seeded noise to every coefficient and aggregator entry so
/// perspectives and selector outputs differ.
fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng_with_stream(seed, 77);
    for (name, t) in store.iter_mut() {
        if !names::is_base(name) {
            for x in t.data_mut() {
                *x += r.random_range(-scale..scale);
            }
        }
    }
}

fn graph_logits(
    store: &ParamStore<f64>,
    config: &ModelConfig,
    toks: &[u32],
) -> (Tensor<f64>, Option<Tensor<f64>>) {
    let mut g = Graph::new();
    let b = store.bind(&mut g, &store.mask_where(|_| false)).unwrap();
    let nodes = sequence_forward(&mut g, &b, config, toks).unwrap();
    (
        g.value(nodes.logits).clone(),
        nodes.weights.map(|w| g.value(w).clone()),
    )
}

#[test]
fn single_perspective_reduces_to_baseline_for_every_aggregator() {
    let base_config = ModelConfig::tiny().base();
    let store: ParamStore<f32> = init_model(&base_config, 5).unwrap();
    let baseline = RwkvModel::from_store(&base_config, &store).unwrap();
    let toks = tokens(0, 16, base_config.vocab);
    let reference = baseline.model_forward(&toks).unwrap();
    for agg in Aggregation::ALL {
        let model =
            PerspectiveModel::from_store(&base_config.with_aggregation(agg), &store).unwrap();
        assert_eq!(model.forward(&toks).unwrap(), reference, "{agg}");
    }
}

#[test]
fn graph_forward_matches_recurrent_inference_bitwise() {
    for agg in Aggregation::ALL {
        let config = ModelConfig::tiny().with_aggregation(agg);
        let mut store: ParamStore<f64> = init_model(&config, 9).unwrap();
        perturb(&mut store, 1, 0.2);
        let toks = tokens(1, 7, config.vocab);
        let model = PerspectiveModel::from_store(&config, &store).unwrap();
        let (logits, weights) = graph_logits(&store, &config, &toks);
        assert_eq!(logits, model.forward(&toks).unwrap(), "{agg}");
        if let Some(w) = weights {
            let mut state = model.new_state();
            for (t, &tok) in toks.iter().enumerate() {
                assert_eq!(
                    model.step(tok, &mut state).unwrap().weights.unwrap(),
                    w.row(t)
                );
            }
        }
    }
}

#[test]
fn identical_perspectives_give_identical_embeddings() {
    let config = ModelConfig::tiny();
    let store: ParamStore<f32> = init_model(&config, 2).unwrap();
    let model = PerspectiveModel::from_store(&config, &store).unwrap();
    let ps = model.multi_forward(&tokens(3, 10, config.vocab)).unwrap();
    for p in &ps[1..] {
        assert_eq!(p, &ps[0]);
    }
}

#[test]
fn single_perspective_embeddings_match_baseline() {
    let config = ModelConfig::tiny().base();
    let store: ParamStore<f32> = init_model(&config, 2).unwrap();
    let toks = tokens(4, 10, config.vocab);
    let p = PerspectiveModel::from_store(&config, &store)
        .unwrap()
        .multi_forward(&toks)
        .unwrap();
    let reference = RwkvModel::from_store(&config, &store)
        .unwrap()
        .embeddings(&toks)
        .unwrap();
    assert_eq!(p[0], reference);
}

#[test]
fn perturbing_one_perspective_changes_only_its_embedding() {
    let config = ModelConfig::tiny();
    let store: ParamStore<f32> = init_model(&config, 2).unwrap();
    let toks = tokens(5, 10, config.vocab);
    let before = PerspectiveModel::from_store(&config, &store)
        .unwrap()
        .multi_forward(&toks)
        .unwrap();
    let mut model = PerspectiveModel::from_store(&config, &store).unwrap();
    for x in model.perspectives.perspective_mut(1)[0]
        .time
        .mix_r
        .iter_mut()
    {
        *x *= 0.5;
    }
    let after = model.multi_forward(&toks).unwrap();
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
}

#[test]
fn init_perspectives_copies_exactly() {
    let config = ModelConfig::tiny().base();
    let store: ParamStore<f32> = init_base(&config, 0).unwrap();
    let base = PerspectiveParams::load(&config, &store).unwrap();
    let one = init_perspectives(base.perspective(0), 1).unwrap();
    assert_eq!(one, base);
    let mut four = init_perspectives(base.perspective(0), 4).unwrap();
    assert!(four.iter().all(|p| p == base.perspective(0)));
    four.perspective_mut(2)[0].time.mix_k[0] = 0.123;
    for i in [0, 1, 3] {
        assert_eq!(four.perspective(i), base.perspective(0));
    }
    assert!(init_perspectives(base.perspective(0), 0).is_err());
}

#[test]
fn resetting_one_state_leaves_the_others() {
    let config = ModelConfig::tiny();
    let store: ParamStore<f32> = init_model(&config, 2).unwrap();
    let model = PerspectiveModel::from_store(&config, &store).unwrap();
    let mut state = model.new_state();
    for t in tokens(6, 4, config.vocab) {
        model.step(t, &mut state).unwrap();
    }
    let snapshot = state.clone();
    state.reset(1);
    assert_eq!(state.stream(0), snapshot.stream(0));
    assert_eq!(state.stream(2), snapshot.stream(2));
    assert_eq!(
        state.stream(1),
        PerspectiveState::<f32>::new(3, 2, 8).stream(1)
    );
}

#[cfg(feature = "parallel")]
#[test]
fn parallel_perspective_step_matches_sequential() {
    let config = ModelConfig::tiny();
    let mut store: ParamStore<f64> = init_model(&config, 2).unwrap();
    perturb(&mut store, 3, 0.1);
    let mut model = PerspectiveModel::from_store(&config, &store).unwrap();
    let toks = tokens(7, 12, config.vocab);
    let sequential = model.forward(&toks).unwrap();
    model.parallel = true;
    assert_eq!(model.forward(&toks).unwrap(), sequential);
}

#[test]
fn perspective_gradients_are_independent() {
    let config = ModelConfig::tiny();
    let mut store: ParamStore<f64> = init_model(&config, 2).unwrap();
    perturb(&mut store, 4, 0.1);
    let toks = tokens(8, 5, config.vocab);
    for i in 0..config.perspectives {
        let mut g = Graph::new();
        let b = store
            .bind(&mut g, &store.mask_where(names::is_temporal))
            .unwrap();
        let nodes = sequence_forward(&mut g, &b, &config, &toks).unwrap();
        let loss = g.sum(nodes.perspectives[i]).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, grad) in &grads {
            let own = name.ends_with(&format!(".{i}"));
            let zero = grad.data().iter().all(|x| *x == 0.0);
            assert_eq!(zero, !own, "{name} for perspective {i}");
        }
    }
}

#[test]
fn tiny_model_passes_finite_difference_check() {
    for agg in Aggregation::ALL {
        let config = ModelConfig::tiny().with_aggregation(agg);
        let store = gradcheck_store(&config, 0).unwrap();
        let toks = gradcheck_context(&config, 0);
        let mask = store.mask_where(|_| true);
        let report = finite_diff_check(
            |g, b| sequence_loss(g, b, &config, &toks),
            &store,
            &mask,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{agg}: {report:?}");
        assert_eq!(report.checked, store.num_elements());
    }
}

/// Across many parameter points every gradient that is large enough to be
/// resolved by a 64-bit central difference agrees to 1e-4, and the rest agree
/// to within the difference quotient's roundoff.
#[test]
fn gradients_agree_across_parameter_points() {
    for agg in Aggregation::ALL {
        for seed in 1..5 {
            let config = ModelConfig::tiny().with_aggregation(agg);
            let store = gradcheck_store(&config, seed).unwrap();
            let toks = gradcheck_context(&config, seed);
            let mask = store.mask_where(|_| true);
            let report = finite_diff_check(
                |g, b| sequence_loss(g, b, &config, &toks),
                &store,
                &mask,
                1e-5,
            )
            .unwrap();
            assert!(
                report.max_rel_error_resolvable < 1e-4,
                "{agg} {seed}: {report:?}"
            );
            assert!(
                report.max_abs_error_unresolvable < 1e-9,
                "{agg} {seed}: {report:?}"
            );
        }
    }
}

#[test]
fn frozen_base_gets_no_gradients() {
    let config = ModelConfig::tiny();
    let store: ParamStore<f64> = init_model(&config, 1).unwrap();
    let mask: FreezeMask = store.mask_where(|n| !names::is_base(n));
    let mut g = Graph::new();
    let b = store.bind(&mut g, &mask).unwrap();
    let loss = sequence_loss(&mut g, &b, &config, &tokens(1, 6, config.vocab)).unwrap();
    let grads = g.backward(loss).unwrap();
    let expected: Vec<&str> = mask.trainable_names().collect();
    assert_eq!(
        grads.keys().map(String::as_str).collect::<Vec<_>>(),
        expected
    );
}
