//! Endpoint identities of the merge machinery: a zero schedule reproduces
//! the base model's logits, a saturated schedule reproduces the fine model's
//! layers, the uniform baselines agree with a constant schedule, and the
//! hidden-blend evaluation mode coincides with the hard merge at the
//! endpoints.

use rand::Rng;
use sptx_core::analysis::{eval_forward, EvalModel};
use sptx_core::bspline::{merge_params, AlphaMode, AlphaSchedule, NonLayerSource};
use sptx_core::rng::{stream_rng, Stream};
use sptx_core::tape::Tape;
use sptx_core::tensor::Tensor;
use sptx_core::training::baseline_linear_merge;
use sptx_core::transformer::{
    forward_hidden_blend, forward_with_trace, params_to_nodes, ModelConfig, ModelParams,
};

fn expert_pair() -> (ModelParams<f32>, ModelParams<f32>) {
    let cfg = ModelConfig {
        n_layers: 4,
        hidden: 16,
        n_heads: 2,
        ff_mult: 2,
        context: 16,
        vocab: 23,
        seed: 31,
    };
    let base = ModelParams::init(&cfg);
    let fine = ModelParams::init(&ModelConfig { seed: 32, ..cfg });
    (base, fine)
}

fn random_tokens(rng: &mut rand_chacha::ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn logits(params: &ModelParams<f32>, tokens: &[usize]) -> Tensor<f32> {
    eval_forward(&EvalModel::plain(params), tokens, None).unwrap().0
}

#[test]
fn zero_schedule_reproduces_base_logits() {
    let (base, fine) = expert_pair();
    let sched = AlphaSchedule::<f32>::with_constant(AlphaMode::Scalar, 8, 3, 4, 1, 0.0).unwrap();
    let merged = merge_params(&base, &fine, &sched, NonLayerSource::Base).unwrap();
    let mut rng = stream_rng(77, Stream::Probe(0));
    for _ in 0..25 {
        let tokens = random_tokens(&mut rng, 12, base.cfg.vocab);
        let a = logits(&merged.params, &tokens);
        let b = logits(&base, &tokens);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }
}

#[test]
fn saturated_schedule_reproduces_fine_logits() {
    let (base, fine) = expert_pair();
    // Control points at 2.0 clamp to alpha = 1 exactly; non-layer parameters
    // taken from the fine expert give the full fine model.
    let sched = AlphaSchedule::<f32>::with_constant(AlphaMode::Scalar, 8, 3, 4, 1, 2.0).unwrap();
    let merged = merge_params(&base, &fine, &sched, NonLayerSource::Fine).unwrap();
    let mut rng = stream_rng(78, Stream::Probe(0));
    for _ in 0..25 {
        let tokens = random_tokens(&mut rng, 12, base.cfg.vocab);
        let a = logits(&merged.params, &tokens);
        let b = logits(&fine, &tokens);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn constant_schedule_matches_linear_baseline_on_layers() {
    // Cross-module equivalence: a constant schedule and the uniform linear
    // merge produce the same layer parameters.
    let (base, fine) = expert_pair();
    let alpha0 = 0.37;
    let sched =
        AlphaSchedule::<f32>::with_constant(AlphaMode::Scalar, 8, 3, 4, 1, alpha0).unwrap();
    let merged = merge_params(&base, &fine, &sched, NonLayerSource::Base).unwrap();
    let linear = baseline_linear_merge(&base, &fine, alpha0).unwrap();
    for (ml, ll) in merged.params.layers.iter().zip(&linear.layers) {
        for (a, b) in ml.wq.data().iter().zip(ll.wq.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in ml.w_ff1.data().iter().zip(ll.w_ff1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    // Non-layer parameters differ by design: the schedule merge keeps the
    // base embedding, the uniform baseline interpolates it.
    assert_ne!(merged.params.embed.data(), linear.embed.data());
}

#[test]
fn hidden_blend_matches_hard_merge_at_endpoints() {
    let (base, fine) = expert_pair();
    let mut rng = stream_rng(79, Stream::Probe(0));
    let tokens = random_tokens(&mut rng, 10, base.cfg.vocab);
    for (value, non_layer) in [(0.0, NonLayerSource::Base), (2.0, NonLayerSource::Base)] {
        let sched =
            AlphaSchedule::<f32>::with_constant(AlphaMode::Scalar, 8, 3, 4, 1, value).unwrap();
        let merged = merge_params(&base, &fine, &sched, non_layer).unwrap();
        let hard = logits(&merged.params, &tokens);

        let mut tape = Tape::new();
        let base_nodes = params_to_nodes(&mut tape, &base, false);
        let fine_nodes = params_to_nodes(&mut tape, &fine, false);
        let sched_nodes = sched.leaves(&mut tape, false);
        let (blend_logits, _) = forward_hidden_blend(
            &mut tape,
            &base_nodes,
            &fine_nodes,
            &sched,
            &sched_nodes,
            &tokens,
            None,
            None,
        )
        .unwrap();
        for (a, b) in tape.value(blend_logits).data().iter().zip(hard.data()) {
            assert!((a - b).abs() < 1e-4, "alpha={value}: {a} vs {b}");
        }
    }
}

#[test]
fn hidden_blend_differs_from_hard_merge_in_the_interior() {
    let (base, fine) = expert_pair();
    let mut rng = stream_rng(80, Stream::Probe(0));
    let tokens = random_tokens(&mut rng, 10, base.cfg.vocab);
    let sched = AlphaSchedule::<f32>::with_constant(AlphaMode::Scalar, 8, 3, 4, 1, 0.5).unwrap();
    let merged = merge_params(&base, &fine, &sched, NonLayerSource::Base).unwrap();
    let hard = logits(&merged.params, &tokens);

    let mut tape = Tape::new();
    let base_nodes = params_to_nodes(&mut tape, &base, false);
    let fine_nodes = params_to_nodes(&mut tape, &fine, false);
    let sched_nodes = sched.leaves(&mut tape, false);
    let (blend_logits, _) = forward_hidden_blend(
        &mut tape,
        &base_nodes,
        &fine_nodes,
        &sched,
        &sched_nodes,
        &tokens,
        None,
        None,
    )
    .unwrap();
    let max_diff = tape
        .value(blend_logits)
        .data()
        .iter()
        .zip(hard.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff > 1e-3, "the two blending semantics should differ away from endpoints");
}

#[test]
fn merged_forward_equals_direct_forward_of_materialized_params() {
    // Evaluating the merge subgraph inline and materializing it first must
    // agree: the training path and the evaluation path share semantics.
    let (base, fine) = expert_pair();
    let sched = AlphaSchedule::<f32>::new(AlphaMode::PerDim, 8, 3, 4, 16).unwrap();
    let merged = merge_params(&base, &fine, &sched, NonLayerSource::Base).unwrap();
    let mut rng = stream_rng(81, Stream::Probe(0));
    let tokens = random_tokens(&mut rng, 8, base.cfg.vocab);

    let direct = logits(&merged.params, &tokens);

    let mut tape = Tape::new();
    let sched_nodes = sched.leaves(&mut tape, false);
    let inline = sptx_core::bspline::merged_param_nodes(
        &mut tape,
        &base,
        &fine,
        &sched,
        &sched_nodes,
        NonLayerSource::Base,
    )
    .unwrap();
    let (inline_logits, _) = forward_with_trace(&mut tape, &inline, &tokens, None, None).unwrap();
    for (a, b) in tape.value(inline_logits).data().iter().zip(direct.data()) {
        assert_eq!(a, b, "inline and materialized merges must agree bitwise");
    }
}
