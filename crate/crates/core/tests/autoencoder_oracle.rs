//! Autoencoder behavior oracles: overfitting a single fixed target drives
//! reconstruction error below 1e-3, and the 2D global pathway's Jacobian has
//! numerical rank at most its configured bottleneck rank.

use nalgebra::DMatrix;
use sptx_core::adam::{AdamConfig, AdamState};
use sptx_core::autoencoder::{ae_forward, stack_to_nodes, AeConfig, AutoencoderStack};
use sptx_core::tape::Tape;
use sptx_core::tensor::Tensor;

#[test]
fn gated_autoencoder_overfits_one_sample() {
    let hidden = 12;
    let cfg = AeConfig { bottleneck: 6, layers: vec![1], ..AeConfig::gated_default(hidden, 2) };
    let mut stack = AutoencoderStack::<f64>::init(&cfg, hidden, 2, 3).unwrap();
    let input = Tensor::from_fn(vec![1, hidden], |i| libm::sin(i as f64 * 0.9) * 0.8);
    let target = Tensor::from_fn(vec![1, hidden], |i| libm::cos(i as f64 * 0.55) * 0.6);

    let mut adam = AdamState::new(AdamConfig { lr: 3e-2, ..Default::default() }).unwrap();
    let mut mse = f64::INFINITY;
    for _ in 0..500 {
        let mut tape = Tape::new();
        let nodes = stack_to_nodes(&mut tape, &stack, true);
        let h = tape.constant(input.clone());
        let t = tape.constant(target.clone());
        let (_, h_hat) =
            ae_forward(&mut tape, &stack.cfg, nodes.layer_nodes(1).unwrap(), h, None).unwrap();
        let diff = tape.sub(h_hat, t).unwrap();
        let sq = tape.mul(diff, diff).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        mse = tape.value(loss).data()[0];
        tape.backward(loss).unwrap();
        for ((_, id), (_, tensor)) in nodes.named_ids().into_iter().zip(stack.named_mut()) {
            tape.write_leaf_grad(id, tensor);
        }
        adam.step(stack.named_mut().into_iter()).unwrap();
    }
    assert!(mse < 1e-3, "reconstruction MSE after overfitting one sample: {mse}");
}

#[test]
fn global_pathway_jacobian_rank_is_at_most_r() {
    let hidden = 16;
    let rank = 3;
    let cfg = AeConfig {
        layers: vec![1],
        global_rank: rank,
        ..AeConfig::dual_default(hidden, 4)
    };
    let stack = AutoencoderStack::<f64>::init(&cfg, hidden, 4, 17).unwrap();

    // The global pathway is linear per position, so its Jacobian columns are
    // the responses to unit probes.
    let run_global = |input: &Tensor<f64>| -> Vec<f64> {
        let mut tape = Tape::new();
        let nodes = stack_to_nodes(&mut tape, &stack, false);
        let h = tape.constant(input.clone());
        let (z, _) =
            ae_forward(&mut tape, &stack.cfg, nodes.layer_nodes(1).unwrap(), h, None).unwrap();
        // Global block of row 0: the trailing global_width columns.
        let z = tape.value(z);
        let w = z.last_dim();
        z.data()[w - cfg.global_width..w].to_vec()
    };

    // Sequence of length conv_kernel keeps the forward valid; probe row 0.
    let zero = Tensor::<f64>::zeros(vec![cfg.conv_kernel, hidden]);
    let z0 = run_global(&zero);
    let mut jac = DMatrix::zeros(cfg.global_width, hidden);
    for d in 0..hidden {
        let mut probe = zero.clone();
        probe.data_mut()[d] = 1.0;
        let z = run_global(&probe);
        for (o, (&v, &v0)) in z.iter().zip(&z0).enumerate() {
            jac[(o, d)] = v - v0;
        }
    }
    let svd = jac.svd(false, false);
    let mut singulars: Vec<f64> = svd.singular_values.iter().copied().collect();
    singulars.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cutoff = singulars[0] * 1e-9;
    let numerical_rank = singulars.iter().filter(|&&s| s > cutoff).count();
    assert!(
        numerical_rank <= rank,
        "global pathway rank {numerical_rank} exceeds configured rank {rank} ({singulars:?})"
    );
}
