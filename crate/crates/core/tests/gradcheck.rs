//! Central finite-difference checks for every tape op and every loss term,
//! including gradients that flow through the merged parameters back to the
//! B-spline control points.
//!
//! The numeric side re-evaluates the freshly built graph at perturbed
//! inputs, so it shares no state with the backward pass it validates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sptx_core::autoencoder::{stack_to_nodes, AeConfig};
use sptx_core::autoencoder::AutoencoderStack;
use sptx_core::bspline::{AlphaMode, AlphaSchedule};
use sptx_core::losses::{alpha_reg, lm_loss, recon_loss, total_loss, LossMode, LossWeights};
use sptx_core::rng::{stream_rng, Stream};
use sptx_core::tape::{NodeId, Tape};
use sptx_core::tensor::{Real, Tensor};
use sptx_core::transformer::{forward_with_trace, ModelConfig, ModelParams};
use sptx_core::Result;

type Builder<T> = Box<dyn Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>>;

struct Check<T> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    build: Builder<T>,
}

fn eval_loss<T: Real>(check: &Check<T>, inputs: &[Tensor<T>]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = (check.build)(&mut tape, &ids).unwrap_or_else(|e| {
        panic!("{}: forward failed during finite differences: {e}", check.name)
    });
    tape.value(loss).data()[0].to64()
}

fn analytic_grads<T: Real>(check: &Check<T>) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> =
        check.inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let loss = (check.build)(&mut tape, &ids)
        .unwrap_or_else(|e| panic!("{}: forward failed: {e}", check.name));
    assert_eq!(tape.value(loss).numel(), 1, "{}: loss must be scalar", check.name);
    tape.backward(loss).unwrap_or_else(|e| panic!("{}: backward failed: {e}", check.name));
    check
        .inputs
        .iter()
        .zip(&ids)
        .map(|(input, &id)| match tape.grad(id) {
            Some(g) => g.iter().map(|v| v.to64()).collect(),
            None => vec![0.0; input.numel()],
        })
        .collect()
}

/// Per-element central differences; f64 precision resolves every entry.
fn run_check_elementwise<T: Real>(check: &Check<T>, step: f64, tol: f64) {
    let grads = analytic_grads(check);
    for (i, input) in check.inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = check.inputs.to_vec();
            plus[i].data_mut()[e] = plus[i].data()[e] + T::from64(step);
            let mut minus = check.inputs.to_vec();
            minus[i].data_mut()[e] = minus[i].data()[e] - T::from64(step);
            let numeric = (eval_loss(check, &plus) - eval_loss(check, &minus)) / (2.0 * step);
            let a = grads[i][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < tol,
                "{}: input {i} elem {e}: analytic {a} vs numeric {numeric} (rel {rel:.3e})",
                check.name
            );
        }
    }
}

/// Directional derivative along a random +/-1 direction per input; f32
/// rounding cannot resolve per-element differences of tiny gradients, but
/// the directional sum stays well above the noise floor.
fn run_check_directional<T: Real>(check: &Check<T>, step: f64, tol: f64, rng: &mut ChaCha8Rng) {
    let grads = analytic_grads(check);
    for (i, input) in check.inputs.iter().enumerate() {
        let dir: Vec<f64> =
            (0..input.numel()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let analytic: f64 = grads[i].iter().zip(&dir).map(|(&g, &d)| g * d).sum();
        let mut plus = check.inputs.to_vec();
        let mut minus = check.inputs.to_vec();
        for e in 0..input.numel() {
            plus[i].data_mut()[e] = plus[i].data()[e] + T::from64(step * dir[e]);
            minus[i].data_mut()[e] = minus[i].data()[e] - T::from64(step * dir[e]);
        }
        let numeric = (eval_loss(check, &plus) - eval_loss(check, &minus)) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(0.1);
        assert!(
            rel < tol,
            "{}: input {i}: directional analytic {analytic} vs numeric {numeric} (rel {rel:.3e})",
            check.name
        );
    }
}

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from64(lo + (hi - lo) * rng.random::<f64>()))
}

/// Every op kind, random small shapes, loss = random projection of the op
/// output so the whole Jacobian is exercised.
fn op_checks<T: Real>(rng: &mut ChaCha8Rng) -> Vec<Check<T>> {
    let mut checks: Vec<Check<T>> = Vec::new();
    let proj = |rng: &mut ChaCha8Rng, shape: Vec<usize>| -> Tensor<T> {
        rand_tensor(rng, shape, -1.0, 1.0)
    };

    let a23 = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
    let b23 = rand_tensor(rng, vec![2, 3], -1.0, 1.0);
    let w23 = proj(rng, vec![2, 3]);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let w = w23.clone();
        checks.push(Check {
            name,
            inputs: vec![a23.clone(), b23.clone()],
            build: Box::new(move |tape, ids| {
                let out = match op {
                    0 => tape.add(ids[0], ids[1])?,
                    1 => tape.sub(ids[0], ids[1])?,
                    _ => tape.mul(ids[0], ids[1])?,
                };
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    let v3 = rand_tensor(rng, vec![3], -0.8, 0.8);
    for (name, is_add) in [("add_bcast_last", true), ("mul_bcast_last", false)] {
        let w = w23.clone();
        checks.push(Check {
            name,
            inputs: vec![a23.clone(), v3.clone()],
            build: Box::new(move |tape, ids| {
                let out = if is_add {
                    tape.add_bcast_last(ids[0], ids[1])?
                } else {
                    tape.mul_bcast_last(ids[0], ids[1])?
                };
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    {
        let w = w23.clone();
        let s = rand_tensor(rng, vec![1], 0.3, 1.2);
        checks.push(Check {
            name: "mul_bcast_scalar",
            inputs: vec![a23.clone(), s],
            build: Box::new(move |tape, ids| {
                let out = tape.mul_bcast_scalar(ids[0], ids[1])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    for (name, scale_case) in [("scale", true), ("offset", false)] {
        let w = w23.clone();
        checks.push(Check {
            name,
            inputs: vec![a23.clone()],
            build: Box::new(move |tape, ids| {
                let out = if scale_case {
                    tape.scale(ids[0], T::from64(0.7))?
                } else {
                    tape.offset(ids[0], T::from64(-0.3))?
                };
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    {
        let a = rand_tensor(rng, vec![2, 4], -1.0, 1.0);
        let b = rand_tensor(rng, vec![4, 3], -1.0, 1.0);
        let w = proj(rng, vec![2, 3]);
        checks.push(Check {
            name: "matmul",
            inputs: vec![a, b],
            build: Box::new(move |tape, ids| {
                let out = tape.matmul(ids[0], ids[1])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let a = rand_tensor(rng, vec![2, 4], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = proj(rng, vec![2, 3]);
        checks.push(Check {
            name: "matmul_nt",
            inputs: vec![a, b],
            build: Box::new(move |tape, ids| {
                let out = tape.matmul_nt(ids[0], ids[1])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let x = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let wmat = rand_tensor(rng, vec![4, 2], -1.0, 1.0);
        let bias = rand_tensor(rng, vec![2], -0.5, 0.5);
        let w = proj(rng, vec![3, 2]);
        checks.push(Check {
            name: "affine",
            inputs: vec![x, wmat, bias],
            build: Box::new(move |tape, ids| {
                let out = tape.affine(ids[0], ids[1], ids[2])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let x = rand_tensor(rng, vec![2, 5], -2.0, 2.0);
        let w = proj(rng, vec![2, 5]);
        checks.push(Check {
            name: "softmax",
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                let out = tape.softmax(ids[0])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let x = rand_tensor(rng, vec![3, 6], -1.5, 1.5);
        let g = rand_tensor(rng, vec![6], 0.5, 1.5);
        let b = rand_tensor(rng, vec![6], -0.4, 0.4);
        let w = proj(rng, vec![3, 6]);
        checks.push(Check {
            name: "layer_norm",
            inputs: vec![x, g, b],
            build: Box::new(move |tape, ids| {
                let out = tape.layer_norm(ids[0], ids[1], ids[2], T::from64(1e-5))?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    for (name, which) in [("gelu", 0usize), ("tanh", 1), ("sigmoid", 2)] {
        let x = rand_tensor(rng, vec![2, 4], -2.0, 2.0);
        let w = proj(rng, vec![2, 4]);
        checks.push(Check {
            name,
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                let out = match which {
                    0 => tape.gelu(ids[0])?,
                    1 => tape.tanh(ids[0])?,
                    _ => tape.sigmoid(ids[0])?,
                };
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    {
        // Strictly positive and away from zero so the kink never enters the
        // finite-difference stencil.
        let x = rand_tensor(rng, vec![2, 3], 0.4, 2.0);
        let w = proj(rng, vec![2, 3]);
        checks.push(Check {
            name: "sqrt",
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                let out = tape.sqrt(ids[0])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let x = rand_tensor(rng, vec![2, 3], 0.3, 1.8);
        let w = proj(rng, vec![2, 3]);
        checks.push(Check {
            name: "pow",
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                let out = tape.pow(ids[0], T::from64(2.0))?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        // Half interior, half saturated by a margin wider than the stencil.
        let x = Tensor::from_fn(vec![6], |i| {
            T::from64(match i % 3 {
                0 => 0.2 + 0.1 * i as f64 / 6.0,
                1 => -0.8,
                _ => 1.9,
            })
        });
        let w = proj(rng, vec![6]);
        checks.push(Check {
            name: "clamp",
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                let out = tape.clamp(ids[0], T::zero(), T::one())?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }

    for (name, mean_case) in [("mean_all", true), ("sum_all", false)] {
        let x = rand_tensor(rng, vec![3, 3], -1.0, 1.0);
        checks.push(Check {
            name,
            inputs: vec![x],
            build: Box::new(move |tape, ids| {
                if mean_case {
                    tape.mean_all(ids[0])
                } else {
                    tape.sum_all(ids[0])
                }
            }),
        });
    }

    {
        let a = rand_tensor(rng, vec![3, 2], -1.0, 1.0);
        let b = rand_tensor(rng, vec![3, 4], -1.0, 1.0);
        let w = proj(rng, vec![3, 6]);
        checks.push(Check {
            name: "concat_last",
            inputs: vec![a, b],
            build: Box::new(move |tape, ids| {
                let out = tape.concat_last(&[ids[0], ids[1]])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let a = rand_tensor(rng, vec![3, 5], -1.0, 1.0);
        let w = proj(rng, vec![3, 2]);
        checks.push(Check {
            name: "slice_last",
            inputs: vec![a],
            build: Box::new(move |tape, ids| {
                let out = tape.slice_last(ids[0], 1, 2)?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let a = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        let w = proj(rng, vec![2, 3]);
        checks.push(Check {
            name: "slice_rows",
            inputs: vec![a],
            build: Box::new(move |tape, ids| {
                let out = tape.slice_rows(ids[0], 2, 2)?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let x = rand_tensor(rng, vec![5, 3], -1.0, 1.0);
        let k = rand_tensor(rng, vec![3, 3, 2], -0.8, 0.8);
        let w = proj(rng, vec![5, 2]);
        checks.push(Check {
            name: "conv1d",
            inputs: vec![x, k],
            build: Box::new(move |tape, ids| {
                let out = tape.conv1d(ids[0], ids[1])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let table = rand_tensor(rng, vec![6, 3], -1.0, 1.0);
        let w = proj(rng, vec![4, 3]);
        checks.push(Check {
            name: "embedding",
            inputs: vec![table],
            build: Box::new(move |tape, ids| {
                let out = tape.embedding(ids[0], &[2, 0, 5, 2])?;
                let wn = tape.constant(w.clone());
                let p = tape.mul(out, wn)?;
                tape.sum_all(p)
            }),
        });
    }
    {
        let logits = rand_tensor(rng, vec![3, 5], -1.5, 1.5);
        checks.push(Check {
            name: "cross_entropy",
            inputs: vec![logits],
            build: Box::new(move |tape, ids| tape.cross_entropy(ids[0], &[1, 4, 0])),
        });
    }

    checks
}

/// Loss builders (Eqs. 1-9): reconstruction, language modeling, the four
/// alpha-regularization components, their total, and the two mode totals.
fn loss_checks<T: Real>(rng: &mut ChaCha8Rng) -> Vec<Check<T>> {
    let mut checks: Vec<Check<T>> = Vec::new();
    let weights = LossWeights { l2: 0.3, sigma_target_sq: 0.02, ..Default::default() };

    {
        // Reconstruction (Eq. 1): two layers, two samples each; gradients
        // w.r.t. both reconstructions and targets.
        let tensors: Vec<Tensor<T>> =
            (0..8).map(|_| rand_tensor(rng, vec![2, 3], -1.0, 1.0)).collect();
        let w = weights;
        checks.push(Check {
            name: "recon_loss",
            inputs: tensors,
            build: Box::new(move |tape, ids| {
                let layers = vec![
                    vec![(ids[0], ids[1]), (ids[2], ids[3])],
                    vec![(ids[4], ids[5]), (ids[6], ids[7])],
                ];
                recon_loss(tape, &layers, &w)
            }),
        });
    }
    {
        // Language modeling (Eq. 2) over two sequences of different lengths.
        let l1 = rand_tensor(rng, vec![3, 6], -1.0, 1.0);
        let l2 = rand_tensor(rng, vec![2, 6], -1.0, 1.0);
        checks.push(Check {
            name: "lm_loss",
            inputs: vec![l1, l2],
            build: Box::new(move |tape, ids| {
                lm_loss(tape, &[(ids[0], &[1, 5, 2]), (ids[1], &[0, 3])])
            }),
        });
    }

    for mode in [AlphaMode::Scalar, AlphaMode::PerDim] {
        // Alpha regularization (Eqs. 3-7): gradients w.r.t. control points
        // and biases in both modes, each component and the weighted total.
        let hidden = 3;
        let sched = AlphaSchedule::<T>::new(mode, 5, 2, 4, hidden).unwrap();
        let control = rand_tensor(rng, sched.control.shape().to_vec(), -0.6, 0.6);
        let bias = rand_tensor(rng, sched.bias.shape().to_vec(), -0.3, 0.3);
        let w = weights;
        for (name, component) in [
            ("alpha_reg_smoothness", 0usize),
            ("alpha_reg_centrality", 1),
            ("alpha_reg_mean_bias", 2),
            ("alpha_reg_var_bias", 3),
            ("alpha_reg_total", 4),
        ] {
            let sched = sched.clone();
            let picker = component;
            checks.push(Check {
                name,
                inputs: vec![control.clone(), bias.clone()],
                build: Box::new(move |tape, ids| {
                    let nodes = sptx_core::bspline::ScheduleNodes {
                        control: ids[0],
                        bias: ids[1],
                    };
                    let terms = alpha_reg(tape, &sched, &nodes, &w)?;
                    Ok(match picker {
                        0 => terms.smoothness,
                        1 => terms.centrality,
                        2 => terms.mean_bias,
                        3 => terms.var_bias,
                        _ => terms.total,
                    })
                }),
            });
        }
    }

    checks
}

/// End-to-end totals (Eqs. 8-9): gradient of the full objective w.r.t. the
/// control points and biases, flowing through the hard merge, the merged
/// transformer forward and the autoencoders.
fn end_to_end_checks<T: Real>() -> Vec<Check<T>> {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden: 4,
        n_heads: 2,
        ff_mult: 2,
        context: 8,
        vocab: 7,
        seed: 21,
    };
    let base = ModelParams::<T>::init(&cfg);
    let fine = ModelParams::<T>::init(&ModelConfig { seed: 22, ..cfg.clone() });
    let tokens = vec![1usize, 4, 2, 6];
    let targets = vec![4usize, 2, 6, 0];
    let mut checks: Vec<Check<T>> = Vec::new();

    for mode in [AlphaMode::Scalar, AlphaMode::PerDim] {
        let ae_cfg = match mode {
            AlphaMode::Scalar => AeConfig {
                layers: vec![1, 2],
                ..AeConfig::gated_default(cfg.hidden, cfg.n_layers)
            },
            AlphaMode::PerDim => AeConfig {
                layers: vec![1, 2],
                ..AeConfig::dual_default(cfg.hidden, cfg.n_layers)
            },
        };
        let stack = AutoencoderStack::<T>::init(&ae_cfg, cfg.hidden, cfg.n_layers, 5).unwrap();
        let sched = AlphaSchedule::<T>::new(mode, 4, 2, cfg.n_layers, cfg.hidden).unwrap();
        // Mildly asymmetric start so clamp stays interior but gradients are
        // not at a symmetric stationary point.
        let mut control = sched.control.clone();
        for (i, v) in control.data_mut().iter_mut().enumerate() {
            *v = T::from64(0.35 + 0.05 * ((i % 5) as f64));
        }
        let bias = Tensor::from_fn(sched.bias.shape().to_vec(), |i| {
            T::from64(0.02 * ((i % 3) as f64) - 0.02)
        });
        let name = match mode {
            AlphaMode::Scalar => "total_loss_1d_end_to_end",
            AlphaMode::PerDim => "total_loss_2d_end_to_end",
        };
        let (base, fine, tokens, targets) =
            (base.clone(), fine.clone(), tokens.clone(), targets.clone());
        let weights = LossWeights { l2: 0.2, ..Default::default() };
        checks.push(Check {
            name,
            inputs: vec![control, bias],
            build: Box::new(move |tape, ids| {
                let nodes =
                    sptx_core::bspline::ScheduleNodes { control: ids[0], bias: ids[1] };
                let sched_live = AlphaSchedule {
                    control: tape.value(ids[0]).clone(),
                    bias: tape.value(ids[1]).clone(),
                    ..sched.clone()
                };
                let merged = sptx_core::bspline::merged_param_nodes(
                    tape,
                    &base,
                    &fine,
                    &sched_live,
                    &nodes,
                    sptx_core::bspline::NonLayerSource::Base,
                )?;
                let ae_nodes = stack_to_nodes(tape, &stack, false);
                // Frozen targets: the base expert's hidden states.
                let base_nodes = sptx_core::transformer::params_to_nodes(tape, &base, false);
                let (_, base_trace) =
                    forward_with_trace(tape, &base_nodes, &tokens, None, None)?;
                let (logits, trace) = forward_with_trace(
                    tape,
                    &merged,
                    &tokens,
                    Some(&ae_nodes),
                    Some(sptx_core::Domain::Base),
                )?;
                let lm = lm_loss(tape, &[(logits, &targets)])?;
                let pairs: Vec<Vec<(NodeId, NodeId)>> = ae_cfg
                    .layers
                    .iter()
                    .map(|&l| vec![(trace.h_hat[l - 1], base_trace.h[l - 1])])
                    .collect();
                let recon = recon_loss(tape, &pairs, &weights)?;
                match mode {
                    AlphaMode::Scalar => {
                        total_loss(tape, LossMode::OneD, lm, recon, None, &weights)
                    }
                    AlphaMode::PerDim => {
                        let reg = alpha_reg(tape, &sched_live, &nodes, &weights)?;
                        total_loss(tape, LossMode::TwoD, lm, recon, Some(reg.total), &weights)
                    }
                }
            }),
        });
    }
    checks
}

fn all_checks<T: Real>() -> Vec<Check<T>> {
    let mut rng = stream_rng(2024, Stream::Probe(0));
    let mut checks = op_checks::<T>(&mut rng);
    checks.extend(loss_checks::<T>(&mut rng));
    checks.extend(end_to_end_checks::<T>());
    checks
}

#[test]
fn finite_differences_f64() {
    for check in all_checks::<f64>() {
        run_check_elementwise(&check, 1e-5, 1e-4);
    }
}

#[test]
fn finite_differences_f32() {
    let mut dir_rng = stream_rng(2025, Stream::Probe(1));
    for check in all_checks::<f32>() {
        run_check_directional(&check, 1e-2, 1e-2, &mut dir_rng);
    }
}

#[test]
fn gelu_matches_tanh_form() {
    // Spot-check the activation itself against a direct evaluation.
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.2, 0.0, 0.9]).unwrap());
    let y = tape.gelu(x).unwrap();
    for (&xv, &yv) in [-1.2f64, 0.0, 0.9].iter().zip(tape.value(y).data()) {
        let u = (2.0 / core::f64::consts::PI).sqrt() * (xv + 0.044715 * xv.powi(3));
        let expect = 0.5 * xv * (1.0 + u.tanh());
        assert!((yv - expect).abs() < 1e-12);
    }
}
