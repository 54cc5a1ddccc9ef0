//! Training loops: expert language-model training, the superposition run
//! that jointly optimizes the blending schedule and the autoencoders against
//! two frozen experts, and the interpolation baselines.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adam::{AdamConfig, AdamState};
use crate::analysis;
use crate::autoencoder::{stack_to_nodes, AeConfig, AutoencoderStack};
use crate::bspline::{merge_params, merged_param_nodes, AlphaMode, AlphaSchedule, NonLayerSource};
use crate::error::{Error, Result};
use crate::losses::{alpha_reg, lm_loss, recon_loss, total_loss, LossMode, LossWeights};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::transformer::{forward_with_trace, params_to_nodes, ModelConfig, ModelParams};
use crate::Domain;

/// One training or evaluation sequence with its next-token targets and the
/// domain it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub domain: Domain,
}

impl LabeledSequence {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::input("sequence has no tokens"));
        }
        if self.tokens.len() != self.targets.len() {
            return Err(Error::input("tokens and targets must have equal length"));
        }
        if self.tokens.iter().chain(&self.targets).any(|&t| t >= vocab) {
            return Err(Error::input("token id out of vocabulary"));
        }
        Ok(())
    }
}

/// Train/validation split of labeled sequences.
#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
}

#[derive(Debug, Clone)]
pub struct ExpertTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        ExpertTrainConfig {
            epochs: 2,
            batch_size: 8,
            adam: AdamConfig { lr: 1.5e-3, ..Default::default() },
            seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExpertLog {
    pub steps: Vec<ExpertStepRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn shuffled_batches(
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..len).collect();
    let mut rng = stream_rng(seed, Stream::Shuffle(epoch as u64));
    indices.shuffle(&mut rng);
    indices.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn numeric_at_step(err: Error, step: usize) -> Error {
    match err {
        Error::Numeric { node, detail } => {
            Error::Numeric { node, detail: format!("step {step}: {detail}") }
        }
        other => other,
    }
}

/// Trains one expert with the language-modeling objective. `init` supplies
/// starting parameters (fine-tuning); otherwise parameters come from the
/// config seed.
pub fn train_expert<T: Real>(
    data: &[LabeledSequence],
    cfg: &ModelConfig,
    init: Option<&ModelParams<T>>,
    tcfg: &ExpertTrainConfig,
    mut on_step: impl FnMut(&ExpertStepRecord),
) -> Result<(ModelParams<T>, ExpertLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::input("expert training corpus is empty"));
    }
    for seq in data {
        seq.validate(cfg.vocab)?;
    }
    let mut params = match init {
        Some(p) => {
            let mut p = p.clone();
            p.cfg = cfg.clone();
            p
        }
        None => ModelParams::init(cfg),
    };
    let mut adam = AdamState::new(tcfg.adam)?;
    let mut log = ExpertLog::default();
    let mut step = 0usize;

    for epoch in 1..=tcfg.epochs.max(1) {
        for batch in shuffled_batches(data.len(), tcfg.batch_size, tcfg.seed, epoch) {
            step += 1;
            let mut tape = Tape::new();
            let nodes = params_to_nodes(&mut tape, &params, true);
            let mut entries = Vec::with_capacity(batch.len());
            for &i in &batch {
                let seq = &data[i];
                let (logits, _) =
                    forward_with_trace(&mut tape, &nodes, &seq.tokens, None, None)
                        .map_err(|e| numeric_at_step(e, step))?;
                entries.push((logits, seq.targets.as_slice()));
            }
            let entry_refs: Vec<_> = entries.iter().map(|(l, t)| (*l, *t)).collect();
            let loss = lm_loss(&mut tape, &entry_refs).map_err(|e| numeric_at_step(e, step))?;
            let loss_value = tape.value(loss).data()[0].to64();
            tape.backward(loss)?;
            for ((name, id), (name2, tensor)) in
                nodes.named_ids().into_iter().zip(params.named_mut())
            {
                debug_assert_eq!(name, name2);
                tape.write_leaf_grad(id, tensor);
            }
            adam.step(params.named_mut().into_iter())?;

            if log.steps.is_empty() {
                log.initial_loss = loss_value;
            }
            log.final_loss = loss_value;
            let record = ExpertStepRecord { step, epoch, loss: loss_value };
            if step % tcfg.log_every.max(1) == 0 || log.steps.is_empty() {
                on_step(&record);
            }
            log.steps.push(record);
        }
    }
    params.validate_finite()?;
    Ok((params, log))
}

#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub mode: AlphaMode,
    pub n_ctrl: usize,
    pub degree: usize,
    pub non_layer: NonLayerSource,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 3,
            batch_size: 8,
            adam: AdamConfig { lr: 3e-3, ..Default::default() },
            weights: LossWeights::default(),
            mode: AlphaMode::Scalar,
            n_ctrl: crate::bspline::DEFAULT_CONTROL_POINTS,
            degree: crate::bspline::DEFAULT_DEGREE,
            non_layer: NonLayerSource::Base,
            seed: 0,
            log_every: 10,
        }
    }
}

/// Loss breakdown and schedule summary at one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_lm: f64,
    pub loss_recon: f64,
    pub loss_alpha_reg: f64,
    pub smoothness: f64,
    pub centrality: f64,
    pub mean_bias: f64,
    pub var_bias: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Which expert's hidden states served as the reconstruction target for
    /// each sample of the batch, in batch order.
    pub target_domains: Vec<Domain>,
}

/// End-of-epoch snapshot: blending coefficients per layer, epoch-mean total
/// loss, and validation JSD of the current merged model against the experts'
/// average prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total_loss: f64,
    pub val_jsd: f64,
    pub alpha_per_layer: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Superposition training output: trained schedule, trained autoencoders and
/// the full log. Expert parameters are untouched by construction (they enter
/// every graph as constants).
#[derive(Debug, Clone)]
pub struct SuperposeArtifacts<T> {
    pub schedule: AlphaSchedule<T>,
    pub autoencoders: AutoencoderStack<T>,
    pub log: TrainingLog,
}

/// Jointly trains the B-spline schedule and the per-layer autoencoders
/// against the frozen experts.
///
/// Per minibatch: frozen forwards of both experts capture the per-layer
/// targets, the merged parameters are rebuilt from the live schedule, the
/// merged forward applies autoencoders at the selected layers, and the total
/// loss (language modeling + reconstruction toward the label-selected expert,
/// plus alpha regularization in per-dimension mode) updates only the control
/// points, biases and autoencoder weights.
pub fn train_superposed<T: Real>(
    base: &ModelParams<T>,
    fine: &ModelParams<T>,
    ae_cfg: &AeConfig,
    data: &LabeledDataset,
    cfg: &TrainRunConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<SuperposeArtifacts<T>> {
    base.check_same_structure(fine)?;
    base.validate_finite()?;
    fine.validate_finite()?;
    cfg.weights.validate()?;
    let model_cfg = &base.cfg;
    ae_cfg.validate(model_cfg.hidden, model_cfg.n_layers)?;
    if data.train.is_empty() {
        return Err(Error::input("superposition training set is empty"));
    }
    for seq in data.train.iter().chain(&data.val) {
        seq.validate(model_cfg.vocab)?;
    }
    let has = |d: Domain| data.train.iter().any(|s| s.domain == d);
    if !has(Domain::Base) || !has(Domain::Fine) {
        return Err(Error::input("training stream must contain both domains"));
    }

    let loss_mode = match cfg.mode {
        AlphaMode::Scalar => LossMode::OneD,
        AlphaMode::PerDim => LossMode::TwoD,
    };
    let mut schedule = AlphaSchedule::<T>::new(
        cfg.mode,
        cfg.n_ctrl,
        cfg.degree,
        model_cfg.n_layers,
        model_cfg.hidden,
    )?;
    let mut stack =
        AutoencoderStack::<T>::init(ae_cfg, model_cfg.hidden, model_cfg.n_layers, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam)?;
    let mut log = TrainingLog::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs.max(1) {
        let mut epoch_total = 0.0f64;
        let mut epoch_steps = 0usize;
        for batch in shuffled_batches(data.train.len(), cfg.batch_size, cfg.seed, epoch) {
            step += 1;
            // Frozen expert forwards supply the per-layer targets.
            let mut targets_per_sample = Vec::with_capacity(batch.len());
            for &i in &batch {
                let seq = &data.train[i];
                let expert = match seq.domain {
                    Domain::Base => base,
                    Domain::Fine => fine,
                };
                let mut scratch = Tape::new();
                let nodes = params_to_nodes(&mut scratch, expert, false);
                let (_, trace) = forward_with_trace(&mut scratch, &nodes, &seq.tokens, None, None)
                    .map_err(|e| numeric_at_step(e, step))?;
                let per_layer: Vec<Tensor<T>> = ae_cfg
                    .layers
                    .iter()
                    .map(|&l| scratch.value(trace.h[l - 1]).clone())
                    .collect();
                targets_per_sample.push(per_layer);
            }

            // Merged forward with autoencoders on the live schedule.
            let mut tape = Tape::new();
            let sched_nodes = schedule.leaves(&mut tape, true);
            let ae_nodes = stack_to_nodes(&mut tape, &stack, true);
            let merged = merged_param_nodes(
                &mut tape,
                base,
                fine,
                &schedule,
                &sched_nodes,
                cfg.non_layer,
            )?;

            let mut lm_entries = Vec::with_capacity(batch.len());
            let mut recon_pairs: Vec<Vec<_>> = vec![Vec::new(); ae_cfg.layers.len()];
            let mut target_domains = Vec::with_capacity(batch.len());
            for (bi, &i) in batch.iter().enumerate() {
                let seq = &data.train[i];
                let (logits, trace) = forward_with_trace(
                    &mut tape,
                    &merged,
                    &seq.tokens,
                    Some(&ae_nodes),
                    Some(seq.domain),
                )
                .map_err(|e| numeric_at_step(e, step))?;
                lm_entries.push((logits, seq.targets.as_slice()));
                for (li, &l) in ae_cfg.layers.iter().enumerate() {
                    let target = tape.constant(targets_per_sample[bi][li].clone());
                    recon_pairs[li].push((trace.h_hat[l - 1], target));
                }
                target_domains.push(seq.domain);
            }

            let lm = lm_loss(&mut tape, &lm_entries).map_err(|e| numeric_at_step(e, step))?;
            let recon = recon_loss(&mut tape, &recon_pairs, &cfg.weights)
                .map_err(|e| numeric_at_step(e, step))?;
            let reg = match loss_mode {
                LossMode::TwoD => {
                    Some(alpha_reg(&mut tape, &schedule, &sched_nodes, &cfg.weights)?)
                }
                LossMode::OneD => None,
            };
            let total = total_loss(
                &mut tape,
                loss_mode,
                lm,
                recon,
                reg.map(|r| r.total),
                &cfg.weights,
            )?;

            let value = |id| tape.value(id).data()[0].to64();
            let (loss_total, loss_lm, loss_recon) = (value(total), value(lm), value(recon));
            let (loss_alpha_reg, smo, cen, mb, vb) = match reg {
                Some(r) => (
                    value(r.total),
                    value(r.smoothness),
                    value(r.centrality),
                    value(r.mean_bias),
                    value(r.var_bias),
                ),
                None => (0.0, 0.0, 0.0, 0.0, 0.0),
            };

            tape.backward(total)?;
            tape.write_leaf_grad(sched_nodes.control, &mut schedule.control);
            tape.write_leaf_grad(sched_nodes.bias, &mut schedule.bias);
            for ((name, id), (name2, tensor)) in
                ae_nodes.named_ids().into_iter().zip(stack.named_mut())
            {
                debug_assert_eq!(name, name2);
                tape.write_leaf_grad(id, tensor);
            }
            adam.step(
                [
                    (String::from("alpha.bias"), &mut schedule.bias),
                    (String::from("alpha.control"), &mut schedule.control),
                ]
                .into_iter()
                .chain(stack.named_mut()),
            )?;

            epoch_total += loss_total;
            epoch_steps += 1;
            let (alpha_mean, alpha_min, alpha_max) = schedule.alpha_summary()?;
            let record = StepRecord {
                step,
                epoch,
                loss_total,
                loss_lm,
                loss_recon,
                loss_alpha_reg,
                smoothness: smo,
                centrality: cen,
                mean_bias: mb,
                var_bias: vb,
                alpha_mean,
                alpha_min,
                alpha_max,
                target_domains,
            };
            if step % cfg.log_every.max(1) == 0 || log.steps.is_empty() {
                on_step(&record);
            }
            log.steps.push(record);
        }

        let alpha_per_layer: Result<Vec<Vec<f64>>> =
            (1..=model_cfg.n_layers).map(|l| schedule.alpha_at(l)).collect();
        let val_jsd = if data.val.is_empty() {
            0.0
        } else {
            let merged_now = merge_params(base, fine, &schedule, cfg.non_layer)?;
            let merged_model = analysis::EvalModel {
                params: &merged_now.params,
                autoencoders: Some(&stack),
            };
            analysis::mean_jsd_vs_expert_average(
                &merged_model,
                &analysis::EvalModel::plain(base),
                &analysis::EvalModel::plain(fine),
                &data.val,
            )?
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_total_loss: epoch_total / epoch_steps.max(1) as f64,
            val_jsd,
            alpha_per_layer: alpha_per_layer?,
        });
    }

    Ok(SuperposeArtifacts { schedule, autoencoders: stack, log })
}

/// Uniform interpolation baseline over every parameter tensor:
/// `theta = (1 - alpha0) * base + alpha0 * fine`. The endpoints return the
/// corresponding expert exactly.
pub fn baseline_linear_merge<T: Real>(
    base: &ModelParams<T>,
    fine: &ModelParams<T>,
    alpha0: f64,
) -> Result<ModelParams<T>> {
    if !(0.0..=1.0).contains(&alpha0) {
        return Err(Error::input(format!("alpha0 must be in [0, 1], got {alpha0}")));
    }
    if alpha0 == 0.0 {
        base.check_same_structure(fine)?;
        return Ok(base.clone());
    }
    if alpha0 == 1.0 {
        base.check_same_structure(fine)?;
        return Ok(fine.clone());
    }
    let a = T::from64(alpha0);
    let one_minus = T::one() - a;
    base.zip_with(fine, |b, f| one_minus * b + a * f)
}

/// Task-arithmetic baseline: `theta = base + lambda * (fine - base)` over
/// every parameter tensor. The endpoints return the corresponding expert
/// exactly.
pub fn baseline_task_arithmetic<T: Real>(
    base: &ModelParams<T>,
    fine: &ModelParams<T>,
    lambda: f64,
) -> Result<ModelParams<T>> {
    if !lambda.is_finite() {
        return Err(Error::input("task-arithmetic coefficient must be finite"));
    }
    if lambda == 0.0 {
        base.check_same_structure(fine)?;
        return Ok(base.clone());
    }
    if lambda == 1.0 {
        base.check_same_structure(fine)?;
        return Ok(fine.clone());
    }
    let l = T::from64(lambda);
    base.zip_with(fine, |b, f| b + l * (f - b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(seed: u64) -> ModelConfig {
        ModelConfig { n_layers: 2, hidden: 8, n_heads: 2, ff_mult: 2, context: 8, vocab: 11, seed }
    }

    fn toy_data(cfg: &ModelConfig, n: usize) -> Vec<LabeledSequence> {
        (0..n)
            .map(|i| {
                let tokens: Vec<usize> = (0..6).map(|t| (i * 3 + t * 2) % cfg.vocab).collect();
                let targets: Vec<usize> = tokens.iter().map(|&t| (t + 1) % cfg.vocab).collect();
                let domain = if i % 2 == 0 { Domain::Base } else { Domain::Fine };
                LabeledSequence { tokens, targets, domain }
            })
            .collect()
    }

    #[test]
    fn empty_corpus_is_input_error() {
        let cfg = tiny_cfg(0);
        let r = train_expert::<f32>(&[], &cfg, None, &ExpertTrainConfig::default(), |_| {});
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn expert_training_reduces_loss_and_is_deterministic() {
        let cfg = tiny_cfg(5);
        let data = toy_data(&cfg, 12);
        let tcfg = ExpertTrainConfig { epochs: 6, batch_size: 4, ..Default::default() };
        let (params_a, log_a) = train_expert::<f32>(&data, &cfg, None, &tcfg, |_| {}).unwrap();
        assert!(log_a.final_loss < log_a.initial_loss);
        let (params_b, _) = train_expert::<f32>(&data, &cfg, None, &tcfg, |_| {}).unwrap();
        assert_eq!(params_a.checksum(), params_b.checksum());
    }

    fn trained_pair() -> (ModelParams<f32>, ModelParams<f32>) {
        let cfg = tiny_cfg(5);
        let data = toy_data(&cfg, 8);
        let tcfg = ExpertTrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let (base, _) = train_expert::<f32>(&data, &cfg, None, &tcfg, |_| {}).unwrap();
        let fine_cfg = ModelConfig { seed: 9, ..cfg };
        let (fine, _) =
            train_expert::<f32>(&data, &fine_cfg, Some(&base), &tcfg, |_| {}).unwrap();
        (base, fine)
    }

    #[test]
    fn baselines_hit_endpoints_bitwise() {
        let (base, fine) = trained_pair();
        let b0 = baseline_linear_merge(&base, &fine, 0.0).unwrap();
        assert_eq!(b0.checksum(), base.checksum());
        let b1 = baseline_linear_merge(&base, &fine, 1.0).unwrap();
        assert_eq!(b1.checksum(), fine.checksum());
        let t0 = baseline_task_arithmetic(&base, &fine, 0.0).unwrap();
        assert_eq!(t0.checksum(), base.checksum());
        let t1 = baseline_task_arithmetic(&base, &fine, 1.0).unwrap();
        assert_eq!(t1.checksum(), fine.checksum());
        assert!(baseline_linear_merge(&base, &fine, 1.5).is_err());
        assert!(baseline_task_arithmetic(&base, &fine, f64::NAN).is_err());
    }

    #[test]
    fn linear_midpoint_matches_task_arithmetic_half() {
        let (base, fine) = trained_pair();
        let a = baseline_linear_merge(&base, &fine, 0.5).unwrap();
        let b = baseline_task_arithmetic(&base, &fine, 0.5).unwrap();
        for ((_, x), (_, y)) in a.named().iter().zip(b.named().iter()) {
            for (xv, yv) in x.data().iter().zip(y.data()) {
                assert!((xv - yv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn midpoint_values() {
        let (mut base, mut fine) = trained_pair();
        for (_, t) in base.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        for (_, t) in fine.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 4.0);
        }
        let mid = baseline_linear_merge(&base, &fine, 0.5).unwrap();
        assert!(mid.named().iter().all(|(_, t)| t.data().iter().all(|&v| v == 3.0)));
    }

    #[test]
    fn superposed_training_updates_only_schedule_and_autoencoders() {
        let (base, fine) = trained_pair();
        let (base_sum, fine_sum) = (base.checksum(), fine.checksum());
        let ae_cfg = AeConfig::gated_default(base.cfg.hidden, base.cfg.n_layers);
        let data = LabeledDataset {
            train: toy_data(&base.cfg, 6),
            val: toy_data(&base.cfg, 2),
        };
        let cfg = TrainRunConfig { epochs: 1, batch_size: 3, ..Default::default() };
        let before_sched = AlphaSchedule::<f32>::new(
            cfg.mode,
            cfg.n_ctrl,
            cfg.degree,
            base.cfg.n_layers,
            base.cfg.hidden,
        )
        .unwrap();
        let before_stack =
            AutoencoderStack::<f32>::init(&ae_cfg, base.cfg.hidden, base.cfg.n_layers, cfg.seed)
                .unwrap();
        let out = train_superposed(&base, &fine, &ae_cfg, &data, &cfg, |_| {}).unwrap();
        // Experts untouched.
        assert_eq!(base.checksum(), base_sum);
        assert_eq!(fine.checksum(), fine_sum);
        // Gradients reached the schedule and at least one autoencoder tensor.
        assert_ne!(out.schedule.control.data(), before_sched.control.data());
        let changed = out
            .autoencoders
            .named()
            .iter()
            .zip(before_stack.named().iter())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(changed, "autoencoder parameters must receive gradient");
        assert_eq!(out.log.epochs.len(), 1);
        assert!(!out.log.steps.is_empty());
    }

    #[test]
    fn label_swap_swaps_target_selection() {
        let (base, fine) = trained_pair();
        let ae_cfg = AeConfig::gated_default(base.cfg.hidden, base.cfg.n_layers);
        let data = LabeledDataset { train: toy_data(&base.cfg, 4), val: Vec::new() };
        let mut swapped = data.clone();
        for s in &mut swapped.train {
            s.domain = s.domain.other();
        }
        let cfg = TrainRunConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let a = train_superposed(&base, &fine, &ae_cfg, &data, &cfg, |_| {}).unwrap();
        let b = train_superposed(&base, &fine, &ae_cfg, &swapped, &cfg, |_| {}).unwrap();
        let sel_a = &a.log.steps[0].target_domains;
        let sel_b = &b.log.steps[0].target_domains;
        assert_eq!(sel_a.len(), sel_b.len());
        for (x, y) in sel_a.iter().zip(sel_b) {
            assert_eq!(*x, y.other());
        }
    }

    #[test]
    fn single_domain_stream_is_rejected() {
        let (base, fine) = trained_pair();
        let ae_cfg = AeConfig::gated_default(base.cfg.hidden, base.cfg.n_layers);
        let mut data = LabeledDataset { train: toy_data(&base.cfg, 4), val: Vec::new() };
        for s in &mut data.train {
            s.domain = Domain::Base;
        }
        let cfg = TrainRunConfig { epochs: 1, batch_size: 2, ..Default::default() };
        assert!(matches!(
            train_superposed(&base, &fine, &ae_cfg, &data, &cfg, |_| {}),
            Err(Error::Input(_))
        ));
    }
}
