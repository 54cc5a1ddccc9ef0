//! The experiment pipeline: train base expert, fine-tune the second expert,
//! build interpolation baselines, run superposition training, evaluate all
//! models, and export figure data. Each stage reads its inputs from and
//! writes its outputs to the run directory, so `eval` on saved checkpoints
//! reproduces the report a full `run` produced.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use sptx_core::analysis::{
    self, collect_probe, cosine, eval_forward, neuron_diversity,
    next_token_accuracy, pca_project, perplexity, EvalModel, POLYSEMANTIC_THRESHOLD,
};
use sptx_core::autoencoder::AutoencoderStack;
use sptx_core::bspline::{merge_params, AlphaSchedule};
use sptx_core::tape::Tape;
use sptx_core::training::{
    baseline_linear_merge, baseline_task_arithmetic, train_expert, train_superposed, ExpertLog,
    LabeledSequence, TrainingLog,
};
use sptx_core::transformer::{
    forward_hidden_blend, params_to_nodes, ModelParams,
};
use sptx_core::Domain;

use crate::artifacts::{
    file_checksum, load_model, load_superposed, save_model, save_superposed, RunPaths,
};
use crate::config::{ExperimentConfig, Mode};
use crate::corpus::{combined_dataset, Corpus};
use crate::report::{EvalReport, LayerAlignment, ModelEval, NeuronReport, ProjectionPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TrainBase,
    TrainFine,
    Baseline,
    Superpose,
    Eval,
    Analyze,
}

pub const STAGES: [Stage; 6] = [
    Stage::TrainBase,
    Stage::TrainFine,
    Stage::Baseline,
    Stage::Superpose,
    Stage::Eval,
    Stage::Analyze,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainBase => "train-base",
            Stage::TrainFine => "train-fine",
            Stage::Baseline => "baseline",
            Stage::Superpose => "superpose",
            Stage::Eval => "eval",
            Stage::Analyze => "analyze",
        }
    }

    /// Process exit code when this stage fails (0 = success, 1 = config).
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::TrainBase => 2,
            Stage::TrainFine => 3,
            Stage::Baseline => 4,
            Stage::Superpose => 5,
            Stage::Eval => 6,
            Stage::Analyze => 7,
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        STAGES
            .iter()
            .copied()
            .find(|stage| stage.name() == s)
            .ok_or_else(|| anyhow::anyhow!("unknown stage {s}; expected one of train-base, train-fine, baseline, superpose, eval, analyze"))
    }
}

/// A stage failure carrying the stage identity for exit-code mapping.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {} failed: {:#}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {}

fn at_stage<T>(stage: Stage, r: anyhow::Result<T>) -> Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

pub fn load_corpora(cfg: &ExperimentConfig) -> anyhow::Result<(Corpus, Corpus)> {
    let context = cfg.model.context;
    let a = Corpus::load(&cfg.corpus.domain_a, Domain::Base, context)?;
    let b = Corpus::load(&cfg.corpus.domain_b, Domain::Fine, context)?;
    Ok((a, b))
}

pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<(), StageError> {
    match stage {
        Stage::TrainBase => at_stage(stage, stage_train_base(cfg)),
        Stage::TrainFine => at_stage(stage, stage_train_fine(cfg)),
        Stage::Baseline => at_stage(stage, stage_baseline(cfg)),
        Stage::Superpose => at_stage(stage, stage_superpose(cfg)),
        Stage::Eval => at_stage(stage, stage_eval(cfg).map(|_| ())),
        Stage::Analyze => at_stage(stage, stage_analyze(cfg)),
    }
}

/// Executes the whole pipeline and returns the final report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<EvalReport, StageError> {
    at_stage(Stage::TrainBase, stage_train_base(cfg))?;
    at_stage(Stage::TrainFine, stage_train_fine(cfg))?;
    at_stage(Stage::Baseline, stage_baseline(cfg))?;
    at_stage(Stage::Superpose, stage_superpose(cfg))?;
    let report = at_stage(Stage::Eval, stage_eval(cfg))?;
    at_stage(Stage::Analyze, stage_analyze(cfg))?;
    Ok(report)
}

fn write_expert_log(path: &Path, log: &ExpertLog) -> anyhow::Result<()> {
    let mut csv = String::from("step,epoch,loss\n");
    for rec in &log.steps {
        writeln!(csv, "{},{},{}", rec.step, rec.epoch, rec.loss)?;
    }
    std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))
}

pub fn stage_train_base(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::create_dir_all(&paths.dir)?;
    let (a, _) = load_corpora(cfg)?;
    let model_cfg = cfg.model_config();
    let tcfg = cfg.expert_train_config();
    eprintln!(
        "[train-base] {} train sequences, {} epochs",
        a.train.len(),
        tcfg.epochs
    );
    let data = a.repeated_train(cfg.corpus.repeat_a);
    let (params, log) = train_expert::<f32>(&data, &model_cfg, None, &tcfg, |rec| {
        eprintln!("[train-base] step {} epoch {} loss {:.4}", rec.step, rec.epoch, rec.loss)
    })?;
    save_model(&paths.base(), &params)?;
    write_expert_log(&paths.expert_log("base"), &log)?;
    Ok(())
}

pub fn stage_train_fine(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    let base = load_model(&paths.base())?;
    let (_, b) = load_corpora(cfg)?;
    let model_cfg = cfg.model_config();
    let tcfg = cfg.expert_train_config();
    eprintln!(
        "[train-fine] fine-tuning from {}: {} train sequences",
        paths.base().display(),
        b.train.len()
    );
    let data = b.repeated_train(cfg.corpus.repeat_b);
    let (params, log) = train_expert::<f32>(&data, &model_cfg, Some(&base), &tcfg, |rec| {
        eprintln!("[train-fine] step {} epoch {} loss {:.4}", rec.step, rec.epoch, rec.loss)
    })?;
    save_model(&paths.fine(), &params)?;
    write_expert_log(&paths.expert_log("fine"), &log)?;
    Ok(())
}

pub fn stage_baseline(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let linear = baseline_linear_merge(&base, &fine, cfg.baseline.alpha0)?;
    let task = baseline_task_arithmetic(&base, &fine, cfg.baseline.lambda)?;
    save_model(&paths.linear(), &linear)?;
    save_model(&paths.task(), &task)?;
    eprintln!(
        "[baseline] linear alpha0={} and task lambda={} written",
        cfg.baseline.alpha0, cfg.baseline.lambda
    );
    Ok(())
}

fn write_superpose_logs(
    paths: &RunPaths,
    log: &TrainingLog,
    n_layers: usize,
) -> anyhow::Result<()> {
    let mut csv = String::from(
        "step,epoch,loss_total,loss_lm,loss_recon,loss_alpha_reg,loss_smoothness,loss_centrality,loss_mean_bias,loss_var_bias,alpha_mean,alpha_min,alpha_max\n",
    );
    for r in &log.steps {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.loss_total,
            r.loss_lm,
            r.loss_recon,
            r.loss_alpha_reg,
            r.smoothness,
            r.centrality,
            r.mean_bias,
            r.var_bias,
            r.alpha_mean,
            r.alpha_min,
            r.alpha_max
        )?;
    }
    std::fs::write(paths.superpose_log(), csv)?;

    let mut csv = String::from("epoch,mean_total_loss,val_jsd");
    for l in 1..=n_layers {
        write!(csv, ",alpha_l{l}")?;
    }
    csv.push('\n');
    for e in &log.epochs {
        write!(csv, "{},{},{}", e.epoch, e.mean_total_loss, e.val_jsd)?;
        for alpha in &e.alpha_per_layer {
            let mean: f64 = alpha.iter().sum::<f64>() / alpha.len() as f64;
            write!(csv, ",{mean}")?;
        }
        csv.push('\n');
    }
    std::fs::write(paths.epochs(), csv)?;
    Ok(())
}

fn read_jsd_per_epoch(paths: &RunPaths) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(paths.epochs())
        .with_context(|| format!("reading {}", paths.epochs().display()))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            bail!("malformed epochs.csv line: {line}");
        }
        out.push(fields[2].parse::<f64>().context("parsing val_jsd column")?);
    }
    Ok(out)
}

pub fn stage_superpose(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let base_sum = file_checksum(&paths.base())?;
    let fine_sum = file_checksum(&paths.fine())?;

    let (a, b) = load_corpora(cfg)?;
    let data = combined_dataset(&a, &b, cfg.corpus.repeat_a, cfg.corpus.repeat_b);
    let ae_cfg = cfg.ae_config()?;
    let run_cfg = cfg.superpose_train_config();
    eprintln!(
        "[superpose] mode {}, {} train sequences, autoencoders at layers {:?}",
        cfg.superpose.mode.as_str(),
        data.train.len(),
        ae_cfg.layers
    );
    let out = train_superposed(&base, &fine, &ae_cfg, &data, &run_cfg, |rec| {
        eprintln!(
            "[superpose] step {} epoch {} total {:.4} lm {:.4} recon {:.4} alpha[{:.3},{:.3}]",
            rec.step, rec.epoch, rec.loss_total, rec.loss_lm, rec.loss_recon, rec.alpha_min,
            rec.alpha_max
        )
    })?;

    // Hard merge from the trained schedule; experts must be untouched.
    let merged = merge_params(&base, &fine, &out.schedule, run_cfg.non_layer)?;
    save_superposed(&paths.superposed(), &merged.params, &out.schedule, &out.autoencoders)?;
    write_superpose_logs(&paths, &out.log, base.cfg.n_layers)?;
    if file_checksum(&paths.base())? != base_sum || file_checksum(&paths.fine())? != fine_sum {
        bail!("expert checkpoints changed during superposition training");
    }
    Ok(())
}

fn model_eval(
    model: &EvalModel<'_, f32>,
    val_a: &[LabeledSequence],
    val_b: &[LabeledSequence],
    combined: &[LabeledSequence],
) -> anyhow::Result<ModelEval> {
    Ok(ModelEval {
        ppl_a: perplexity(model, val_a)?,
        ppl_b: perplexity(model, val_b)?,
        ppl_combined: perplexity(model, combined)?,
        acc_a: next_token_accuracy(model, val_a)?,
        acc_b: next_token_accuracy(model, val_b)?,
        acc_combined: next_token_accuracy(model, combined)?,
    })
}

/// Perplexity and accuracy of the hidden-state blending evaluation mode.
fn hidden_blend_eval(
    base: &ModelParams<f32>,
    fine: &ModelParams<f32>,
    schedule: &AlphaSchedule<f32>,
    stack: &AutoencoderStack<f32>,
    data: &[LabeledSequence],
) -> anyhow::Result<(f64, f64)> {
    if data.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let mut total_ce = 0.0;
    let mut tokens = 0usize;
    let mut hits = 0usize;
    for seq in data {
        let mut tape = Tape::new();
        let base_nodes = params_to_nodes(&mut tape, base, false);
        let fine_nodes = params_to_nodes(&mut tape, fine, false);
        let sched_nodes = schedule.leaves(&mut tape, false);
        let ae_nodes = sptx_core::autoencoder::stack_to_nodes(&mut tape, stack, false);
        let (logits, _) = forward_hidden_blend(
            &mut tape,
            &base_nodes,
            &fine_nodes,
            schedule,
            &sched_nodes,
            &seq.tokens,
            Some(&ae_nodes),
            Some(seq.domain),
        )?;
        let ce = tape.cross_entropy(logits, &seq.targets)?;
        total_ce += tape.value(ce).data()[0] as f64 * seq.targets.len() as f64;
        tokens += seq.targets.len();
        let l = tape.value(logits);
        let vocab = l.last_dim();
        for (row, &target) in seq.targets.iter().enumerate() {
            let r = &l.data()[row * vocab..(row + 1) * vocab];
            let mut best = 0usize;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            hits += usize::from(best == target);
        }
    }
    let ce = total_ce / tokens as f64;
    Ok((ce.exp(), hits as f64 / tokens as f64))
}

/// Cosine-alignment fractions: per autoencoder layer and domain, how often
/// the reconstruction is closer to the correct expert's hidden state.
fn alignment_fractions(
    merged: &ModelParams<f32>,
    stack: &AutoencoderStack<f32>,
    base: &ModelParams<f32>,
    fine: &ModelParams<f32>,
    val: &[LabeledSequence],
) -> anyhow::Result<Vec<LayerAlignment>> {
    let merged_model = EvalModel { params: merged, autoencoders: Some(stack) };
    let base_model = EvalModel::plain(base);
    let fine_model = EvalModel::plain(fine);
    let mut correct = BTreeMap::new();
    let mut totals = BTreeMap::new();
    for seq in val {
        let (_, mtrace) = eval_forward(&merged_model, &seq.tokens, Some(seq.domain))?;
        let (_, btrace) = eval_forward(&base_model, &seq.tokens, Some(seq.domain))?;
        let (_, ftrace) = eval_forward(&fine_model, &seq.tokens, Some(seq.domain))?;
        for &layer in &stack.cfg.layers {
            let h_hat = &mtrace.h_hat[layer - 1];
            let cb = cosine(h_hat, &btrace.h[layer - 1]);
            let cf = cosine(h_hat, &ftrace.h[layer - 1]);
            let won = match seq.domain {
                Domain::Base => cb > cf,
                Domain::Fine => cf > cb,
            };
            *correct.entry((layer, seq.domain)).or_insert(0usize) += usize::from(won);
            *totals.entry((layer, seq.domain)).or_insert(0usize) += 1;
        }
    }
    let frac = |layer: usize, d: Domain| -> f64 {
        let c = correct.get(&(layer, d)).copied().unwrap_or(0);
        let t = totals.get(&(layer, d)).copied().unwrap_or(0);
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    };
    Ok(stack
        .cfg
        .layers
        .iter()
        .map(|&layer| LayerAlignment {
            layer,
            frac_base_domain: frac(layer, Domain::Base),
            frac_fine_domain: frac(layer, Domain::Fine),
        })
        .collect())
}

fn neuron_report(
    model: &EvalModel<'_, f32>,
    probe: &[LabeledSequence],
    kmeans_k: usize,
    seed: u64,
    stream_base: u64,
) -> anyhow::Result<(NeuronReport, Vec<Vec<(Domain, Vec<f64>)>>)> {
    let stats = collect_probe(model, probe)?;
    let mut report = NeuronReport::default();
    let mut profiles = Vec::with_capacity(stats.layers.len());
    for (li, layer) in stats.layers.iter().enumerate() {
        report.sparsity.push(layer.sparsity());
        report.mean_activation.push(layer.mean_activation());
        let ma = layer.domain_means(Domain::Base)?;
        let mb = layer.domain_means(Domain::Fine)?;
        report
            .polysemantic
            .push(analysis::polysemantic_fraction(&ma, &mb, POLYSEMANTIC_THRESHOLD)?);
        let neurons = layer.neuron_profiles();
        report.diversity.push(neuron_diversity(
            &neurons,
            kmeans_k,
            seed,
            stream_base + li as u64,
        )?);
        profiles.push(layer.profiles.clone());
    }
    Ok((report, profiles))
}

pub fn stage_eval(cfg: &ExperimentConfig) -> anyhow::Result<EvalReport> {
    let paths = RunPaths::new(&cfg.out_dir);
    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let linear = load_model(&paths.linear())?;
    let task = load_model(&paths.task())?;
    let (merged, schedule, stack) = load_superposed(&paths.superposed())?;

    let (a, b) = load_corpora(cfg)?;
    let val_a = a.val.clone();
    let val_b = b.val.clone();
    let mut combined = val_a.clone();
    combined.extend(val_b.iter().cloned());

    let n_probe_a = cfg.eval.probe_sequences.min(val_a.len());
    let n_probe_b = cfg.eval.probe_sequences.min(val_b.len());
    let mut probe = val_a[..n_probe_a].to_vec();
    probe.extend(val_b[..n_probe_b].iter().cloned());

    eprintln!("[eval] {} + {} validation sequences", val_a.len(), val_b.len());

    let mut models = BTreeMap::new();
    models.insert(
        "base".to_string(),
        model_eval(&EvalModel::plain(&base), &val_a, &val_b, &combined)?,
    );
    models.insert(
        "fine".to_string(),
        model_eval(&EvalModel::plain(&fine), &val_a, &val_b, &combined)?,
    );
    models.insert(
        "linear_merge".to_string(),
        model_eval(&EvalModel::plain(&linear), &val_a, &val_b, &combined)?,
    );
    models.insert(
        "task_arithmetic".to_string(),
        model_eval(&EvalModel::plain(&task), &val_a, &val_b, &combined)?,
    );
    let superposed_model = EvalModel { params: &merged, autoencoders: Some(&stack) };
    let superposed_eval = if cfg.eval.forward == "hidden-blend" {
        let (ppl_a, acc_a) = hidden_blend_eval(&base, &fine, &schedule, &stack, &val_a)?;
        let (ppl_b, acc_b) = hidden_blend_eval(&base, &fine, &schedule, &stack, &val_b)?;
        let (ppl_c, acc_c) = hidden_blend_eval(&base, &fine, &schedule, &stack, &combined)?;
        ModelEval {
            ppl_a,
            ppl_b,
            ppl_combined: ppl_c,
            acc_a,
            acc_b,
            acc_combined: acc_c,
        }
    } else {
        model_eval(&superposed_model, &val_a, &val_b, &combined)?
    };
    models.insert("superposed".to_string(), superposed_eval);

    let jsd_per_epoch = read_jsd_per_epoch(&paths)?;
    let alpha_per_layer: Result<Vec<Vec<f64>>, _> =
        (1..=merged.cfg.n_layers).map(|l| schedule.alpha_at(l)).collect();
    let alignment = alignment_fractions(&merged, &stack, &base, &fine, &combined)?;

    let mut neuron = BTreeMap::new();
    let mut all_profiles: BTreeMap<String, Vec<Vec<(Domain, Vec<f64>)>>> = BTreeMap::new();
    for (idx, (name, model)) in [
        ("base", EvalModel::plain(&base)),
        ("fine", EvalModel::plain(&fine)),
        ("superposed", superposed_model),
    ]
    .into_iter()
    .enumerate()
    {
        let (rep, profiles) =
            neuron_report(&model, &probe, cfg.eval.kmeans_k, cfg.seed, (idx as u64) << 16)?;
        neuron.insert(name.to_string(), rep);
        all_profiles.insert(name.to_string(), profiles);
    }

    // Joint PCA per (domain, layer) over the three models' per-sequence
    // mean states, so coordinates are comparable across models.
    let mut projection = Vec::new();
    let mut projection_explained = BTreeMap::new();
    let model_names = ["base", "fine", "superposed"];
    for domain in [Domain::Base, Domain::Fine] {
        for layer in 1..=merged.cfg.n_layers {
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut owners: Vec<&str> = Vec::new();
            for name in model_names {
                for (d, profile) in &all_profiles[name][layer - 1] {
                    if *d == domain {
                        rows.push(profile.clone());
                        owners.push(name);
                    }
                }
            }
            let pca = pca_project(&rows, 2, cfg.seed)?;
            projection_explained
                .insert(format!("{}/layer{}", domain.name(), layer), pca.explained.clone());
            for (owner, coords) in owners.iter().zip(&pca.coords) {
                projection.push(ProjectionPoint {
                    model: owner.to_string(),
                    domain: domain.name().to_string(),
                    layer,
                    x: coords[0],
                    y: coords[1],
                });
            }
        }
    }

    let report = EvalReport {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        mode: cfg.superpose.mode.as_str().to_string(),
        models,
        jsd_per_epoch,
        alpha_per_layer: alpha_per_layer?,
        alignment,
        neuron,
        projection,
        projection_explained,
    };
    report.write(&paths.report())?;
    Ok(report)
}

pub fn stage_analyze(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    let report = EvalReport::read(&paths.report())?;
    report.write_figure_csvs(&paths.dir)?;

    // Raw per-sequence mean hidden states for external projection tools.
    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let (merged, _, stack) = load_superposed(&paths.superposed())?;
    let (a, b) = load_corpora(cfg)?;
    let n_probe_a = cfg.eval.probe_sequences.min(a.val.len());
    let n_probe_b = cfg.eval.probe_sequences.min(b.val.len());
    let mut probe = a.val[..n_probe_a].to_vec();
    probe.extend(b.val[..n_probe_b].iter().cloned());

    let mut csv = String::from("model,domain,layer,sample");
    for d in 0..merged.cfg.hidden {
        write!(csv, ",d{d}")?;
    }
    csv.push('\n');
    for (name, model) in [
        ("base", EvalModel::plain(&base)),
        ("fine", EvalModel::plain(&fine)),
        ("superposed", EvalModel { params: &merged, autoencoders: Some(&stack) }),
    ] {
        let stats = collect_probe(&model, &probe)?;
        for (li, layer) in stats.layers.iter().enumerate() {
            for (sample, (domain, profile)) in layer.profiles.iter().enumerate() {
                write!(csv, "{},{},{},{}", name, domain.name(), li + 1, sample)?;
                for v in profile {
                    write!(csv, ",{v}")?;
                }
                csv.push('\n');
            }
        }
    }
    std::fs::write(paths.figure("states.csv"), csv)?;
    eprintln!("[analyze] figure CSVs written to {}", paths.dir.display());
    Ok(())
}

/// Structural sanity check used by `eval`-style consumers: every artifact a
/// report references must exist and load.
pub fn check_artifacts(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let paths = RunPaths::new(&cfg.out_dir);
    load_model(&paths.base())?;
    load_model(&paths.fine())?;
    load_model(&paths.linear())?;
    load_model(&paths.task())?;
    load_superposed(&paths.superposed())?;
    Ok(())
}

/// Mode string for log lines.
pub fn mode_name(mode: Mode) -> &'static str {
    mode.as_str()
}
