//! Dev utility: grid-sweeps superposition settings against the trained
//! expert pair and prints a criteria scoreboard per point.

use std::sync::Mutex;

use sptx::artifacts::{load_model, RunPaths};
use sptx::config::ExperimentConfig;
use sptx::corpus::combined_dataset;
use sptx::pipeline::load_corpora;
use sptx_core::adam::AdamConfig;
use sptx_core::analysis::{
    collect_probe, cosine, eval_forward, next_token_accuracy, perplexity, polysemantic_fraction,
    neuron_diversity, EvalModel, POLYSEMANTIC_THRESHOLD,
};
use sptx_core::autoencoder::AeConfig;
use sptx_core::bspline::{merge_params, AlphaMode, NonLayerSource};
use sptx_core::losses::LossWeights;
use sptx_core::training::{train_superposed, LabeledSequence, TrainRunConfig};
use sptx_core::transformer::ModelParams;
use sptx_core::Domain;

#[derive(Clone, Debug)]
struct Point {
    name: String,
    bottleneck: usize,
    layers: Vec<usize>,
    decoders: usize,
    lr: f64,
    batch: usize,
    epochs: usize,
    lm_w: f64,
    mode: AlphaMode,
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = ExperimentConfig::load(std::path::Path::new(&args[1]), None, None, None)?;
    let paths = RunPaths::new(&cfg.out_dir);
    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let (a, b) = load_corpora(&cfg)?;
    let data = combined_dataset(&a, &b, cfg.corpus.repeat_a, cfg.corpus.repeat_b);
    let linear = sptx_core::training::baseline_linear_merge(&base, &fine, 0.5)?;
    let mut combined_val = a.val.clone();
    combined_val.extend(b.val.iter().cloned());
    let base_ppl = perplexity(&EvalModel::plain(&linear), &combined_val)?;
    let base_acc = next_token_accuracy(&EvalModel::plain(&linear), &combined_val)?;
    println!("baseline(0.5): ppl {base_ppl:.2} acc {base_acc:.4}");

    let mut points = Vec::new();
    for &(name, bneck, ref layers, dec, lr, batch, epochs, lm_w) in &[
        ("g1_b32_L2345", 32usize, vec![2, 3, 4, 5], 1usize, 3e-3, 8usize, 6usize, 1.0),
        ("g2_b48_L2345", 48, vec![2, 3, 4, 5], 1, 3e-3, 8, 6, 1.0),
        ("g3_b32_L345", 32, vec![3, 4, 5], 1, 3e-3, 8, 6, 1.0),
        ("g4_b48_L345", 48, vec![3, 4, 5], 1, 3e-3, 8, 6, 1.0),
        ("g5_b32_dec2", 32, vec![2, 3, 4, 5], 2, 3e-3, 8, 6, 1.0),
        ("g6_b16_dec2", 16, vec![2, 3, 4, 5], 2, 3e-3, 8, 6, 1.0),
    ] {
        points.push(Point {
            name: name.to_string(),
            bottleneck: bneck,
            layers: layers.clone(),
            decoders: dec,
            lr,
            batch,
            epochs,
            lm_w,
            mode: AlphaMode::Scalar,
        });
    }

    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        let chunks: Vec<Vec<Point>> = points.chunks(points.len().div_ceil(2)).map(|c| c.to_vec()).collect();
        for chunk in chunks {
            let base = &base;
            let fine = &fine;
            let data = &data;
            let combined_val = &combined_val;
            let results = &results;
            scope.spawn(move || {
                for p in chunk {
                    let out = run_point(base, fine, data, combined_val, &p);
                    results.lock().unwrap().push((p.name.clone(), out));
                }
            });
        }
    });
    let mut all = results.into_inner().unwrap();
    all.sort_by(|x, y| x.0.cmp(&y.0));
    for (name, line) in all {
        match line {
            Ok(s) => println!("{name}:\n{s}"),
            Err(e) => println!("{name}: FAILED {e:#}"),
        }
    }
    Ok(())
}

fn run_point(
    base: &ModelParams<f32>,
    fine: &ModelParams<f32>,
    data: &sptx_core::training::LabeledDataset,
    combined_val: &[LabeledSequence],
    p: &Point,
) -> anyhow::Result<String> {
    let ae_cfg = AeConfig {
        bottleneck: p.bottleneck,
        layers: p.layers.clone(),
        decoders: p.decoders,
        ..AeConfig::gated_default(base.cfg.hidden, base.cfg.n_layers)
    };
    let run_cfg = TrainRunConfig {
        epochs: p.epochs,
        batch_size: p.batch,
        adam: AdamConfig { lr: p.lr, ..Default::default() },
        weights: LossWeights { lm: p.lm_w, ..Default::default() },
        mode: p.mode,
        seed: 42,
        ..Default::default()
    };
    let out = train_superposed(base, fine, &ae_cfg, data, &run_cfg, |_| {})?;
    let merged = merge_params(base, fine, &out.schedule, NonLayerSource::Base)?;
    let model = EvalModel { params: &merged.params, autoencoders: Some(&out.autoencoders) };

    let ppl = perplexity(&model, combined_val)?;
    let acc = next_token_accuracy(&model, combined_val)?;

    // Alignment fractions.
    let mut align = String::new();
    for &layer in &ae_cfg.layers {
        let mut won = [0usize; 2];
        let mut tot = [0usize; 2];
        for seq in combined_val {
            let (_, mt) = eval_forward(&model, &seq.tokens, Some(seq.domain))?;
            let (_, bt) = eval_forward(&EvalModel::plain(base), &seq.tokens, Some(seq.domain))?;
            let (_, ft) = eval_forward(&EvalModel::plain(fine), &seq.tokens, Some(seq.domain))?;
            let cb = cosine(&mt.h_hat[layer - 1], &bt.h[layer - 1]);
            let cf = cosine(&mt.h_hat[layer - 1], &ft.h[layer - 1]);
            let d = if seq.domain == Domain::Base { 0 } else { 1 };
            won[d] += usize::from(if d == 0 { cb > cf } else { cf > cb });
            tot[d] += 1;
        }
        align.push_str(&format!(
            " L{layer}:{:.2}/{:.2}",
            won[0] as f64 / tot[0] as f64,
            won[1] as f64 / tot[1] as f64
        ));
    }

    // Neuron stats on the propagated states.
    let stats = collect_probe(&model, combined_val)?;
    let mut div = String::new();
    let mut poly = String::new();
    for (li, layer) in stats.layers.iter().enumerate() {
        let e = neuron_diversity(&layer.neuron_profiles(), 10, 42, li as u64)?;
        div.push_str(&format!(" {e:.3}"));
        let ma = layer.domain_means(Domain::Base)?;
        let mb = layer.domain_means(Domain::Fine)?;
        poly.push_str(&format!(
            " {:.0}",
            polysemantic_fraction(&ma, &mb, POLYSEMANTIC_THRESHOLD)?
        ));
    }

    let jsd: Vec<String> = out.log.epochs.iter().map(|e| format!("{:.1}", e.val_jsd)).collect();
    Ok(format!(
        "  ppl {ppl:.2} acc {acc:.4}\n  align{align}\n  jsd [{}]\n  div [{div}]  poly [{poly}]",
        jsd.join(", ")
    ))
}
