//! Dev utility: sweeps superposition hyperparameters and prints criterion
//! diagnostics under both probe conventions.

use sptx::artifacts::{load_model, load_superposed, RunPaths};
use sptx::config::ExperimentConfig;
use sptx::corpus::combined_dataset;
use sptx::pipeline;
use sptx_core::analysis::{
    collect_probe_states, polysemantic_fraction, neuron_diversity, EvalModel, ProbeState,
    POLYSEMANTIC_THRESHOLD,
};
use sptx_core::Domain;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let cfg = ExperimentConfig::load(std::path::Path::new(&args[1]), None, None, None)?;
    let paths = RunPaths::new(&cfg.out_dir);

    let base = load_model(&paths.base())?;
    let fine = load_model(&paths.fine())?;
    let (merged, _sched, stack) = load_superposed(&paths.superposed())?;
    let (a, b) = pipeline::load_corpora(&cfg)?;
    let data = combined_dataset(&a, &b, 1, 1);
    let n = cfg.eval.probe_sequences;
    let mut probe = a.val[..n.min(a.val.len())].to_vec();
    probe.extend(b.val[..n.min(b.val.len())].iter().cloned());
    let _ = data;

    for state in [ProbeState::Propagated, ProbeState::LayerOutput] {
        println!("== probe {:?}", state);
        for (name, model) in [
            ("base", EvalModel::plain(&base)),
            ("fine", EvalModel::plain(&fine)),
            ("superposed", EvalModel { params: &merged, autoencoders: Some(&stack) }),
            ("hard-merge", EvalModel::plain(&merged)),
        ] {
            let stats = collect_probe_states(&model, &probe, state)?;
            let mut poly_abs = Vec::new();
            let mut poly_signed = Vec::new();
            let mut div = Vec::new();
            for (li, layer) in stats.layers.iter().enumerate() {
                let ma = layer.domain_means(Domain::Base)?;
                let mb = layer.domain_means(Domain::Fine)?;
                poly_abs.push(polysemantic_fraction(&ma, &mb, POLYSEMANTIC_THRESHOLD)?);
                let sa = layer.domain_means_signed(Domain::Base)?;
                let sb = layer.domain_means_signed(Domain::Fine)?;
                poly_signed.push(polysemantic_fraction(&sa, &sb, POLYSEMANTIC_THRESHOLD)?);
                div.push(neuron_diversity(&layer.neuron_profiles(), cfg.eval.kmeans_k, cfg.seed, li as u64)?);
            }
            let r1 = |v: &Vec<f64>| v.iter().map(|x| format!("{x:5.1}")).collect::<Vec<_>>().join(" ");
            let r3 = |v: &Vec<f64>| v.iter().map(|x| format!("{x:5.3}")).collect::<Vec<_>>().join(" ");
            println!("  {name:11} poly_abs [{}]", r1(&poly_abs));
            println!("  {name:11} poly_sgn [{}]", r1(&poly_signed));
            println!("  {name:11} div      [{}]", r3(&div));
        }
    }
    Ok(())
}
