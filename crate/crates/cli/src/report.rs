//! The evaluation report: one JSON document plus per-figure CSV exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    /// Per-model perplexity and accuracy on each domain's validation set and
    /// on the combined validation stream.
    pub models: BTreeMap<String, ModelEval>,
    /// Validation JSD (x100) of the merged model against the experts'
    /// average prediction, one entry per training epoch.
    pub jsd_per_epoch: Vec<f64>,
    /// Final blending coefficients per layer (one entry per layer; scalar
    /// mode has width 1).
    pub alpha_per_layer: Vec<Vec<f64>>,
    /// Reconstruction alignment fractions per autoencoder layer.
    pub alignment: Vec<LayerAlignment>,
    /// Per-layer neuron statistics per model.
    pub neuron: BTreeMap<String, NeuronReport>,
    /// 2-component PCA coordinates of per-sequence mean hidden states,
    /// fitted per (domain, layer) over the three models jointly.
    pub projection: Vec<ProjectionPoint>,
    /// Explained-variance ratios per `domain/layer` fit.
    pub projection_explained: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ModelEval {
    pub ppl_a: f64,
    pub ppl_b: f64,
    pub ppl_combined: f64,
    pub acc_a: f64,
    pub acc_b: f64,
    pub acc_combined: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LayerAlignment {
    pub layer: usize,
    /// Fraction of domain-A validation sequences whose reconstruction is
    /// cosine-closer to the base expert's hidden state.
    pub frac_base_domain: f64,
    /// Fraction of domain-B validation sequences closer to the fine expert.
    pub frac_fine_domain: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct NeuronReport {
    pub sparsity: Vec<f64>,
    pub polysemantic: Vec<f64>,
    pub diversity: Vec<f64>,
    pub mean_activation: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProjectionPoint {
    pub model: String,
    pub domain: String,
    pub layer: usize,
    pub x: f64,
    pub y: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> anyhow::Result<String> {
        let mut s = serde_json::to_string_pretty(self).context("serializing report")?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_json()?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Per-figure CSVs derived from the report: projection coordinates,
    /// diversity per layer, mean activation per layer, JSD per epoch.
    pub fn write_figure_csvs(&self, dir: &Path) -> anyhow::Result<()> {
        let mut projection = String::from("model,domain,layer,x,y\n");
        for p in &self.projection {
            writeln!(projection, "{},{},{},{},{}", p.model, p.domain, p.layer, p.x, p.y)?;
        }
        std::fs::write(dir.join("projection.csv"), projection)?;

        let mut diversity = String::from("model,layer,entropy\n");
        let mut activation = String::from("model,layer,mean_activation\n");
        for (model, neuron) in &self.neuron {
            for (i, v) in neuron.diversity.iter().enumerate() {
                writeln!(diversity, "{},{},{}", model, i + 1, v)?;
            }
            for (i, v) in neuron.mean_activation.iter().enumerate() {
                writeln!(activation, "{},{},{}", model, i + 1, v)?;
            }
        }
        std::fs::write(dir.join("diversity.csv"), diversity)?;
        std::fs::write(dir.join("activation.csv"), activation)?;

        let mut jsd = String::from("epoch,jsd\n");
        for (i, v) in self.jsd_per_epoch.iter().enumerate() {
            writeln!(jsd, "{},{}", i + 1, v)?;
        }
        std::fs::write(dir.join("jsd.csv"), jsd)?;
        Ok(())
    }
}
