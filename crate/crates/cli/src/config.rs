//! Experiment configuration: a TOML file of nested sections. Unknown keys
//! are rejected and every referenced file must exist at load time. The
//! resolved configuration (after CLI overrides) hashes into the report so
//! equal hashes plus equal seeds imply byte-identical outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sptx_core::adam::AdamConfig;
use sptx_core::autoencoder::{middle_band_layers, AeConfig, AeLayout};
use sptx_core::bspline::{AlphaMode, NonLayerSource};
use sptx_core::losses::LossWeights;
use sptx_core::tokenizer;
use sptx_core::training::{ExpertTrainConfig, TrainRunConfig};
use sptx_core::transformer::ModelConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub expert: ExpertSection,
    pub superpose: SuperposeSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub context: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub domain_a: PathBuf,
    pub domain_b: PathBuf,
    #[serde(default = "one")]
    pub repeat_a: usize,
    #[serde(default = "one")]
    pub repeat_b: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExpertSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SuperposeSection {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_n_ctrl")]
    pub n_ctrl: usize,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub enum Mode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

impl Mode {
    pub fn alpha_mode(self) -> AlphaMode {
        match self {
            Mode::OneD => AlphaMode::Scalar,
            Mode::TwoD => AlphaMode::PerDim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::OneD => "1d",
            Mode::TwoD => "2d",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1d" => Ok(Mode::OneD),
            "2d" => Ok(Mode::TwoD),
            other => bail!("mode must be 1d or 2d, got {other}"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    /// gated | plain | dual; default depends on the mode.
    pub layout: Option<String>,
    pub bottleneck: Option<usize>,
    /// Selected transformer layers (1-based). Defaults: all layers in 1d
    /// mode, the middle band in 2d mode.
    pub layers: Option<Vec<usize>>,
    pub decoders: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub local_channels: Option<usize>,
    pub global_rank: Option<usize>,
    pub global_width: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lm: f64,
    pub recon: f64,
    pub mse: f64,
    pub l2: f64,
    pub alpha_reg: f64,
    pub smoothness: f64,
    pub centrality: f64,
    pub mean_bias: f64,
    pub var_bias: f64,
    pub sigma_target_sq: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lm: w.lm,
            recon: w.recon,
            mse: w.mse,
            l2: w.l2,
            alpha_reg: w.alpha_reg,
            smoothness: w.smoothness,
            centrality: w.centrality,
            mean_bias: w.mean_bias,
            var_bias: w.var_bias,
            sigma_target_sq: w.sigma_target_sq,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Linear-interpolation coefficient.
    pub alpha0: f64,
    /// Task-arithmetic coefficient.
    pub lambda: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { alpha0: 0.5, lambda: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Probe sequences per domain for neuron statistics and projections.
    pub probe_sequences: usize,
    pub kmeans_k: usize,
    /// merged | hidden-blend forward for the superposed model's perplexity
    /// and accuracy entries.
    pub forward: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { probe_sequences: 32, kmeans_k: 10, forward: "merged".into() }
    }
}

fn one() -> usize {
    1
}

fn default_log_every() -> usize {
    10
}

fn default_n_ctrl() -> usize {
    sptx_core::bspline::DEFAULT_CONTROL_POINTS
}

fn default_degree() -> usize {
    sptx_core::bspline::DEFAULT_DEGREE
}

impl ExperimentConfig {
    /// Parses a config file, applies CLI overrides, validates everything and
    /// checks referenced files exist.
    pub fn load(
        path: &Path,
        seed: Option<u64>,
        out: Option<PathBuf>,
        mode: Option<Mode>,
    ) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.out_dir = out;
        }
        if let Some(mode) = mode {
            cfg.superpose.mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model_config().validate().map_err(anyhow::Error::from)?;
        self.ae_config()?.validate(self.model.hidden, self.model.n_layers)?;
        self.loss_weights().validate()?;
        if self.expert.epochs == 0 || self.superpose.epochs == 0 {
            bail!("epochs must be >= 1");
        }
        if self.expert.batch_size == 0 || self.superpose.batch_size == 0 {
            bail!("batch size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.baseline.alpha0) {
            bail!("baseline alpha0 must be in [0, 1]");
        }
        if !self.baseline.lambda.is_finite() {
            bail!("baseline lambda must be finite");
        }
        if self.corpus.repeat_a == 0 || self.corpus.repeat_b == 0 {
            bail!("repetition factors must be >= 1");
        }
        if self.eval.probe_sequences == 0 {
            bail!("probe_sequences must be >= 1");
        }
        if !matches!(self.eval.forward.as_str(), "merged" | "hidden-blend") {
            bail!("eval.forward must be 'merged' or 'hidden-blend'");
        }
        if self.superpose.mode == Mode::OneD && self.loss.alpha_reg > 0.0 {
            // Not an error: Eq. 8 has no alpha-regularization term.
            eprintln!(
                "warning: alpha_reg weight is set but mode is 1d; the term is ignored"
            );
        }
        for path in [&self.corpus.domain_a, &self.corpus.domain_b] {
            if !path.exists() {
                bail!("corpus file {} does not exist", path.display());
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            hidden: self.model.hidden,
            n_heads: self.model.n_heads,
            ff_mult: self.model.ff_mult,
            context: self.model.context,
            vocab: tokenizer::VOCAB_SIZE,
            seed: self.seed,
        }
    }

    pub fn ae_config(&self) -> anyhow::Result<AeConfig> {
        let default_layout = match self.superpose.mode {
            Mode::OneD => "gated",
            Mode::TwoD => "dual",
        };
        let layout = match self.autoencoder.layout.as_deref().unwrap_or(default_layout) {
            "gated" => AeLayout::Gated1d,
            "plain" => AeLayout::Plain1d,
            "dual" => AeLayout::Dual2d,
            other => bail!("unknown autoencoder layout {other}"),
        };
        let h = self.model.hidden;
        let n_layers = self.model.n_layers;
        let defaults = match layout {
            AeLayout::Dual2d => AeConfig::dual_default(h, n_layers),
            _ => AeConfig { layout, ..AeConfig::gated_default(h, n_layers) },
        };
        let layers = self.autoencoder.layers.clone().unwrap_or_else(|| match self.superpose.mode {
            Mode::OneD => (1..=n_layers).collect(),
            Mode::TwoD => middle_band_layers(n_layers),
        });
        let local_channels =
            self.autoencoder.local_channels.unwrap_or(defaults.local_channels);
        let global_width = self.autoencoder.global_width.unwrap_or(defaults.global_width);
        let bottleneck = self.autoencoder.bottleneck.unwrap_or(match layout {
            AeLayout::Dual2d => local_channels + global_width,
            _ => defaults.bottleneck,
        });
        Ok(AeConfig {
            layout,
            bottleneck,
            layers,
            decoders: self.autoencoder.decoders.unwrap_or(1),
            conv_kernel: self.autoencoder.conv_kernel.unwrap_or(defaults.conv_kernel),
            local_channels,
            global_rank: self.autoencoder.global_rank.unwrap_or(defaults.global_rank),
            global_width,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lm: self.loss.lm,
            recon: self.loss.recon,
            mse: self.loss.mse,
            l2: self.loss.l2,
            alpha_reg: self.loss.alpha_reg,
            smoothness: self.loss.smoothness,
            centrality: self.loss.centrality,
            mean_bias: self.loss.mean_bias,
            var_bias: self.loss.var_bias,
            sigma_target_sq: self.loss.sigma_target_sq,
        }
    }

    pub fn expert_train_config(&self) -> ExpertTrainConfig {
        ExpertTrainConfig {
            epochs: self.expert.epochs,
            batch_size: self.expert.batch_size,
            adam: AdamConfig { lr: self.expert.lr, ..Default::default() },
            seed: self.seed,
            log_every: self.expert.log_every,
        }
    }

    pub fn superpose_train_config(&self) -> TrainRunConfig {
        TrainRunConfig {
            epochs: self.superpose.epochs,
            batch_size: self.superpose.batch_size,
            adam: AdamConfig { lr: self.superpose.lr, ..Default::default() },
            weights: self.loss_weights(),
            mode: self.superpose.mode.alpha_mode(),
            n_ctrl: self.superpose.n_ctrl,
            degree: self.superpose.degree,
            non_layer: NonLayerSource::Base,
            seed: self.seed,
            log_every: self.superpose.log_every,
        }
    }

    /// SHA-256 over the canonical TOML serialization of the resolved config.
    pub fn hash(&self) -> anyhow::Result<String> {
        let canonical = toml::to_string(self).context("serializing config for hashing")?;
        Ok(sptx_core::checkpoint::sha256_hex(canonical.as_bytes()))
    }
}
