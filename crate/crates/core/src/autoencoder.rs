//! Per-layer autoencoders that compress a hidden state into a bottleneck and
//! reconstruct it toward one expert's hidden state.
//!
//! Layouts:
//! - gated 1D: `z = sigmoid(h W1) (*) (h W2) + bz`, decode mirrors it back to
//!   hidden size. Parameter count is exactly `4hb + h + b`.
//! - plain 1D: single affine encoder/decoder (`2hb + h + b`), an ablation.
//! - dual 2D: a convolutional local pathway over the sequence axis plus a
//!   low-rank global pathway, concatenated and affinely decoded.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeLayout {
    Gated1d,
    Plain1d,
    Dual2d,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeConfig {
    pub layout: AeLayout,
    /// Bottleneck width; for the dual layout this is
    /// `local_channels + global_width`.
    pub bottleneck: usize,
    /// Selected transformer layers, 1-based, strictly increasing.
    pub layers: Vec<usize>,
    /// Decoders per autoencoder (1 shared, or 2 selected by domain label).
    pub decoders: usize,
    pub conv_kernel: usize,
    pub local_channels: usize,
    pub global_rank: usize,
    pub global_width: usize,
}

/// Middle contiguous band covering roughly 60% of the layers, starting about
/// a third of the way in and stopping short of the last layer.
pub fn middle_band_layers(n_layers: usize) -> Vec<usize> {
    let count = (7 * n_layers).div_ceil(12).max(1);
    let start = (n_layers.div_ceil(3)).max(2);
    let end = (start + count - 1).min(n_layers.saturating_sub(1)).max(start);
    (start..=end).collect()
}

impl AeConfig {
    /// Gated 1D layout over every transformer layer with a half-width
    /// bottleneck.
    pub fn gated_default(hidden: usize, n_layers: usize) -> Self {
        AeConfig {
            layout: AeLayout::Gated1d,
            bottleneck: (hidden / 2).max(1),
            layers: (1..=n_layers).collect(),
            decoders: 1,
            conv_kernel: 0,
            local_channels: 0,
            global_rank: 0,
            global_width: 0,
        }
    }

    /// Dual-pathway layout over the middle band of layers; the combined
    /// bottleneck (3h/4) stays a compression.
    pub fn dual_default(hidden: usize, n_layers: usize) -> Self {
        let local = (hidden / 2).max(1);
        let global = (hidden / 4).max(1);
        AeConfig {
            layout: AeLayout::Dual2d,
            bottleneck: local + global,
            layers: middle_band_layers(n_layers),
            decoders: 1,
            conv_kernel: 3,
            local_channels: local,
            global_rank: 8.min(hidden),
            global_width: global,
        }
    }

    pub fn validate(&self, hidden: usize, n_layers: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("autoencoder layer set is empty"));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("autoencoder layers must be strictly increasing"));
        }
        // Layer 0 is the embedding and the final layer norm is separate, so
        // valid attachment points are the transformer layers 1..=L.
        if self.layers[0] < 1 || *self.layers.last().unwrap() > n_layers {
            return Err(Error::config(format!(
                "autoencoder layers {:?} outside 1..={n_layers}",
                self.layers
            )));
        }
        if !(1..=2).contains(&self.decoders) {
            return Err(Error::config("decoders must be 1 or 2"));
        }
        match self.layout {
            AeLayout::Gated1d | AeLayout::Plain1d => {
                if self.bottleneck == 0 || self.bottleneck >= hidden {
                    return Err(Error::config(format!(
                        "1D bottleneck must satisfy 1 <= b < hidden, got b={} h={hidden}",
                        self.bottleneck
                    )));
                }
            }
            AeLayout::Dual2d => {
                if self.local_channels + self.global_width != self.bottleneck {
                    return Err(Error::config(
                        "dual layout requires local_channels + global_width == bottleneck",
                    ));
                }
                if self.conv_kernel == 0 || self.local_channels == 0 || self.global_rank == 0 {
                    return Err(Error::config("dual layout dimensions must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count per autoencoder. Gated 1D with one decoder
    /// is `4hb + h + b`; each extra decoder adds its decoder-side parameters.
    pub fn param_count(&self, hidden: usize) -> usize {
        let h = hidden;
        let b = self.bottleneck;
        match self.layout {
            AeLayout::Gated1d => {
                let encoder = 2 * h * b + b;
                let decoder = 2 * b * h + h;
                encoder + self.decoders * decoder
            }
            AeLayout::Plain1d => {
                let encoder = h * b + b;
                let decoder = b * h + h;
                encoder + self.decoders * decoder
            }
            AeLayout::Dual2d => {
                let local = self.conv_kernel * h * self.local_channels + self.local_channels;
                let global = h * self.global_rank + self.global_rank * self.global_width;
                let decoder = b * h + h;
                local + global + self.decoders * decoder
            }
        }
    }
}

/// Affine decoder shared by the plain and dual layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDecoder<T> {
    pub wd: Tensor<T>,
    pub bd: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedDecoder<T> {
    pub w3: Tensor<T>,
    pub w4: Tensor<T>,
    pub bh: Tensor<T>,
}

/// Parameters of one layer's autoencoder.
#[derive(Debug, Clone, PartialEq)]
pub enum AeLayerParams<T> {
    Gated {
        w1: Tensor<T>,
        w2: Tensor<T>,
        bz: Tensor<T>,
        decoders: Vec<GatedDecoder<T>>,
    },
    Plain {
        we: Tensor<T>,
        be: Tensor<T>,
        decoders: Vec<AffineDecoder<T>>,
    },
    Dual {
        kernel: Tensor<T>,
        kbias: Tensor<T>,
        g1: Tensor<T>,
        g2: Tensor<T>,
        decoders: Vec<AffineDecoder<T>>,
    },
}

impl<T: Real> AeLayerParams<T> {
    fn init(cfg: &AeConfig, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut normal = |shape: Vec<usize>, std: f64| {
            Tensor::from_fn(shape, |_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from64(z * std)
            })
        };
        let h = hidden;
        let b = cfg.bottleneck;
        match cfg.layout {
            AeLayout::Gated1d => AeLayerParams::Gated {
                w1: normal(vec![h, b], 1.0 / libm::sqrt(h as f64)),
                w2: normal(vec![h, b], 1.0 / libm::sqrt(h as f64)),
                bz: Tensor::zeros(vec![b]),
                decoders: (0..cfg.decoders)
                    .map(|_| GatedDecoder {
                        w3: normal(vec![b, h], 1.0 / libm::sqrt(b as f64)),
                        w4: normal(vec![b, h], 1.0 / libm::sqrt(b as f64)),
                        bh: Tensor::zeros(vec![h]),
                    })
                    .collect(),
            },
            AeLayout::Plain1d => AeLayerParams::Plain {
                we: normal(vec![h, b], 1.0 / libm::sqrt(h as f64)),
                be: Tensor::zeros(vec![b]),
                decoders: (0..cfg.decoders)
                    .map(|_| AffineDecoder {
                        wd: normal(vec![b, h], 1.0 / libm::sqrt(b as f64)),
                        bd: Tensor::zeros(vec![h]),
                    })
                    .collect(),
            },
            AeLayout::Dual2d => AeLayerParams::Dual {
                kernel: normal(
                    vec![cfg.conv_kernel, h, cfg.local_channels],
                    1.0 / libm::sqrt((cfg.conv_kernel * h) as f64),
                ),
                kbias: Tensor::zeros(vec![cfg.local_channels]),
                g1: normal(vec![h, cfg.global_rank], 1.0 / libm::sqrt(h as f64)),
                g2: normal(
                    vec![cfg.global_rank, cfg.global_width],
                    1.0 / libm::sqrt(cfg.global_rank as f64),
                ),
                decoders: (0..cfg.decoders)
                    .map(|_| AffineDecoder {
                        wd: normal(vec![b, h], 1.0 / libm::sqrt(b as f64)),
                        bd: Tensor::zeros(vec![h]),
                    })
                    .collect(),
            },
        }
    }

    /// (suffix, tensor) pairs for checkpointing and optimizer bookkeeping.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            AeLayerParams::Gated { w1, w2, bz, decoders } => {
                out.push((String::from("w1"), w1));
                out.push((String::from("w2"), w2));
                out.push((String::from("bz"), bz));
                for (d, dec) in decoders.iter().enumerate() {
                    out.push((format!("dec{d}.w3"), &dec.w3));
                    out.push((format!("dec{d}.w4"), &dec.w4));
                    out.push((format!("dec{d}.bh"), &dec.bh));
                }
            }
            AeLayerParams::Plain { we, be, decoders } => {
                out.push((String::from("we"), we));
                out.push((String::from("be"), be));
                for (d, dec) in decoders.iter().enumerate() {
                    out.push((format!("dec{d}.wd"), &dec.wd));
                    out.push((format!("dec{d}.bd"), &dec.bd));
                }
            }
            AeLayerParams::Dual { kernel, kbias, g1, g2, decoders } => {
                out.push((String::from("conv.kernel"), kernel));
                out.push((String::from("conv.bias"), kbias));
                out.push((String::from("global.w1"), g1));
                out.push((String::from("global.w2"), g2));
                for (d, dec) in decoders.iter().enumerate() {
                    out.push((format!("dec{d}.wd"), &dec.wd));
                    out.push((format!("dec{d}.bd"), &dec.bd));
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        match self {
            AeLayerParams::Gated { w1, w2, bz, decoders } => {
                out.push((String::from("w1"), w1));
                out.push((String::from("w2"), w2));
                out.push((String::from("bz"), bz));
                for (d, dec) in decoders.iter_mut().enumerate() {
                    out.push((format!("dec{d}.w3"), &mut dec.w3));
                    out.push((format!("dec{d}.w4"), &mut dec.w4));
                    out.push((format!("dec{d}.bh"), &mut dec.bh));
                }
            }
            AeLayerParams::Plain { we, be, decoders } => {
                out.push((String::from("we"), we));
                out.push((String::from("be"), be));
                for (d, dec) in decoders.iter_mut().enumerate() {
                    out.push((format!("dec{d}.wd"), &mut dec.wd));
                    out.push((format!("dec{d}.bd"), &mut dec.bd));
                }
            }
            AeLayerParams::Dual { kernel, kbias, g1, g2, decoders } => {
                out.push((String::from("conv.kernel"), kernel));
                out.push((String::from("conv.bias"), kbias));
                out.push((String::from("global.w1"), g1));
                out.push((String::from("global.w2"), g2));
                for (d, dec) in decoders.iter_mut().enumerate() {
                    out.push((format!("dec{d}.wd"), &mut dec.wd));
                    out.push((format!("dec{d}.bd"), &mut dec.bd));
                }
            }
        }
        out
    }
}

/// Map from selected layer to that layer's autoencoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderStack<T> {
    pub cfg: AeConfig,
    pub layers: BTreeMap<usize, AeLayerParams<T>>,
}

impl<T: Real> AutoencoderStack<T> {
    pub fn init(cfg: &AeConfig, hidden: usize, n_layers: usize, seed: u64) -> Result<Self> {
        cfg.validate(hidden, n_layers)?;
        let mut layers = BTreeMap::new();
        for &l in &cfg.layers {
            let mut rng = stream_rng(seed, Stream::Init(1000 + l as u64));
            layers.insert(l, AeLayerParams::init(cfg, hidden, &mut rng));
        }
        Ok(AutoencoderStack { cfg: cfg.clone(), layers })
    }

    /// Sum of allocated tensor sizes; must equal
    /// `cfg.param_count(hidden) * layers`.
    pub fn param_count_actual(&self) -> usize {
        self.layers
            .values()
            .map(|l| l.named().iter().map(|(_, t)| t.numel()).sum::<usize>())
            .sum()
    }

    /// All tensors as `ae.layer{l}.{suffix}` names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, params) in &self.layers {
            for (suffix, t) in params.named() {
                out.push((format!("ae.layer{l}.{suffix}"), t));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, params) in self.layers.iter_mut() {
            for (suffix, t) in params.named_mut() {
                out.push((format!("ae.layer{l}.{suffix}"), t));
            }
        }
        out
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let layout = match self.cfg.layout {
            AeLayout::Gated1d => 0.0,
            AeLayout::Plain1d => 1.0,
            AeLayout::Dual2d => 2.0,
        };
        let meta = vec![
            layout,
            self.cfg.bottleneck as f32,
            self.cfg.decoders as f32,
            self.cfg.conv_kernel as f32,
            self.cfg.local_channels as f32,
            self.cfg.global_rank as f32,
            self.cfg.global_width as f32,
        ];
        let mut out = vec![
            NamedTensor { name: String::from("ae.meta"), shape: vec![meta.len()], data: meta },
            NamedTensor {
                name: String::from("ae.layers"),
                shape: vec![self.cfg.layers.len()],
                data: self.cfg.layers.iter().map(|&l| l as f32).collect(),
            },
        ];
        for (name, t) in self.named() {
            out.push(NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to64() as f32).collect(),
            });
        }
        out
    }

    pub fn from_named_tensors(entries: &[NamedTensor], hidden: usize, n_layers: usize) -> Result<Self> {
        let meta = entries
            .iter()
            .find(|e| e.name == "ae.meta")
            .ok_or_else(|| Error::config("checkpoint has no ae.meta entry"))?;
        if meta.data.len() != 7 {
            return Err(Error::config("ae.meta must have 7 entries"));
        }
        let layers_entry = entries
            .iter()
            .find(|e| e.name == "ae.layers")
            .ok_or_else(|| Error::config("checkpoint has no ae.layers entry"))?;
        let layout = match meta.data[0] as usize {
            0 => AeLayout::Gated1d,
            1 => AeLayout::Plain1d,
            2 => AeLayout::Dual2d,
            other => return Err(Error::config(format!("unknown autoencoder layout {other}"))),
        };
        let cfg = AeConfig {
            layout,
            bottleneck: meta.data[1] as usize,
            layers: layers_entry.data.iter().map(|&l| l as usize).collect(),
            decoders: meta.data[2] as usize,
            conv_kernel: meta.data[3] as usize,
            local_channels: meta.data[4] as usize,
            global_rank: meta.data[5] as usize,
            global_width: meta.data[6] as usize,
        };
        // Seed is irrelevant: every tensor is overwritten below.
        let mut stack = AutoencoderStack::init(&cfg, hidden, n_layers, 0)?;
        for (name, t) in stack.named_mut() {
            let entry = entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint missing tensor {name}")))?;
            if entry.shape != t.shape() {
                return Err(Error::dimension(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    entry.shape,
                    t.shape()
                )));
            }
            *t = Tensor::new(
                entry.shape.clone(),
                entry.data.iter().map(|&v| T::from64(v as f64)).collect(),
            )?;
        }
        Ok(stack)
    }
}

/// Tape handles for one layer's autoencoder.
#[derive(Debug, Clone)]
pub enum AeLayerNodes {
    Gated { w1: NodeId, w2: NodeId, bz: NodeId, decoders: Vec<(NodeId, NodeId, NodeId)> },
    Plain { we: NodeId, be: NodeId, decoders: Vec<(NodeId, NodeId)> },
    Dual { kernel: NodeId, kbias: NodeId, g1: NodeId, g2: NodeId, decoders: Vec<(NodeId, NodeId)> },
}

/// Tape handles for the whole stack.
#[derive(Debug, Clone)]
pub struct AeStackNodes {
    pub cfg: AeConfig,
    pub layers: BTreeMap<usize, AeLayerNodes>,
}

impl AeStackNodes {
    pub fn layer_nodes(&self, layer: usize) -> Option<&AeLayerNodes> {
        self.layers.get(&layer)
    }

    /// Node handles in the same order and naming as
    /// [`AutoencoderStack::named`].
    pub fn named_ids(&self) -> Vec<(String, NodeId)> {
        let mut out = Vec::new();
        for (l, nodes) in &self.layers {
            let mut push = |suffix: String, id: NodeId| out.push((format!("ae.layer{l}.{suffix}"), id));
            match nodes {
                AeLayerNodes::Gated { w1, w2, bz, decoders } => {
                    push(String::from("w1"), *w1);
                    push(String::from("w2"), *w2);
                    push(String::from("bz"), *bz);
                    for (d, &(w3, w4, bh)) in decoders.iter().enumerate() {
                        push(format!("dec{d}.w3"), w3);
                        push(format!("dec{d}.w4"), w4);
                        push(format!("dec{d}.bh"), bh);
                    }
                }
                AeLayerNodes::Plain { we, be, decoders } => {
                    push(String::from("we"), *we);
                    push(String::from("be"), *be);
                    for (d, &(wd, bd)) in decoders.iter().enumerate() {
                        push(format!("dec{d}.wd"), wd);
                        push(format!("dec{d}.bd"), bd);
                    }
                }
                AeLayerNodes::Dual { kernel, kbias, g1, g2, decoders } => {
                    push(String::from("conv.kernel"), *kernel);
                    push(String::from("conv.bias"), *kbias);
                    push(String::from("global.w1"), *g1);
                    push(String::from("global.w2"), *g2);
                    for (d, &(wd, bd)) in decoders.iter().enumerate() {
                        push(format!("dec{d}.wd"), wd);
                        push(format!("dec{d}.bd"), bd);
                    }
                }
            }
        }
        out
    }

    /// The configured layer set must be backed by parameters and fit the
    /// model depth.
    pub fn check_layers(&self, n_layers: usize) -> Result<()> {
        for &l in &self.cfg.layers {
            if l > n_layers {
                return Err(Error::config(format!(
                    "autoencoder configured at layer {l}, model has {n_layers}"
                )));
            }
            if !self.layers.contains_key(&l) {
                return Err(Error::config(format!("missing autoencoder for configured layer {l}")));
            }
        }
        Ok(())
    }
}

/// Registers the stack on a tape.
pub fn stack_to_nodes<T: Real>(
    tape: &mut Tape<T>,
    stack: &AutoencoderStack<T>,
    trainable: bool,
) -> AeStackNodes {
    let put = |tape: &mut Tape<T>, t: &Tensor<T>| {
        let mut tensor = t.clone();
        tensor.requires_grad = trainable;
        tensor.grad = None;
        tape.leaf(tensor)
    };
    let mut layers = BTreeMap::new();
    for (&l, params) in &stack.layers {
        let nodes = match params {
            AeLayerParams::Gated { w1, w2, bz, decoders } => AeLayerNodes::Gated {
                w1: put(tape, w1),
                w2: put(tape, w2),
                bz: put(tape, bz),
                decoders: decoders
                    .iter()
                    .map(|d| (put(tape, &d.w3), put(tape, &d.w4), put(tape, &d.bh)))
                    .collect(),
            },
            AeLayerParams::Plain { we, be, decoders } => AeLayerNodes::Plain {
                we: put(tape, we),
                be: put(tape, be),
                decoders: decoders.iter().map(|d| (put(tape, &d.wd), put(tape, &d.bd))).collect(),
            },
            AeLayerParams::Dual { kernel, kbias, g1, g2, decoders } => AeLayerNodes::Dual {
                kernel: put(tape, kernel),
                kbias: put(tape, kbias),
                g1: put(tape, g1),
                g2: put(tape, g2),
                decoders: decoders.iter().map(|d| (put(tape, &d.wd), put(tape, &d.bd))).collect(),
            },
        };
        layers.insert(l, nodes);
    }
    AeStackNodes { cfg: stack.cfg.clone(), layers }
}

fn select_decoder<'a, D>(decoders: &'a [D], count: usize, label: Option<Domain>) -> Result<&'a D> {
    if count == 1 {
        return Ok(&decoders[0]);
    }
    match label {
        Some(Domain::Base) => Ok(&decoders[0]),
        Some(Domain::Fine) => Ok(&decoders[1]),
        None => Err(Error::config("two decoders configured but no domain label supplied")),
    }
}

/// Applies one layer's autoencoder to `h` `[seq, hidden]`, returning the
/// bottleneck code and the reconstruction. Per-position except for the dual
/// layout's convolutional pathway.
pub fn ae_forward<T: Real>(
    tape: &mut Tape<T>,
    cfg: &AeConfig,
    nodes: &AeLayerNodes,
    h: NodeId,
    label: Option<Domain>,
) -> Result<(NodeId, NodeId)> {
    match nodes {
        AeLayerNodes::Gated { w1, w2, bz, decoders } => {
            let gate_in = tape.matmul(h, *w1)?;
            let gate = tape.sigmoid(gate_in)?;
            let lin = tape.matmul(h, *w2)?;
            let gated = tape.mul(gate, lin)?;
            let z = tape.add_bcast_last(gated, *bz)?;
            let &(w3, w4, bh) = select_decoder(decoders, cfg.decoders, label)?;
            let dgate_in = tape.matmul(z, w3)?;
            let dgate = tape.sigmoid(dgate_in)?;
            let dlin = tape.matmul(z, w4)?;
            let dgated = tape.mul(dgate, dlin)?;
            let h_hat = tape.add_bcast_last(dgated, bh)?;
            Ok((z, h_hat))
        }
        AeLayerNodes::Plain { we, be, decoders } => {
            let z = tape.affine(h, *we, *be)?;
            let &(wd, bd) = select_decoder(decoders, cfg.decoders, label)?;
            let h_hat = tape.affine(z, wd, bd)?;
            Ok((z, h_hat))
        }
        AeLayerNodes::Dual { kernel, kbias, g1, g2, decoders } => {
            let conv = tape.conv1d(h, *kernel)?;
            let conv_b = tape.add_bcast_last(conv, *kbias)?;
            let local = tape.gelu(conv_b)?;
            let low = tape.matmul(h, *g1)?;
            let global = tape.matmul(low, *g2)?;
            let z = tape.concat_last(&[local, global])?;
            let &(wd, bd) = select_decoder(decoders, cfg.decoders, label)?;
            let h_hat = tape.affine(z, wd, bd)?;
            Ok((z, h_hat))
        }
    }
}
