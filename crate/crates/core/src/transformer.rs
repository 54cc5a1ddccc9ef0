//! Decoder-only toy transformer with per-layer hidden-state tracing.
//!
//! Pre-norm blocks (attention then feed-forward, GELU activation), fixed
//! sinusoidal position encoding, and an LM head tied to the embedding table.
//! The forward pass is built on a [`Tape`], so the same code serves frozen
//! expert evaluation, expert training and the merged model whose layer
//! parameters are themselves graph nodes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autoencoder::{ae_forward, AeStackNodes};
use crate::checkpoint::{self, NamedTensor};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::Domain;

pub const LN_EPS: f64 = 1e-5;
/// Additive attention-mask value; large enough to zero the softmax weight,
/// finite so the NaN guard stays meaningful.
const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub context: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: big enough to show domain asymmetry, small enough
    /// for CPU minutes.
    pub fn desk_default() -> Self {
        ModelConfig {
            n_layers: 6,
            hidden: 64,
            n_heads: 4,
            ff_mult: 4,
            context: 64,
            vocab: crate::tokenizer::VOCAB_SIZE,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("n_layers must be >= 2"));
        }
        if self.context < 2 {
            return Err(Error::config("context must be >= 2"));
        }
        if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden {} must be divisible by n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        if self.vocab == 0 || self.ff_mult == 0 {
            return Err(Error::config("vocab and ff_mult must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Structural equality: everything except the init seed.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.n_layers == other.n_layers
            && self.hidden == other.hidden
            && self.n_heads == other.n_heads
            && self.ff_mult == other.ff_mult
            && self.context == other.context
            && self.vocab == other.vocab
    }
}

/// One transformer layer's parameters. Weight layout is `x * W`, so the
/// trailing axis of each weight is its output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

/// Full parameter set of one expert; layers are indexed 1..=L in names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        [
            ("ln1.scale", $m!(ln1_g)),
            ("ln1.bias", $m!(ln1_b)),
            ("attn.wq", $m!(wq)),
            ("attn.bq", $m!(bq)),
            ("attn.wk", $m!(wk)),
            ("attn.bk", $m!(bk)),
            ("attn.wv", $m!(wv)),
            ("attn.bv", $m!(bv)),
            ("attn.wo", $m!(wo)),
            ("attn.bo", $m!(bo)),
            ("ln2.scale", $m!(ln2_g)),
            ("ln2.bias", $m!(ln2_b)),
            ("ff.w1", $m!(w_ff1)),
            ("ff.b1", $m!(b_ff1)),
            ("ff.w2", $m!(w_ff2)),
            ("ff.b2", $m!(b_ff2)),
        ]
    };
}

impl<T: Real> ModelParams<T> {
    /// Fresh parameters from the config seed: normal embeddings, Xavier
    /// weights, unit layer-norm scales.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = stream_rng(cfg.seed, Stream::Init(0));
        let h = cfg.hidden;
        let ff = cfg.ff_mult * h;
        let mut normal = |shape: Vec<usize>, std: f64| {
            Tensor::from_fn(shape, |_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from64(z * std)
            })
        };
        let xavier = |fan_in: usize, fan_out: usize| libm::sqrt(2.0 / (fan_in + fan_out) as f64);

        let embed = normal(vec![cfg.vocab, h], 0.02);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::full(vec![h], T::one()),
                ln1_b: Tensor::zeros(vec![h]),
                wq: normal(vec![h, h], xavier(h, h)),
                bq: Tensor::zeros(vec![h]),
                wk: normal(vec![h, h], xavier(h, h)),
                bk: Tensor::zeros(vec![h]),
                wv: normal(vec![h, h], xavier(h, h)),
                bv: Tensor::zeros(vec![h]),
                wo: normal(vec![h, h], xavier(h, h)),
                bo: Tensor::zeros(vec![h]),
                ln2_g: Tensor::full(vec![h], T::one()),
                ln2_b: Tensor::zeros(vec![h]),
                w_ff1: normal(vec![h, ff], xavier(h, ff)),
                b_ff1: Tensor::zeros(vec![ff]),
                w_ff2: normal(vec![ff, h], xavier(ff, h)),
                b_ff2: Tensor::zeros(vec![h]),
            });
        }
        ModelParams {
            cfg: cfg.clone(),
            embed,
            layers,
            ln_f_g: Tensor::full(vec![h], T::one()),
            ln_f_b: Tensor::zeros(vec![h]),
        }
    }

    /// All tensors with their checkpoint names, layer index 1-based.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![(String::from("embed"), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            macro_rules! f {
                ($field:ident) => {
                    &layer.$field
                };
            }
            for (suffix, t) in layer_fields!(f) {
                out.push((format!("layer{}.{}", i + 1, suffix), t));
            }
        }
        out.push((String::from("final_ln.scale"), &self.ln_f_g));
        out.push((String::from("final_ln.bias"), &self.ln_f_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> =
            vec![(String::from("embed"), &mut self.embed)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            macro_rules! f {
                ($field:ident) => {
                    &mut layer.$field
                };
            }
            for (suffix, t) in layer_fields!(f) {
                out.push((format!("layer{}.{}", i + 1, suffix), t));
            }
        }
        out.push((String::from("final_ln.scale"), &mut self.ln_f_g));
        out.push((String::from("final_ln.bias"), &mut self.ln_f_b));
        out
    }

    pub fn check_same_structure(&self, other: &Self) -> Result<()> {
        if !self.cfg.same_structure(&other.cfg) {
            return Err(Error::dimension("model configs differ structurally"));
        }
        for ((na, a), (nb, b)) in self.named().iter().zip(other.named().iter()) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::dimension(format!(
                    "parameter mismatch: {na} {:?} vs {nb} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            t.validate_finite(&name)?;
        }
        Ok(())
    }

    /// Elementwise combination with another structurally identical parameter
    /// set; used by the interpolation baselines.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_structure(other)?;
        let mut out = self.clone();
        for ((_, o), (_, b)) in out.named_mut().into_iter().zip(other.named().into_iter()) {
            for (ov, &bv) in o.data_mut().iter_mut().zip(b.data()) {
                *ov = f(*ov, bv);
            }
        }
        Ok(out)
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let meta = [
            self.cfg.n_layers as f32,
            self.cfg.hidden as f32,
            self.cfg.n_heads as f32,
            self.cfg.ff_mult as f32,
            self.cfg.context as f32,
            self.cfg.vocab as f32,
        ];
        let mut out = vec![NamedTensor {
            name: String::from("model.meta"),
            shape: vec![meta.len()],
            data: meta.to_vec(),
        }];
        for (name, t) in self.named() {
            out.push(NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to64() as f32).collect(),
            });
        }
        out
    }

    pub fn from_named_tensors(entries: &[NamedTensor]) -> Result<Self> {
        let meta = entries
            .iter()
            .find(|e| e.name == "model.meta")
            .ok_or_else(|| Error::config("checkpoint has no model.meta entry"))?;
        if meta.data.len() != 6 {
            return Err(Error::config("model.meta must have 6 entries"));
        }
        let cfg = ModelConfig {
            n_layers: meta.data[0] as usize,
            hidden: meta.data[1] as usize,
            n_heads: meta.data[2] as usize,
            ff_mult: meta.data[3] as usize,
            context: meta.data[4] as usize,
            vocab: meta.data[5] as usize,
            // The init seed is not part of the artifact; run seeds come from
            // the experiment config.
            seed: 0,
        };
        cfg.validate()?;
        let mut params = ModelParams::zeros_like(&cfg);
        let mut remaining: usize = params.named().len();
        for (name, t) in params.named_mut() {
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
            remaining -= 1;
        }
        debug_assert_eq!(remaining, 0);
        params.validate_finite()?;
        Ok(params)
    }

    fn zeros_like(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let ff = cfg.ff_mult * h;
        let layer = || LayerParams {
            ln1_g: Tensor::zeros(vec![h]),
            ln1_b: Tensor::zeros(vec![h]),
            wq: Tensor::zeros(vec![h, h]),
            bq: Tensor::zeros(vec![h]),
            wk: Tensor::zeros(vec![h, h]),
            bk: Tensor::zeros(vec![h]),
            wv: Tensor::zeros(vec![h, h]),
            bv: Tensor::zeros(vec![h]),
            wo: Tensor::zeros(vec![h, h]),
            bo: Tensor::zeros(vec![h]),
            ln2_g: Tensor::zeros(vec![h]),
            ln2_b: Tensor::zeros(vec![h]),
            w_ff1: Tensor::zeros(vec![h, ff]),
            b_ff1: Tensor::zeros(vec![ff]),
            w_ff2: Tensor::zeros(vec![ff, h]),
            b_ff2: Tensor::zeros(vec![h]),
        };
        ModelParams {
            cfg: cfg.clone(),
            embed: Tensor::zeros(vec![cfg.vocab, h]),
            layers: (0..cfg.n_layers).map(|_| layer()).collect(),
            ln_f_g: Tensor::zeros(vec![h]),
            ln_f_b: Tensor::zeros(vec![h]),
        }
    }

    /// Content checksum over the serialized checkpoint bytes.
    pub fn checksum(&self) -> String {
        checkpoint::sha256_hex(&checkpoint::encode(&self.to_named_tensors()))
    }
}

/// Tape handles mirroring [`LayerParams`].
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub w_ff1: NodeId,
    pub b_ff1: NodeId,
    pub w_ff2: NodeId,
    pub b_ff2: NodeId,
}

/// Tape handles mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub cfg: ModelConfig,
    pub embed: NodeId,
    pub layers: Vec<LayerNodes>,
    pub ln_f_g: NodeId,
    pub ln_f_b: NodeId,
}

impl ParamNodes {
    /// Node handles in the same order and naming as [`ModelParams::named`].
    pub fn named_ids(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> = vec![(String::from("embed"), self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            macro_rules! f {
                ($field:ident) => {
                    layer.$field
                };
            }
            for (suffix, id) in layer_fields!(f) {
                out.push((format!("layer{}.{}", i + 1, suffix), id));
            }
        }
        out.push((String::from("final_ln.scale"), self.ln_f_g));
        out.push((String::from("final_ln.bias"), self.ln_f_b));
        out
    }

    /// Copies current node values back into a parameter struct.
    pub fn materialize<T: Real>(&self, tape: &Tape<T>) -> ModelParams<T> {
        let grab = |id: NodeId| {
            let mut t = tape.value(id).clone();
            t.requires_grad = false;
            t.grad = None;
            t
        };
        ModelParams {
            cfg: self.cfg.clone(),
            embed: grab(self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_g: grab(l.ln1_g),
                    ln1_b: grab(l.ln1_b),
                    wq: grab(l.wq),
                    bq: grab(l.bq),
                    wk: grab(l.wk),
                    bk: grab(l.bk),
                    wv: grab(l.wv),
                    bv: grab(l.bv),
                    wo: grab(l.wo),
                    bo: grab(l.bo),
                    ln2_g: grab(l.ln2_g),
                    ln2_b: grab(l.ln2_b),
                    w_ff1: grab(l.w_ff1),
                    b_ff1: grab(l.b_ff1),
                    w_ff2: grab(l.w_ff2),
                    b_ff2: grab(l.b_ff2),
                })
                .collect(),
            ln_f_g: grab(self.ln_f_g),
            ln_f_b: grab(self.ln_f_b),
        }
    }
}

/// Registers a full parameter set on the tape. `trainable` marks every tensor
/// as a gradient leaf; otherwise they enter as constants (frozen experts).
pub fn params_to_nodes<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    trainable: bool,
) -> ParamNodes {
    let mut put = |t: &Tensor<T>| {
        let mut tensor = t.clone();
        tensor.requires_grad = trainable;
        tensor.grad = None;
        tape.leaf(tensor)
    };
    ParamNodes {
        cfg: params.cfg.clone(),
        embed: put(&params.embed),
        layers: params
            .layers
            .iter()
            .map(|l| LayerNodes {
                ln1_g: put(&l.ln1_g),
                ln1_b: put(&l.ln1_b),
                wq: put(&l.wq),
                bq: put(&l.bq),
                wk: put(&l.wk),
                bk: put(&l.bk),
                wv: put(&l.wv),
                bv: put(&l.bv),
                wo: put(&l.wo),
                bo: put(&l.bo),
                ln2_g: put(&l.ln2_g),
                ln2_b: put(&l.ln2_b),
                w_ff1: put(&l.w_ff1),
                b_ff1: put(&l.b_ff1),
                w_ff2: put(&l.w_ff2),
                b_ff2: put(&l.b_ff2),
            })
            .collect(),
        ln_f_g: put(&params.ln_f_g),
        ln_f_b: put(&params.ln_f_b),
    }
}

/// Per-layer hidden-state nodes. `h[l-1]` is the residual stream after layer
/// `l`; `h_hat[l-1]` is the state the next layer actually consumed (equal to
/// `h` when no autoencoder is attached).
#[derive(Debug, Clone)]
pub struct TraceNodes {
    pub h: Vec<NodeId>,
    pub h_hat: Vec<NodeId>,
}

/// Hidden-state values extracted from a trace.
#[derive(Debug, Clone)]
pub struct HiddenTrace<T> {
    pub h: Vec<Tensor<T>>,
    pub h_hat: Vec<Tensor<T>>,
    pub label: Option<Domain>,
}

impl TraceNodes {
    pub fn extract<T: Real>(&self, tape: &Tape<T>, label: Option<Domain>) -> HiddenTrace<T> {
        HiddenTrace {
            h: self.h.iter().map(|&id| tape.value(id).clone()).collect(),
            h_hat: self.h_hat.iter().map(|&id| tape.value(id).clone()).collect(),
            label,
        }
    }
}

/// Fixed sinusoidal position encoding `[seq, hidden]`.
pub fn position_encoding<T: Real>(seq: usize, hidden: usize) -> Tensor<T> {
    Tensor::from_fn(vec![seq, hidden], |i| {
        let (t, d) = (i / hidden, i % hidden);
        let pair = (d / 2) as f64;
        let rate = libm::pow(10000.0, -2.0 * pair / hidden as f64);
        let angle = t as f64 * rate;
        T::from64(if d % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
    })
}

/// Additive causal mask `[seq, seq]`: 0 at or before the diagonal, a large
/// negative constant strictly above it.
pub fn causal_mask<T: Real>(seq: usize) -> Tensor<T> {
    Tensor::from_fn(vec![seq, seq], |i| {
        let (row, col) = (i / seq, i % seq);
        if col > row {
            T::from64(MASK_VALUE)
        } else {
            T::zero()
        }
    })
}

fn check_sequence(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if tokens.len() > cfg.context {
        return Err(Error::input(format!(
            "sequence length {} exceeds context {}",
            tokens.len(),
            cfg.context
        )));
    }
    Ok(())
}

/// One pre-norm transformer block applied to `x` `[seq, hidden]`.
fn transformer_layer<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    layer: &LayerNodes,
    x: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let eps = T::from64(LN_EPS);
    let inv_sqrt_dh = T::from64(1.0 / libm::sqrt(cfg.head_dim() as f64));
    let head_dim = cfg.head_dim();

    // Attention block.
    let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b, eps)?;
    let q = tape.affine(normed, layer.wq, layer.bq)?;
    let k = tape.affine(normed, layer.wk, layer.bk)?;
    let v = tape.affine(normed, layer.wv, layer.bv)?;
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let off = hd * head_dim;
        let qh = tape.slice_last(q, off, head_dim)?;
        let kh = tape.slice_last(k, off, head_dim)?;
        let vh = tape.slice_last(v, off, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, inv_sqrt_dh)?;
        let masked = tape.add(scaled, mask)?;
        let attn = tape.softmax(masked)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_last(&heads)?;
    let proj = tape.affine(ctx, layer.wo, layer.bo)?;
    let x = tape.add(x, proj)?;

    // Feed-forward block.
    let normed2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b, eps)?;
    let ff1 = tape.affine(normed2, layer.w_ff1, layer.b_ff1)?;
    let act = tape.gelu(ff1)?;
    let ff2 = tape.affine(act, layer.w_ff2, layer.b_ff2)?;
    tape.add(x, ff2)
}

/// Builds the causal forward pass, capturing every layer's hidden state.
/// When an autoencoder stack covers layer `l`, the next layer consumes the
/// reconstructed state; the embedding and final layer norm are never wrapped.
pub fn forward_with_trace<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamNodes,
    tokens: &[usize],
    aes: Option<&AeStackNodes>,
    label: Option<Domain>,
) -> Result<(NodeId, TraceNodes)> {
    let cfg = &params.cfg;
    check_sequence(cfg, tokens)?;
    if let Some(stack) = aes {
        stack.check_layers(cfg.n_layers)?;
    }

    let seq = tokens.len();
    let embedded = tape.embedding(params.embed, tokens)?;
    let pe = tape.constant(position_encoding(seq, cfg.hidden));
    let mut x = tape.add(embedded, pe)?;
    let mask = tape.constant(causal_mask(seq));

    let mut trace = TraceNodes { h: Vec::new(), h_hat: Vec::new() };
    for (li, layer) in params.layers.iter().enumerate() {
        x = transformer_layer(tape, cfg, layer, x, mask)?;
        trace.h.push(x);
        if let Some(stack) = aes {
            if let Some(nodes) = stack.layer_nodes(li + 1) {
                let (_z, h_hat) = ae_forward(tape, &stack.cfg, nodes, x, label)?;
                x = h_hat;
            }
        }
        trace.h_hat.push(x);
    }

    let final_norm = tape.layer_norm(x, params.ln_f_g, params.ln_f_b, T::from64(LN_EPS))?;
    let logits = tape.matmul_nt(final_norm, params.embed)?;
    Ok((logits, trace))
}

/// Alternative evaluation mode that blends hidden states instead of
/// parameters: each layer function of both experts is applied to the shared
/// stream and the outputs are mixed by `alpha(l)`, with optional
/// autoencoders on the blended state. The embedding table and final layer
/// norm come from the base expert.
pub fn forward_hidden_blend<T: Real>(
    tape: &mut Tape<T>,
    base: &ParamNodes,
    fine: &ParamNodes,
    schedule: &crate::bspline::AlphaSchedule<T>,
    sched_nodes: &crate::bspline::ScheduleNodes,
    tokens: &[usize],
    aes: Option<&AeStackNodes>,
    label: Option<Domain>,
) -> Result<(NodeId, TraceNodes)> {
    let cfg = &base.cfg;
    check_sequence(cfg, tokens)?;
    if base.layers.len() != fine.layers.len() {
        return Err(Error::dimension("experts have different depths"));
    }
    if let Some(stack) = aes {
        stack.check_layers(cfg.n_layers)?;
    }

    let seq = tokens.len();
    let embedded = tape.embedding(base.embed, tokens)?;
    let pe = tape.constant(position_encoding(seq, cfg.hidden));
    let mut x = tape.add(embedded, pe)?;
    let mask = tape.constant(causal_mask(seq));

    let mut trace = TraceNodes { h: Vec::new(), h_hat: Vec::new() };
    for (li, (bl, fl)) in base.layers.iter().zip(&fine.layers).enumerate() {
        let hb = transformer_layer(tape, cfg, bl, x, mask)?;
        let hf = transformer_layer(tape, cfg, fl, x, mask)?;
        let alpha = schedule.alpha_node(tape, sched_nodes, li + 1)?;
        let neg = tape.scale(alpha, -T::one())?;
        let one_minus = tape.offset(neg, T::one())?;
        x = match schedule.mode {
            crate::bspline::AlphaMode::Scalar => {
                let wb = tape.mul_bcast_scalar(hb, one_minus)?;
                let wf = tape.mul_bcast_scalar(hf, alpha)?;
                tape.add(wb, wf)?
            }
            crate::bspline::AlphaMode::PerDim => {
                let wb = tape.mul_bcast_last(hb, one_minus)?;
                let wf = tape.mul_bcast_last(hf, alpha)?;
                tape.add(wb, wf)?
            }
        };
        trace.h.push(x);
        if let Some(stack) = aes {
            if let Some(nodes) = stack.layer_nodes(li + 1) {
                let (_z, h_hat) = ae_forward(tape, &stack.cfg, nodes, x, label)?;
                x = h_hat;
            }
        }
        trace.h_hat.push(x);
    }

    let final_norm = tape.layer_norm(x, base.ln_f_g, base.ln_f_b, T::from64(LN_EPS))?;
    let logits = tape.matmul_nt(final_norm, base.embed)?;
    Ok((logits, trace))
}
