//! B-spline blending: basis functions, the per-layer blending coefficient
//! schedule, and the hard parameter merge between two experts.
//!
//! The blending coefficient for layer `l` is
//! `clamp(sum_i c_i * B_{i,k}(l) + b_l, 0, 1)` with trainable control points
//! `c_i` and per-layer biases `b_l`. In scalar mode the coefficient is one
//! number per layer; in per-dimension mode it is a hidden-size vector and the
//! products are elementwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::transformer::{LayerNodes, ModelParams, ParamNodes};

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_CONTROL_POINTS: usize = 8;
/// Start interior so gradients flow through the hard-clamp subgradient, and
/// symmetric so neither expert is favored.
pub const DEFAULT_CONTROL_INIT: f64 = 0.5;

/// Clamped uniform knot vector over `[1, n_layers]`: `degree + 1` repeated
/// knots at each end, interior knots evenly spaced. Length is
/// `n_ctrl + degree + 1`.
pub fn clamped_uniform_knots(n_ctrl: usize, degree: usize, n_layers: usize) -> Result<Vec<f64>> {
    if n_ctrl < degree + 1 {
        return Err(Error::config(format!(
            "need at least degree+1={} control points, got {n_ctrl}",
            degree + 1
        )));
    }
    if n_layers < 2 {
        return Err(Error::config("knot span needs at least 2 layers"));
    }
    let (lo, hi) = (1.0, n_layers as f64);
    let interior = n_ctrl - degree - 1;
    let mut knots = Vec::with_capacity(n_ctrl + degree + 1);
    knots.extend(core::iter::repeat(lo).take(degree + 1));
    for i in 1..=interior {
        knots.push(lo + (hi - lo) * i as f64 / (interior + 1) as f64);
    }
    knots.extend(core::iter::repeat(hi).take(degree + 1));
    Ok(knots)
}

/// All `n_ctrl` basis values `B_{i,k}(l)` via the local triangular de Boor
/// recurrence: only the `k+1` values on the containing knot span are nonzero.
///
/// The last span is treated as closed so the basis row at the right endpoint
/// is well defined (and sums to one on clamped knots).
pub fn basis_row(l: f64, degree: usize, knots: &[f64], n_ctrl: usize) -> Result<Vec<f64>> {
    if knots.len() != n_ctrl + degree + 1 {
        return Err(Error::config(format!(
            "knot vector length {} does not match n_ctrl {n_ctrl} + degree {degree} + 1",
            knots.len()
        )));
    }
    let (lo, hi) = (knots[degree], knots[n_ctrl]);
    if !(l >= lo && l <= hi) {
        return Err(Error::input(format!("l={l} outside knot domain [{lo}, {hi}]")));
    }
    // Containing span s with knots[s] <= l < knots[s+1], capped so the right
    // endpoint lands on the last real span.
    let mut span = degree;
    while span + 1 < n_ctrl && l >= knots[span + 1] {
        span += 1;
    }

    let mut values = vec![0.0f64; degree + 1];
    let mut left = vec![0.0f64; degree + 1];
    let mut right = vec![0.0f64; degree + 1];
    values[0] = 1.0;
    for j in 1..=degree {
        left[j] = l - knots[span + 1 - j];
        right[j] = knots[span + j] - l;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { values[r] / denom };
            values[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        values[j] = saved;
    }

    let mut row = vec![0.0f64; n_ctrl];
    row[span - degree..=span].copy_from_slice(&values);
    Ok(row)
}

/// Textbook Cox-de Boor recursion, kept as an independent route for the
/// basis-correctness checks. Same closed-last-span convention as `basis_row`.
pub fn basis_row_recursive(
    l: f64,
    degree: usize,
    knots: &[f64],
    n_ctrl: usize,
) -> Result<Vec<f64>> {
    if knots.len() != n_ctrl + degree + 1 {
        return Err(Error::config("knot vector length mismatch"));
    }
    let (lo, hi) = (knots[degree], knots[n_ctrl]);
    if !(l >= lo && l <= hi) {
        return Err(Error::input(format!("l={l} outside knot domain [{lo}, {hi}]")));
    }
    fn b(i: usize, k: usize, l: f64, knots: &[f64], end: f64) -> f64 {
        if k == 0 {
            let in_half_open = knots[i] <= l && l < knots[i + 1];
            let at_closed_end = l == end && knots[i] < knots[i + 1] && knots[i + 1] == end;
            return if in_half_open || at_closed_end { 1.0 } else { 0.0 };
        }
        let mut acc = 0.0;
        let d1 = knots[i + k] - knots[i];
        if d1 > 0.0 {
            acc += (l - knots[i]) / d1 * b(i, k - 1, l, knots, end);
        }
        let d2 = knots[i + k + 1] - knots[i + 1];
        if d2 > 0.0 {
            acc += (knots[i + k + 1] - l) / d2 * b(i + 1, k - 1, l, knots, end);
        }
        acc
    }
    Ok((0..n_ctrl).map(|i| b(i, degree, l, knots, hi)).collect())
}

/// Scalar blending (one coefficient per layer) or per-dimension blending
/// (a hidden-size vector per layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Scalar,
    PerDim,
}

/// Trainable blending schedule: control points, per-layer biases, degree and
/// clamped uniform knots.
#[derive(Debug, Clone)]
pub struct AlphaSchedule<T> {
    pub mode: AlphaMode,
    pub degree: usize,
    pub n_layers: usize,
    /// Vector width of the coefficient: 1 in scalar mode, hidden size in
    /// per-dimension mode.
    pub width: usize,
    pub knots: Vec<f64>,
    /// `[n_ctrl]` in scalar mode, `[n_ctrl, width]` in per-dimension mode.
    pub control: Tensor<T>,
    /// `[n_layers]` in scalar mode, `[n_layers, width]` otherwise.
    pub bias: Tensor<T>,
}

/// Tape handles for the trainable schedule tensors.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleNodes {
    pub control: NodeId,
    pub bias: NodeId,
}

impl<T: Real> AlphaSchedule<T> {
    pub fn new(
        mode: AlphaMode,
        n_ctrl: usize,
        degree: usize,
        n_layers: usize,
        hidden: usize,
    ) -> Result<Self> {
        Self::with_constant(mode, n_ctrl, degree, n_layers, hidden, DEFAULT_CONTROL_INIT)
    }

    /// Schedule with every control point set to `value` and zero biases.
    pub fn with_constant(
        mode: AlphaMode,
        n_ctrl: usize,
        degree: usize,
        n_layers: usize,
        hidden: usize,
        value: f64,
    ) -> Result<Self> {
        let knots = clamped_uniform_knots(n_ctrl, degree, n_layers)?;
        let width = match mode {
            AlphaMode::Scalar => 1,
            AlphaMode::PerDim => hidden,
        };
        let (cshape, bshape) = match mode {
            AlphaMode::Scalar => (vec![n_ctrl], vec![n_layers]),
            AlphaMode::PerDim => (vec![n_ctrl, width], vec![n_layers, width]),
        };
        Ok(AlphaSchedule {
            mode,
            degree,
            n_layers,
            width,
            knots,
            control: Tensor::full(cshape, T::from64(value)),
            bias: Tensor::zeros(bshape),
        })
    }

    pub fn n_ctrl(&self) -> usize {
        self.control.shape()[0]
    }

    /// Basis weights for a (1-based) layer.
    pub fn basis_at(&self, layer: usize) -> Result<Vec<f64>> {
        self.check_layer(layer)?;
        basis_row(layer as f64, self.degree, &self.knots, self.n_ctrl())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < 1 || layer > self.n_layers {
            return Err(Error::input(format!("layer {layer} outside 1..={}", self.n_layers)));
        }
        Ok(())
    }

    /// Blending coefficient for a layer as plain values (width 1 or hidden).
    /// Used for logging and analysis; the training path goes through
    /// [`AlphaSchedule::alpha_node`] and is cross-checked against this in
    /// tests.
    pub fn alpha_at(&self, layer: usize) -> Result<Vec<f64>> {
        let basis = self.basis_at(layer)?;
        let c = self.control.data();
        let b = self.bias.data();
        let w = self.width;
        let mut out = vec![0.0f64; w];
        for (i, &bi) in basis.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += c[i * w + j].to64() * bi;
            }
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += b[(layer - 1) * w + j].to64();
            *o = o.clamp(0.0, 1.0);
        }
        Ok(out)
    }

    /// (mean, min, max) of the coefficient over all layers and dimensions.
    pub fn alpha_summary(&self) -> Result<(f64, f64, f64)> {
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut count = 0usize;
        for layer in 1..=self.n_layers {
            for v in self.alpha_at(layer)? {
                sum += v;
                min = min.min(v);
                max = max.max(v);
                count += 1;
            }
        }
        Ok((sum / count as f64, min, max))
    }

    /// Registers the schedule tensors on a tape.
    pub fn leaves(&self, tape: &mut Tape<T>, trainable: bool) -> ScheduleNodes {
        let mut control = self.control.clone();
        let mut bias = self.bias.clone();
        control.requires_grad = trainable;
        bias.requires_grad = trainable;
        ScheduleNodes { control: tape.leaf(control), bias: tape.leaf(bias) }
    }

    /// Serializes under the reserved checkpoint names `alpha.control`,
    /// `alpha.bias` and `alpha.meta`.
    pub fn to_named_tensors(&self) -> Vec<crate::checkpoint::NamedTensor> {
        use crate::checkpoint::NamedTensor;
        let mode = match self.mode {
            AlphaMode::Scalar => 0.0f32,
            AlphaMode::PerDim => 1.0,
        };
        let meta = vec![
            mode,
            self.degree as f32,
            self.n_ctrl() as f32,
            self.n_layers as f32,
            self.width as f32,
        ];
        vec![
            NamedTensor {
                name: alloc::string::String::from("alpha.meta"),
                shape: vec![meta.len()],
                data: meta,
            },
            NamedTensor {
                name: alloc::string::String::from("alpha.control"),
                shape: self.control.shape().to_vec(),
                data: self.control.data().iter().map(|v| v.to64() as f32).collect(),
            },
            NamedTensor {
                name: alloc::string::String::from("alpha.bias"),
                shape: self.bias.shape().to_vec(),
                data: self.bias.data().iter().map(|v| v.to64() as f32).collect(),
            },
        ]
    }

    pub fn from_named_tensors(entries: &[crate::checkpoint::NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint missing tensor {name}")))
        };
        let meta = find("alpha.meta")?;
        if meta.data.len() != 5 {
            return Err(Error::config("alpha.meta must have 5 entries"));
        }
        let mode = match meta.data[0] as usize {
            0 => AlphaMode::Scalar,
            1 => AlphaMode::PerDim,
            other => return Err(Error::config(format!("unknown alpha mode {other}"))),
        };
        let (degree, n_ctrl, n_layers, width) = (
            meta.data[1] as usize,
            meta.data[2] as usize,
            meta.data[3] as usize,
            meta.data[4] as usize,
        );
        let mut sched = AlphaSchedule::<T>::with_constant(mode, n_ctrl, degree, n_layers, width, 0.0)?;
        for (name, tensor) in
            [("alpha.control", &mut sched.control), ("alpha.bias", &mut sched.bias)]
        {
            let entry = find(name)?;
            if entry.shape != tensor.shape() {
                return Err(Error::dimension(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            *tensor = Tensor::new(
                entry.shape.clone(),
                entry.data.iter().map(|&v| T::from64(v as f64)).collect(),
            )?;
        }
        Ok(sched)
    }

    /// Graph node for `alpha(layer)`: `[1]` in scalar mode, `[1, width]`
    /// otherwise. Differentiable w.r.t. control points and biases.
    pub fn alpha_node(
        &self,
        tape: &mut Tape<T>,
        nodes: &ScheduleNodes,
        layer: usize,
    ) -> Result<NodeId> {
        let basis = self.basis_at(layer)?;
        let n = self.n_ctrl();
        let raw = match self.mode {
            AlphaMode::Scalar => {
                let basis_t = Tensor::from_f64_slice(vec![n], &basis)?;
                let bnode = tape.constant(basis_t);
                let weighted = tape.mul(nodes.control, bnode)?;
                let dot = tape.sum_all(weighted)?;
                let b_l = tape.slice_rows(nodes.bias, layer - 1, 1)?;
                tape.add(dot, b_l)?
            }
            AlphaMode::PerDim => {
                let basis_t = Tensor::from_f64_slice(vec![1, n], &basis)?;
                let bnode = tape.constant(basis_t);
                let combo = tape.matmul(bnode, nodes.control)?;
                let b_l = tape.slice_rows(nodes.bias, layer - 1, 1)?;
                tape.add(combo, b_l)?
            }
        };
        tape.clamp(raw, T::zero(), T::one())
    }
}

/// Hard-merged parameters plus the schedule snapshot that produced them.
#[derive(Debug, Clone)]
pub struct MergedParams<T> {
    pub params: ModelParams<T>,
    pub schedule: AlphaSchedule<T>,
}

/// How a layer tensor consumes the per-dimension coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlendAxis {
    /// Trailing axis is the hidden size: blend per output dimension.
    OutHidden,
    /// No hidden-size output axis: blend by the mean coefficient.
    Mean,
}

/// Source of the parameters the blend does not cover (embedding table and
/// final layer norm).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NonLayerSource {
    #[default]
    Base,
    Fine,
}

/// Builds the merged parameter graph
/// `theta_l = (1 - alpha(l)) (*) theta_l_base + alpha(l) (*) theta_l_fine`
/// on the tape, with experts entering as constants so gradients reach only
/// the schedule. Rebuilt every optimization step so the merge stays a
/// differentiable function of the live schedule.
pub fn merged_param_nodes<T: Real>(
    tape: &mut Tape<T>,
    base: &ModelParams<T>,
    fine: &ModelParams<T>,
    schedule: &AlphaSchedule<T>,
    nodes: &ScheduleNodes,
    non_layer: NonLayerSource,
) -> Result<ParamNodes> {
    base.check_same_structure(fine)?;
    if schedule.n_layers != base.cfg.n_layers {
        return Err(Error::config(format!(
            "schedule covers {} layers, model has {}",
            schedule.n_layers, base.cfg.n_layers
        )));
    }
    if schedule.mode == AlphaMode::PerDim && schedule.width != base.cfg.hidden {
        return Err(Error::config(format!(
            "per-dimension schedule width {} does not match hidden size {}",
            schedule.width, base.cfg.hidden
        )));
    }

    let hidden = base.cfg.hidden;
    let mut layers = Vec::with_capacity(base.layers.len());
    for (idx, (bl, fl)) in base.layers.iter().zip(&fine.layers).enumerate() {
        let alpha = schedule.alpha_node(tape, nodes, idx + 1)?;
        let neg = tape.scale(alpha, -T::one())?;
        let one_minus = tape.offset(neg, T::one())?;
        // Scalar handles for tensors without a hidden-size output axis.
        let (alpha_mean, one_minus_mean) = match schedule.mode {
            AlphaMode::Scalar => (alpha, one_minus),
            AlphaMode::PerDim => {
                let am = tape.mean_all(alpha)?;
                let neg_m = tape.scale(am, -T::one())?;
                (am, tape.offset(neg_m, T::one())?)
            }
        };

        let blend =
            |tape: &mut Tape<T>, bt: &Tensor<T>, ft: &Tensor<T>, axis: BlendAxis| -> Result<NodeId> {
                let b_node = tape.constant(bt.clone());
                let f_node = tape.constant(ft.clone());
                let per_dim = schedule.mode == AlphaMode::PerDim
                    && axis == BlendAxis::OutHidden
                    && bt.last_dim() == hidden;
                let (wb, wf) = if per_dim {
                    (tape.mul_bcast_last(b_node, one_minus)?, tape.mul_bcast_last(f_node, alpha)?)
                } else {
                    (
                        tape.mul_bcast_scalar(b_node, one_minus_mean)?,
                        tape.mul_bcast_scalar(f_node, alpha_mean)?,
                    )
                };
                tape.add(wb, wf)
            };

        layers.push(LayerNodes {
            ln1_g: blend(tape, &bl.ln1_g, &fl.ln1_g, BlendAxis::OutHidden)?,
            ln1_b: blend(tape, &bl.ln1_b, &fl.ln1_b, BlendAxis::OutHidden)?,
            wq: blend(tape, &bl.wq, &fl.wq, BlendAxis::OutHidden)?,
            bq: blend(tape, &bl.bq, &fl.bq, BlendAxis::OutHidden)?,
            wk: blend(tape, &bl.wk, &fl.wk, BlendAxis::OutHidden)?,
            bk: blend(tape, &bl.bk, &fl.bk, BlendAxis::OutHidden)?,
            wv: blend(tape, &bl.wv, &fl.wv, BlendAxis::OutHidden)?,
            bv: blend(tape, &bl.bv, &fl.bv, BlendAxis::OutHidden)?,
            wo: blend(tape, &bl.wo, &fl.wo, BlendAxis::OutHidden)?,
            bo: blend(tape, &bl.bo, &fl.bo, BlendAxis::OutHidden)?,
            ln2_g: blend(tape, &bl.ln2_g, &fl.ln2_g, BlendAxis::OutHidden)?,
            ln2_b: blend(tape, &bl.ln2_b, &fl.ln2_b, BlendAxis::OutHidden)?,
            w_ff1: blend(tape, &bl.w_ff1, &fl.w_ff1, BlendAxis::Mean)?,
            b_ff1: blend(tape, &bl.b_ff1, &fl.b_ff1, BlendAxis::Mean)?,
            w_ff2: blend(tape, &bl.w_ff2, &fl.w_ff2, BlendAxis::OutHidden)?,
            b_ff2: blend(tape, &bl.b_ff2, &fl.b_ff2, BlendAxis::OutHidden)?,
        });
    }

    let src = match non_layer {
        NonLayerSource::Base => base,
        NonLayerSource::Fine => fine,
    };
    Ok(ParamNodes {
        cfg: base.cfg.clone(),
        embed: tape.constant(src.embed.clone()),
        layers,
        ln_f_g: tape.constant(src.ln_f_g.clone()),
        ln_f_b: tape.constant(src.ln_f_b.clone()),
    })
}

/// Materializes the hard merge by evaluating the merge graph once.
pub fn merge_params<T: Real>(
    base: &ModelParams<T>,
    fine: &ModelParams<T>,
    schedule: &AlphaSchedule<T>,
    non_layer: NonLayerSource,
) -> Result<MergedParams<T>> {
    let mut tape = Tape::new();
    let nodes = schedule.leaves(&mut tape, false);
    let merged = merged_param_nodes(&mut tape, base, fine, schedule, &nodes, non_layer)?;
    Ok(MergedParams { params: merged.materialize(&tape), schedule: schedule.clone() })
}
