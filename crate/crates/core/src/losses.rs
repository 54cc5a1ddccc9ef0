//! Training objectives: hidden-state reconstruction, language modeling,
//! alpha regularization, and the mode totals.
//!
//! All builders return tape nodes so every objective is differentiable
//! end to end, including through the merged parameters back to the B-spline
//! control points.

use alloc::format;
use alloc::vec::Vec;

use crate::bspline::{AlphaSchedule, ScheduleNodes};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lm: f64,
    pub recon: f64,
    pub mse: f64,
    pub l2: f64,
    pub alpha_reg: f64,
    pub smoothness: f64,
    pub centrality: f64,
    pub mean_bias: f64,
    pub var_bias: f64,
    /// Target variance for the layer-bias variance term.
    pub sigma_target_sq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lm: 1.0,
            recon: 1.0,
            mse: 1.0,
            l2: 0.1,
            alpha_reg: 0.01,
            smoothness: 1.0,
            centrality: 1.0,
            mean_bias: 1.0,
            var_bias: 1.0,
            sigma_target_sq: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lm,
            self.recon,
            self.mse,
            self.l2,
            self.alpha_reg,
            self.smoothness,
            self.centrality,
            self.mean_bias,
            self.var_bias,
            self.sigma_target_sq,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Reconstruction loss over the selected layers:
/// `sum_l [ mse_w * mean ||h_hat - target||^2 + l2_w * ||h_hat - target||_2 ]`.
///
/// `per_layer[l]` holds one `(h_hat, target)` pair per sample; the mean runs
/// over every element in the layer's batch and the L2 norm is a single
/// Frobenius norm over the layer's full batch residual.
pub fn recon_loss<T: Real>(
    tape: &mut Tape<T>,
    per_layer: &[Vec<(NodeId, NodeId)>],
    weights: &LossWeights,
) -> Result<NodeId> {
    if per_layer.is_empty() {
        return Err(Error::config("reconstruction loss needs at least one layer"));
    }
    let mut total: Option<NodeId> = None;
    for (li, pairs) in per_layer.iter().enumerate() {
        if pairs.is_empty() {
            return Err(Error::config(format!("layer index {li} has no reconstruction targets")));
        }
        let mut elems = 0usize;
        let mut rss: Option<NodeId> = None;
        for &(h_hat, target) in pairs {
            let (hs, ts) = (tape.value(h_hat).shape(), tape.value(target).shape());
            if hs != ts {
                return Err(Error::dimension(format!(
                    "reconstruction pair shapes differ: {hs:?} vs {ts:?}"
                )));
            }
            elems += tape.value(h_hat).numel();
            let diff = tape.sub(h_hat, target)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum_all(sq)?;
            rss = Some(match rss {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let rss = rss.expect("non-empty pairs");
        let mse = tape.scale(rss, T::from64(weights.mse / elems as f64))?;
        let norm = tape.sqrt(rss)?;
        let l2 = tape.scale(norm, T::from64(weights.l2))?;
        let layer_term = tape.add(mse, l2)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, layer_term)?,
            None => layer_term,
        });
    }
    Ok(total.expect("non-empty layers"))
}

/// Mean next-token negative log-likelihood over all positions of all entries
/// (token-weighted, so sequences of different lengths average correctly).
pub fn lm_loss<T: Real>(tape: &mut Tape<T>, entries: &[(NodeId, &[usize])]) -> Result<NodeId> {
    if entries.is_empty() {
        return Err(Error::input("language-modeling loss needs at least one sequence"));
    }
    let total_tokens: usize = entries.iter().map(|(_, t)| t.len()).sum();
    let mut total: Option<NodeId> = None;
    for &(logits, targets) in entries {
        let ce = tape.cross_entropy(logits, targets)?;
        let weighted = tape.scale(ce, T::from64(targets.len() as f64 / total_tokens as f64))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(total.expect("non-empty entries"))
}

/// Node handles for the alpha-regularization components and their weighted
/// total.
#[derive(Debug, Clone, Copy)]
pub struct AlphaRegTerms {
    pub smoothness: NodeId,
    pub centrality: NodeId,
    pub mean_bias: NodeId,
    pub var_bias: NodeId,
    pub total: NodeId,
}

/// Control-point smoothness and centrality plus bias mean/variance terms.
/// The bias variance uses the population convention (divide by the number of
/// bias entries).
pub fn alpha_reg<T: Real>(
    tape: &mut Tape<T>,
    schedule: &AlphaSchedule<T>,
    nodes: &ScheduleNodes,
    weights: &LossWeights,
) -> Result<AlphaRegTerms> {
    let n = schedule.n_ctrl();
    if n < 2 {
        return Err(Error::config("alpha regularization needs at least two control points"));
    }
    // Smoothness: sum_i ||c_i - c_{i-1}||^2.
    let hi = tape.slice_rows(nodes.control, 1, n - 1)?;
    let lo = tape.slice_rows(nodes.control, 0, n - 1)?;
    let diff = tape.sub(hi, lo)?;
    let diff_sq = tape.mul(diff, diff)?;
    let smoothness = tape.sum_all(diff_sq)?;

    // Centrality: sum_i ||c_i||^2.
    let c_sq = tape.mul(nodes.control, nodes.control)?;
    let centrality = tape.sum_all(c_sq)?;

    // Bias mean and population variance.
    let mu = tape.mean_all(nodes.bias)?;
    let mean_bias = tape.mul(mu, mu)?;
    let b_sq = tape.mul(nodes.bias, nodes.bias)?;
    let mean_sq = tape.mean_all(b_sq)?;
    let var = tape.sub(mean_sq, mean_bias)?;
    let dev = tape.offset(var, T::from64(-weights.sigma_target_sq))?;
    let var_bias = tape.mul(dev, dev)?;

    let ws = tape.scale(smoothness, T::from64(weights.smoothness))?;
    let wc = tape.scale(centrality, T::from64(weights.centrality))?;
    let wm = tape.scale(mean_bias, T::from64(weights.mean_bias))?;
    let wv = tape.scale(var_bias, T::from64(weights.var_bias))?;
    let sc = tape.add(ws, wc)?;
    let mv = tape.add(wm, wv)?;
    let total = tape.add(sc, mv)?;

    Ok(AlphaRegTerms { smoothness, centrality, mean_bias, var_bias, total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    OneD,
    TwoD,
}

/// Weighted total: `recon_w * recon + lm_w * lm`, plus the alpha
/// regularization term in 2D mode. A 1D total ignores any supplied
/// alpha-regularization node.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    mode: LossMode,
    lm: NodeId,
    recon: NodeId,
    alpha_total: Option<NodeId>,
    weights: &LossWeights,
) -> Result<NodeId> {
    let wl = tape.scale(lm, T::from64(weights.lm))?;
    let wr = tape.scale(recon, T::from64(weights.recon))?;
    let base = tape.add(wl, wr)?;
    match (mode, alpha_total) {
        (LossMode::TwoD, Some(reg)) => {
            let wreg = tape.scale(reg, T::from64(weights.alpha_reg))?;
            tape.add(base, wreg)
        }
        (LossMode::TwoD, None) => {
            Err(Error::config("2D total loss requires an alpha-regularization term"))
        }
        (LossMode::OneD, _) => Ok(base),
    }
}

/// `exp` of a mean token cross-entropy.
pub fn perplexity_from_loss(lm_loss: f64) -> f64 {
    libm::exp(lm_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::AlphaMode;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn zero_residual_gives_zero_recon() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64));
        let t = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64));
        let loss = recon_loss(&mut tape, &[vec![(h, t)]], &LossWeights::default()).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn scalar_residual_formula() {
        // single element, residual d, mse_w = l2_w = 1 -> d^2 + |d|
        let w = LossWeights { mse: 1.0, l2: 1.0, ..Default::default() };
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::scalar(0.6));
        let t = tape.constant(Tensor::scalar(-0.1));
        let loss = recon_loss(&mut tape, &[vec![(h, t)]], &w).unwrap();
        let d: f64 = 0.7;
        assert!((tape.value(loss).data()[0] - (d * d + d)).abs() < 1e-12);
    }

    #[test]
    fn recon_matches_straight_line_oracle() {
        // Independently coded evaluation of the same formula over random
        // tensors.
        let w = LossWeights { mse: 0.7, l2: 0.3, ..Default::default() };
        let mk = |seed: usize, n: usize| -> Vec<f64> {
            (0..n).map(|i| libm::sin((seed * 31 + i) as f64 * 0.71) * 1.3).collect()
        };
        let shapes = [(3usize, 5usize), (2, 5)];
        let mut tape = Tape::<f64>::new();
        let mut layers = Vec::new();
        let mut oracle = 0.0f64;
        for (li, &(r, c)) in shapes.iter().enumerate() {
            let mut pairs = Vec::new();
            let mut rss = 0.0f64;
            let mut elems = 0usize;
            for s in 0..3usize {
                let hv = mk(li * 10 + s, r * c);
                let tv = mk(li * 10 + s + 100, r * c);
                for (a, b) in hv.iter().zip(&tv) {
                    rss += (a - b) * (a - b);
                }
                elems += r * c;
                let h = tape.constant(Tensor::new(vec![r, c], hv).unwrap());
                let t = tape.constant(Tensor::new(vec![r, c], tv).unwrap());
                pairs.push((h, t));
            }
            oracle += w.mse * rss / elems as f64 + w.l2 * libm::sqrt(rss);
            layers.push(pairs);
        }
        let loss = recon_loss(&mut tape, &layers, &w).unwrap();
        assert!((tape.value(loss).data()[0] - oracle).abs() < 1e-6 * oracle.abs().max(1.0));
    }

    #[test]
    fn uniform_logits_lm_loss_is_log_vocab() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![4, 259]));
        let targets = [3usize, 7, 100, 258];
        let loss = lm_loss(&mut tape, &[(logits, &targets)]).unwrap();
        let got = tape.value(loss).data()[0];
        assert!((got - libm::log(259.0)).abs() < 1e-12);
        // perplexity = exp(loss) = vocab for the uniform predictor
        assert!((perplexity_from_loss(got) - 259.0).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut tape = Tape::<f64>::new();
        let mut prev = f64::INFINITY;
        for margin in [2.0, 8.0, 32.0] {
            let logits = tape
                .constant(Tensor::from_fn(vec![2, 5], |i| if i % 5 == 1 { margin } else { 0.0 }));
            let loss = lm_loss(&mut tape, &[(logits, &[1usize, 1])]).unwrap();
            let v = tape.value(loss).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    fn reg_schedule(bias: &[f64]) -> AlphaSchedule<f64> {
        let mut s = AlphaSchedule::<f64>::with_constant(
            AlphaMode::Scalar,
            4,
            1,
            bias.len(),
            1,
            0.0,
        )
        .unwrap();
        for (v, &b) in s.bias.data_mut().iter_mut().zip(bias) {
            *v = b;
        }
        s
    }

    #[test]
    fn alpha_reg_component_values() {
        // b = (0.1, -0.1), sigma_target^2 = 0:
        // mean 0, var 0.01 -> mean_bias 0, var_bias 1e-4.
        let sched = reg_schedule(&[0.1, -0.1]);
        let w = LossWeights { sigma_target_sq: 0.0, ..Default::default() };
        let mut tape = Tape::<f64>::new();
        let nodes = sched.leaves(&mut tape, false);
        let terms = alpha_reg(&mut tape, &sched, &nodes, &w).unwrap();
        assert_eq!(tape.value(terms.smoothness).data()[0], 0.0); // constant c
        assert_eq!(tape.value(terms.centrality).data()[0], 0.0); // c = 0
        assert!((tape.value(terms.mean_bias).data()[0]).abs() < 1e-15);
        assert!((tape.value(terms.var_bias).data()[0] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_for_equal_controls_and_reversal_invariant() {
        let mut sched = reg_schedule(&[0.0, 0.0]);
        for v in sched.control.data_mut() {
            *v = 0.37;
        }
        let w = LossWeights::default();
        let mut tape = Tape::<f64>::new();
        let nodes = sched.leaves(&mut tape, false);
        let terms = alpha_reg(&mut tape, &sched, &nodes, &w).unwrap();
        assert_eq!(tape.value(terms.smoothness).data()[0], 0.0);

        // Reversing the control sequence leaves smoothness and centrality
        // unchanged.
        let eval = |controls: &[f64]| -> (f64, f64) {
            let mut s = reg_schedule(&[0.0, 0.0]);
            for (v, &c) in s.control.data_mut().iter_mut().zip(controls) {
                *v = c;
            }
            let mut tape = Tape::<f64>::new();
            let nodes = s.leaves(&mut tape, false);
            let t = alpha_reg(&mut tape, &s, &nodes, &w).unwrap();
            (tape.value(t.smoothness).data()[0], tape.value(t.centrality).data()[0])
        };
        let fwd = [0.3, -0.2, 0.9, 0.1];
        let rev = [0.1, 0.9, -0.2, 0.3];
        assert_eq!(eval(&fwd), eval(&rev));
    }

    #[test]
    fn total_loss_projections() {
        let mut tape = Tape::<f64>::new();
        let lm = tape.constant(Tensor::scalar(0.8));
        let recon = tape.constant(Tensor::scalar(0.5));
        // all weights zero -> 0
        let zero = LossWeights {
            lm: 0.0,
            recon: 0.0,
            mse: 0.0,
            l2: 0.0,
            alpha_reg: 0.0,
            smoothness: 0.0,
            centrality: 0.0,
            mean_bias: 0.0,
            var_bias: 0.0,
            sigma_target_sq: 0.0,
        };
        let t = total_loss(&mut tape, LossMode::OneD, lm, recon, None, &zero).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.0);
        // lm weight 1, others 0 -> exactly the lm loss
        let lm_only = LossWeights { lm: 1.0, recon: 0.0, ..zero };
        let t = total_loss(&mut tape, LossMode::OneD, lm, recon, None, &lm_only).unwrap();
        assert_eq!(tape.value(t).data()[0], 0.8);
    }

    #[test]
    fn two_d_total_requires_alpha_term() {
        let mut tape = Tape::<f64>::new();
        let lm = tape.constant(Tensor::scalar(0.8));
        let recon = tape.constant(Tensor::scalar(0.5));
        assert!(total_loss(&mut tape, LossMode::TwoD, lm, recon, None, &LossWeights::default())
            .is_err());
    }

    #[test]
    fn nonnegative_components() {
        let sched = reg_schedule(&[0.2, -0.4, 0.1]);
        let w = LossWeights::default();
        let mut tape = Tape::<f64>::new();
        let nodes = sched.leaves(&mut tape, false);
        let terms = alpha_reg(&mut tape, &sched, &nodes, &w).unwrap();
        for id in [terms.smoothness, terms.centrality, terms.mean_bias, terms.var_bias, terms.total]
        {
            assert!(tape.value(id).data()[0] >= 0.0);
        }
    }
}
