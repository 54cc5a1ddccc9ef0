//! Evaluation metrics: perplexity, next-token accuracy, Jensen-Shannon
//! divergence against the expert average, activation sparsity, polysemantic
//! neuron fraction, k-means neuron-diversity entropy, mean activation, and
//! PCA projection of hidden states.
//!
//! Metrics are accumulated in f64 regardless of the model dtype; all
//! routines are deterministic given their seed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{stack_to_nodes, AutoencoderStack};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::training::LabeledSequence;
use crate::transformer::{
    forward_with_trace, params_to_nodes, HiddenTrace, ModelParams,
};
use crate::Domain;

/// A model under evaluation: parameters plus, for the superposed model, its
/// autoencoder stack.
#[derive(Clone, Copy)]
pub struct EvalModel<'a, T> {
    pub params: &'a ModelParams<T>,
    pub autoencoders: Option<&'a AutoencoderStack<T>>,
}

impl<'a, T: Real> EvalModel<'a, T> {
    pub fn plain(params: &'a ModelParams<T>) -> Self {
        EvalModel { params, autoencoders: None }
    }
}

/// One evaluation forward pass; returns logits and the hidden-state trace.
pub fn eval_forward<T: Real>(
    model: &EvalModel<'_, T>,
    tokens: &[usize],
    label: Option<Domain>,
) -> Result<(Tensor<T>, HiddenTrace<T>)> {
    let mut tape = Tape::new();
    let nodes = params_to_nodes(&mut tape, model.params, false);
    let ae_nodes = model.autoencoders.map(|stack| stack_to_nodes(&mut tape, stack, false));
    let (logits, trace) =
        forward_with_trace(&mut tape, &nodes, tokens, ae_nodes.as_ref(), label)?;
    let trace = trace.extract(&tape, label);
    Ok((tape.value(logits).clone(), trace))
}

/// Mean token cross-entropy over a dataset (token-weighted), through the
/// same graph op the training loss uses.
pub fn mean_cross_entropy<T: Real>(
    model: &EvalModel<'_, T>,
    data: &[LabeledSequence],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    let mut total = 0.0f64;
    let mut tokens = 0usize;
    for seq in data {
        let mut tape = Tape::new();
        let nodes = params_to_nodes(&mut tape, model.params, false);
        let ae_nodes = model.autoencoders.map(|stack| stack_to_nodes(&mut tape, stack, false));
        let (logits, _) =
            forward_with_trace(&mut tape, &nodes, &seq.tokens, ae_nodes.as_ref(), Some(seq.domain))?;
        let ce = tape.cross_entropy(logits, &seq.targets)?;
        total += tape.value(ce).data()[0].to64() * seq.targets.len() as f64;
        tokens += seq.targets.len();
    }
    Ok(total / tokens as f64)
}

/// `exp(mean token cross-entropy)`.
pub fn perplexity<T: Real>(model: &EvalModel<'_, T>, data: &[LabeledSequence]) -> Result<f64> {
    Ok(libm::exp(mean_cross_entropy(model, data)?))
}

/// Fraction of positions whose argmax logit equals the target. Ties break to
/// the lowest index.
pub fn next_token_accuracy<T: Real>(
    model: &EvalModel<'_, T>,
    data: &[LabeledSequence],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for seq in data {
        let (logits, _) = eval_forward(model, &seq.tokens, Some(seq.domain))?;
        let vocab = logits.last_dim();
        for (row, &target) in seq.targets.iter().enumerate() {
            let r = &logits.data()[row * vocab..(row + 1) * vocab];
            let mut best = 0usize;
            for (j, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = j;
                }
            }
            hits += usize::from(best == target);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Base-2 Jensen-Shannon divergence between two distributions, in [0, 1].
/// Each input must sum to 1 within 1e-6.
pub fn jsd_base2(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dimension("jsd: distributions have different support sizes"));
    }
    for (name, dist) in [("first", p), ("second", q)] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || dist.iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric {
                node: usize::MAX,
                detail: format!("jsd: {name} distribution sums to {sum}"),
            });
        }
    }
    let mut acc = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            acc += 0.5 * pv * libm::log2(pv / m);
        }
        if qv > 0.0 {
            acc += 0.5 * qv * libm::log2(qv / m);
        }
    }
    // Clamp away float dust at the 0 and 1 boundaries.
    Ok(acc.clamp(0.0, 1.0))
}

fn softmax_f64_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let vocab = logits.last_dim();
    logits
        .data()
        .chunks(vocab)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to64()).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|&e| e / sum).collect()
        })
        .collect()
}

/// Mean per-position JSD (x100) between the merged model's predictive
/// distribution and the elementwise average of the two experts'
/// distributions.
pub fn mean_jsd_vs_expert_average<T: Real>(
    merged: &EvalModel<'_, T>,
    base: &EvalModel<'_, T>,
    fine: &EvalModel<'_, T>,
    data: &[LabeledSequence],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for seq in data {
        let (ml, _) = eval_forward(merged, &seq.tokens, Some(seq.domain))?;
        let (bl, _) = eval_forward(base, &seq.tokens, Some(seq.domain))?;
        let (fl, _) = eval_forward(fine, &seq.tokens, Some(seq.domain))?;
        let mp = softmax_f64_rows(&ml);
        let bp = softmax_f64_rows(&bl);
        let fp = softmax_f64_rows(&fl);
        for ((m, b), f) in mp.iter().zip(&bp).zip(&fp) {
            let avg: Vec<f64> = b.iter().zip(f).map(|(&x, &y)| 0.5 * (x + y)).collect();
            acc += jsd_base2(m, &avg)?;
            count += 1;
        }
    }
    Ok(100.0 * acc / count as f64)
}

// ── Neuron statistics ───────────────────────────────────────────────────

/// Per-layer activation statistics accumulated over a probe set. The
/// activations are the post-layer residual-stream states the model actually
/// propagates (the reconstructed state at autoencoder layers).
#[derive(Debug, Clone)]
pub struct LayerProbe {
    pub hidden: usize,
    /// |activation| <= threshold counter and total element count.
    pub near_zero: u64,
    pub total: u64,
    pub abs_sum: f64,
    /// Per-neuron sums of |activation| and signed activation, per domain.
    pub domain_abs_sum: [Vec<f64>; 2],
    pub domain_signed_sum: [Vec<f64>; 2],
    pub domain_count: [u64; 2],
    /// Per probe sample: domain and the neuron-wise mean activation.
    pub profiles: Vec<(Domain, Vec<f64>)>,
}

/// Activation-magnitude threshold under which an entry counts as zero for
/// the sparsity metric.
pub const SPARSITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ProbeStats {
    pub layers: Vec<LayerProbe>,
}

/// Which residual-stream snapshot the probe reads at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeState {
    /// The state the next layer consumes (the reconstruction at
    /// autoencoder layers).
    Propagated,
    /// The layer output before any autoencoder refinement.
    LayerOutput,
}

/// Runs the probe set through a model and accumulates per-layer activation
/// statistics on the effective residual states.
pub fn collect_probe<T: Real>(
    model: &EvalModel<'_, T>,
    data: &[LabeledSequence],
) -> Result<ProbeStats> {
    collect_probe_states(model, data, ProbeState::Propagated)
}

/// As [`collect_probe`], selecting which per-layer state to measure.
pub fn collect_probe_states<T: Real>(
    model: &EvalModel<'_, T>,
    data: &[LabeledSequence],
    which: ProbeState,
) -> Result<ProbeStats> {
    if data.is_empty() {
        return Err(Error::input("probe dataset is empty"));
    }
    let n_layers = model.params.cfg.n_layers;
    let hidden = model.params.cfg.hidden;
    let mut layers: Vec<LayerProbe> = (0..n_layers)
        .map(|_| LayerProbe {
            hidden,
            near_zero: 0,
            total: 0,
            abs_sum: 0.0,
            domain_abs_sum: [vec![0.0; hidden], vec![0.0; hidden]],
            domain_signed_sum: [vec![0.0; hidden], vec![0.0; hidden]],
            domain_count: [0, 0],
            profiles: Vec::new(),
        })
        .collect();
    for seq in data {
        let (_, trace) = eval_forward(model, &seq.tokens, Some(seq.domain))?;
        let d = match seq.domain {
            Domain::Base => 0,
            Domain::Fine => 1,
        };
        let states = match which {
            ProbeState::Propagated => &trace.h_hat,
            ProbeState::LayerOutput => &trace.h,
        };
        for (layer, state) in layers.iter_mut().zip(states) {
            let rows = state.numel() / hidden;
            let mut profile = vec![0.0f64; hidden];
            for (i, v) in state.data().iter().enumerate() {
                let x = v.to64();
                let neuron = i % hidden;
                layer.near_zero += u64::from(x.abs() <= SPARSITY_EPS);
                layer.abs_sum += x.abs();
                layer.domain_abs_sum[d][neuron] += x.abs();
                layer.domain_signed_sum[d][neuron] += x;
                profile[neuron] += x;
            }
            layer.total += state.numel() as u64;
            layer.domain_count[d] += rows as u64;
            for p in profile.iter_mut() {
                *p /= rows as f64;
            }
            layer.profiles.push((seq.domain, profile));
        }
    }
    Ok(ProbeStats { layers })
}

impl LayerProbe {
    /// Percentage of activation entries with |a| <= 1e-6.
    pub fn sparsity(&self) -> f64 {
        100.0 * self.near_zero as f64 / self.total as f64
    }

    /// Mean absolute activation.
    pub fn mean_activation(&self) -> f64 {
        self.abs_sum / self.total as f64
    }

    /// Per-neuron mean |activation| for one domain.
    pub fn domain_means(&self, domain: Domain) -> Result<Vec<f64>> {
        let d = match domain {
            Domain::Base => 0,
            Domain::Fine => 1,
        };
        if self.domain_count[d] == 0 {
            return Err(Error::input(format!(
                "no probe samples for the {} domain",
                domain.name()
            )));
        }
        let denom = self.domain_count[d] as f64;
        Ok(self.domain_abs_sum[d].iter().map(|&s| s / denom).collect())
    }

    /// Per-neuron signed mean activation for one domain.
    pub fn domain_means_signed(&self, domain: Domain) -> Result<Vec<f64>> {
        let d = match domain {
            Domain::Base => 0,
            Domain::Fine => 1,
        };
        if self.domain_count[d] == 0 {
            return Err(Error::input(format!(
                "no probe samples for the {} domain",
                domain.name()
            )));
        }
        let denom = self.domain_count[d] as f64;
        Ok(self.domain_signed_sum[d].iter().map(|&s| s / denom).collect())
    }

    /// Neuron-major profile matrix: one row per neuron, one column per probe
    /// sample (the neuron's mean activation on that sample).
    pub fn neuron_profiles(&self) -> Vec<Vec<f64>> {
        let samples = self.profiles.len();
        let mut out = vec![vec![0.0f64; samples]; self.hidden];
        for (s, (_, profile)) in self.profiles.iter().enumerate() {
            for (n, &v) in profile.iter().enumerate() {
                out[n][s] = v;
            }
        }
        out
    }
}

/// Percentage of activation entries with magnitude at most 1e-6.
pub fn sparsity(activations: &[f64]) -> f64 {
    if activations.is_empty() {
        return 0.0;
    }
    let hits = activations.iter().filter(|v| v.abs() <= SPARSITY_EPS).count();
    100.0 * hits as f64 / activations.len() as f64
}

/// Mean absolute activation.
pub fn mean_activation(activations: &[f64]) -> f64 {
    if activations.is_empty() {
        return 0.0;
    }
    activations.iter().map(|v| v.abs()).sum::<f64>() / activations.len() as f64
}

pub const POLYSEMANTIC_THRESHOLD: f64 = 0.05;

/// Percentage of neurons whose normalized mean-activation difference across
/// the two domains falls below the threshold:
/// `|m_a - m_b| / (|m_a| + |m_b| + 1e-8) < threshold`.
pub fn polysemantic_fraction(
    mean_a: &[f64],
    mean_b: &[f64],
    threshold: f64,
) -> Result<f64> {
    if mean_a.len() != mean_b.len() || mean_a.is_empty() {
        return Err(Error::input("per-domain mean activations must have equal nonzero length"));
    }
    let eps = 1e-8;
    let hits = mean_a
        .iter()
        .zip(mean_b)
        .filter(|(&a, &b)| (a - b).abs() / (a.abs() + b.abs() + eps) < threshold)
        .count();
    Ok(100.0 * hits as f64 / mean_a.len() as f64)
}

// ── Mini-batch k-means and diversity entropy ────────────────────────────

pub const KMEANS_CLUSTERS: usize = 10;
pub const KMEANS_BATCH: usize = 64;
pub const KMEANS_ITERS: usize = 100;
/// Independent k-means++ initializations; the lowest-inertia run wins.
pub const KMEANS_RESTARTS: usize = 4;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn kmeans_single(
    points: &[Vec<f64>],
    k: usize,
    batch: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, f64) {
    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; any choice works.
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centers.push(points[next].clone());
    }

    let mut counts = vec![1u64; k];
    for _ in 0..iters {
        for _ in 0..batch {
            let p = &points[rng.random_range(0..points.len())];
            let c = nearest(p, &centers);
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, &pv) in centers[c].iter_mut().zip(p) {
                *cv += eta * (pv - *cv);
            }
        }
    }
    let assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centers[a]))
        .sum();
    (assignments, inertia)
}

/// Mini-batch k-means with k-means++ seeding and inertia-selected restarts;
/// returns final assignments. Deterministic given the RNG state.
pub fn mini_batch_kmeans(
    points: &[Vec<f64>],
    k: usize,
    batch: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if points.len() < k {
        return Err(Error::config(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_single(points, k, batch, iters, rng);
        if best.as_ref().is_none_or(|(_, inertia)| run.1 < *inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// Shannon entropy of the cluster-size distribution, normalized by `log k`.
pub fn normalized_entropy(assignments: &[usize], k: usize) -> f64 {
    if k < 2 || assignments.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    let n = assignments.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * libm::log(p);
        }
    }
    h / libm::log(k as f64)
}

/// Neuron-diversity entropy: cluster neuron activation profiles and measure
/// how evenly neurons spread over the clusters.
pub fn neuron_diversity(
    profiles: &[Vec<f64>],
    k: usize,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    if profiles.len() < k {
        return Err(Error::config(format!(
            "diversity entropy needs at least k={k} neurons, got {}",
            profiles.len()
        )));
    }
    let mut rng = stream_rng(seed, Stream::KMeans(stream));
    let assignments = mini_batch_kmeans(profiles, k, KMEANS_BATCH, KMEANS_ITERS, &mut rng)?;
    Ok(normalized_entropy(&assignments, k))
}

// ── PCA ─────────────────────────────────────────────────────────────────

pub const PCA_TOLERANCE: f64 = 1e-8;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// One row per input sample, `components` columns.
    pub coords: Vec<Vec<f64>>,
    /// Explained-variance ratios, descending; sums to at most 1.
    pub explained: Vec<f64>,
}

/// Principal components via power iteration with deflation on the covariance
/// matrix. Rows are mean-centered internally; component signs are fixed so
/// the largest-magnitude loading is positive.
pub fn pca_project(data: &[Vec<f64>], components: usize, seed: u64) -> Result<PcaResult> {
    let n = data.len();
    if n < 2 {
        return Err(Error::input("pca needs at least 2 samples"));
    }
    let d = data[0].len();
    if d < 2 {
        return Err(Error::input("pca needs at least 2 dimensions"));
    }
    if data.iter().any(|row| row.len() != d) {
        return Err(Error::dimension("pca rows have inconsistent widths"));
    }
    let components = components.min(d);

    let mut mean = vec![0.0f64; d];
    for row in data {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = data
        .iter()
        .map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();

    // Covariance (sample convention, divide by n-1).
    let mut cov = vec![vec![0.0f64; d]; d];
    for row in &centered {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i][j] += ri * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for row in cov.iter_mut() {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i][i]).sum();

    let mut rng = stream_rng(seed, Stream::KMeans(u64::MAX));
    let mut eigvecs: Vec<Vec<f64>> = Vec::with_capacity(components);
    let mut eigvals: Vec<f64> = Vec::with_capacity(components);
    for _ in 0..components {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        normalize(&mut v);
        let mut iterations = 0usize;
        loop {
            iterations += 1;
            let mut next = mat_vec(&cov, &v);
            let norm = vec_norm(&next);
            if norm < 1e-300 {
                // Deflated matrix is (numerically) zero: remaining variance
                // vanishes, any unit vector is a valid eigenvector.
                break;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            // Align signs before measuring the update.
            if dot(&next, &v) < 0.0 {
                for x in next.iter_mut() {
                    *x = -*x;
                }
            }
            let delta = v.iter().zip(&next).map(|(&a, &b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if delta < PCA_TOLERANCE {
                break;
            }
            if iterations >= PCA_MAX_ITERS {
                return Err(Error::NonConvergence {
                    iterations,
                    detail: format!("power iteration stalled at delta {delta}"),
                });
            }
        }
        let lambda = dot(&v, &mat_vec(&cov, &v)).max(0.0);
        // Deterministic sign: largest-magnitude loading positive.
        let pivot = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[pivot] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        eigvals.push(lambda);
        eigvecs.push(v);
    }

    let coords = centered
        .iter()
        .map(|row| eigvecs.iter().map(|v| dot(row, v)).collect())
        .collect();
    let explained = eigvals
        .iter()
        .map(|&l| if total_var > 0.0 { l / total_var } else { 0.0 })
        .collect();
    Ok(PcaResult { coords, explained })
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn vec_norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

fn normalize(v: &mut [f64]) {
    let n = vec_norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    } else {
        v[0] = 1.0;
    }
}

/// Cosine similarity of two equal-shape tensors flattened to vectors.
pub fn cosine<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to64(), y.to64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsd_of_identical_distributions_is_zero() {
        let p = vec![0.25, 0.25, 0.5];
        assert_eq!(jsd_base2(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_of_disjoint_support_is_one() {
        let p = vec![1.0, 0.0];
        let q = vec![0.0, 1.0];
        assert!((jsd_base2(&p, &q).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_is_symmetric() {
        let p = vec![0.7, 0.2, 0.1];
        let q = vec![0.1, 0.3, 0.6];
        let a = jsd_base2(&p, &q).unwrap();
        let b = jsd_base2(&q, &p).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn jsd_rejects_unnormalized_inputs() {
        let p = vec![0.5, 0.6];
        let q = vec![0.5, 0.5];
        assert!(matches!(jsd_base2(&p, &q), Err(Error::Numeric { .. })));
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(sparsity(&[0.0, 0.0, 0.0]), 100.0);
        assert_eq!(sparsity(&[1.0, 1.0]), 0.0);
        assert_eq!(sparsity(&[0.0, 1.0, 0.0, 1.0]), 50.0);
    }

    #[test]
    fn mean_activation_cases() {
        assert_eq!(mean_activation(&[0.0, 0.0]), 0.0);
        assert_eq!(mean_activation(&[1.0, 1.0]), 1.0);
        assert_eq!(mean_activation(&[-2.0, 2.0]), mean_activation(&[2.0, 2.0]));
    }

    #[test]
    fn polysemantic_extremes() {
        // Identical statistics: every neuron polysemantic.
        let m = vec![0.3, 0.7, 0.1];
        assert_eq!(polysemantic_fraction(&m, &m, 0.05).unwrap(), 100.0);
        // Domain-exclusive neurons: none polysemantic.
        let a = vec![0.5, 0.0];
        let b = vec![0.0, 0.5];
        assert_eq!(polysemantic_fraction(&a, &b, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn polysemantic_fraction_monotone_in_threshold() {
        let a: Vec<f64> = (0..32).map(|i| 0.1 + 0.01 * i as f64).collect();
        let b: Vec<f64> = (0..32).map(|i| 0.1 + 0.013 * (32 - i) as f64).collect();
        let mut prev = 0.0;
        for t in [0.01, 0.05, 0.1, 0.3, 1.0] {
            let f = polysemantic_fraction(&a, &b, t).unwrap();
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn entropy_degenerate_and_uniform() {
        assert_eq!(normalized_entropy(&[0, 0, 0, 0], 10), 0.0);
        let even: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert!((normalized_entropy(&even, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        // Two tight, far-apart groups; entropy of the 2-cluster split is 1.
        let mut points = Vec::new();
        for i in 0..20 {
            let off = if i < 10 { 0.0 } else { 100.0 };
            points.push(vec![off + 0.01 * i as f64, off]);
        }
        let mut rng = stream_rng(3, Stream::KMeans(0));
        let assign = mini_batch_kmeans(&points, 2, 8, 50, &mut rng).unwrap();
        assert!(assign[..10].iter().all(|&a| a == assign[0]));
        assert!(assign[10..].iter().all(|&a| a == assign[10]));
        assert_ne!(assign[0], assign[10]);
    }

    #[test]
    fn kmeans_rejects_fewer_points_than_clusters() {
        let points = vec![vec![0.0; 3]; 4];
        let mut rng = stream_rng(3, Stream::KMeans(0));
        assert!(matches!(
            mini_batch_kmeans(&points, 10, 8, 10, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn diversity_entropy_is_permutation_invariant() {
        let profiles: Vec<Vec<f64>> = (0..24)
            .map(|i| (0..6).map(|j| libm::sin((i * 7 + j) as f64)).collect())
            .collect();
        let a = neuron_diversity(&profiles, 4, 11, 0).unwrap();
        let mut reversed = profiles.clone();
        reversed.reverse();
        let b = neuron_diversity(&reversed, 4, 11, 0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pca_collinear_data_is_rank_one() {
        let data: Vec<Vec<f64>> =
            (0..12).map(|i| vec![i as f64 * 0.5, i as f64 * 1.5, -(i as f64)]).collect();
        let out = pca_project(&data, 2, 7).unwrap();
        assert!(out.explained[0] >= 0.9999);
        assert!(out.explained.iter().sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn pca_explained_sorted_and_bounded() {
        let data: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                (0..5)
                    .map(|j| libm::sin((i * 13 + j * 31) as f64) + 0.1 * (j as f64))
                    .collect()
            })
            .collect();
        let out = pca_project(&data, 3, 5).unwrap();
        assert!(out.explained.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        assert!(out.explained.iter().sum::<f64>() <= 1.0 + 1e-9);
        assert_eq!(out.coords.len(), 40);
        assert_eq!(out.coords[0].len(), 3);
    }

    #[test]
    fn pca_rejects_degenerate_inputs() {
        assert!(pca_project(&[vec![1.0, 2.0]], 2, 0).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0]], 2, 0).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = Tensor::<f64>::new(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine(&a, &a), 1.0);
        assert_eq!(cosine(&a, &b), 0.0);
    }
}
