//! Desk-scale training: full backpropagation through the max-aggregated
//! graph convolutions, mean pooling, and the MLP head, with an
//! adaptive-moment optimizer, plateau learning-rate schedule, and
//! quantization-aware fine-tuning (straight-through gradients).
//!
//! Training precomputes each sample's graph once (brute-force neighbor
//! search over the full history — the trainer never touches the streaming
//! engine) and is deterministic for a fixed seed: per-sample gradients are
//! computed in parallel but reduced in sample order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::events::{mix_seed, EventError, EventStream, SynthTaskSpec};
use crate::gconv::{fold_bn, pn_normalize, resolve_neighbor_indices, LayerParams};
use crate::graphgen::{brute_force_neighbors, neighbor_average, EdgeList, GraphConfig};
use crate::head::{predict, HeadError};
use crate::model::{forward_stream, Mode, Model, ModelError, QuantizedModel};
use crate::quant::{
    approx_scale, calibrate, fake_quant, quantize, round_half_up, QuantParams, QuantizedLayer,
};

/// Optimizer / schedule hyperparameters. Defaults: 100 float epochs plus 20
/// QAT epochs, batches of 16, learning rate 2e-4, weight decay 1e-4, and a
/// reduce-on-plateau schedule (factor 0.5, patience 10).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub qat_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    /// Relative improvement below which an epoch counts as a plateau.
    pub plateau_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            qat_epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: u32, num_classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// One epoch of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub learning_rate: f64,
}

// ---------------------------------------------------------------------------
// Sample graphs
// ---------------------------------------------------------------------------

/// Precomputed per-sample graph: edges, resolved neighbor event indices,
/// normalized positions, and layer-0 input features.
pub struct SampleGraph {
    pub label: u32,
    pub events: Vec<crate::events::Event>,
    pub edges: Vec<EdgeList>,
    /// `nb_idx[i][k]` = stream index of event `i`'s `k`-th neighbor.
    pub nb_idx: Vec<Vec<usize>>,
    /// `positions[i][k]` = normalized position of that neighbor.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// Layer-0 input features (the graph generator's neighbor averages).
    pub feat0: Vec<[f64; 2]>,
}

/// Normalized self-loop position (zero displacement).
const PN_SELF: [f64; 2] = [0.0, 0.5];

pub fn build_sample_graph(
    stream: &EventStream,
    label: u32,
    cfg: &GraphConfig,
) -> Result<SampleGraph, TrainError> {
    if stream.events.is_empty() {
        return Err(TrainError::Model(HeadError::EmptySample.into()));
    }
    let events = stream.events.clone();
    let edges: Vec<EdgeList> = events
        .iter()
        .enumerate()
        .map(|(i, &ev)| brute_force_neighbors(ev, &events[..i], cfg))
        .collect();
    let nb_idx = resolve_neighbor_indices(&events, &edges, cfg).map_err(ModelError::from)?;
    let mut positions = Vec::with_capacity(events.len());
    let mut feat0 = Vec::with_capacity(events.len());
    for (i, &ev) in events.iter().enumerate() {
        let pos = edges[i]
            .neighbors
            .iter()
            .map(|&(ch_j, t_j)| {
                let dt = -((ev.t - t_j) as f64);
                let dch = (ch_j as i64 - ev.ch as i64) as f64;
                pn_normalize((dt, dch), cfg).map_err(ModelError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        positions.push(pos);
        feat0.push(neighbor_average(&edges[i], ev, cfg));
    }
    Ok(SampleGraph {
        label,
        events,
        edges,
        nb_idx,
        positions,
        feat0,
    })
}

/// Round-robin synthetic dataset: sample `i` gets class `i % num_classes`
/// and an independent per-sample seed derived from `spec.seed` and `salt`.
pub fn synth_dataset(
    spec: &SynthTaskSpec,
    n: usize,
    salt: u64,
) -> Result<Vec<(EventStream, u32)>, EventError> {
    (0..n)
        .map(|i| {
            let class = (i % spec.num_classes as usize) as u32;
            let mut s = spec.clone();
            s.seed = mix_seed(spec.seed, salt.wrapping_add(i as u64));
            Ok((crate::events::synth_stream(&s, class)?, class))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Flat parameter views
// ---------------------------------------------------------------------------

struct LayerOff {
    w: usize,
    b: usize,
    gamma: Option<usize>,
    beta: Option<usize>,
}

/// Flat offsets of every trainable tensor (batch-norm running statistics are
/// not trainable and live outside the flat vector).
struct Offsets {
    layers: Vec<LayerOff>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    total: usize,
}

fn offsets(model: &Model) -> Offsets {
    let mut cur = 0usize;
    let mut layers = Vec::with_capacity(model.layers.len());
    for p in &model.layers {
        let w = cur;
        cur += p.w.len();
        let b = cur;
        cur += p.b.len();
        let (gamma, beta) = if p.bn.is_some() {
            let g = cur;
            cur += p.out_dim;
            let be = cur;
            cur += p.out_dim;
            (Some(g), Some(be))
        } else {
            (None, None)
        };
        layers.push(LayerOff { w, b, gamma, beta });
    }
    let fc1_w = cur;
    cur += model.head.fc1_w.len();
    let fc1_b = cur;
    cur += model.head.fc1_b.len();
    let fc2_w = cur;
    cur += model.head.fc2_w.len();
    let fc2_b = cur;
    cur += model.head.fc2_b.len();
    Offsets {
        layers,
        fc1_w,
        fc1_b,
        fc2_w,
        fc2_b,
        total: cur,
    }
}

pub fn collect_params(model: &Model) -> Vec<f64> {
    let off = offsets(model);
    let mut p = vec![0.0; off.total];
    for (lo, layer) in off.layers.iter().zip(&model.layers) {
        p[lo.w..lo.w + layer.w.len()].copy_from_slice(&layer.w);
        p[lo.b..lo.b + layer.b.len()].copy_from_slice(&layer.b);
        if let (Some(g), Some(be), Some(bn)) = (lo.gamma, lo.beta, layer.bn.as_ref()) {
            p[g..g + layer.out_dim].copy_from_slice(&bn.gamma);
            p[be..be + layer.out_dim].copy_from_slice(&bn.beta);
        }
    }
    p[off.fc1_w..off.fc1_w + model.head.fc1_w.len()].copy_from_slice(&model.head.fc1_w);
    p[off.fc1_b..off.fc1_b + model.head.fc1_b.len()].copy_from_slice(&model.head.fc1_b);
    p[off.fc2_w..off.fc2_w + model.head.fc2_w.len()].copy_from_slice(&model.head.fc2_w);
    p[off.fc2_b..off.fc2_b + model.head.fc2_b.len()].copy_from_slice(&model.head.fc2_b);
    p
}

pub fn set_params(model: &mut Model, p: &[f64]) {
    let off = offsets(model);
    debug_assert_eq!(p.len(), off.total);
    for (lo, layer) in off.layers.iter().zip(&mut model.layers) {
        let (wn, bn_n, out) = (layer.w.len(), layer.b.len(), layer.out_dim);
        layer.w.copy_from_slice(&p[lo.w..lo.w + wn]);
        layer.b.copy_from_slice(&p[lo.b..lo.b + bn_n]);
        if let (Some(g), Some(be), Some(bn)) = (lo.gamma, lo.beta, layer.bn.as_mut()) {
            bn.gamma.copy_from_slice(&p[g..g + out]);
            bn.beta.copy_from_slice(&p[be..be + out]);
        }
    }
    let h = &mut model.head;
    let (n1w, n1b, n2w, n2b) = (h.fc1_w.len(), h.fc1_b.len(), h.fc2_w.len(), h.fc2_b.len());
    h.fc1_w.copy_from_slice(&p[off.fc1_w..off.fc1_w + n1w]);
    h.fc1_b.copy_from_slice(&p[off.fc1_b..off.fc1_b + n1b]);
    h.fc2_w.copy_from_slice(&p[off.fc2_w..off.fc2_w + n2w]);
    h.fc2_b.copy_from_slice(&p[off.fc2_b..off.fc2_b + n2b]);
}

// ---------------------------------------------------------------------------
// Cached forward / backward
// ---------------------------------------------------------------------------

struct LayerCache {
    /// Winner candidate per `(event, out)`: 0 = self-loop, k ≥ 1 = edge k−1.
    winners: Vec<u32>,
    /// Max-aggregated (post-BN) response per `(event, out)`, before ReLU.
    pre_relu: Vec<f64>,
    /// Pre-BN linear response sums over all candidates, for the running-stat
    /// update (empty when stats are not collected).
    stat_sum: Vec<f64>,
    stat_sumsq: Vec<f64>,
    stat_n: u64,
}

pub struct ForwardCache {
    /// `feats[l][i]` = input feature of layer `l` at event `i`
    /// (`feats[L][i]` = final conv outputs). Under QAT these hold the
    /// fake-quantized values (what the integer pipeline would see).
    feats: Vec<Vec<Vec<f64>>>,
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Running min/max per quantization point (layer inputs 0..L, plus the final
/// output at index L).
pub type ActRanges = Vec<(f64, f64)>;

fn widen(r: &mut (f64, f64), x: f64) {
    r.0 = r.0.min(x);
    r.1 = r.1.max(x);
}

/// Forward pass keeping everything backward needs. `act_qps`, when given,
/// fake-quantizes every layer input (features and positional dims) and the
/// final conv outputs — the QAT view. `ranges`, when given, collects the
/// observed activation min/max per quantization point instead.
pub fn forward_cached(
    model: &Model,
    g: &SampleGraph,
    act_qps: Option<&[QuantParams]>,
    collect_stats: bool,
    mut ranges: Option<&mut ActRanges>,
) -> ForwardCache {
    let n = g.events.len();
    let num_layers = model.layers.len();
    let fq = |x: f64, l: usize| match act_qps {
        Some(qps) => fake_quant(x, &qps[l]),
        None => x,
    };

    let mut feats: Vec<Vec<Vec<f64>>> = Vec::with_capacity(num_layers + 1);
    feats.push(
        g.feat0
            .iter()
            .map(|f| vec![fq(f[0], 0), fq(f[1], 0)])
            .collect(),
    );
    let mut layer_caches = Vec::with_capacity(num_layers);

    for (l, params) in model.layers.iter().enumerate() {
        let out_dim = params.out_dim;
        let in_dim = params.in_dim;
        let mut winners = vec![0u32; n * out_dim];
        let mut pre_relu = vec![0.0f64; n * out_dim];
        let collect = collect_stats && params.bn.is_some();
        let mut stat_sum = vec![0.0f64; if collect { out_dim } else { 0 }];
        let mut stat_sumsq = vec![0.0f64; if collect { out_dim } else { 0 }];
        let mut stat_n = 0u64;
        let mut next = vec![vec![0.0f64; out_dim]; n];
        let mut lin = vec![0.0f64; out_dim];

        for i in 0..n {
            let n_cand = 1 + g.nb_idx[i].len();
            for cand in 0..n_cand {
                let (x, raw_pos): (&[f64], [f64; 2]) = if cand == 0 {
                    (&feats[l][i], PN_SELF)
                } else {
                    (&feats[l][g.nb_idx[i][cand - 1]], g.positions[i][cand - 1])
                };
                let pos = [fq(raw_pos[0], l), fq(raw_pos[1], l)];
                if let Some(r) = ranges.as_deref_mut() {
                    if cand == 0 {
                        for &v in x {
                            widen(&mut r[l], v);
                        }
                    }
                    widen(&mut r[l], raw_pos[0]);
                    widen(&mut r[l], raw_pos[1]);
                }
                for o in 0..out_dim {
                    let row = params.w_row(o);
                    let mut acc = params.b[o];
                    for (j, &xv) in x.iter().enumerate() {
                        acc += row[j] * xv;
                    }
                    acc += row[in_dim] * pos[0];
                    acc += row[in_dim + 1] * pos[1];
                    lin[o] = acc;
                }
                if collect {
                    for o in 0..out_dim {
                        stat_sum[o] += lin[o];
                        stat_sumsq[o] += lin[o] * lin[o];
                    }
                    stat_n += 1;
                }
                if let Some(bn) = &params.bn {
                    for o in 0..out_dim {
                        let sd = (bn.running_var[o] + bn.epsilon).sqrt();
                        lin[o] = bn.gamma[o] * (lin[o] - bn.running_mean[o]) / sd + bn.beta[o];
                    }
                }
                for o in 0..out_dim {
                    let slot = i * out_dim + o;
                    if cand == 0 || lin[o] > pre_relu[slot] {
                        pre_relu[slot] = lin[o];
                        winners[slot] = cand as u32;
                    }
                }
            }
            for o in 0..out_dim {
                let y = pre_relu[i * out_dim + o].max(0.0);
                next[i][o] = if l + 1 == num_layers {
                    // Final conv outputs are quantized on their way into the
                    // pool; range index L tracks them.
                    if let Some(r) = ranges.as_deref_mut() {
                        widen(&mut r[num_layers], y);
                    }
                    fq(y, num_layers)
                } else {
                    fq(y, l + 1)
                };
            }
        }
        layer_caches.push(LayerCache {
            winners,
            pre_relu,
            stat_sum,
            stat_sumsq,
            stat_n,
        });
        feats.push(next);
    }

    let last_dim = model.layers.last().expect("non-empty stack").out_dim;
    let mut pooled = vec![0.0f64; last_dim];
    for f in &feats[num_layers] {
        for (acc, x) in pooled.iter_mut().zip(f) {
            *acc += x;
        }
    }
    for acc in &mut pooled {
        *acc /= n as f64;
    }

    let head = &model.head;
    let hidden_pre: Vec<f64> = (0..head.hidden)
        .map(|h| {
            let row = &head.fc1_w[h * head.in_dim..(h + 1) * head.in_dim];
            row.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>() + head.fc1_b[h]
        })
        .collect();
    let logits: Vec<f64> = (0..head.num_classes)
        .map(|c| {
            let row = &head.fc2_w[c * head.hidden..(c + 1) * head.hidden];
            row.iter()
                .zip(&hidden_pre)
                .map(|(w, z)| w * z.max(0.0))
                .sum::<f64>()
                + head.fc2_b[c]
        })
        .collect();

    ForwardCache {
        feats,
        layers: layer_caches,
        pooled,
        hidden_pre,
        logits,
    }
}

/// Softmax cross-entropy via log-sum-exp; returns the loss and dL/dlogits.
pub fn loss(logits: &[f64], label: u32) -> (f64, Vec<f64>) {
    debug_assert!((label as usize) < logits.len());
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let loss = s.ln() + m - logits[label as usize];
    let mut d: Vec<f64> = exps.iter().map(|&e| e / s).collect();
    d[label as usize] -= 1.0;
    (loss, d)
}

/// Backpropagation through the cached forward. Max-aggregation routes each
/// output feature's gradient to its single winning candidate; mean pooling
/// distributes 1/n; batch-norm running statistics are treated as constants.
/// Returns `(loss, flat gradient)` in the [`collect_params`] layout.
pub fn backward(
    model: &Model,
    g: &SampleGraph,
    cache: &ForwardCache,
    label: u32,
) -> (f64, Vec<f64>) {
    let off = offsets(model);
    let mut grads = vec![0.0f64; off.total];
    let (loss_val, dlogits) = loss(&cache.logits, label);
    let head = &model.head;
    let n = g.events.len();

    // Head.
    let hidden: Vec<f64> = cache.hidden_pre.iter().map(|z| z.max(0.0)).collect();
    for c in 0..head.num_classes {
        for h in 0..head.hidden {
            grads[off.fc2_w + c * head.hidden + h] += dlogits[c] * hidden[h];
        }
        grads[off.fc2_b + c] += dlogits[c];
    }
    let mut dhidden = vec![0.0f64; head.hidden];
    for h in 0..head.hidden {
        if cache.hidden_pre[h] > 0.0 {
            let mut s = 0.0;
            for c in 0..head.num_classes {
                s += head.fc2_w[c * head.hidden + h] * dlogits[c];
            }
            dhidden[h] = s;
        }
    }
    for h in 0..head.hidden {
        for j in 0..head.in_dim {
            grads[off.fc1_w + h * head.in_dim + j] += dhidden[h] * cache.pooled[j];
        }
        grads[off.fc1_b + h] += dhidden[h];
    }
    let mut dpooled = vec![0.0f64; head.in_dim];
    for j in 0..head.in_dim {
        for h in 0..head.hidden {
            dpooled[j] += head.fc1_w[h * head.in_dim + j] * dhidden[h];
        }
    }

    // Mean pool: every event feature receives upstream / n.
    let last_dim = model.layers.last().expect("non-empty").out_dim;
    let mut dfeat: Vec<Vec<f64>> = vec![dpooled.iter().map(|d| d / n as f64).collect(); n];
    debug_assert_eq!(last_dim, dpooled.len());

    // Conv stack, last layer first.
    for l in (0..model.layers.len()).rev() {
        let params = &model.layers[l];
        let lo = &off.layers[l];
        let lc = &cache.layers[l];
        let (in_dim, out_dim, ext) = (params.in_dim, params.out_dim, params.ext_in());
        let mut dprev: Vec<Vec<f64>> = vec![vec![0.0; in_dim]; n];
        for i in 0..n {
            for o in 0..out_dim {
                let up = dfeat[i][o];
                if up == 0.0 || lc.pre_relu[i * out_dim + o] <= 0.0 {
                    continue; // ReLU gate (or nothing flowing)
                }
                let cand = lc.winners[i * out_dim + o] as usize;
                let (x, pos, src): (&[f64], [f64; 2], usize) = if cand == 0 {
                    (cache.feats[l][i].as_slice(), PN_SELF, i)
                } else {
                    let j = g.nb_idx[i][cand - 1];
                    (cache.feats[l][j].as_slice(), g.positions[i][cand - 1], j)
                };
                let row = params.w_row(o);
                let dlin = if let Some(bn) = &params.bn {
                    // Recompute the winner's pre-BN response for dγ.
                    let mut lin = params.b[o];
                    for (j, &xv) in x.iter().enumerate() {
                        lin += row[j] * xv;
                    }
                    lin += row[in_dim] * pos[0] + row[in_dim + 1] * pos[1];
                    let sd = (bn.running_var[o] + bn.epsilon).sqrt();
                    grads[lo.gamma.expect("bn present") + o] +=
                        up * (lin - bn.running_mean[o]) / sd;
                    grads[lo.beta.expect("bn present") + o] += up;
                    up * bn.gamma[o] / sd
                } else {
                    up
                };
                let wrow = lo.w + o * ext;
                for (j, &xv) in x.iter().enumerate() {
                    grads[wrow + j] += dlin * xv;
                }
                grads[wrow + in_dim] += dlin * pos[0];
                grads[wrow + in_dim + 1] += dlin * pos[1];
                grads[lo.b + o] += dlin;
                for j in 0..in_dim {
                    dprev[src][j] += dlin * row[j];
                }
            }
        }
        dfeat = dprev;
    }
    // dfeat now holds gradients of the layer-0 inputs — data, not parameters.

    (loss_val, grads)
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Adaptive-moment estimation with the standard β₁=0.9, β₂=0.999, ε=1e-8.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Reduce-on-plateau: when the loss fails to improve by a relative threshold
/// for more than `patience` consecutive epochs, multiply the rate by
/// `factor`.
struct Plateau {
    best: f64,
    bad: u32,
    factor: f64,
    patience: u32,
    threshold: f64,
}

impl Plateau {
    fn new(tc: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            bad: 0,
            factor: tc.plateau_factor,
            patience: tc.plateau_patience,
            threshold: tc.plateau_threshold,
        }
    }

    fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad = 0;
            lr
        } else {
            self.bad += 1;
            if self.bad > self.patience {
                self.bad = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

fn check_labels(dataset: &[(EventStream, u32)], num_classes: usize) -> Result<(), TrainError> {
    for (_, label) in dataset {
        if *label as usize >= num_classes {
            return Err(TrainError::BadLabel {
                label: *label,
                num_classes,
            });
        }
    }
    Ok(())
}

fn build_graphs(
    dataset: &[(EventStream, u32)],
    cfg: &GraphConfig,
) -> Result<Vec<SampleGraph>, TrainError> {
    dataset
        .par_iter()
        .map(|(stream, label)| build_sample_graph(stream, *label, cfg))
        .collect()
}

/// Per-batch batch-norm statistics update (momentum 0.1, biased variance)
/// from the linear responses of every candidate seen in the batch.
fn update_bn_stats(model: &mut Model, batch_caches: &[&ForwardCache]) {
    const MOMENTUM: f64 = 0.1;
    for l in 0..model.layers.len() {
        let out_dim = model.layers[l].out_dim;
        let Some(bn) = model.layers[l].bn.as_mut() else {
            continue;
        };
        let mut sum = vec![0.0f64; out_dim];
        let mut sumsq = vec![0.0f64; out_dim];
        let mut count = 0u64;
        for cache in batch_caches {
            let lc = &cache.layers[l];
            if lc.stat_n == 0 {
                continue;
            }
            for o in 0..out_dim {
                sum[o] += lc.stat_sum[o];
                sumsq[o] += lc.stat_sumsq[o];
            }
            count += lc.stat_n;
        }
        if count == 0 {
            continue;
        }
        let nf = count as f64;
        for o in 0..out_dim {
            let mean = sum[o] / nf;
            let var = (sumsq[o] / nf - mean * mean).max(0.0);
            bn.running_mean[o] = (1.0 - MOMENTUM) * bn.running_mean[o] + MOMENTUM * mean;
            bn.running_var[o] = (1.0 - MOMENTUM) * bn.running_var[o] + MOMENTUM * var;
        }
    }
}

/// One optimization epoch over `graphs`; returns (mean loss, accuracy).
/// `fq_weights` projects conv weights onto their live 8-bit grid per batch
/// (the QAT view); `act_qps` additionally fake-quantizes activations with
/// the fixed calibrated formats. Batch-norm statistics update only in plain
/// float mode.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    params: &mut [f64],
    adam: &mut Adam,
    graphs: &[SampleGraph],
    order: &[usize],
    tc: &TrainConfig,
    lr: f64,
    fq_weights: bool,
    act_qps: Option<&[QuantParams]>,
) -> (f64, f64) {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(tc.batch_size) {
        set_params(model, params);
        let view = if fq_weights {
            fake_quant_weights(model)
        } else {
            None
        };
        let fwd_model: &Model = view.as_ref().unwrap_or(model);
        let collect_stats = !fq_weights;
        let results: Vec<(f64, Vec<f64>, bool, ForwardCache)> = batch
            .par_iter()
            .map(|&i| {
                let g = &graphs[i];
                let cache = forward_cached(fwd_model, g, act_qps, collect_stats, None);
                let (l, grad) = backward(fwd_model, g, &cache, g.label);
                let ok = predict(&cache.logits) == g.label as usize;
                (l, grad, ok, cache)
            })
            .collect();
        // Deterministic reduction in batch order.
        let bs = batch.len() as f64;
        let mut grad = vec![0.0f64; params.len()];
        for (l, g, ok, _) in &results {
            total_loss += l;
            correct += usize::from(*ok);
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        for (gi, p) in grad.iter_mut().zip(params.iter()) {
            *gi = *gi / bs + tc.weight_decay * p;
        }
        adam.step(params, &grad, lr);
        set_params(model, params);
        if collect_stats {
            let caches: Vec<&ForwardCache> = results.iter().map(|(_, _, _, c)| c).collect();
            update_bn_stats(model, &caches);
        }
    }
    (
        total_loss / graphs.len() as f64,
        correct as f64 / graphs.len() as f64,
    )
}

/// Clone of the model with each conv layer's weights fake-quantized (8-bit,
/// live per-tensor range). Degenerate (constant) tensors pass through.
fn fake_quant_weights(model: &Model) -> Option<Model> {
    let mut view = model.clone();
    for layer in &mut view.layers {
        let (min, max) = min_max(&layer.w);
        if let Ok(qp) = calibrate(min, max, 8) {
            for w in &mut layer.w {
                *w = fake_quant(*w, &qp);
            }
        }
    }
    Some(view)
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn shuffled_order(n: usize, seed: u64, epoch: usize, salt: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, salt.wrapping_add(epoch as u64)));
    order.shuffle(&mut rng);
    order
}

/// Float training: mini-batch gradient descent with the plateau schedule.
/// Returns the best model by minimum training loss, plus the epoch history.
pub fn train_loop(
    dataset: &[(EventStream, u32)],
    init: &Model,
    tc: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = init.clone();
    model.validate()?;
    check_labels(dataset, model.config.num_classes)?;
    let graphs = build_graphs(dataset, &model.config.graph)?;

    let mut params = collect_params(&model);
    let mut adam = Adam::new(params.len());
    let mut plateau = Plateau::new(tc);
    let mut lr = tc.learning_rate;
    let mut best = (f64::INFINITY, model.clone());
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let order = shuffled_order(graphs.len(), tc.seed, epoch, 0x5348_5546);
        let (epoch_loss, acc) = run_epoch(
            &mut model,
            &mut params,
            &mut adam,
            &graphs,
            &order,
            tc,
            lr,
            false,
            None,
        );
        if epoch_loss < best.0 {
            best = (epoch_loss, model.clone());
        }
        history.push(EpochStats {
            epoch,
            loss: epoch_loss,
            accuracy: acc,
            learning_rate: lr,
        });
        lr = plateau.observe(epoch_loss, lr);
    }
    Ok((best.1, history))
}

/// Quantization-aware fine-tuning. Folds batch norm permanently, trains with
/// fake-quantized weights (live 8-bit ranges) for one warm-up epoch,
/// calibrates the fixed activation formats on the training set, fine-tunes
/// the remaining epochs with activations fake-quantized too, and emits the
/// integer model. Returns `(folded float model, integer model, history)`.
pub fn qat_finetune(
    dataset: &[(EventStream, u32)],
    float_model: &Model,
    tc: &TrainConfig,
) -> Result<(Model, QuantizedModel, Vec<EpochStats>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = float_model.clone();
    model.validate()?;
    check_labels(dataset, model.config.num_classes)?;
    model.layers = model.layers.iter().map(fold_bn).collect();
    let graphs = build_graphs(dataset, &model.config.graph)?;

    let mut params = collect_params(&model);
    let mut adam = Adam::new(params.len());
    let mut plateau = Plateau::new(tc);
    let mut lr = tc.learning_rate;
    let mut best = (f64::INFINITY, model.clone());
    let mut history = Vec::with_capacity(tc.qat_epochs);
    let mut act_qps: Option<Vec<QuantParams>> = None;
    let warmup = tc.qat_epochs.min(1);
    for epoch in 0..tc.qat_epochs {
        if epoch == warmup {
            act_qps = Some(calibrate_activations(&model, &graphs)?);
            // The forward changes here, so the loss scale may too; best-loss
            // tracking restarts to compare like with like.
            best = (f64::INFINITY, model.clone());
        }
        let order = shuffled_order(graphs.len(), tc.seed, epoch, 0x5141_5431);
        // Warm-up epochs run with weight fake-quant only (act_qps is still
        // None); afterwards activations are fake-quantized too.
        let (epoch_loss, acc) = run_epoch(
            &mut model,
            &mut params,
            &mut adam,
            &graphs,
            &order,
            tc,
            lr,
            true,
            act_qps.as_deref(),
        );
        if epoch_loss < best.0 {
            best = (epoch_loss, model.clone());
        }
        history.push(EpochStats {
            epoch,
            loss: epoch_loss,
            accuracy: acc,
            learning_rate: lr,
        });
        lr = plateau.observe(epoch_loss, lr);
    }
    let final_model = best.1;
    final_model.validate()?;
    let act_qps = match act_qps {
        Some(q) => q,
        None => calibrate_activations(&final_model, &graphs)?,
    };
    let quant = build_quantized(&final_model, &act_qps)?;
    Ok((final_model, quant, history))
}

/// One float pass over the dataset collecting per-quantization-point min/max
/// (layer inputs including positional dims, plus the final conv outputs),
/// then fixed-point formats at the configured bitwidths (final output 8-bit).
pub fn calibrate_activations(
    model: &Model,
    graphs: &[SampleGraph],
) -> Result<Vec<QuantParams>, TrainError> {
    let num_layers = model.layers.len();
    let per_sample: Vec<ActRanges> = graphs
        .par_iter()
        .map(|g| {
            let mut r: ActRanges = vec![(f64::INFINITY, f64::NEG_INFINITY); num_layers + 1];
            forward_cached(model, g, None, false, Some(&mut r));
            r
        })
        .collect();
    let mut merged: ActRanges = vec![(f64::INFINITY, f64::NEG_INFINITY); num_layers + 1];
    for r in per_sample {
        for (m, s) in merged.iter_mut().zip(r) {
            m.0 = m.0.min(s.0);
            m.1 = m.1.max(s.1);
        }
    }
    merged
        .iter()
        .enumerate()
        .map(|(l, &(mut lo, mut hi))| {
            if !lo.is_finite() || !hi.is_finite() || hi - lo < 1e-9 {
                // Degenerate or unobserved range: widen to a unit interval so
                // the format stays valid.
                lo = lo.min(0.0);
                hi = lo + 1.0;
            }
            let bw = if l < num_layers {
                model.config.bitwidths[l]
            } else {
                8
            };
            calibrate(lo, hi, bw)
                .map_err(ModelError::from)
                .map_err(TrainError::from)
        })
        .collect()
}

/// Convert a (BN-folded) float model into integer layers under the given
/// activation formats: 8-bit weights on their live range, bias on the
/// accumulator grid `s_in·s_w`, and multiply-and-shift requantization to the
/// next layer's format. Verifies 32-bit accumulator headroom per layer.
pub fn build_quantized(
    model: &Model,
    act_qps: &[QuantParams],
) -> Result<QuantizedModel, TrainError> {
    assert_eq!(act_qps.len(), model.layers.len() + 1);
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, raw) in model.layers.iter().enumerate() {
        let folded: LayerParams = fold_bn(raw);
        let (mut lo, mut hi) = min_max(&folded.w);
        if hi - lo < 1e-12 {
            lo = lo.min(0.0);
            hi = lo + 1.0;
        }
        let qp_w = calibrate(lo, hi, 8).map_err(ModelError::from)?;
        let w_int: Vec<u16> = folded
            .w
            .iter()
            .map(|&x| quantize(x, &qp_w) as u16)
            .collect();
        let s_in = act_qps[l].real_scale();
        let s_w = qp_w.real_scale();
        let s_out = act_qps[l + 1].real_scale();
        let b_acc: Vec<i64> = folded
            .b
            .iter()
            .map(|&b| round_half_up(b / (s_in * s_w)) as i64)
            .collect();
        let (m, k) = approx_scale(s_in * s_w / s_out);
        let ql = QuantizedLayer {
            in_dim: folded.in_dim,
            out_dim: folded.out_dim,
            w_int,
            b_acc,
            qp_in: act_qps[l],
            qp_w,
            qp_requant: QuantParams {
                bitwidth: act_qps[l + 1].bitwidth,
                m,
                k,
                z: act_qps[l + 1].z,
            },
            qp_out: act_qps[l + 1],
        };
        ql.check_accumulator_headroom().map_err(ModelError::from)?;
        layers.push(ql);
    }
    Ok(QuantizedModel { layers })
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

/// Fraction of samples whose streaming prediction matches the label.
pub fn accuracy(
    dataset: &[(EventStream, u32)],
    model: &Model,
    quant: Option<&QuantizedModel>,
    mode: Mode,
) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = dataset
        .par_iter()
        .map(|(s, label)| {
            forward_stream(s, model, quant, mode).map(|(c, _, _)| usize::from(c == *label as usize))
        })
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Fraction of samples where the quantized pipeline's argmax equals the
/// float pipeline's.
pub fn agreement(
    dataset: &[(EventStream, u32)],
    model: &Model,
    quant: &QuantizedModel,
) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Ok(1.0);
    }
    let same: usize = dataset
        .par_iter()
        .map(|(s, _)| {
            let (cf, _, _) = forward_stream(s, model, None, Mode::Float)?;
            let (cq, _, _) = forward_stream(s, model, Some(quant), Mode::Quantized)?;
            Ok::<usize, ModelError>(usize::from(cf == cq))
        })
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    Ok(same as f64 / dataset.len() as f64)
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Loss of one sample as a pure function of the flat parameter vector.
fn loss_at(model: &Model, params: &[f64], g: &SampleGraph) -> f64 {
    let mut m = model.clone();
    set_params(&mut m, params);
    let cache = forward_cached(&m, g, None, false, None);
    loss(&cache.logits, g.label).0
}

/// Compare the analytic gradient of every parameter against central finite
/// differences; returns the maximum relative error
/// `|analytic − fd| / (|analytic| + 1e-8)`.
pub fn gradient_check(model: &Model, g: &SampleGraph, h: f64) -> f64 {
    let cache = forward_cached(model, g, None, false, None);
    let (_, analytic) = backward(model, g, &cache, g.label);
    let base = collect_params(model);
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = loss_at(model, &p, g);
        p[i] = base[i] - h;
        let down = loss_at(model, &p, g);
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn grad_config() -> ModelConfig {
        let mut cfg = ModelConfig::tiny();
        cfg.graph = GraphConfig::new(16, 4, 2, 2_000).unwrap();
        cfg.conv_dims = vec![3, 4];
        cfg.bitwidths = vec![16, 8];
        cfg.head_hidden = 4;
        cfg.num_classes = 3;
        cfg
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<(EventStream, u32)> {
        let spec = SynthTaskSpec::band_task(16, 3, 20_000, 1200.0, seed);
        synth_dataset(&spec, n, 0).unwrap()
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        for k in [2usize, 5, 20] {
            let (l, _) = loss(&vec![0.7; k], 0);
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let (l, _) = loss(&[50.0, 0.0, 0.0], 0);
        assert!(l < 1e-9);
        let (l_wrong, _) = loss(&[50.0, 0.0, 0.0], 1);
        assert!(l_wrong > 40.0);
    }

    #[test]
    fn loss_matches_log_sum_exp_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-8.0..8.0)).collect();
            let label = rng.random_range(0..6u32);
            let (l, d) = loss(&logits, label);
            // Naive oracle (safe at this magnitude).
            let s: f64 = logits.iter().map(|v| v.exp()).sum();
            let oracle = s.ln() - logits[label as usize];
            assert!((l - oracle).abs() <= 1e-8);
            // Gradient sums to zero (softmax simplex property).
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_through_flat_vector() {
        let model = Model::init(grad_config(), 3).unwrap();
        let p = collect_params(&model);
        let mut other = Model::init(grad_config(), 99).unwrap();
        set_params(&mut other, &p);
        assert_eq!(model, other);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let dataset = tiny_dataset(1, 40);
        let model = Model::init(grad_config(), 4).unwrap();
        let g = build_sample_graph(&dataset[0].0, dataset[0].1, &model.config.graph).unwrap();
        let worst = gradient_check(&model, &g, 1e-4);
        assert!(worst <= 1e-3, "max relative gradient error {worst}");
    }

    #[test]
    fn gradient_check_covers_folded_models_too() {
        let dataset = tiny_dataset(1, 41);
        let mut model = Model::init(grad_config(), 6).unwrap();
        model.layers = model.layers.iter().map(fold_bn).collect();
        let g = build_sample_graph(&dataset[0].0, dataset[0].1, &model.config.graph).unwrap();
        let worst = gradient_check(&model, &g, 1e-4);
        assert!(worst <= 1e-3, "max relative gradient error {worst}");
    }

    #[test]
    fn losing_candidates_receive_no_gradient() {
        // One event with one neighbor: per output feature, exactly one of
        // {self, neighbor} wins; the loser's feature gradient must be zero.
        let model = Model::init(grad_config(), 8).unwrap();
        let dataset = tiny_dataset(1, 42);
        let g = build_sample_graph(&dataset[0].0, dataset[0].1, &model.config.graph).unwrap();
        let cache = forward_cached(&model, &g, None, false, None);
        // Every recorded winner index must reference an existing candidate.
        for (l, lc) in cache.layers.iter().enumerate() {
            let out_dim = model.layers[l].out_dim;
            for i in 0..g.events.len() {
                for o in 0..out_dim {
                    let w = lc.winners[i * out_dim + o] as usize;
                    assert!(w <= g.nb_idx[i].len());
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let dataset = tiny_dataset(6, 43);
        let model = Model::init(grad_config(), 9).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (trained, history) = train_loop(&dataset, &model, &tc).unwrap();
        assert_eq!(history.len(), 2);
        assert_eq!(collect_params(&trained), collect_params(&model));
    }

    #[test]
    fn same_seed_gives_identical_history_and_weights() {
        let dataset = tiny_dataset(8, 44);
        let model = Model::init(grad_config(), 10).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let (m1, h1) = train_loop(&dataset, &model, &tc).unwrap();
        let (m2, h2) = train_loop(&dataset, &model, &tc).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = Model::init(grad_config(), 1).unwrap();
        assert!(matches!(
            train_loop(&[], &model, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
        assert!(matches!(
            qat_finetune(&[], &model, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut dataset = tiny_dataset(2, 45);
        dataset[0].1 = 7;
        let model = Model::init(grad_config(), 1).unwrap();
        assert!(matches!(
            train_loop(&dataset, &model, &TrainConfig::default()),
            Err(TrainError::BadLabel { label: 7, .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let dataset = tiny_dataset(4, 46);
        let model = Model::init(grad_config(), 11).unwrap();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (trained, history) = train_loop(&dataset, &model, &tc).unwrap();
        assert!(history.is_empty());
        assert_eq!(trained, model);
    }

    #[test]
    fn qat_at_zero_rate_fixes_grid_valued_weights() {
        let dataset = tiny_dataset(4, 47);
        let mut model = Model::init(grad_config(), 12).unwrap();
        // Fold, then project weights onto their own 8-bit grid so the
        // fake-quant view is exactly the identity.
        model.layers = model.layers.iter().map(fold_bn).collect();
        for layer in &mut model.layers {
            let (lo, hi) = min_max(&layer.w);
            let qp = calibrate(lo, hi, 8).unwrap();
            for w in &mut layer.w {
                *w = fake_quant(*w, &qp);
            }
        }
        let tc = TrainConfig {
            qat_epochs: 1,
            learning_rate: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let (tuned, quant, history) = qat_finetune(&dataset, &model, &tc).unwrap();
        assert_eq!(history.len(), 1);
        assert_eq!(collect_params(&tuned), collect_params(&model));
        assert_eq!(quant.layers.len(), model.layers.len());
    }

    #[test]
    fn quantized_build_runs_through_the_integer_engine() {
        let dataset = tiny_dataset(6, 48);
        let model = Model::init(grad_config(), 13).unwrap();
        let tc = TrainConfig {
            qat_epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (folded, quant, _) = qat_finetune(&dataset, &model, &tc).unwrap();
        for (stream, _) in &dataset {
            let (class, logits, _) =
                forward_stream(stream, &folded, Some(&quant), Mode::Quantized).unwrap();
            assert!(class < 3);
            assert_eq!(logits.len(), 3);
        }
        // Determinism of the full QAT path.
        let (folded2, quant2, _) = qat_finetune(&dataset, &model, &tc).unwrap();
        assert_eq!(folded, folded2);
        assert_eq!(quant, quant2);
    }

    #[test]
    fn plateau_schedule_halves_rate_after_patience() {
        let tc = TrainConfig {
            plateau_patience: 2,
            plateau_factor: 0.5,
            plateau_threshold: 1e-4,
            ..TrainConfig::default()
        };
        let mut p = Plateau::new(&tc);
        let mut lr = 1.0;
        lr = p.observe(1.0, lr); // establishes best
        assert_eq!(lr, 1.0);
        lr = p.observe(1.0, lr); // bad 1
        lr = p.observe(1.0, lr); // bad 2
        assert_eq!(lr, 1.0);
        lr = p.observe(1.0, lr); // bad 3 > patience → halve
        assert_eq!(lr, 0.5);
        lr = p.observe(0.5, lr); // improvement resets
        assert_eq!(lr, 0.5);
    }
}
