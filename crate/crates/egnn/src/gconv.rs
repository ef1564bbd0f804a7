//! Streaming point-convolution layers.
//!
//! Each layer applies one shared linear map (optionally followed by batch
//! norm) to `[neighbor feature ‖ normalized relative position]` for the event
//! itself (self-loop, displacement (0,0)) and for each neighbor, takes the
//! elementwise maximum over those candidates, and applies ReLU. The only
//! per-layer state is a feature memory holding the layer-input feature of the
//! most recent event per channel — the exact analogue of the graph
//! generator's context memory — which makes event-by-event streaming
//! equivalent to evaluating the whole graph at once. The module also carries
//! the analytical cycle model of one convolution stage.

use thiserror::Error;

use crate::events::Event;
use crate::graphgen::{self, EdgeList, GraphConfig};

/// One linear layer `W·x + b` over `x = [feature ‖ position]`, with optional
/// batch-norm parameters (normalization uses the running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim × (in_dim + 2)`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub bn: Option<BnParams>,
}

/// Per-output-feature batch-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl LayerParams {
    /// Input width of the linear map: feature dims plus the two position dims.
    pub fn ext_in(&self) -> usize {
        self.in_dim + 2
    }

    pub fn w_row(&self, o: usize) -> &[f64] {
        &self.w[o * self.ext_in()..(o + 1) * self.ext_in()]
    }

    pub fn validate(&self) -> Result<(), GconvError> {
        let ok = self.w.len() == self.out_dim * self.ext_in()
            && self.b.len() == self.out_dim
            && self.bn.as_ref().is_none_or(|bn| {
                bn.gamma.len() == self.out_dim
                    && bn.beta.len() == self.out_dim
                    && bn.running_mean.len() == self.out_dim
                    && bn.running_var.len() == self.out_dim
                    && bn.running_var.iter().all(|&v| v + bn.epsilon > 0.0)
            });
        if ok {
            Ok(())
        } else {
            Err(GconvError::BadShape {
                in_dim: self.in_dim,
                out_dim: self.out_dim,
            })
        }
    }
}

/// Per-channel store of the layer-input feature (and its timestamp, used to
/// assert lockstep with the context memory) of the most recent event.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMemory<T> {
    dim: usize,
    slots: Vec<Option<(u64, Vec<T>)>>,
}

impl<T: Clone> FeatureMemory<T> {
    pub fn new(num_channels: u32, dim: usize) -> Self {
        Self {
            dim,
            slots: vec![None; num_channels as usize],
        }
    }

    pub fn clear(&mut self) {
        self.slots.fill(None);
    }

    pub fn get(&self, ch: u32) -> Option<&(u64, Vec<T>)> {
        self.slots[ch as usize].as_ref()
    }

    pub fn store(&mut self, ch: u32, t: u64, feature: Vec<T>) {
        debug_assert_eq!(feature.len(), self.dim);
        self.slots[ch as usize] = Some((t, feature));
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// The per-layer unit of streaming work: an event, its edge list, and the
/// feature vector this layer consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMessage {
    pub event: Event,
    pub edges: EdgeList,
    pub feature: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GconvError {
    #[error("displacement ({dt}, {dch}) outside radii (r_t={r_t}, r_ch={r_ch})")]
    OutOfRadius {
        dt: f64,
        dch: f64,
        r_t: u64,
        r_ch: u32,
    },
    #[error("edge to channel {ch} whose feature memory is empty (pipeline desynchronized)")]
    MissingNeighborFeature { ch: u32 },
    #[error("inconsistent layer shapes (in_dim={in_dim}, out_dim={out_dim})")]
    BadShape { in_dim: usize, out_dim: usize },
}

/// Positional normalization: map a displacement `(dt, dch)` with
/// `−r_t ≤ dt ≤ 0` and `|dch| ≤ r_ch` into `[0,1]²` as
/// `(−dt/r_t, (dch + r_ch)/(2·r_ch))`.
///
/// The zero displacement maps to `(0, 0.5)`. In the degenerate `r_ch = 0`
/// config the channel component is fixed at its midpoint 0.5.
pub fn pn_normalize(d: (f64, f64), cfg: &GraphConfig) -> Result<[f64; 2], GconvError> {
    let (dt, dch) = d;
    let r_t = cfg.r_t as f64;
    let r_ch = cfg.r_ch as f64;
    // Negated comparisons so NaN displacements fail validation too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(dt <= 0.0 && -dt <= r_t) || !(dch.abs() <= r_ch) {
        return Err(GconvError::OutOfRadius {
            dt,
            dch,
            r_t: cfg.r_t,
            r_ch: cfg.r_ch,
        });
    }
    let time = (0.0 - dt) / r_t;
    let channel = if cfg.r_ch == 0 {
        0.5
    } else {
        (dch + r_ch) / (2.0 * r_ch)
    };
    Ok([time, channel])
}

/// Inverse of [`pn_normalize`], rounded to the integer displacement lattice.
/// Exact for integer `dt` and lattice-valued `dch`.
pub fn pn_denormalize(v: [f64; 2], cfg: &GraphConfig) -> (i64, i64) {
    let dt = -(v[0] * cfg.r_t as f64).round() as i64;
    let dch = (v[1] * 2.0 * cfg.r_ch as f64 - cfg.r_ch as f64).round() as i64;
    (dt, dch)
}

/// Fold batch norm into the linear layer:
/// `W' = diag(γ/√(σ²+ε))·W`, `b' = γ·(b − μ)/√(σ²+ε) + β`.
/// A layer without batch norm is returned unchanged.
pub fn fold_bn(params: &LayerParams) -> LayerParams {
    let Some(bn) = &params.bn else {
        return params.clone();
    };
    let ext = params.ext_in();
    let mut w = params.w.clone();
    let mut b = vec![0.0; params.out_dim];
    for o in 0..params.out_dim {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.epsilon).sqrt();
        for j in 0..ext {
            w[o * ext + j] *= scale;
        }
        b[o] = (params.b[o] - bn.running_mean[o]) * scale + bn.beta[o];
    }
    LayerParams {
        in_dim: params.in_dim,
        out_dim: params.out_dim,
        w,
        b,
        bn: None,
    }
}

/// Evaluate `W·[feature ‖ position] + b` (and batch norm, when present) for
/// one candidate, writing into `out`.
fn candidate_response(params: &LayerParams, feature: &[f64], position: [f64; 2], out: &mut [f64]) {
    debug_assert_eq!(feature.len(), params.in_dim);
    for o in 0..params.out_dim {
        let row = params.w_row(o);
        let mut acc = params.b[o];
        for (j, &x) in feature.iter().enumerate() {
            acc += row[j] * x;
        }
        acc += row[params.in_dim] * position[0];
        acc += row[params.in_dim + 1] * position[1];
        out[o] = acc;
    }
    if let Some(bn) = &params.bn {
        for o in 0..params.out_dim {
            let sd = (bn.running_var[o] + bn.epsilon).sqrt();
            out[o] = bn.gamma[o] * (out[o] - bn.running_mean[o]) / sd + bn.beta[o];
        }
    }
}

/// Max-aggregate the candidate responses of one event, then apply ReLU.
/// Candidate order: self-loop first, then edges in edge-list order. `get_feat`
/// resolves a neighbor `(ch_j, t_j)` to its layer-input feature.
fn aggregate_candidates<'f>(
    params: &LayerParams,
    cfg: &GraphConfig,
    event: Event,
    edges: &EdgeList,
    self_feature: &[f64],
    mut get_feat: impl FnMut(u32, u64) -> Result<&'f [f64], GconvError>,
) -> Result<Vec<f64>, GconvError> {
    let self_pos = pn_normalize((0.0, 0.0), cfg).expect("zero displacement is always in range");
    let mut best = vec![0.0; params.out_dim];
    candidate_response(params, self_feature, self_pos, &mut best);

    let mut scratch = vec![0.0; params.out_dim];
    for &(ch_j, t_j) in &edges.neighbors {
        let feat = get_feat(ch_j, t_j)?;
        let dt = -((event.t - t_j) as f64);
        let dch = (ch_j as i64 - event.ch as i64) as f64;
        let pos = pn_normalize((dt, dch), cfg)?;
        candidate_response(params, feat, pos, &mut scratch);
        for o in 0..params.out_dim {
            if scratch[o] > best[o] {
                best[o] = scratch[o];
            }
        }
    }
    for y in &mut best {
        *y = y.max(0.0);
    }
    Ok(best)
}

/// Streaming forward of one event through one layer. Neighbor features come
/// from the layer's feature memory; afterwards the event's own input feature
/// is stored there (read-before-write, exactly like the context memory).
pub fn conv_forward_event(
    msg: &LayerMessage,
    mem: &mut FeatureMemory<f64>,
    params: &LayerParams,
    cfg: &GraphConfig,
) -> Result<Vec<f64>, GconvError> {
    debug_assert_eq!(msg.feature.len(), params.in_dim);
    debug_assert_eq!(mem.dim(), params.in_dim);
    let out = aggregate_candidates(
        params,
        cfg,
        msg.event,
        &msg.edges,
        &msg.feature,
        |ch_j, t_j| {
            let (stored_t, feat) = mem
                .get(ch_j)
                .ok_or(GconvError::MissingNeighborFeature { ch: ch_j })?;
            debug_assert_eq!(
                *stored_t, t_j,
                "feature memory out of lockstep with context memory"
            );
            let _ = t_j;
            Ok(feat.as_slice())
        },
    )?;
    mem.store(msg.event.ch, msg.event.t, msg.feature.clone());
    Ok(out)
}

/// Batch reference: evaluate the whole stack layer by layer over the full
/// stream, taking each neighbor's feature from the previous layer's output of
/// the event that was most recent at that channel when the edge was created.
/// Returns the final layer's per-event features.
pub fn conv_forward_batch(
    events: &[Event],
    edges: &[EdgeList],
    layers: &[LayerParams],
    cfg: &GraphConfig,
) -> Result<Vec<Vec<f64>>, GconvError> {
    assert_eq!(events.len(), edges.len());
    let neighbor_idx = resolve_neighbor_indices(events, edges, cfg)?;

    // Layer-0 inputs are the graph generator's neighbor-average features.
    let mut feats: Vec<Vec<f64>> = events
        .iter()
        .zip(edges)
        .map(|(&e, el)| graphgen::neighbor_average(el, e, cfg).to_vec())
        .collect();

    for params in layers {
        let mut next = Vec::with_capacity(events.len());
        for i in 0..events.len() {
            // Edges visit in edge-list order, which matches neighbor_idx.
            let mut k = 0usize;
            let res =
                aggregate_candidates(params, cfg, events[i], &edges[i], &feats[i], |_ch, _t| {
                    let j = neighbor_idx[i][k];
                    k += 1;
                    Ok(feats[j].as_slice())
                })?;
            next.push(res);
        }
        feats = next;
    }
    Ok(feats)
}

/// Resolve each edge `(ch_j, t_j)` of each event to the index of the stream
/// event it refers to (the most recent event at `ch_j` before the current
/// one). Errors if an edge points at a channel with no prior event.
pub fn resolve_neighbor_indices(
    events: &[Event],
    edges: &[EdgeList],
    cfg: &GraphConfig,
) -> Result<Vec<Vec<usize>>, GconvError> {
    let mut last_idx: Vec<Option<usize>> = vec![None; cfg.num_channels as usize];
    let mut out = Vec::with_capacity(events.len());
    for (i, (e, el)) in events.iter().zip(edges).enumerate() {
        let mut idx = Vec::with_capacity(el.len());
        for &(ch_j, t_j) in &el.neighbors {
            let j =
                last_idx[ch_j as usize].ok_or(GconvError::MissingNeighborFeature { ch: ch_j })?;
            debug_assert_eq!(events[j].t, t_j, "edge timestamp mismatch");
            let _ = t_j;
            idx.push(j);
        }
        out.push(idx);
        last_idx[e.ch as usize] = Some(i);
    }
    Ok(out)
}

/// Cycles of one convolution stage per event: candidate responses are
/// computed pairwise (`ceil((max_edge+1)/2)` passes) and each pass produces
/// `parallel_mults` output features per cycle.
pub fn conv_cycles(max_edge: u64, out_dim: u64, parallel_mults: u64) -> u64 {
    debug_assert!(parallel_mults >= 1 && parallel_mults.is_power_of_two());
    (max_edge + 1).div_ceil(2) * out_dim.div_ceil(parallel_mults)
}

/// Per-stage cycle counts: graph generation first, then one entry per layer.
pub fn stage_cycles(
    cfg: &GraphConfig,
    conv_dims: &[usize],
    parallel_mults: u64,
    n_div: u64,
) -> Vec<u64> {
    let mut stages = vec![graphgen::graphgen_cycles(cfg, n_div)];
    let max_edge = cfg.max_edges() as u64;
    stages.extend(
        conv_dims
            .iter()
            .map(|&d| conv_cycles(max_edge, d as u64, parallel_mults)),
    );
    stages
}

/// Analytical `(per-event latency µs, throughput events/s)` of the pipeline:
/// latency sums all stage cycles; throughput is limited by the slowest stage.
pub fn pipeline_latency(
    cfg: &GraphConfig,
    conv_dims: &[usize],
    parallel_mults: u64,
    clock_hz: f64,
    n_div: u64,
) -> (f64, f64) {
    let stages = stage_cycles(cfg, conv_dims, parallel_mults, n_div);
    let total: u64 = stages.iter().sum();
    let bottleneck = *stages.iter().max().expect("at least the graphgen stage");
    let latency_us = total as f64 / clock_hz * 1e6;
    let throughput_eps = clock_hz / bottleneck as f64;
    (latency_us, throughput_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(r_ch: u32, s: u32, r_t: u64) -> GraphConfig {
        GraphConfig::new(700, r_ch, s, r_t).unwrap()
    }

    fn ev(t: u64, ch: u32) -> Event {
        Event { t, ch }
    }

    #[test]
    fn pn_maps_reference_points() {
        let c = cfg(100, 10, 20_000);
        assert_eq!(pn_normalize((0.0, 0.0), &c).unwrap(), [0.0, 0.5]);
        assert_eq!(pn_normalize((-20_000.0, -100.0), &c).unwrap(), [1.0, 0.0]);
        assert_eq!(pn_normalize((0.0, 100.0), &c).unwrap(), [0.0, 1.0]);
    }

    #[test]
    fn pn_handles_zero_channel_radius() {
        let c = cfg(0, 1, 100);
        assert_eq!(pn_normalize((-50.0, 0.0), &c).unwrap(), [0.5, 0.5]);
    }

    #[test]
    fn pn_rejects_out_of_radius_displacements() {
        let c = cfg(100, 10, 20_000);
        assert!(matches!(
            pn_normalize((1.0, 0.0), &c),
            Err(GconvError::OutOfRadius { .. })
        ));
        assert!(matches!(
            pn_normalize((-20_001.0, 0.0), &c),
            Err(GconvError::OutOfRadius { .. })
        ));
        assert!(matches!(
            pn_normalize((0.0, 101.0), &c),
            Err(GconvError::OutOfRadius { .. })
        ));
    }

    proptest! {
        #[test]
        fn pn_stays_in_unit_square_and_inverts(
            r_t in 1u64..100_000,
            m in 0u32..40,
            s in 1u32..8,
            dt_frac in 0.0f64..=1.0,
            k in -40i64..=40,
        ) {
            let r_ch = m * s;
            let c = GraphConfig::new(700, r_ch, s, r_t).unwrap();
            let dt = -((dt_frac * r_t as f64).round());
            let dch = (k.rem_euclid(2 * m as i64 + 1) - m as i64) * s as i64;
            let v = pn_normalize((dt, dch as f64), &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&v[0]));
            prop_assert!((0.0..=1.0).contains(&v[1]));
            let (dt_back, dch_back) = pn_denormalize(v, &c);
            prop_assert_eq!(dt_back as f64, dt);
            if r_ch > 0 {
                prop_assert_eq!(dch_back, dch);
            }
        }
    }

    fn toy_layer(w: Vec<f64>, b: Vec<f64>, in_dim: usize, out_dim: usize) -> LayerParams {
        let p = LayerParams {
            in_dim,
            out_dim,
            w,
            b,
            bn: None,
        };
        p.validate().unwrap();
        p
    }

    fn random_layer(
        rng: &mut impl rand::Rng,
        in_dim: usize,
        out_dim: usize,
        bn: bool,
    ) -> LayerParams {
        let ext = in_dim + 2;
        let w = (0..out_dim * ext)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let b = (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bn = bn.then(|| BnParams {
            gamma: (0..out_dim).map(|_| rng.random_range(0.5..1.5)).collect(),
            beta: (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            running_mean: (0..out_dim).map(|_| rng.random_range(-0.5..0.5)).collect(),
            running_var: (0..out_dim).map(|_| rng.random_range(0.1..2.0)).collect(),
            epsilon: 1e-5,
        });
        LayerParams {
            in_dim,
            out_dim,
            w,
            b,
            bn,
        }
    }

    #[test]
    fn identity_bn_folds_to_same_layer() {
        let mut p = toy_layer(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.5, -0.5], 1, 2);
        p.bn = Some(BnParams {
            gamma: vec![1.0, 1.0],
            beta: vec![0.0, 0.0],
            running_mean: vec![0.0, 0.0],
            running_var: vec![1.0, 1.0],
            epsilon: 0.0,
        });
        let folded = fold_bn(&p);
        assert_eq!(folded.w, p.w);
        assert_eq!(folded.b, p.b);
        assert!(folded.bn.is_none());
    }

    #[test]
    fn zero_gamma_folds_to_constant_layer() {
        let mut p = toy_layer(vec![1.0, 2.0, 3.0], vec![0.5], 1, 1);
        p.bn = Some(BnParams {
            gamma: vec![0.0],
            beta: vec![7.0],
            running_mean: vec![1.0],
            running_var: vec![1.0],
            epsilon: 0.0,
        });
        let folded = fold_bn(&p);
        assert_eq!(folded.w, vec![0.0, 0.0, 0.0]);
        assert_eq!(folded.b, vec![7.0]);
    }

    #[test]
    fn folding_preserves_outputs_numerically() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p = random_layer(&mut rng, 3, 4, true);
            let folded = fold_bn(&p);
            for _ in 0..100 {
                let feat: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let pos = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                let mut with_bn = vec![0.0; 4];
                let mut with_fold = vec![0.0; 4];
                candidate_response(&p, &feat, pos, &mut with_bn);
                candidate_response(&folded, &feat, pos, &mut with_fold);
                for (a, b) in with_bn.iter().zip(&with_fold) {
                    let rel = (a - b).abs() / a.abs().max(1.0);
                    assert!(rel <= 1e-6, "folded {b} vs unfolded {a}");
                }
            }
        }
    }

    #[test]
    fn no_edges_reduces_to_self_loop_response() {
        let c = cfg(2, 1, 5);
        let p = toy_layer(vec![1.0, 0.5, -0.25, 2.0, 0.0, 1.0], vec![0.1, -0.2], 1, 2);
        let msg = LayerMessage {
            event: ev(10, 3),
            edges: EdgeList::default(),
            feature: vec![2.0],
        };
        let mut mem = FeatureMemory::new(700, 1);
        let out = conv_forward_event(&msg, &mut mem, &p, &c).unwrap();
        // Self-loop input [2.0 ‖ 0, 0.5].
        let expect0 = (1.0 * 2.0 + 0.5 * 0.0 + (-0.25) * 0.5 + 0.1f64).max(0.0);
        let expect1 = (2.0 * 2.0 + 0.0 * 0.0 + 1.0 * 0.5 + (-0.2f64)).max(0.0);
        assert_eq!(out, vec![expect0, expect1]);
        // The event's input feature was stored for later events.
        assert_eq!(mem.get(3), Some(&(10, vec![2.0])));
    }

    #[test]
    fn max_aggregation_picks_strongest_candidate() {
        // W = [[1, 0, 0]]: the response is just the 1-dim input feature.
        let c = cfg(2, 1, 5);
        let p = toy_layer(vec![1.0, 0.0, 0.0], vec![0.0], 1, 1);
        let mut mem = FeatureMemory::new(700, 1);
        mem.store(4, 9, vec![5.0]);
        let msg = LayerMessage {
            event: ev(10, 3),
            edges: EdgeList {
                neighbors: vec![(4, 9)],
            },
            feature: vec![2.0],
        };
        let out = conv_forward_event(&msg, &mut mem, &p, &c).unwrap();
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn missing_neighbor_feature_is_an_error() {
        let c = cfg(2, 1, 5);
        let p = toy_layer(vec![1.0, 0.0, 0.0], vec![0.0], 1, 1);
        let mut mem = FeatureMemory::new(700, 1);
        let msg = LayerMessage {
            event: ev(10, 3),
            edges: EdgeList {
                neighbors: vec![(4, 9)],
            },
            feature: vec![2.0],
        };
        assert_eq!(
            conv_forward_event(&msg, &mut mem, &p, &c).unwrap_err(),
            GconvError::MissingNeighborFeature { ch: 4 }
        );
    }

    #[test]
    fn adding_a_neighbor_never_decreases_outputs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let c = cfg(4, 1, 100);
        for _ in 0..50 {
            let p = random_layer(&mut rng, 3, 5, false);
            let feat_i: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let feat_j: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut mem = FeatureMemory::new(700, 3);
            mem.store(6, 95, feat_j);
            let without = conv_forward_event(
                &LayerMessage {
                    event: ev(100, 5),
                    edges: EdgeList::default(),
                    feature: feat_i.clone(),
                },
                &mut mem.clone(),
                &p,
                &c,
            )
            .unwrap();
            let with = conv_forward_event(
                &LayerMessage {
                    event: ev(100, 5),
                    edges: EdgeList {
                        neighbors: vec![(6, 95)],
                    },
                    feature: feat_i,
                },
                &mut mem,
                &p,
                &c,
            )
            .unwrap();
            for (a, b) in with.iter().zip(&without) {
                assert!(a >= b, "adding a neighbor decreased {b} to {a}");
            }
        }
    }

    #[test]
    fn streaming_chain_matches_batch_reference() {
        use crate::graphgen::{insert_and_search, ContextMemory};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let c = GraphConfig::new(16, 4, 2, 50).unwrap();
        let layers = vec![
            random_layer(&mut rng, 2, 6, true),
            random_layer(&mut rng, 6, 4, false),
        ];

        // Random sorted stream.
        let mut t = 0u64;
        let events: Vec<Event> = (0..120)
            .map(|_| {
                t += rng.random_range(0..6);
                ev(t, rng.random_range(0..16))
            })
            .collect();

        // Streaming path.
        let mut ctx = ContextMemory::new(16);
        let mut mems: Vec<FeatureMemory<f64>> = layers
            .iter()
            .map(|l| FeatureMemory::new(16, l.in_dim))
            .collect();
        let mut streaming = Vec::new();
        let mut edge_lists = Vec::new();
        for &e in &events {
            let msg = insert_and_search(e, &mut ctx, &c).unwrap();
            edge_lists.push(msg.edges.clone());
            let mut feat = msg.feature.to_vec();
            for (l, params) in layers.iter().enumerate() {
                let lm = LayerMessage {
                    event: e,
                    edges: msg.edges.clone(),
                    feature: feat,
                };
                feat = conv_forward_event(&lm, &mut mems[l], params, &c).unwrap();
            }
            streaming.push(feat);
        }

        let batch = conv_forward_batch(&events, &edge_lists, &layers, &c).unwrap();
        assert_eq!(batch.len(), streaming.len());
        for (s, b) in streaming.iter().zip(&batch) {
            for (x, y) in s.iter().zip(b) {
                assert!((x - y).abs() <= 1e-5, "streaming {x} vs batch {y}");
            }
        }
    }

    #[test]
    fn zero_weight_batch_stack_yields_relu_bias() {
        let c = cfg(2, 1, 5);
        let layers = vec![toy_layer(vec![0.0; 8], vec![-1.0, 3.0], 2, 2)];
        let events = vec![ev(0, 3), ev(1, 4)];
        let edges = vec![EdgeList::default(), EdgeList::default()];
        let out = conv_forward_batch(&events, &edges, &layers, &c).unwrap();
        assert_eq!(out, vec![vec![0.0, 3.0], vec![0.0, 3.0]]);
    }

    #[test]
    fn conv_cycle_model_values() {
        assert_eq!(conv_cycles(21, 64, 2), 352);
        assert_eq!(conv_cycles(21, 64, 1), 704);
        assert_eq!(conv_cycles(21, 8, 2), 44);
    }

    #[test]
    fn latency_model_on_base_shape() {
        let c = cfg(100, 10, 20_000);
        let (latency_us, throughput) = pipeline_latency(&c, &[64, 64, 64, 64], 2, 200e6, 4);
        assert!((latency_us - (15.0 + 4.0 * 352.0) / 200e6 * 1e6).abs() < 1e-9);
        assert!((throughput - 200e6 / 352.0).abs() < 1e-6);
    }

    #[test]
    fn trivial_single_stage_pipeline_runs_at_clock() {
        // MAX_EDGE 1 (r_ch = 0), out_dim 2, P = 2, no divider: every stage is
        // one cycle, so throughput equals the clock.
        let c = cfg(0, 1, 20_000);
        let (_, throughput) = pipeline_latency(&c, &[2], 2, 123e6, 0);
        assert_eq!(throughput, 123e6);
    }
}
