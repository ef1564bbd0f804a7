//! Network assembly: configuration presets, weight initialization and
//! persistence, the stateful streaming engine (float and quantized), the
//! batch floating-point reference, and analytical FLOP/cycle cost reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::events::{mix_seed, Event, EventStream};
use crate::gconv::{
    conv_forward_batch, conv_forward_event, pipeline_latency, stage_cycles, BnParams,
    FeatureMemory, GconvError, LayerMessage, LayerParams,
};
use crate::graphgen::{
    brute_force_neighbors, insert_and_search, ContextMemory, EdgeList, GraphConfig, GraphError,
};
use crate::head::{mlp_forward, predict, HeadError, HeadParams, IntPoolState, PoolMode, PoolState};
use crate::quant::{pn_self_quantized, quantize, QuantError, QuantizedLayer};

/// Inference arithmetic mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Float,
    Quantized,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Float => "float",
            Mode::Quantized => "quantized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "float" => Some(Mode::Float),
            "quantized" => Some(Mode::Quantized),
            _ => None,
        }
    }
}

/// Full network configuration: graph construction parameters, conv stack
/// output dims, per-layer input activation bitwidths, head shape, and the
/// hardware cost-model knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub graph: GraphConfig,
    /// Output feature dimension of each conv layer. Layer 0's input is the
    /// 2-dim averaged positional feature; layer l>0 takes layer l−1's output.
    pub conv_dims: Vec<usize>,
    /// Quantized input activation bitwidth of each conv layer (weights are
    /// always 8-bit).
    pub bitwidths: Vec<u32>,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub pool_mode: PoolMode,
    /// Absolute-input normalization constant (timestamps are conceptually
    /// scaled by 1/t_max_us and channels by 1/num_channels before
    /// processing). Only *differences* between events feed the positional
    /// normalization, so this constant is inert for every computed value;
    /// it is carried in the config and model file for interface parity.
    pub t_max_us: u64,
    /// Hardware cost model: number of parallel multipliers per conv stage.
    pub parallel_mults: u64,
    /// Hardware cost model: pipeline clock in Hz.
    pub clock_hz: u64,
    /// Hardware cost model: cycles of the divider at the end of graph
    /// generation.
    pub n_div: u64,
}

impl ModelConfig {
    /// The full-scale reference configuration (700-channel audio streams,
    /// four 64-wide conv layers).
    pub fn base() -> Self {
        Self {
            graph: GraphConfig::new(700, 100, 10, 100_000).expect("static config is valid"),
            conv_dims: vec![64, 64, 64, 64],
            bitwidths: vec![16, 8, 8, 8],
            head_hidden: 128,
            num_classes: 20,
            pool_mode: PoolMode::Average,
            t_max_us: 1_000_000,
            parallel_mults: 2,
            clock_hz: 200_000_000,
            n_div: 4,
        }
    }

    /// Desk-scale preset used by the synthetic-task trainer: 64 channels,
    /// conv dims (8, 16, 32, 64), 2 classes.
    pub fn tiny() -> Self {
        Self {
            graph: GraphConfig::new(64, 16, 4, 25_000).expect("static config is valid"),
            conv_dims: vec![8, 16, 32, 64],
            bitwidths: vec![16, 8, 8, 8],
            head_hidden: 32,
            num_classes: 2,
            pool_mode: PoolMode::Average,
            t_max_us: 1_000_000,
            parallel_mults: 2,
            clock_hz: 200_000_000,
            n_div: 4,
        }
    }

    /// Same config with a different conv stack (bitwidths keep their first
    /// value for layer 0 and 8 elsewhere).
    pub fn with_conv_dims(mut self, dims: &[usize]) -> Self {
        let first = self.bitwidths.first().copied().unwrap_or(16);
        self.bitwidths = std::iter::once(first)
            .chain(std::iter::repeat(8))
            .take(dims.len())
            .collect();
        self.conv_dims = dims.to_vec();
        self
    }

    /// Input feature dimension of conv layer `l` (excluding the 2 positional
    /// dims appended per candidate).
    pub fn in_dim(&self, l: usize) -> usize {
        if l == 0 {
            2
        } else {
            self.conv_dims[l - 1]
        }
    }

    pub fn num_layers(&self) -> usize {
        self.conv_dims.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.graph
            .validate()
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        if self.conv_dims.is_empty() || self.conv_dims.contains(&0) {
            return Err(ModelError::ShapeMismatch(
                "conv_dims must be non-empty and positive".into(),
            ));
        }
        if self.bitwidths.len() != self.conv_dims.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} bitwidths for {} conv layers",
                self.bitwidths.len(),
                self.conv_dims.len()
            )));
        }
        if self.bitwidths.iter().any(|&b| !(2..=16).contains(&b)) {
            return Err(ModelError::ShapeMismatch(
                "activation bitwidths must be in 2..=16".into(),
            ));
        }
        if self.head_hidden == 0 || self.num_classes == 0 {
            return Err(ModelError::ShapeMismatch(
                "head dims must be positive".into(),
            ));
        }
        if self.parallel_mults == 0 || !self.parallel_mults.is_power_of_two() {
            return Err(ModelError::ShapeMismatch(
                "parallel_mults must be a positive power of two".into(),
            ));
        }
        if self.clock_hz == 0 || self.t_max_us == 0 {
            return Err(ModelError::ShapeMismatch(
                "clock_hz and t_max_us must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Float-precision model: conv stack plus MLP head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
}

impl Model {
    /// Deterministic random initialization (uniform Kaiming-style bounds,
    /// zero biases, identity batch norm).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6D6F_64656C));
        let mut layers = Vec::with_capacity(config.num_layers());
        for l in 0..config.num_layers() {
            let in_dim = config.in_dim(l);
            let out_dim = config.conv_dims[l];
            let ext = in_dim + 2;
            let bound = (6.0 / ext as f64).sqrt();
            layers.push(LayerParams {
                in_dim,
                out_dim,
                w: (0..out_dim * ext)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
                b: vec![0.0; out_dim],
                bn: Some(BnParams {
                    gamma: vec![1.0; out_dim],
                    beta: vec![0.0; out_dim],
                    running_mean: vec![0.0; out_dim],
                    running_var: vec![1.0; out_dim],
                    epsilon: 1e-5,
                }),
            });
        }
        let in_dim = *config.conv_dims.last().expect("validated non-empty");
        let b1 = (6.0 / in_dim as f64).sqrt();
        let b2 = (6.0 / config.head_hidden as f64).sqrt();
        let head = HeadParams {
            in_dim,
            hidden: config.head_hidden,
            num_classes: config.num_classes,
            fc1_w: (0..config.head_hidden * in_dim)
                .map(|_| rng.random_range(-b1..b1))
                .collect(),
            fc1_b: vec![0.0; config.head_hidden],
            fc2_w: (0..config.num_classes * config.head_hidden)
                .map(|_| rng.random_range(-b2..b2))
                .collect(),
            fc2_b: vec![0.0; config.num_classes],
        };
        Ok(Self {
            config,
            layers,
            head,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} layers for {} configured dims",
                self.layers.len(),
                self.config.num_layers()
            )));
        }
        for (l, params) in self.layers.iter().enumerate() {
            if params.in_dim != self.config.in_dim(l) || params.out_dim != self.config.conv_dims[l]
            {
                return Err(ModelError::ShapeMismatch(format!(
                    "conv layer {l} dims ({}, {}) disagree with config",
                    params.in_dim, params.out_dim
                )));
            }
            params
                .validate()
                .map_err(|e| ModelError::ShapeMismatch(format!("conv layer {l}: {e}")))?;
        }
        if self.head.in_dim != *self.config.conv_dims.last().expect("non-empty")
            || self.head.hidden != self.config.head_hidden
            || self.head.num_classes != self.config.num_classes
        {
            return Err(ModelError::ShapeMismatch(
                "head dims disagree with config".into(),
            ));
        }
        self.head.validate().map_err(ModelError::ShapeMismatch)?;
        Ok(())
    }
}

/// Integer companion of a [`Model`]: one folded quantized layer per conv
/// layer. The float head is shared with the float model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.layers.len() != config.num_layers() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} quantized layers for {} configured dims",
                self.layers.len(),
                config.num_layers()
            )));
        }
        for (l, ql) in self.layers.iter().enumerate() {
            if ql.in_dim != config.in_dim(l)
                || ql.out_dim != config.conv_dims[l]
                || ql.w_int.len() != ql.out_dim * ql.ext_in()
                || ql.b_acc.len() != ql.out_dim
            {
                return Err(ModelError::ShapeMismatch(format!(
                    "quantized layer {l} shapes disagree with config"
                )));
            }
            if ql.qp_in.bitwidth != config.bitwidths[l] {
                return Err(ModelError::ShapeMismatch(format!(
                    "quantized layer {l} input bitwidth {} != configured {}",
                    ql.qp_in.bitwidth, config.bitwidths[l]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad magic bytes: not a model file")]
    BadMagic,
    #[error("model file version {found} unsupported (expected {supported})")]
    VersionMismatch { found: u8, supported: u8 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model file is truncated")]
    TruncatedFile,
    #[error("model carries no quantized parameters (train with QAT first)")]
    MissingQuantization,
    #[error("pool mode '{0}' is unsupported in quantized mode (average only)")]
    UnsupportedPoolMode(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gconv(#[from] GconvError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

/// Convention note embedded in every cost report.
pub const FLOPS_CONVENTION: &str =
    "1 MAC = 2 FLOPs; max-aggregation comparisons and ReLU count 1 FLOP each";
/// Per-event-per-layer FLOP formula embedded in every cost report.
pub const FLOPS_FORMULA: &str =
    "per event and layer: (E+1)*(2*(d_in+2)*d_out + d_out) + E*d_out + d_out";

/// Analytical per-stream cost figures: exact FLOP counts from the edge
/// multiset, plus the cycle-model latency/throughput of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub events: u64,
    pub edges: u64,
    pub avg_edges_per_event: f64,
    pub flops_total: u64,
    pub flops_per_event: f64,
    /// One entry per conv layer, same order as the stack.
    pub flops_per_layer: Vec<u64>,
    /// `[graph generation, conv 1, …, conv L]` cycles per event.
    pub stage_cycles: Vec<u64>,
    pub bottleneck_cycles: u64,
    pub throughput_eps: f64,
    pub latency_us: f64,
    pub flops_convention: &'static str,
    pub flops_formula: &'static str,
}

impl CostReport {
    /// Build the report from the stream summary `(events, total edges)`.
    /// FLOPs are linear in the edge counts, so the two totals determine them.
    pub fn from_counts(config: &ModelConfig, events: u64, edges: u64) -> Self {
        // Σ_i (E_i + 1) over all events.
        let candidates = events + edges;
        let mut flops_per_layer = Vec::with_capacity(config.num_layers());
        for l in 0..config.num_layers() {
            let d_in = config.in_dim(l) as u64;
            let d_out = config.conv_dims[l] as u64;
            let linear = candidates * (2 * (d_in + 2) * d_out + d_out);
            let max_cmp = edges * d_out;
            let relu = events * d_out;
            flops_per_layer.push(linear + max_cmp + relu);
        }
        let flops_total: u64 = flops_per_layer.iter().sum();
        let stages = stage_cycles(
            &config.graph,
            &config.conv_dims,
            config.parallel_mults,
            config.n_div,
        );
        let (latency_us, throughput_eps) = pipeline_latency(
            &config.graph,
            &config.conv_dims,
            config.parallel_mults,
            config.clock_hz as f64,
            config.n_div,
        );
        let bottleneck_cycles = *stages.iter().max().expect("at least one stage");
        Self {
            events,
            edges,
            avg_edges_per_event: ratio(edges, events),
            flops_total,
            flops_per_event: ratio(flops_total, events),
            flops_per_layer,
            stage_cycles: stages,
            bottleneck_cycles,
            throughput_eps,
            latency_us,
            flops_convention: FLOPS_CONVENTION,
            flops_formula: FLOPS_FORMULA,
        }
    }

    /// Line-oriented `key=value` rendering.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("events={}\n", self.events));
        s.push_str(&format!("edges={}\n", self.edges));
        s.push_str(&format!(
            "avg_edges_per_event={:.4}\n",
            self.avg_edges_per_event
        ));
        s.push_str(&format!("flops_total={}\n", self.flops_total));
        s.push_str(&format!("flops_per_event={:.1}\n", self.flops_per_event));
        for (l, f) in self.flops_per_layer.iter().enumerate() {
            s.push_str(&format!("flops_conv{}={}\n", l + 1, f));
        }
        s.push_str(&format!("cycles_graphgen={}\n", self.stage_cycles[0]));
        for (l, c) in self.stage_cycles[1..].iter().enumerate() {
            s.push_str(&format!("cycles_conv{}={}\n", l + 1, c));
        }
        s.push_str(&format!("bottleneck_cycles={}\n", self.bottleneck_cycles));
        s.push_str(&format!(
            "throughput_eps={}\n",
            self.throughput_eps.round() as u64
        ));
        s.push_str(&format!("latency_us={:.3}\n", self.latency_us));
        s.push_str(&format!("flops_convention={}\n", self.flops_convention));
        s.push_str(&format!("flops_formula={}\n", self.flops_formula));
        s
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Edge statistics plus the cost model for a stream under a config; no model
/// weights needed (FLOPs depend only on shapes and the edge multiset).
pub fn flops_report(stream: &EventStream, config: &ModelConfig) -> Result<CostReport, ModelError> {
    config.validate()?;
    let mut ctx = ContextMemory::new(config.graph.num_channels);
    let mut edges: u64 = 0;
    for &ev in &stream.events {
        let msg = insert_and_search(ev, &mut ctx, &config.graph)?;
        edges += msg.edges.len() as u64;
    }
    Ok(CostReport::from_counts(
        config,
        stream.events.len() as u64,
        edges,
    ))
}

// ---------------------------------------------------------------------------
// Streaming engine
// ---------------------------------------------------------------------------

/// Quantized streaming forward of one event through one conv layer: builds
/// the integer candidate vectors (self-loop plus neighbors with quantized
/// positional dims), runs the integer max/requantize layer, then stores the
/// event's input feature in the layer's memory (read-before-write).
///
/// `pn_self` is the precomputed quantized self-loop position for this layer.
pub fn conv_forward_event_q(
    event: Event,
    edges: &EdgeList,
    input: &[u16],
    mem: &mut FeatureMemory<u16>,
    ql: &QuantizedLayer,
    cfg: &GraphConfig,
    pn_self: [u16; 2],
) -> Result<Vec<u16>, ModelError> {
    debug_assert_eq!(input.len(), ql.in_dim);
    let mut candidates = Vec::with_capacity(edges.len() + 1);
    let mut self_c = Vec::with_capacity(ql.ext_in());
    self_c.extend_from_slice(input);
    self_c.extend_from_slice(&pn_self);
    candidates.push(self_c);
    for &(ch_j, t_j) in &edges.neighbors {
        let (stored_t, feat) = mem
            .get(ch_j)
            .ok_or(GconvError::MissingNeighborFeature { ch: ch_j })?;
        debug_assert_eq!(
            *stored_t, t_j,
            "feature memory out of lockstep with context memory"
        );
        let dt = -((event.t - t_j) as f64);
        let dch = (ch_j as i64 - event.ch as i64) as f64;
        let pos = crate::gconv::pn_normalize((dt, dch), cfg)?;
        let mut c = Vec::with_capacity(ql.ext_in());
        c.extend_from_slice(feat);
        c.push(quantize(pos[0], &ql.qp_in) as u16);
        c.push(quantize(pos[1], &ql.qp_in) as u16);
        candidates.push(c);
    }
    let out = ql.forward_max(&candidates)?;
    mem.store(event.ch, event.t, input.to_vec());
    Ok(out)
}

/// Stateful event-by-event inference engine. Feed a sample with
/// [`Engine::process_event`] in arrival order and close it with
/// [`Engine::finalize_sample`]; all per-sample state (context memory, feature
/// memories, pool) resets afterwards so samples are independent.
pub struct Engine<'a> {
    pub model: &'a Model,
    quant: Option<&'a QuantizedModel>,
    mode: Mode,
    ctx: ContextMemory,
    float_mems: Vec<FeatureMemory<f64>>,
    int_mems: Vec<FeatureMemory<u16>>,
    pool_f: PoolState,
    pool_q: IntPoolState,
    /// Per layer: quantized self-loop position `(PN dt, PN ch)`.
    pn_self_q: Vec<[u16; 2]>,
    events_seen: u64,
    edges_seen: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        model: &'a Model,
        quant: Option<&'a QuantizedModel>,
        mode: Mode,
    ) -> Result<Self, ModelError> {
        model.validate()?;
        let config = &model.config;
        if mode == Mode::Quantized {
            let q = quant.ok_or(ModelError::MissingQuantization)?;
            q.validate(config)?;
            if config.pool_mode != PoolMode::Average {
                return Err(ModelError::UnsupportedPoolMode(
                    config.pool_mode.as_str().into(),
                ));
            }
        }
        let c = config.graph.num_channels;
        let last_dim = *config.conv_dims.last().expect("validated non-empty");
        let pn_self_q = quant
            .map(|q| {
                q.layers
                    .iter()
                    .map(|ql| pn_self_quantized(&ql.qp_in))
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            model,
            quant,
            mode,
            ctx: ContextMemory::new(c),
            float_mems: (0..config.num_layers())
                .map(|l| FeatureMemory::new(c, config.in_dim(l)))
                .collect(),
            int_mems: (0..config.num_layers())
                .map(|l| FeatureMemory::new(c, config.in_dim(l)))
                .collect(),
            pool_f: PoolState::new(last_dim, config.pool_mode),
            pool_q: IntPoolState::new(last_dim),
            pn_self_q,
            events_seen: 0,
            edges_seen: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Clear all per-sample state (context memory, feature memories, pools,
    /// counters).
    pub fn reset(&mut self) {
        self.ctx.clear();
        for m in &mut self.float_mems {
            m.clear();
        }
        for m in &mut self.int_mems {
            m.clear();
        }
        self.pool_f.reset();
        self.pool_q.reset();
        self.events_seen = 0;
        self.edges_seen = 0;
    }

    /// Graph generation + conv stack + pool update for one event.
    pub fn process_event(&mut self, ev: Event) -> Result<(), ModelError> {
        let cfg = &self.model.config.graph;
        let msg = insert_and_search(ev, &mut self.ctx, cfg)?;
        self.events_seen += 1;
        self.edges_seen += msg.edges.len() as u64;
        match self.mode {
            Mode::Float => {
                let mut lm = LayerMessage {
                    event: msg.event,
                    edges: msg.edges,
                    feature: msg.feature.to_vec(),
                };
                for (l, params) in self.model.layers.iter().enumerate() {
                    lm.feature = conv_forward_event(&lm, &mut self.float_mems[l], params, cfg)?;
                }
                self.pool_f.pool_update(&lm.feature);
            }
            Mode::Quantized => {
                let quant = self.quant.expect("checked in Engine::new");
                let qp0 = &quant.layers[0].qp_in;
                let mut x = vec![
                    quantize(msg.feature[0], qp0) as u16,
                    quantize(msg.feature[1], qp0) as u16,
                ];
                for (l, ql) in quant.layers.iter().enumerate() {
                    x = conv_forward_event_q(
                        msg.event,
                        &msg.edges,
                        &x,
                        &mut self.int_mems[l],
                        ql,
                        cfg,
                        self.pn_self_q[l],
                    )?;
                }
                self.pool_q.pool_update(&x)?;
            }
        }
        Ok(())
    }

    /// Number of events and edges seen in the current sample.
    pub fn counts(&self) -> (u64, u64) {
        (self.events_seen, self.edges_seen)
    }

    /// End of sample: finalize the pool, run the float head, reset state.
    /// Errors with `EmptySample` when no event was processed.
    pub fn finalize_sample(&mut self) -> Result<(usize, Vec<f64>), ModelError> {
        let pooled = match self.mode {
            Mode::Float => self.pool_f.pool_finalize()?,
            Mode::Quantized => {
                let quant = self.quant.expect("checked in Engine::new");
                let qp_out = &quant.layers.last().expect("non-empty").qp_out;
                self.pool_q.pool_finalize_real(qp_out)?
            }
        };
        self.reset();
        let logits = mlp_forward(&pooled, &self.model.head);
        Ok((predict(&logits), logits))
    }
}

/// One-shot streaming inference over a whole sample, with its cost report.
pub fn forward_stream(
    stream: &EventStream,
    model: &Model,
    quant: Option<&QuantizedModel>,
    mode: Mode,
) -> Result<(usize, Vec<f64>, CostReport), ModelError> {
    let mut engine = Engine::new(model, quant, mode)?;
    for &ev in &stream.events {
        engine.process_event(ev)?;
    }
    let (events, edges) = engine.counts();
    let report = CostReport::from_counts(&model.config, events, edges);
    let (class, logits) = engine.finalize_sample()?;
    Ok((class, logits, report))
}

/// Batch floating-point reference: builds the full graph with the brute-force
/// neighbor search, evaluates the conv stack layer by layer over the whole
/// stream, pools, and applies the head. The streaming float path must agree
/// with this within accumulated rounding (≤1e-5 on logits).
pub fn forward_reference(
    stream: &EventStream,
    model: &Model,
) -> Result<(usize, Vec<f64>), ModelError> {
    model.validate()?;
    let cfg = &model.config.graph;
    let events = &stream.events;
    let edges: Vec<EdgeList> = events
        .iter()
        .enumerate()
        .map(|(i, &ev)| brute_force_neighbors(ev, &events[..i], cfg))
        .collect();
    let feats = conv_forward_batch(events, &edges, &model.layers, cfg)?;
    let mut pool = PoolState::new(
        *model.config.conv_dims.last().expect("non-empty"),
        model.config.pool_mode,
    );
    for f in &feats {
        pool.pool_update(f);
    }
    let pooled = pool.pool_finalize()?;
    let logits = mlp_forward(&pooled, &model.head);
    Ok((predict(&logits), logits))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"EGNN";
const VERSION: u8 = 1;

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serialize a model (and its optional quantized companion) to bytes:
/// magic + version byte, a UTF-8 `key=value` header terminated by a blank
/// line, then little-endian weight blobs in declared order.
pub fn save_model(model: &Model, quant: Option<&QuantizedModel>) -> Result<Vec<u8>, ModelError> {
    model.validate()?;
    if let Some(q) = quant {
        q.validate(&model.config)?;
    }
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(b'\n');

    let mut h = String::new();
    let g = &cfg.graph;
    h.push_str(&format!("num_channels={}\n", g.num_channels));
    h.push_str(&format!("r_ch={}\n", g.r_ch));
    h.push_str(&format!("s={}\n", g.s));
    h.push_str(&format!("r_t={}\n", g.r_t));
    h.push_str(&format!("t_max_us={}\n", cfg.t_max_us));
    h.push_str(&format!("conv_dims={}\n", join(&cfg.conv_dims)));
    h.push_str(&format!("bitwidths={}\n", join(&cfg.bitwidths)));
    h.push_str(&format!("head_hidden={}\n", cfg.head_hidden));
    h.push_str(&format!("num_classes={}\n", cfg.num_classes));
    h.push_str(&format!("pool_mode={}\n", cfg.pool_mode.as_str()));
    h.push_str(&format!("parallel_mults={}\n", cfg.parallel_mults));
    h.push_str(&format!("clock_hz={}\n", cfg.clock_hz));
    h.push_str(&format!("n_div={}\n", cfg.n_div));
    let bn_flags: Vec<u8> = model
        .layers
        .iter()
        .map(|l| u8::from(l.bn.is_some()))
        .collect();
    h.push_str(&format!("bn={}\n", join(&bn_flags)));
    h.push_str(&format!("quantized={}\n", u8::from(quant.is_some())));
    if let Some(q) = quant {
        for (l, ql) in q.layers.iter().enumerate() {
            for (tag, qp) in [
                ("in", &ql.qp_in),
                ("w", &ql.qp_w),
                ("rq", &ql.qp_requant),
                ("out", &ql.qp_out),
            ] {
                h.push_str(&format!(
                    "quant{l}_{tag}={},{},{},{}\n",
                    qp.m, qp.k, qp.z, qp.bitwidth
                ));
            }
        }
    }
    h.push('\n'); // blank line terminates the header
    out.extend_from_slice(h.as_bytes());

    for params in &model.layers {
        push_f64s(&mut out, &params.w);
        push_f64s(&mut out, &params.b);
        if let Some(bn) = &params.bn {
            push_f64s(&mut out, &bn.gamma);
            push_f64s(&mut out, &bn.beta);
            push_f64s(&mut out, &bn.running_mean);
            push_f64s(&mut out, &bn.running_var);
            push_f64s(&mut out, &[bn.epsilon]);
        }
    }
    push_f64s(&mut out, &model.head.fc1_w);
    push_f64s(&mut out, &model.head.fc1_b);
    push_f64s(&mut out, &model.head.fc2_w);
    push_f64s(&mut out, &model.head.fc2_b);
    if let Some(q) = quant {
        for ql in &q.layers {
            for w in &ql.w_int {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in &ql.b_acc {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

struct Header<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Header<'a> {
    fn get(&self, key: &str) -> Result<&'a str, ModelError> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::ShapeMismatch(format!("missing header field '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ModelError> {
        self.get(key)?
            .parse()
            .map_err(|_| ModelError::ShapeMismatch(format!("unparseable header field '{key}'")))
    }

    fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, ModelError> {
        self.get(key)?
            .split(',')
            .map(|p| {
                p.trim().parse().map_err(|_| {
                    ModelError::ShapeMismatch(format!("unparseable header field '{key}'"))
                })
            })
            .collect()
    }

    fn parse_quant(&self, key: &str) -> Result<crate::quant::QuantParams, ModelError> {
        let parts: Vec<u32> = self.parse_list(key)?;
        if parts.len() != 4 {
            return Err(ModelError::ShapeMismatch(format!(
                "header field '{key}' needs 4 integers"
            )));
        }
        Ok(crate::quant::QuantParams {
            m: parts[0],
            k: parts[1],
            z: parts[2],
            bitwidth: parts[3],
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>, ModelError> {
        let raw = self.take(n * 2)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("chunk is 2 bytes")))
            .collect())
    }

    fn i64s(&mut self, n: usize) -> Result<Vec<i64>, ModelError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().expect("chunk is 8 bytes")))
            .collect())
    }
}

/// Inverse of [`save_model`]; bit-exact round trip.
pub fn load_model(bytes: &[u8]) -> Result<(Model, Option<QuantizedModel>), ModelError> {
    if bytes.len() < 6 {
        return if bytes.starts_with(&MAGIC[..bytes.len().min(4)]) {
            Err(ModelError::TruncatedFile)
        } else {
            Err(ModelError::BadMagic)
        };
    }
    if &bytes[0..4] != MAGIC {
        return Err(ModelError::BadMagic);
    }
    if bytes[4] != VERSION {
        return Err(ModelError::VersionMismatch {
            found: bytes[4],
            supported: VERSION,
        });
    }
    if bytes[5] != b'\n' {
        return Err(ModelError::ShapeMismatch(
            "malformed byte after version".into(),
        ));
    }
    // The header runs until the first blank line.
    let header_start = 6;
    let mut header_end = None;
    let mut i = header_start;
    while i + 1 < bytes.len() {
        if bytes[i] == b'\n' && bytes[i + 1] == b'\n' {
            header_end = Some(i + 1);
            break;
        }
        i += 1;
    }
    let Some(header_end) = header_end else {
        return Err(ModelError::TruncatedFile);
    };
    let header_text = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| ModelError::ShapeMismatch("header is not UTF-8".into()))?;
    let mut fields = Vec::new();
    for line in header_text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelError::ShapeMismatch(format!("malformed header line '{line}'")))?;
        fields.push((k, v));
    }
    let h = Header(fields);

    let graph = GraphConfig::new(
        h.parse("num_channels")?,
        h.parse("r_ch")?,
        h.parse("s")?,
        h.parse("r_t")?,
    )
    .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    let pool_str = h.get("pool_mode")?;
    let config = ModelConfig {
        graph,
        conv_dims: h.parse_list("conv_dims")?,
        bitwidths: h.parse_list("bitwidths")?,
        head_hidden: h.parse("head_hidden")?,
        num_classes: h.parse("num_classes")?,
        pool_mode: PoolMode::parse(pool_str)
            .ok_or_else(|| ModelError::UnsupportedPoolMode(pool_str.into()))?,
        t_max_us: h.parse("t_max_us")?,
        parallel_mults: h.parse("parallel_mults")?,
        clock_hz: h.parse("clock_hz")?,
        n_div: h.parse("n_div")?,
    };
    config.validate()?;
    let bn_flags: Vec<u8> = h.parse_list("bn")?;
    if bn_flags.len() != config.num_layers() {
        return Err(ModelError::ShapeMismatch(
            "bn flag count disagrees with conv_dims".into(),
        ));
    }
    let quantized: u8 = h.parse("quantized")?;

    // The header fully determines the payload length; reject any size
    // disagreement before decoding (an oversized payload is a shape error,
    // an undersized one a truncated file).
    let mut expected = 0usize;
    for l in 0..config.num_layers() {
        let ext = config.in_dim(l) + 2;
        let out = config.conv_dims[l];
        expected += out * ext * 8 + out * 8;
        if bn_flags[l] == 1 {
            expected += 4 * out * 8 + 8;
        }
    }
    let last = *config.conv_dims.last().expect("validated non-empty");
    expected += (config.head_hidden * last + config.head_hidden) * 8;
    expected += (config.num_classes * config.head_hidden + config.num_classes) * 8;
    if quantized == 1 {
        for l in 0..config.num_layers() {
            let ext = config.in_dim(l) + 2;
            let out = config.conv_dims[l];
            expected += out * ext * 2 + out * 8;
        }
    }
    let payload_len = bytes.len() - (header_end + 1);
    if payload_len < expected {
        return Err(ModelError::TruncatedFile);
    }
    if payload_len > expected {
        return Err(ModelError::ShapeMismatch(format!(
            "payload is {payload_len} bytes, header declares {expected}"
        )));
    }

    let mut r = Reader {
        bytes,
        pos: header_end + 1,
    };
    let mut layers = Vec::with_capacity(config.num_layers());
    for l in 0..config.num_layers() {
        let in_dim = config.in_dim(l);
        let out_dim = config.conv_dims[l];
        let w = r.f64s(out_dim * (in_dim + 2))?;
        let b = r.f64s(out_dim)?;
        let bn = if bn_flags[l] == 1 {
            Some(BnParams {
                gamma: r.f64s(out_dim)?,
                beta: r.f64s(out_dim)?,
                running_mean: r.f64s(out_dim)?,
                running_var: r.f64s(out_dim)?,
                epsilon: r.f64s(1)?[0],
            })
        } else {
            None
        };
        layers.push(LayerParams {
            in_dim,
            out_dim,
            w,
            b,
            bn,
        });
    }
    let head = HeadParams {
        in_dim: last,
        hidden: config.head_hidden,
        num_classes: config.num_classes,
        fc1_w: r.f64s(config.head_hidden * last)?,
        fc1_b: r.f64s(config.head_hidden)?,
        fc2_w: r.f64s(config.num_classes * config.head_hidden)?,
        fc2_b: r.f64s(config.num_classes)?,
    };
    let quant = if quantized == 1 {
        let mut qlayers = Vec::with_capacity(config.num_layers());
        for l in 0..config.num_layers() {
            let in_dim = config.in_dim(l);
            let out_dim = config.conv_dims[l];
            qlayers.push(QuantizedLayer {
                in_dim,
                out_dim,
                w_int: r.u16s(out_dim * (in_dim + 2))?,
                b_acc: r.i64s(out_dim)?,
                qp_in: h.parse_quant(&format!("quant{l}_in"))?,
                qp_w: h.parse_quant(&format!("quant{l}_w"))?,
                qp_requant: h.parse_quant(&format!("quant{l}_rq"))?,
                qp_out: h.parse_quant(&format!("quant{l}_out"))?,
            });
        }
        Some(QuantizedModel { layers: qlayers })
    } else {
        None
    };

    let model = Model {
        config,
        layers,
        head,
    };
    model.validate()?;
    if let Some(q) = &quant {
        q.validate(&model.config)?;
    }
    Ok((model, quant))
}
