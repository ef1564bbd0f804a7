//! Multi-threaded staged execution of the streaming engine: graph generation,
//! each convolution layer, and pooling run as separate pipeline stages
//! connected by bounded FIFO queues, mirroring the hardware dataflow.
//!
//! Every stage processes events strictly in arrival order, so the results are
//! bit-identical to the sequential [`crate::model::Engine`] regardless of
//! thread scheduling or queue depth — that equivalence is the external
//! contract (and is what the tests pin down).

use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use crate::events::EventStream;
use crate::gconv::{conv_forward_event, FeatureMemory, LayerMessage};
use crate::graphgen::{insert_and_search, ContextMemory, EdgeList};
use crate::head::{mlp_forward, predict, IntPoolState, PoolMode, PoolState};
use crate::model::{conv_forward_event_q, CostReport, Mode, Model, ModelError, QuantizedModel};
use crate::quant::{pn_self_quantized, quantize};

/// Message between quantized pipeline stages.
struct QMessage {
    event: crate::events::Event,
    edges: EdgeList,
    x: Vec<u16>,
}

/// Streaming inference with one thread per pipeline stage. Equivalent to
/// [`crate::model::forward_stream`] — float mode up to nothing (identical
/// float ops in identical order), quantized mode bit-for-bit.
///
/// `queue_depth` bounds each inter-stage queue (≥ 1); it changes scheduling
/// freedom but never results.
pub fn forward_stream_pipelined(
    stream: &EventStream,
    model: &Model,
    quant: Option<&QuantizedModel>,
    mode: Mode,
    queue_depth: usize,
) -> Result<(usize, Vec<f64>, CostReport), ModelError> {
    assert!(queue_depth >= 1, "queue_depth must be at least 1");
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
    match mode {
        Mode::Float => run_float(stream, model, queue_depth),
        Mode::Quantized => run_quantized(stream, model, quant.expect("checked"), queue_depth),
    }
}

fn run_float(
    stream: &EventStream,
    model: &Model,
    queue_depth: usize,
) -> Result<(usize, Vec<f64>, CostReport), ModelError> {
    let config = &model.config;
    let cfg = &config.graph;
    let c = cfg.num_channels;
    let last_dim = *config.conv_dims.last().expect("validated non-empty");

    std::thread::scope(|s| {
        let (tx0, mut prev_rx): (SyncSender<LayerMessage>, Receiver<LayerMessage>) =
            sync_channel(queue_depth);

        // Stage 0: graph generation.
        let gg = s.spawn(move || -> Result<(u64, u64), ModelError> {
            let mut ctx = ContextMemory::new(c);
            let (mut events, mut edges) = (0u64, 0u64);
            for &ev in &stream.events {
                let msg = insert_and_search(ev, &mut ctx, cfg)?;
                events += 1;
                edges += msg.edges.len() as u64;
                let lm = LayerMessage {
                    event: msg.event,
                    edges: msg.edges,
                    feature: msg.feature.to_vec(),
                };
                if tx0.send(lm).is_err() {
                    break; // downstream stage failed; its error wins
                }
            }
            Ok((events, edges))
        });

        // One stage per convolution layer.
        let mut conv_handles = Vec::with_capacity(model.layers.len());
        for params in &model.layers {
            let (tx, rx) = sync_channel::<LayerMessage>(queue_depth);
            let upstream = prev_rx;
            prev_rx = rx;
            conv_handles.push(s.spawn(move || -> Result<(), ModelError> {
                let mut mem = FeatureMemory::new(c, params.in_dim);
                while let Ok(mut lm) = upstream.recv() {
                    lm.feature = conv_forward_event(&lm, &mut mem, params, cfg)?;
                    if tx.send(lm).is_err() {
                        break;
                    }
                }
                Ok(())
            }));
        }

        // Final stage: pooling + head.
        let pool_rx = prev_rx;
        let head = &model.head;
        let pool_mode = config.pool_mode;
        let pool_handle = s.spawn(move || -> Result<(usize, Vec<f64>), ModelError> {
            let mut pool = PoolState::new(last_dim, pool_mode);
            while let Ok(lm) = pool_rx.recv() {
                pool.pool_update(&lm.feature);
            }
            let pooled = pool.pool_finalize()?;
            let logits = mlp_forward(&pooled, head);
            Ok((predict(&logits), logits))
        });

        let counts = gg.join().expect("graphgen stage panicked");
        let conv_results: Vec<_> = conv_handles
            .into_iter()
            .map(|h| h.join().expect("conv stage panicked"))
            .collect();
        let pool_result = pool_handle.join().expect("pool stage panicked");

        // Report the earliest-stage error (the root cause).
        let (events, edges) = counts?;
        for r in conv_results {
            r?;
        }
        let (class, logits) = pool_result?;
        Ok((
            class,
            logits,
            CostReport::from_counts(config, events, edges),
        ))
    })
}

fn run_quantized(
    stream: &EventStream,
    model: &Model,
    quant: &QuantizedModel,
    queue_depth: usize,
) -> Result<(usize, Vec<f64>, CostReport), ModelError> {
    let config = &model.config;
    let cfg = &config.graph;
    let c = cfg.num_channels;

    std::thread::scope(|s| {
        let (tx0, mut prev_rx): (SyncSender<QMessage>, Receiver<QMessage>) =
            sync_channel(queue_depth);

        // Stage 0: graph generation, plus the layer-0 input quantization.
        let qp0 = quant.layers[0].qp_in;
        let gg = s.spawn(move || -> Result<(u64, u64), ModelError> {
            let mut ctx = ContextMemory::new(c);
            let (mut events, mut edges) = (0u64, 0u64);
            for &ev in &stream.events {
                let msg = insert_and_search(ev, &mut ctx, cfg)?;
                events += 1;
                edges += msg.edges.len() as u64;
                let q = QMessage {
                    event: msg.event,
                    edges: msg.edges,
                    x: vec![
                        quantize(msg.feature[0], &qp0) as u16,
                        quantize(msg.feature[1], &qp0) as u16,
                    ],
                };
                if tx0.send(q).is_err() {
                    break;
                }
            }
            Ok((events, edges))
        });

        let mut conv_handles = Vec::with_capacity(quant.layers.len());
        for ql in &quant.layers {
            let (tx, rx) = sync_channel::<QMessage>(queue_depth);
            let upstream = prev_rx;
            prev_rx = rx;
            let pn_self = pn_self_quantized(&ql.qp_in);
            conv_handles.push(s.spawn(move || -> Result<(), ModelError> {
                let mut mem = FeatureMemory::new(c, ql.in_dim);
                while let Ok(mut qm) = upstream.recv() {
                    qm.x = conv_forward_event_q(
                        qm.event, &qm.edges, &qm.x, &mut mem, ql, cfg, pn_self,
                    )?;
                    if tx.send(qm).is_err() {
                        break;
                    }
                }
                Ok(())
            }));
        }

        let pool_rx = prev_rx;
        let head = &model.head;
        let qp_out = quant.layers.last().expect("non-empty").qp_out;
        let last_dim = *config.conv_dims.last().expect("validated non-empty");
        let pool_handle = s.spawn(move || -> Result<(usize, Vec<f64>), ModelError> {
            let mut pool = IntPoolState::new(last_dim);
            while let Ok(qm) = pool_rx.recv() {
                pool.pool_update(&qm.x)?;
            }
            let pooled = pool.pool_finalize_real(&qp_out)?;
            let logits = mlp_forward(&pooled, head);
            Ok((predict(&logits), logits))
        });

        let counts = gg.join().expect("graphgen stage panicked");
        let conv_results: Vec<_> = conv_handles
            .into_iter()
            .map(|h| h.join().expect("conv stage panicked"))
            .collect();
        let pool_result = pool_handle.join().expect("pool stage panicked");

        let (events, edges) = counts?;
        for r in conv_results {
            r?;
        }
        let (class, logits) = pool_result?;
        Ok((
            class,
            logits,
            CostReport::from_counts(config, events, edges),
        ))
    })
}
