//! Streaming graph generation.
//!
//! Each incoming event is connected to the most recent past event on every
//! candidate channel of a skip-step lattice (`ch ± k·s`, `k = 0..r_ch/s`)
//! whose stored timestamp lies within the time radius. The only state is a
//! per-channel context memory holding the latest timestamp, so the search is
//! O(max_edges) per event regardless of history length. The module also
//! carries the analytical cycle cost of this stage for a dual-port-memory
//! implementation (two candidate reads per cycle, plus divider latency).

use thiserror::Error;

use crate::events::Event;
use crate::gconv::pn_normalize;

/// Graph-construction parameters.
///
/// `max_edges() = 2·(r_ch/s) + 1` counts the candidate channels: the skip
/// lattice on both sides plus the central channel itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphConfig {
    pub num_channels: u32,
    /// Channel radius; candidate channels span `[ch − r_ch, ch + r_ch]`.
    pub r_ch: u32,
    /// Skip step: lattice stride between candidate channels. Divides `r_ch`.
    pub s: u32,
    /// Time radius in microseconds; a stored event at `t_j` is a neighbor of
    /// an event at `t_i` iff `0 ≤ t_i − t_j ≤ r_t` (both ends inclusive).
    pub r_t: u64,
}

impl GraphConfig {
    pub fn new(num_channels: u32, r_ch: u32, s: u32, r_t: u64) -> Result<Self, GraphError> {
        let cfg = Self {
            num_channels,
            r_ch,
            s,
            r_t,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.num_channels == 0 {
            return Err(GraphError::InvalidConfig("num_channels must be ≥ 1".into()));
        }
        if self.s == 0 {
            return Err(GraphError::InvalidConfig("skip step must be ≥ 1".into()));
        }
        if !self.r_ch.is_multiple_of(self.s) {
            return Err(GraphError::InvalidConfig(format!(
                "skip step {} must divide channel radius {}",
                self.s, self.r_ch
            )));
        }
        if self.r_t == 0 {
            return Err(GraphError::InvalidConfig(
                "time radius must be ≥ 1 µs".into(),
            ));
        }
        Ok(())
    }

    /// Maximum neighbors per event: `2·(r_ch/s) + 1`.
    pub fn max_edges(&self) -> usize {
        (2 * (self.r_ch / self.s) + 1) as usize
    }

    /// Signed channel offsets of the candidate lattice, ascending.
    pub fn lattice_offsets(&self) -> impl Iterator<Item = i64> + '_ {
        let m = (self.r_ch / self.s) as i64;
        let s = self.s as i64;
        (-m..=m).map(move |k| k * s)
    }
}

/// Per-channel store of the most recent event timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextMemory {
    last_t: Vec<Option<u64>>,
}

impl ContextMemory {
    pub fn new(num_channels: u32) -> Self {
        Self {
            last_t: vec![None; num_channels as usize],
        }
    }

    pub fn clear(&mut self) {
        self.last_t.fill(None);
    }

    pub fn get(&self, ch: u32) -> Option<u64> {
        self.last_t[ch as usize]
    }

    pub fn store(&mut self, ch: u32, t: u64) {
        self.last_t[ch as usize] = Some(t);
    }

    pub fn num_channels(&self) -> u32 {
        self.last_t.len() as u32
    }
}

/// Neighbors of one event: `(channel, timestamp)` pairs, ascending by channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeList {
    pub neighbors: Vec<(u32, u64)>,
}

impl EdgeList {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// The unit flowing down the pipeline: one event, its edge list, and the
/// neighbor-average input feature (already position-normalized to [0,1]²).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMessage {
    pub event: Event,
    pub edges: EdgeList,
    pub feature: [f64; 2],
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
    #[error("channel {ch} out of range for {num_channels} channels")]
    ChannelOutOfRange { ch: u32, num_channels: u32 },
}

/// Process one event against the context memory: gather neighbors from the
/// skip lattice (reading the central channel *before* overwriting it), store
/// the event, and compute the neighbor-average feature.
pub fn insert_and_search(
    event: Event,
    ctx: &mut ContextMemory,
    cfg: &GraphConfig,
) -> Result<NodeMessage, GraphError> {
    if event.ch >= cfg.num_channels {
        return Err(GraphError::ChannelOutOfRange {
            ch: event.ch,
            num_channels: cfg.num_channels,
        });
    }
    debug_assert_eq!(ctx.num_channels(), cfg.num_channels);

    let mut neighbors = Vec::new();
    for offset in cfg.lattice_offsets() {
        let ch = event.ch as i64 + offset;
        if ch < 0 || ch >= cfg.num_channels as i64 {
            continue;
        }
        let ch = ch as u32;
        if let Some(t_j) = ctx.get(ch) {
            // checked_sub also enforces directedness: only past events join.
            if let Some(dt) = event.t.checked_sub(t_j) {
                if dt <= cfg.r_t {
                    neighbors.push((ch, t_j));
                }
            }
        }
    }
    ctx.store(event.ch, event.t); // write after all reads

    let edges = EdgeList { neighbors };
    let feature = neighbor_average(&edges, event, cfg);
    Ok(NodeMessage {
        event,
        edges,
        feature,
    })
}

/// Test oracle: recompute the edge list of `event` from the full prior event
/// history instead of the context memory. For each lattice candidate channel
/// it picks the most recent historical event (last in arrival order) and
/// applies the same inclusive temporal test.
pub fn brute_force_neighbors(event: Event, full_history: &[Event], cfg: &GraphConfig) -> EdgeList {
    let mut neighbors = Vec::new();
    for offset in cfg.lattice_offsets() {
        let ch = event.ch as i64 + offset;
        if ch < 0 || ch >= cfg.num_channels as i64 {
            continue;
        }
        let ch = ch as u32;
        if let Some(past) = full_history.iter().rev().find(|e| e.ch == ch) {
            if let Some(dt) = event.t.checked_sub(past.t) {
                if dt <= cfg.r_t {
                    neighbors.push((ch, past.t));
                }
            }
        }
    }
    EdgeList { neighbors }
}

/// Mean displacement of the neighbors relative to the event, mapped through
/// positional normalization. An empty edge list maps to the zero-displacement
/// image `(0, 0.5)`.
///
/// Sums are accumulated in integers before the single float division, so the
/// result is bit-identical for any ordering of the same edge set.
pub fn neighbor_average(edges: &EdgeList, event: Event, cfg: &GraphConfig) -> [f64; 2] {
    if edges.is_empty() {
        return pn_normalize((0.0, 0.0), cfg).expect("zero displacement is always in range");
    }
    let mut sum_dt: u128 = 0; // t_i − t_j ≥ 0 per edge
    let mut sum_dch: i64 = 0;
    for &(ch_j, t_j) in &edges.neighbors {
        sum_dt += (event.t - t_j) as u128;
        sum_dch += ch_j as i64 - event.ch as i64;
    }
    let n = edges.len() as f64;
    let mean_dt = -(sum_dt as f64) / n; // ≤ 0: neighbors lie in the past
    let mean_dch = sum_dch as f64 / n;
    pn_normalize((mean_dt, mean_dch), cfg)
        .expect("mean displacement of valid edges lies within the radii")
}

/// Analytical cycle count of the graph-generation stage per event: the
/// `1 + 2·r_ch/s` candidate reads are served two per cycle by a dual-port
/// memory (an odd leftover read still costs a full cycle), plus the divider
/// latency `n_div`.
pub fn graphgen_cycles(cfg: &GraphConfig, n_div: u64) -> u64 {
    let reads = 1 + 2 * (cfg.r_ch / cfg.s) as u64;
    reads.div_ceil(2) + n_div
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: u64, ch: u32) -> Event {
        Event { t, ch }
    }

    fn cfg(r_ch: u32, s: u32, r_t: u64) -> GraphConfig {
        GraphConfig::new(700, r_ch, s, r_t).unwrap()
    }

    /// Context holding {3→10, 4→2, 5→8}, as used by several examples.
    fn example_ctx() -> ContextMemory {
        let mut ctx = ContextMemory::new(700);
        ctx.store(3, 10);
        ctx.store(4, 2);
        ctx.store(5, 8);
        ctx
    }

    #[test]
    fn config_validation() {
        assert!(GraphConfig::new(700, 100, 10, 20_000).is_ok());
        assert!(matches!(
            GraphConfig::new(700, 100, 3, 20_000),
            Err(GraphError::InvalidConfig(_))
        ));
        assert!(matches!(
            GraphConfig::new(700, 100, 0, 20_000),
            Err(GraphError::InvalidConfig(_))
        ));
        assert!(matches!(
            GraphConfig::new(0, 0, 1, 1),
            Err(GraphError::InvalidConfig(_))
        ));
        assert!(matches!(
            GraphConfig::new(700, 100, 10, 0),
            Err(GraphError::InvalidConfig(_))
        ));
    }

    #[test]
    fn max_edges_matches_formula() {
        assert_eq!(cfg(100, 10, 20_000).max_edges(), 21);
        assert_eq!(cfg(100, 100, 20_000).max_edges(), 3);
        assert_eq!(cfg(0, 1, 20_000).max_edges(), 1);
    }

    #[test]
    fn search_filters_by_time_radius() {
        // Candidates {2,3,4,5,6}; ch3 passes (Δ=1), ch4 fails (Δ=9 > 5),
        // ch5 passes (Δ=3).
        let mut ctx = example_ctx();
        let msg = insert_and_search(ev(11, 4), &mut ctx, &cfg(2, 1, 5)).unwrap();
        assert_eq!(msg.edges.neighbors, vec![(3, 10), (5, 8)]);
        // The event was stored after the search.
        assert_eq!(ctx.get(4), Some(11));
    }

    #[test]
    fn search_on_empty_context_yields_no_edges() {
        let mut ctx = ContextMemory::new(700);
        let msg = insert_and_search(ev(11, 4), &mut ctx, &cfg(2, 1, 5)).unwrap();
        assert!(msg.edges.is_empty());
    }

    #[test]
    fn skip_step_prunes_candidate_channels() {
        // Candidates {2,4,6}: only ch4 is stored and its Δ=9 fails the radius.
        let mut ctx = example_ctx();
        let msg = insert_and_search(ev(11, 4), &mut ctx, &cfg(2, 2, 5)).unwrap();
        assert!(msg.edges.is_empty());
    }

    #[test]
    fn search_rejects_out_of_range_channel() {
        let mut ctx = ContextMemory::new(700);
        assert_eq!(
            insert_and_search(ev(0, 700), &mut ctx, &cfg(2, 1, 5)).unwrap_err(),
            GraphError::ChannelOutOfRange {
                ch: 700,
                num_channels: 700
            }
        );
    }

    #[test]
    fn central_channel_is_read_before_overwrite() {
        let c = cfg(2, 1, 5);
        let mut ctx = ContextMemory::new(700);
        insert_and_search(ev(10, 4), &mut ctx, &c).unwrap();
        // Same channel, same timestamp: Δ=0 passes the inclusive test.
        let msg = insert_and_search(ev(10, 4), &mut ctx, &c).unwrap();
        assert_eq!(msg.edges.neighbors, vec![(4, 10)]);
    }

    #[test]
    fn brute_force_matches_hand_example() {
        let history = vec![ev(2, 4), ev(8, 5), ev(10, 3)];
        let edges = brute_force_neighbors(ev(11, 4), &history, &cfg(2, 1, 5));
        assert_eq!(edges.neighbors, vec![(3, 10), (5, 8)]);
    }

    #[test]
    fn brute_force_on_empty_history_is_empty() {
        assert!(brute_force_neighbors(ev(11, 4), &[], &cfg(2, 1, 5)).is_empty());
    }

    #[test]
    fn brute_force_uses_most_recent_event_per_channel() {
        // Two stored events on ch 4: the edge carries the newer timestamp
        // (Δ = 13 passes the inclusive radius)...
        let history = vec![ev(6, 4), ev(7, 4)];
        let edges = brute_force_neighbors(ev(20, 4), &history, &cfg(0, 1, 13));
        assert_eq!(edges.neighbors, vec![(4, 7)]);
        // ...and once the newest event falls outside the radius, the channel
        // contributes nothing: older history is forgotten, not a fallback.
        let edges = brute_force_neighbors(ev(20, 4), &history, &cfg(0, 1, 12));
        assert!(edges.is_empty());
    }

    #[test]
    fn neighbor_average_matches_hand_example() {
        // Edges [(3,10),(5,8)] around event (t=11, ch=4): Δt mean = 2,
        // Δch mean = 0 → PN image (0.4, 0.5).
        let edges = EdgeList {
            neighbors: vec![(3, 10), (5, 8)],
        };
        assert_eq!(
            neighbor_average(&edges, ev(11, 4), &cfg(2, 1, 5)),
            [0.4, 0.5]
        );
    }

    #[test]
    fn neighbor_average_of_empty_edges_is_zero_image() {
        let edges = EdgeList::default();
        assert_eq!(
            neighbor_average(&edges, ev(11, 4), &cfg(2, 1, 5)),
            [0.0, 0.5]
        );
    }

    #[test]
    fn neighbor_average_boundary_edge() {
        // Single edge at (ch_i, t_i − r_t): time component 1.0, channel 0.5.
        let edges = EdgeList {
            neighbors: vec![(4, 6)],
        };
        assert_eq!(
            neighbor_average(&edges, ev(11, 4), &cfg(2, 1, 5)),
            [1.0, 0.5]
        );
    }

    #[test]
    fn cycle_model_values() {
        assert_eq!(graphgen_cycles(&cfg(100, 10, 20_000), 4), 15);
        assert_eq!(graphgen_cycles(&cfg(100, 100, 20_000), 4), 6);
        assert_eq!(graphgen_cycles(&cfg(0, 1, 20_000), 0), 1);
    }

    /// Streams paired with a config whose radii/stride vary freely.
    fn stream_and_config() -> impl Strategy<Value = (Vec<Event>, GraphConfig)> {
        (2u32..50, 1u32..5, 0u32..5, 1u64..100, 0usize..150).prop_flat_map(
            |(num_channels, s, m, r_t, n)| {
                let cfg = GraphConfig::new(num_channels, s * m, s, r_t).unwrap();
                proptest::collection::vec((0u64..8, 0u32..num_channels), n).prop_map(move |raw| {
                    let mut t = 0;
                    let events = raw
                        .into_iter()
                        .map(|(gap, ch)| {
                            t += gap;
                            ev(t, ch)
                        })
                        .collect();
                    (events, cfg)
                })
            },
        )
    }

    proptest! {
        #[test]
        fn streaming_search_equals_brute_force((events, cfg) in stream_and_config()) {
            let mut ctx = ContextMemory::new(cfg.num_channels);
            for (i, &event) in events.iter().enumerate() {
                let msg = insert_and_search(event, &mut ctx, &cfg).unwrap();
                let oracle = brute_force_neighbors(event, &events[..i], &cfg);
                prop_assert_eq!(&msg.edges, &oracle);
                prop_assert!(msg.edges.len() <= cfg.max_edges());
                // Directedness and radii hold for every edge.
                for &(ch_j, t_j) in &msg.edges.neighbors {
                    prop_assert!(t_j <= event.t && event.t - t_j <= cfg.r_t);
                    let dch = (ch_j as i64 - event.ch as i64).unsigned_abs();
                    prop_assert!(dch <= cfg.r_ch as u64);
                    prop_assert_eq!(dch % cfg.s as u64, 0);
                }
                // Features stay inside the unit square.
                prop_assert!((0.0..=1.0).contains(&msg.feature[0]));
                prop_assert!((0.0..=1.0).contains(&msg.feature[1]));
            }
        }

        #[test]
        fn clearing_context_makes_samples_order_independent(
            (events_a, cfg) in stream_and_config(),
            raw_b in proptest::collection::vec((0u64..8, 0u32..50), 0..100),
        ) {
            let mut t = 0;
            let events_b: Vec<Event> = raw_b
                .into_iter()
                .map(|(gap, ch)| {
                    t += gap;
                    ev(t, ch % cfg.num_channels)
                })
                .collect();
            let run = |ctx: &mut ContextMemory, events: &[Event]| -> Vec<NodeMessage> {
                events
                    .iter()
                    .map(|&e| insert_and_search(e, ctx, &cfg).unwrap())
                    .collect()
            };

            let mut ctx = ContextMemory::new(cfg.num_channels);
            run(&mut ctx, &events_a);
            ctx.clear();
            let after_a = run(&mut ctx, &events_b);

            let mut fresh = ContextMemory::new(cfg.num_channels);
            let alone = run(&mut fresh, &events_b);
            prop_assert_eq!(after_a, alone);
        }
    }
}
