//! Event representation, text-file I/O, synthetic stream generation, and
//! timed replay.
//!
//! An event is one sensor spike: an integer-microsecond timestamp plus a
//! channel index. Streams are kept sorted by timestamp (equal timestamps are
//! legal and preserved in arrival order). The text format is one event per
//! line, `"<t_us> <ch>"`, with optional `#`-prefixed header lines carrying
//! metadata such as `# channels=700` and `# label=3`.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use thiserror::Error;

/// Channel count assumed for event files that carry no `# channels=` header.
pub const DEFAULT_CHANNELS: u32 = 700;

/// Fraction of the synthetic event rate emitted as uniform background noise.
pub const BACKGROUND_FRACTION: f64 = 0.1;

/// One sensor spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds from sample start.
    pub t: u64,
    /// Channel index in `[0, num_channels)`.
    pub ch: u32,
}

/// An ordered event sample, optionally labeled with its class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub num_channels: u32,
    pub label: Option<u32>,
    pub events: Vec<Event>,
}

impl EventStream {
    /// Timestamp of the last event (samples start at t = 0); 0 when empty.
    pub fn duration_us(&self) -> u64 {
        self.events.last().map_or(0, |e| e.t)
    }
}

/// Parameters of the synthetic band task used for desk-scale training.
///
/// Each class concentrates 90% of its events inside its own set of channel
/// intervals; the remaining 10% are uniform background noise. Because the
/// downstream features are translation invariant (they see only channel and
/// time *differences*), classes are distinguished by band width — and hence
/// per-channel density — rather than absolute band position.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTaskSpec {
    pub num_channels: u32,
    pub num_classes: u32,
    pub duration_us: u64,
    /// Mean total event rate in events per second.
    pub mean_rate: f64,
    /// Inclusive channel intervals per class.
    pub class_bands: Vec<Vec<(u32, u32)>>,
    pub seed: u64,
}

impl SynthTaskSpec {
    /// Band-width task: every class occupies one centered channel band whose
    /// width grows from C/8 (class 0) to 3C/4 (last class).
    pub fn band_task(
        num_channels: u32,
        num_classes: u32,
        duration_us: u64,
        mean_rate: f64,
        seed: u64,
    ) -> Self {
        let c = num_channels as f64;
        let narrow = (c / 8.0).max(1.0);
        let wide = (3.0 * c / 4.0).max(1.0);
        let class_bands = (0..num_classes)
            .map(|k| {
                let frac = if num_classes > 1 {
                    k as f64 / (num_classes - 1) as f64
                } else {
                    0.0
                };
                let width =
                    ((narrow + (wide - narrow) * frac).round() as u32).clamp(1, num_channels);
                let start = (num_channels - width) / 2;
                vec![(start, start + width - 1)]
            })
            .collect();
        Self {
            num_channels,
            num_classes,
            duration_us,
            mean_rate,
            class_bands,
            seed,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("line {line}: malformed event line {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("line {line}: channel {ch} out of range for {num_channels} channels")]
    ChannelOutOfRange {
        line: usize,
        ch: u64,
        num_channels: u32,
    },
    #[error("line {line}: timestamp {t} precedes previous timestamp {prev}")]
    NonMonotonicTimestamp { line: usize, t: u64, prev: u64 },
    #[error("class {class} out of range for {num_classes} classes")]
    InvalidClass { class: u32, num_classes: u32 },
}

/// Parse the event text format. Validates channel range (against the
/// `# channels=` header, or 700 when absent) and timestamp monotonicity.
pub fn parse_event_file(bytes: &[u8]) -> Result<EventStream, EventError> {
    let mut channels: Option<u32> = None;
    let mut label: Option<u32> = None;
    // (line number, t, ch) triples; channel range is validated after the scan
    // so a header appearing anywhere in the file still applies.
    let mut raw_events: Vec<(usize, u64, u64)> = Vec::new();
    let mut prev: Option<u64> = None;

    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = idx + 1;
        let malformed = || EventError::MalformedLine {
            line,
            content: String::from_utf8_lossy(raw).into_owned(),
        };
        let text = std::str::from_utf8(raw).map_err(|_| malformed())?.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                match key.trim() {
                    "channels" => channels = Some(value.trim().parse().map_err(|_| malformed())?),
                    "label" => label = Some(value.trim().parse().map_err(|_| malformed())?),
                    _ => {}
                }
            }
            continue;
        }
        let mut fields = text.split_whitespace();
        let (Some(t_str), Some(ch_str), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(malformed());
        };
        let t: u64 = t_str.parse().map_err(|_| malformed())?;
        let ch: u64 = ch_str.parse().map_err(|_| malformed())?;
        if let Some(p) = prev {
            if t < p {
                return Err(EventError::NonMonotonicTimestamp { line, t, prev: p });
            }
        }
        prev = Some(t);
        raw_events.push((line, t, ch));
    }

    let num_channels = channels.unwrap_or(DEFAULT_CHANNELS);
    let mut events = Vec::with_capacity(raw_events.len());
    for (line, t, ch) in raw_events {
        if ch >= num_channels as u64 {
            return Err(EventError::ChannelOutOfRange {
                line,
                ch,
                num_channels,
            });
        }
        events.push(Event { t, ch: ch as u32 });
    }
    Ok(EventStream {
        num_channels,
        label,
        events,
    })
}

/// Serialize a stream so that `parse_event_file(write_event_file(s)) == s`.
/// Headers are emitted only when they carry information: the channel count
/// when it differs from the default, the label when present.
pub fn write_event_file(stream: &EventStream) -> Vec<u8> {
    let mut out = String::new();
    if stream.num_channels != DEFAULT_CHANNELS {
        out.push_str(&format!("# channels={}\n", stream.num_channels));
    }
    if let Some(label) = stream.label {
        out.push_str(&format!("# label={label}\n"));
    }
    for e in &stream.events {
        out.push_str(&format!("{} {}\n", e.t, e.ch));
    }
    out.into_bytes()
}

/// Generate one synthetic labeled stream: Poisson event counts, 90% of events
/// uniform over the class's channel bands, 10% uniform background, timestamps
/// uniform over the duration. Bit-reproducible for a fixed `(seed, class_id)`.
pub fn synth_stream(spec: &SynthTaskSpec, class_id: u32) -> Result<EventStream, EventError> {
    if class_id >= spec.num_classes || (class_id as usize) >= spec.class_bands.len() {
        return Err(EventError::InvalidClass {
            class: class_id,
            num_classes: spec.num_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, class_id as u64));
    let expected = spec.mean_rate * spec.duration_us as f64 / 1e6;
    let n_band = poisson_count(&mut rng, expected * (1.0 - BACKGROUND_FRACTION));
    let n_background = poisson_count(&mut rng, expected * BACKGROUND_FRACTION);

    let band_channels: Vec<u32> = spec.class_bands[class_id as usize]
        .iter()
        .flat_map(|&(lo, hi)| lo..=hi.min(spec.num_channels - 1))
        .collect();

    let mut events = Vec::with_capacity(n_band + n_background);
    let t_range = spec.duration_us.max(1);
    for _ in 0..n_band {
        let t = rng.random_range(0..t_range);
        let ch = if band_channels.is_empty() {
            rng.random_range(0..spec.num_channels)
        } else {
            band_channels[rng.random_range(0..band_channels.len())]
        };
        events.push(Event { t, ch });
    }
    for _ in 0..n_background {
        let t = rng.random_range(0..t_range);
        let ch = rng.random_range(0..spec.num_channels);
        events.push(Event { t, ch });
    }
    events.sort_by_key(|e| e.t); // stable: ties keep generation order

    Ok(EventStream {
        num_channels: spec.num_channels,
        label: Some(class_id),
        events,
    })
}

fn poisson_count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let poisson = Poisson::new(lambda).expect("event rate is positive and finite");
    poisson.sample(rng) as usize
}

/// Derive an independent stream seed from a base seed and a salt (sample
/// index, class id, ...). SplitMix64 finalizer.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Iterator that yields the stream's events in order, sleeping
/// `(t[i+1] − t[i]) / speed_factor` between consecutive events.
/// A non-finite `speed_factor` replays as fast as possible.
pub fn replay_with_delays(stream: &EventStream, speed_factor: f64) -> TimedReplay<'_> {
    TimedReplay {
        events: stream.events.iter(),
        prev_t: None,
        speed_factor,
    }
}

pub struct TimedReplay<'a> {
    events: std::slice::Iter<'a, Event>,
    prev_t: Option<u64>,
    speed_factor: f64,
}

impl Iterator for TimedReplay<'_> {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        let ev = *self.events.next()?;
        if let Some(prev) = self.prev_t {
            let gap_us = ev.t.saturating_sub(prev);
            if gap_us > 0 && self.speed_factor.is_finite() && self.speed_factor > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(
                    gap_us as f64 / self.speed_factor / 1e6,
                ));
            }
        }
        self.prev_t = Some(ev.t);
        Some(ev)
    }
}
