//! Command-line surface: inference, benchmarking, training, data
//! generation, and model inspection.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error. Output is
//! line-oriented `key=value` text; `--json` emits the same data as JSON.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::events::{
    mix_seed, parse_event_file, replay_with_delays, write_event_file, Event, EventStream,
    SynthTaskSpec,
};
use crate::graphgen::GraphConfig;
use crate::head::PoolMode;
use crate::model::{
    flops_report, forward_stream, load_model, save_model, CostReport, Engine, Mode, Model,
    ModelConfig, QuantizedModel,
};
use crate::train::{accuracy, qat_finetune, synth_dataset, train_loop, TrainConfig};

#[derive(Parser)]
#[command(
    name = "egnn",
    version,
    about = "Streaming event-graph neural network engine",
    disable_help_subcommand = true
)]
struct Cli {
    /// Emit machine-readable JSON instead of key=value lines.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Classify event files with a trained model.
    Infer(InferArgs),
    /// Print the analytical cycle/FLOP cost model for a config or model.
    Bench(BenchArgs),
    /// Train on the synthetic band task and write a model file.
    Train(TrainArgs),
    /// Generate synthetic event files plus a label manifest.
    GenData(GenDataArgs),
    /// Print model-file and event-file summaries.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct InferArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Event file(s) to classify.
    #[arg(long, num_args = 1.., required = true)]
    events: Vec<PathBuf>,
    /// Arithmetic mode.
    #[arg(long, default_value = "float", value_parser = ["float", "quantized"])]
    mode: String,
    /// Replay events with their real inter-event delays.
    #[arg(long)]
    realtime: bool,
    /// Replay speed factor for --realtime (2.0 = twice as fast).
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
}

#[derive(Args)]
struct GraphFlags {
    /// Channel-lattice skip step (s).
    #[arg(long)]
    skip_step: Option<u32>,
    /// Channel radius (r_ch).
    #[arg(long)]
    r_ch: Option<u32>,
    /// Time radius in µs (r_t).
    #[arg(long)]
    r_t: Option<u64>,
}

impl GraphFlags {
    fn apply(&self, g: &GraphConfig) -> Result<GraphConfig, String> {
        GraphConfig::new(
            g.num_channels,
            self.r_ch.unwrap_or(g.r_ch),
            self.skip_step.unwrap_or(g.s),
            self.r_t.unwrap_or(g.r_t),
        )
        .map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Take the configuration from this model file (default: base preset).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report FLOPs on this event file (default: a synthetic stream).
    #[arg(long)]
    events: Option<PathBuf>,
    #[command(flatten)]
    graph: GraphFlags,
    /// Conv stack output dims, e.g. 64,64,64,64.
    #[arg(long)]
    dims: Option<String>,
    /// Parallel multipliers per conv stage (power of two).
    #[arg(long)]
    parallel_mults: Option<u64>,
    /// Pipeline clock in Hz.
    #[arg(long)]
    clock_hz: Option<u64>,
    /// Seed for the synthetic stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic stream duration in µs.
    #[arg(long, default_value_t = 100_000)]
    duration_us: u64,
    /// Synthetic stream mean rate in events/s.
    #[arg(long, default_value_t = 20_000.0)]
    rate: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Task name: synth<K> = K-class synthetic band task.
    #[arg(long, default_value = "synth2")]
    task: String,
    #[arg(long, default_value_t = 500)]
    train_samples: usize,
    #[arg(long, default_value_t = 100)]
    test_samples: usize,
    /// Number of input channels.
    #[arg(long, default_value_t = 64)]
    channels: u32,
    /// Sample duration in µs.
    #[arg(long, default_value_t = 100_000)]
    duration_us: u64,
    /// Mean event rate per sample in events/s.
    #[arg(long, default_value_t = 1500.0)]
    rate: f64,
    #[command(flatten)]
    graph: GraphFlags,
    /// Conv stack output dims.
    #[arg(long, default_value = "8,16,32,64")]
    dims: String,
    #[arg(long, default_value_t = 32)]
    head_hidden: usize,
    /// Pooling rule: average, max, or sum.
    #[arg(long, default_value = "average", value_parser = ["average", "max", "sum"])]
    pool: String,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Run quantization-aware fine-tuning and store the integer model too.
    #[arg(long)]
    qat: bool,
    #[arg(long, default_value_t = 20)]
    qat_epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long = "lr", default_value_t = 2e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for event files and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of event files.
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    classes: u32,
    #[arg(long, default_value_t = 64)]
    channels: u32,
    #[arg(long, default_value_t = 100_000)]
    duration_us: u64,
    #[arg(long, default_value_t = 1500.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    /// Model file to summarize.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Event file(s) to summarize.
    #[arg(long, num_args = 1..)]
    events: Vec<PathBuf>,
}

/// Parse arguments from the process environment and run; returns the exit
/// code (0 success, 1 runtime error, 2 usage error).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let json = cli.json;
    let result = match cli.cmd {
        Cmd::Infer(a) => cmd_infer(a, json),
        Cmd::Bench(a) => cmd_bench(a, json),
        Cmd::Train(a) => cmd_train(a, json),
        Cmd::GenData(a) => cmd_gen_data(a, json),
        Cmd::Inspect(a) => cmd_inspect(a, json),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

fn read_model(path: &Path) -> Result<(Model, Option<QuantizedModel>), String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            format!("model not found: {}", path.display())
        } else {
            format!("cannot read model {}: {e}", path.display())
        }
    })?;
    load_model(&bytes).map_err(|e| format!("bad model file {}: {e}", path.display()))
}

fn read_events(path: &Path) -> Result<EventStream, String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            format!("event file not found: {}", path.display())
        } else {
            format!("cannot read events {}: {e}", path.display())
        }
    })?;
    parse_event_file(&bytes).map_err(|e| format!("bad event file {}: {e}", path.display()))
}

fn cmd_infer(a: InferArgs, json: bool) -> Result<(), String> {
    let (model, quant) = read_model(&a.model)?;
    let mode = Mode::parse(&a.mode).expect("clap restricts the values");
    let mut results = Vec::new();
    let (mut total_events, mut total_edges) = (0u64, 0u64);
    for path in &a.events {
        let stream = read_events(path)?;
        let (class, logits, events, edges) = if a.realtime {
            let mut engine =
                Engine::new(&model, quant.as_ref(), mode).map_err(|e| e.to_string())?;
            for ev in replay_with_delays(&stream, a.speed) {
                engine.process_event(ev).map_err(|e| e.to_string())?;
            }
            let (events, edges) = engine.counts();
            let (class, logits) = engine.finalize_sample().map_err(|e| e.to_string())?;
            (class, logits, events, edges)
        } else {
            let (class, logits, report) = forward_stream(&stream, &model, quant.as_ref(), mode)
                .map_err(|e| format!("{}: {e}", path.display()))?;
            (class, logits, report.events, report.edges)
        };
        total_events += events;
        total_edges += edges;
        results.push((path.display().to_string(), class, logits));
    }
    let report = CostReport::from_counts(&model.config, total_events, total_edges);
    if json {
        let files: Vec<_> = results
            .iter()
            .map(|(file, class, logits)| {
                json!({
                    "file": file,
                    "class": class,
                    "logit": logits[*class],
                    "logits": logits,
                })
            })
            .collect();
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "files": files, "cost": report }))
                .expect("report serializes")
        );
    } else {
        for (file, class, logits) in &results {
            println!("file={file} class={class} logit={:.6}", logits[*class]);
        }
        print!("{}", report.to_kv_text());
    }
    Ok(())
}

/// Deterministic uniform-random stream for benchmarking: Poisson-like event
/// count at `rate`, channels uniform over the lattice.
fn uniform_stream(num_channels: u32, duration_us: u64, rate: f64, seed: u64) -> EventStream {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xBE5C_57E0));
    let n = (rate * duration_us as f64 / 1e6).round().max(0.0) as usize;
    let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..duration_us)).collect();
    ts.sort_unstable();
    let events = ts
        .into_iter()
        .map(|t| Event {
            t,
            ch: rng.random_range(0..num_channels),
        })
        .collect();
    EventStream {
        num_channels,
        label: None,
        events,
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dims entry '{p}'"))
        })
        .collect()
}

fn cmd_bench(a: BenchArgs, json: bool) -> Result<(), String> {
    let mut config = match &a.model {
        Some(path) => read_model(path)?.0.config,
        None => ModelConfig::base(),
    };
    config.graph = a.graph.apply(&config.graph)?;
    if let Some(dims) = &a.dims {
        config = config.with_conv_dims(&parse_dims(dims)?);
    }
    if let Some(p) = a.parallel_mults {
        config.parallel_mults = p;
    }
    if let Some(hz) = a.clock_hz {
        config.clock_hz = hz;
    }
    config.validate().map_err(|e| e.to_string())?;
    let stream = match &a.events {
        Some(path) => read_events(path)?,
        None => uniform_stream(config.graph.num_channels, a.duration_us, a.rate, a.seed),
    };
    let report = flops_report(&stream, &config).map_err(|e| e.to_string())?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    } else {
        print!("{}", report.to_kv_text());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, json: bool) -> Result<(), String> {
    let num_classes: u32 = a
        .task
        .strip_prefix("synth")
        .and_then(|k| k.parse().ok())
        .filter(|&k| k >= 2)
        .ok_or_else(|| format!("unknown task '{}' (expected synth<K>, K ≥ 2)", a.task))?;

    let tiny = ModelConfig::tiny();
    let graph = GraphConfig::new(
        a.channels,
        a.graph.r_ch.unwrap_or(tiny.graph.r_ch),
        a.graph.skip_step.unwrap_or(tiny.graph.s),
        a.graph.r_t.unwrap_or(tiny.graph.r_t),
    )
    .map_err(|e| e.to_string())?;
    let dims = parse_dims(&a.dims)?;
    let mut config = ModelConfig {
        graph,
        head_hidden: a.head_hidden,
        num_classes: num_classes as usize,
        pool_mode: PoolMode::parse(&a.pool).expect("clap restricts the values"),
        ..tiny
    };
    config = config.with_conv_dims(&dims);
    config.validate().map_err(|e| e.to_string())?;

    let spec = SynthTaskSpec::band_task(
        a.channels,
        num_classes,
        a.duration_us,
        a.rate,
        mix_seed(a.seed, 0xDA7A),
    );
    let train_set = synth_dataset(&spec, a.train_samples, 0).map_err(|e| e.to_string())?;
    let test_set =
        synth_dataset(&spec, a.test_samples, 1_000_000_007).map_err(|e| e.to_string())?;

    let tc = TrainConfig {
        epochs: a.epochs,
        qat_epochs: a.qat_epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let init = Model::init(config, a.seed).map_err(|e| e.to_string())?;
    let (trained, history) = train_loop(&train_set, &init, &tc).map_err(|e| e.to_string())?;

    let (final_model, quant, qat_history) = if a.qat {
        let (folded, quant, qh) =
            qat_finetune(&train_set, &trained, &tc).map_err(|e| e.to_string())?;
        (folded, Some(quant), qh)
    } else {
        (trained, None, Vec::new())
    };

    let train_acc = accuracy(&train_set, &final_model, quant.as_ref(), Mode::Float)
        .map_err(|e| e.to_string())?;
    let test_acc = accuracy(&test_set, &final_model, quant.as_ref(), Mode::Float)
        .map_err(|e| e.to_string())?;
    let bytes = save_model(&final_model, quant.as_ref()).map_err(|e| e.to_string())?;
    std::fs::write(&a.out, &bytes)
        .map_err(|e| format!("cannot write model {}: {e}", a.out.display()))?;

    if json {
        let hist = |h: &[crate::train::EpochStats]| {
            h.iter()
                .map(|e| {
                    json!({"epoch": e.epoch, "loss": e.loss, "acc": e.accuracy,
                           "lr": e.learning_rate})
                })
                .collect::<Vec<_>>()
        };
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "history": hist(&history),
                "qat_history": hist(&qat_history),
                "train_acc": train_acc,
                "test_acc": test_acc,
                "model": a.out.display().to_string(),
                "model_bytes": bytes.len(),
            }))
            .expect("history serializes")
        );
    } else {
        for e in &history {
            println!(
                "epoch={} loss={:.6} acc={:.4} lr={:.6}",
                e.epoch, e.loss, e.accuracy, e.learning_rate
            );
        }
        for e in &qat_history {
            println!(
                "qat_epoch={} loss={:.6} acc={:.4} lr={:.6}",
                e.epoch, e.loss, e.accuracy, e.learning_rate
            );
        }
        println!("train_acc={train_acc:.4}");
        println!("test_acc={test_acc:.4}");
        println!("model={}", a.out.display());
        println!("model_bytes={}", bytes.len());
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, json: bool) -> Result<(), String> {
    if a.classes < 2 {
        return Err("need at least 2 classes".into());
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| format!("cannot create {}: {e}", a.out.display()))?;
    let spec = SynthTaskSpec::band_task(
        a.channels,
        a.classes,
        a.duration_us,
        a.rate,
        mix_seed(a.seed, 0xDA7A),
    );
    let dataset = synth_dataset(&spec, a.count, 0).map_err(|e| e.to_string())?;
    let mut manifest = String::new();
    let mut entries = Vec::new();
    for (i, (stream, label)) in dataset.iter().enumerate() {
        let name = format!("sample_{i:04}.ev");
        let path = a.out.join(&name);
        std::fs::write(&path, write_event_file(stream))
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        manifest.push_str(&format!("{name}\t{label}\n"));
        entries.push(json!({"file": name, "label": label, "events": stream.events.len()}));
    }
    let manifest_path = a.out.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| format!("cannot write {}: {e}", manifest_path.display()))?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({
                "dir": a.out.display().to_string(),
                "manifest": manifest_path.display().to_string(),
                "files": entries,
            }))
            .expect("entries serialize")
        );
    } else {
        println!("dir={}", a.out.display());
        println!("files={}", a.count);
        println!("manifest={}", manifest_path.display());
    }
    Ok(())
}

fn model_summary_kv(model: &Model, quant: &Option<QuantizedModel>) -> Vec<(String, String)> {
    let c = &model.config;
    let dims = c
        .conv_dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let bits = c
        .bitwidths
        .iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join(",");
    vec![
        ("conv_dims".into(), dims),
        ("bitwidths".into(), bits),
        ("num_channels".into(), c.graph.num_channels.to_string()),
        ("r_ch".into(), c.graph.r_ch.to_string()),
        ("s".into(), c.graph.s.to_string()),
        ("r_t".into(), c.graph.r_t.to_string()),
        ("head_hidden".into(), c.head_hidden.to_string()),
        ("num_classes".into(), c.num_classes.to_string()),
        ("pool_mode".into(), c.pool_mode.as_str().into()),
        ("parallel_mults".into(), c.parallel_mults.to_string()),
        ("clock_hz".into(), c.clock_hz.to_string()),
        ("quantized".into(), u8::from(quant.is_some()).to_string()),
    ]
}

fn event_summary_kv(path: &Path, stream: &EventStream) -> Vec<(String, String)> {
    let n = stream.events.len();
    let duration = stream.duration_us();
    let mean_rate = if duration > 0 {
        n as f64 / (duration as f64 / 1e6)
    } else {
        0.0
    };
    let mut per_channel = vec![0u64; stream.num_channels as usize];
    for ev in &stream.events {
        per_channel[ev.ch as usize] += 1;
    }
    let active = per_channel.iter().filter(|&&c| c > 0).count();
    let busiest = per_channel
        .iter()
        .enumerate()
        .max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut kv = vec![
        ("file".into(), path.display().to_string()),
        ("events".into(), n.to_string()),
        ("channels".into(), stream.num_channels.to_string()),
    ];
    if let Some(label) = stream.label {
        kv.push(("label".into(), label.to_string()));
    }
    kv.extend([
        ("duration_us".into(), duration.to_string()),
        ("mean_rate".into(), format!("{mean_rate:.1}")),
        ("active_channels".into(), active.to_string()),
        ("busiest_channel".into(), busiest.to_string()),
        (
            "busiest_channel_events".into(),
            per_channel[busiest].to_string(),
        ),
        (
            "max_channel_events".into(),
            per_channel.iter().max().copied().unwrap_or(0).to_string(),
        ),
        (
            "mean_channel_events".into(),
            format!("{:.2}", n as f64 / per_channel.len().max(1) as f64),
        ),
    ]);
    kv
}

fn cmd_inspect(a: InspectArgs, json: bool) -> Result<(), String> {
    if a.model.is_none() && a.events.is_empty() {
        return Err("nothing to inspect: pass --model and/or --events".into());
    }
    let mut out_json = serde_json::Map::new();
    if let Some(path) = &a.model {
        let (model, quant) = read_model(path)?;
        let kv = model_summary_kv(&model, &quant);
        if json {
            let m: serde_json::Map<String, serde_json::Value> = kv
                .into_iter()
                .map(|(k, v)| (k, serde_json::Value::String(v)))
                .collect();
            out_json.insert("model".into(), m.into());
        } else {
            for (k, v) in kv {
                println!("{k}={v}");
            }
        }
    }
    let mut event_entries = Vec::new();
    for path in &a.events {
        let stream = read_events(path)?;
        let kv = event_summary_kv(path, &stream);
        if json {
            let m: serde_json::Map<String, serde_json::Value> = kv
                .into_iter()
                .map(|(k, v)| (k, serde_json::Value::String(v)))
                .collect();
            event_entries.push(serde_json::Value::from(m));
        } else {
            for (k, v) in kv {
                println!("{k}={v}");
            }
        }
    }
    if json {
        if !event_entries.is_empty() {
            out_json.insert("events".into(), event_entries.into());
        }
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::Value::from(out_json))
                .expect("summary serializes")
        );
    }
    Ok(())
}
