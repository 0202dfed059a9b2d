//! `tsd` command surface: build-data, train, eval, detect, sweep.

pub mod report;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use tsd_core::audio::read_wav;
use tsd_core::checkpoint::Checkpoint;
use tsd_core::config::RunConfig;
use tsd_core::dataset::{self, DatasetManifest, Split, STATS_FILE};
use tsd_core::events::Event;
use tsd_core::features::MelExtractor;
use tsd_core::losses::DurationStats;
use tsd_core::metrics::{decode_events, duration_bucket_report, EventAccumulator, SegmentAccumulator, DEFAULT_BUCKETS};
use tsd_core::model::{infer_batch, FrameScores, TIME_POOL_TOTAL};
use tsd_core::training::{self, EpochLog, EvalReport, Prediction, RecordError, TrainObserver};
use tsd_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "tsd", version, about = "Reference-conditioned target sound detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize (or load) an event bank and write mixtures, references and the manifest.
    BuildData(BuildDataArgs),
    /// Train a detector on a built dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or a file of frame scores, on one split.
    Eval(EvalArgs),
    /// Detect the reference's sound class in one mixture.
    Detect(DetectArgs),
    /// Train and evaluate once per hyperparameter value.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration layered over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Miniature profile: 8 mel bands, narrow layers, 4 classes, 200/50/50 records, 20 epochs.
    #[arg(long)]
    pub mini: bool,
    /// Override any configuration key, e.g. `--set enhancement.top_k=3`. Applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct DataFlags {
    /// Number of synthetic sound classes [default: 4].
    #[arg(long)]
    pub classes: Option<usize>,
    /// Records per split as train,val,test [default: 200,50,50].
    #[arg(long, value_name = "N,N,N")]
    pub sizes: Option<String>,
    /// Fraction of records whose mixture lacks the reference class [default: 0.2].
    #[arg(long)]
    pub negative_ratio: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelFlags {
    /// Training epochs [default: 50].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 64].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs trained with the plain embedding before enhancement [default: 10].
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Mixture frames used for embedding enhancement [default: 2].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Score threshold of embedding enhancement [default: 0.7].
    #[arg(long)]
    pub tau: Option<f64>,
    /// Duration-weight strength of the Du-Focal loss [default: 1.5].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Positive-class weight of the focal loss [default: 0.65].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Focusing exponent of the focal loss [default: 2].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Frame loss: bce, focal or du_focal [default: du_focal].
    #[arg(long)]
    pub loss: Option<String>,
    /// Never enhance the embedding (warm-up lasts the whole run).
    #[arg(long)]
    pub no_ee: bool,
    /// Initialization and data-order seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct DecodeFlags {
    /// Frame score threshold [default: 0.5].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Median filter length in frames, odd [default: 5].
    #[arg(long)]
    pub median_window: Option<usize>,
    /// Segment length of the segment-based metric in seconds [default: 1.0].
    #[arg(long)]
    pub segment: Option<f64>,
    /// Onset collar of the event-based metric in seconds [default: 0.2].
    #[arg(long)]
    pub collar: Option<f64>,
    /// Offset tolerance as a fraction of the reference event length [default: 0.2].
    #[arg(long)]
    pub offset_ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BuildDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of class folders, each with events/ and references/ WAVs, instead of the synthetic bank.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Seed of both the synthetic bank and the mixtures [default: 7].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the log, checkpoints and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "scores", conflicts_with = "scores")]
    pub checkpoint: Option<PathBuf>,
    /// JSON Lines of frame scores ({"sample_id", "values"}, or predictions.jsonl from eval) to score instead of a checkpoint.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Skip the second, enhanced detection pass.
    #[arg(long)]
    pub single_pass: bool,
    /// Output directory for reports and charts.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Mixture WAV to search.
    #[arg(long)]
    pub mixture: PathBuf,
    /// Reference WAV of the target sound.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for events.json and scores.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Label written on detected events.
    #[arg(long, default_value = "target")]
    pub class: String,
    /// Skip the second, enhanced detection pass.
    #[arg(long)]
    pub single_pass: bool,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Dataset directory written by build-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Sweep directory; each point trains in its own subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Parameter to vary: tau, alpha, beta, or alpha,beta for a grid.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values of the (first) parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Comma-separated values of the second parameter of a grid.
    #[arg(long, value_delimiter = ',')]
    pub values2: Vec<f64>,
    /// Split scored for each point.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Defaults, then the profile, then the file, then `--set` pairs.
pub fn base_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = if args.mini { RunConfig::mini() } else { RunConfig::default() };
    if let Some(path) = &args.config {
        run = run.overlay_file(path)?;
    }
    Ok(run)
}

fn apply_sets(mut run: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        run = run.set(k.trim(), v.trim())?;
    }
    run.validate()?;
    Ok(run)
}

fn apply_data(run: &mut RunConfig, f: &DataFlags) -> Result<()> {
    if let Some(c) = f.classes {
        run.data.bank.n_classes = c;
    }
    if let Some(s) = &f.sizes {
        let v: Vec<usize> = s
            .split(',')
            .map(|x| x.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| usage(format!("--sizes expects three counts, got `{s}`")))?;
        run.data.sizes = v.try_into().map_err(|_| usage(format!("--sizes expects three counts, got `{s}`")))?;
    }
    if let Some(r) = f.negative_ratio {
        run.data.negative_ratio = r;
    }
    Ok(())
}

fn apply_model(run: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    let t = &mut run.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if f.no_ee {
        t.ee_enabled = false;
    }
    let e = &mut run.enhancement;
    if let Some(v) = f.warmup {
        e.warmup_epochs = v;
    }
    if let Some(v) = f.top_k {
        e.top_k = v;
    }
    if let Some(v) = f.tau {
        e.tau = v;
    }
    let l = &mut run.loss;
    if let Some(v) = f.alpha {
        l.duration.alpha = v;
    }
    if let Some(v) = f.beta {
        l.focal.beta = v;
    }
    if let Some(v) = f.gamma {
        l.focal.gamma = v;
    }
    if let Some(v) = &f.loss {
        let name = v.replace('_', "-");
        *run = run.set("loss.kind", &format!("\"{name}\""))?;
    }
    Ok(())
}

fn apply_decode(run: &mut RunConfig, f: &DecodeFlags) {
    if let Some(v) = f.threshold {
        run.decoding.threshold = v;
    }
    if let Some(v) = f.median_window {
        run.decoding.median_window = v;
    }
    if let Some(v) = f.segment {
        run.metrics.segment = v;
    }
    if let Some(v) = f.collar {
        run.metrics.collar = v;
    }
    if let Some(v) = f.offset_ratio {
        run.metrics.offset_ratio = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_stats(data: &Path) -> Result<Option<DurationStats>> {
    let p = data.join(STATS_FILE);
    if p.exists() {
        DurationStats::load(&p).map(Some)
    } else {
        Ok(None)
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse().map_err(|_| usage(format!("unknown split `{s}` (train, val, test)")))
}

pub fn cmd_build_data(a: &BuildDataArgs) -> Result<String> {
    let mut run = base_config(&a.config)?;
    apply_data(&mut run, &a.data)?;
    if let Some(s) = a.seed {
        run.data.seed = s;
        run.data.bank.seed = s;
    }
    let run = apply_sets(run, &a.config)?;
    let bank = match &a.bank {
        Some(dir) => dataset::load_event_bank(dir)?,
        None => dataset::synthesize_event_bank_with(&run.data.bank)?,
    };
    create_dir(&a.out)?;
    run.save(&a.out)?;
    let m = dataset::build_dataset(&bank, &run.data, &a.out)?;
    let hash = dataset::manifest_hash(&a.out)?;
    let neg = m.records.iter().filter(|r| r.is_negative).count();
    Ok(format!(
        "{} records ({} negative) over {} classes\nmanifest sha256 {hash}\n",
        m.records.len(),
        neg,
        bank.classes.len()
    ))
}

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, log: &EpochLog) {
        let mut line = format!("epoch {:>3} {:<5} loss {:.5}", log.epoch, log.split, log.loss);
        if let (Some(s), Some(e)) = (log.segment_f, log.event_f) {
            line.push_str(&format!("  segment-F {:.3}  event-F {:.3}", s, e));
        }
        eprintln!("{line}");
    }
}

fn train_config(model: &ModelFlags, decode: &DecodeFlags, config: &ConfigArgs) -> Result<RunConfig> {
    let mut run = base_config(config)?;
    apply_model(&mut run, model)?;
    apply_decode(&mut run, decode);
    apply_sets(run, config)
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let run = train_config(&a.model, &a.decode, &a.config)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let stats = load_stats(&a.data)?;
    create_dir(&a.out)?;
    run.save(&a.out)?;
    let out = training::train(&manifest, &run, stats.as_ref(), Some(&a.out), &mut Progress)?;
    let best = out.log.iter().filter(|l| l.split == "val").max_by(|x, y| {
        x.segment_f.partial_cmp(&y.segment_f).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut msg = format!("trained {} epochs; checkpoints in {}\n", run.train.epochs, a.out.display());
    if let Some(b) = best {
        msg.push_str(&format!(
            "best validation segment-F {:.3} (event-F {:.3})\n",
            b.segment_f.unwrap_or(0.0),
            b.event_f.unwrap_or(0.0)
        ));
    }
    Ok(msg)
}

#[derive(Deserialize)]
struct ScoreLine {
    sample_id: String,
    #[serde(default)]
    values: Option<Vec<f64>>,
    #[serde(default)]
    frame_resolution: Option<f64>,
    /// Nested form written by `eval` into predictions.jsonl.
    #[serde(default)]
    scores: Option<FrameScores>,
}

/// Scores precomputed predictions against the manifest annotations.
fn score_file(path: &Path, manifest: &DatasetManifest, split: Split, run: &RunConfig, stats: Option<&DurationStats>) -> Result<(EvalReport, Vec<Prediction>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let default_res = run.features.frame_seconds() * TIME_POOL_TOTAL as f64;
    let mut given = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s: ScoreLine = serde_json::from_str(line).map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let scores = match (s.scores, s.values) {
            (Some(f), _) => f,
            (None, Some(values)) => FrameScores {
                values,
                frame_resolution: s.frame_resolution.unwrap_or(default_res),
            },
            (None, None) => return Err(Error::InvalidInput(format!("{}:{}: no `values`", path.display(), i + 1))),
        };
        given.insert(s.sample_id, scores);
    }
    let dur = run.data.clip_duration;
    let mut seg = SegmentAccumulator::new(run.metrics.segment);
    let mut evt = EventAccumulator::new(run.metrics.collar, run.metrics.offset_ratio);
    let mut errors = Vec::new();
    let mut preds = Vec::new();
    for r in manifest.split(split) {
        let Some(scores) = given.remove(&r.sample_id) else {
            errors.push(RecordError {
                sample_id: r.sample_id.clone(),
                message: "no scores".into(),
            });
            continue;
        };
        let truth: Vec<Event> = r.target_events();
        let mut hyp = decode_events(&scores, &run.decoding, &r.target_class);
        for e in &mut hyp {
            e.offset = e.offset.min(dur);
        }
        seg.add_clip(&truth, &hyp, dur);
        evt.add_clip(&truth, &hyp);
        preds.push(Prediction {
            sample_id: r.sample_id.clone(),
            target_class: r.target_class.clone(),
            scores,
            events: hyp,
        });
    }
    let segment = seg.report();
    let event = evt.report();
    let buckets = |rep| stats.map(|s| duration_bucket_report(rep, s, &DEFAULT_BUCKETS)).transpose();
    Ok((
        EvalReport {
            n_clips: preds.len(),
            two_pass: false,
            loss: 0.0,
            segment_buckets: buckets(&segment)?,
            event_buckets: buckets(&event)?,
            segment,
            event,
            errors,
        },
        preds,
    ))
}

/// Text form of an evaluation report.
pub fn render_report(rep: &EvalReport) -> String {
    let mut s = format!("clips {}  two-pass {}\n\n", rep.n_clips, rep.two_pass);
    s.push_str(&report::fscore_table("segment-based", &rep.segment));
    s.push('\n');
    s.push_str(&report::fscore_table("event-based", &rep.event));
    if let (Some(sb), Some(eb)) = (&rep.segment_buckets, &rep.event_buckets) {
        s.push('\n');
        s.push_str(&report::bucket_table("segment-F by mean event duration", sb));
        s.push('\n');
        s.push_str(&report::bucket_table("event-F by mean event duration", eb));
    }
    if !rep.errors.is_empty() {
        s.push_str(&format!("\n{} records failed:\n", rep.errors.len()));
        for e in &rep.errors {
            s.push_str(&format!("  {}: {}\n", e.sample_id, e.message));
        }
    }
    s
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const BUCKET_CHART: &str = "duration_buckets.svg";
pub const PREDICTIONS: &str = "predictions.jsonl";

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let mut run = base_config(&a.config)?;
    apply_decode(&mut run, &a.decode);
    let run = apply_sets(run, &a.config)?;
    let split = parse_split(&a.split)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let stats = load_stats(&a.data)?;
    let (rep, preds) = match (&a.checkpoint, &a.scores) {
        (Some(ck), _) => {
            let ckpt = Checkpoint::load(ck)?;
            let e = training::evaluate(&ckpt, &manifest, split, &run, !a.single_pass, stats.as_ref())?;
            (e.report, e.predictions)
        }
        (None, Some(path)) => score_file(path, &manifest, split, &run, stats.as_ref())?,
        (None, None) => return Err(usage("eval needs --checkpoint or --scores")),
    };
    create_dir(&a.out)?;
    run.save(&a.out)?;
    write(&a.out.join(REPORT_JSON), serde_json::to_vec_pretty(&rep)?)?;
    let text = render_report(&rep);
    write(&a.out.join(REPORT_TXT), &text)?;
    let mut lines = Vec::new();
    for p in &preds {
        serde_json::to_writer(&mut lines, p)?;
        lines.push(b'\n');
    }
    write(&a.out.join(PREDICTIONS), lines)?;
    if let (Some(sb), Some(eb)) = (&rep.segment_buckets, &rep.event_buckets) {
        report::bucket_chart(&a.out.join(BUCKET_CHART), sb, eb)?;
    }
    Ok(text)
}

pub const EVENTS_JSON: &str = "events.json";
pub const SCORES_CSV: &str = "scores.csv";

pub fn cmd_detect(a: &DetectArgs) -> Result<String> {
    let mut run = base_config(&a.config)?;
    apply_decode(&mut run, &a.decode);
    let mut run = apply_sets(run, &a.config)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    run.features = ckpt.meta.features.clone();
    run.model = ckpt.model.config.clone();
    run.enhancement = ckpt.meta.enhancement.clone();
    let mixture = read_wav(&a.mixture)?;
    let reference = read_wav(&a.reference)?;
    let mel = MelExtractor::new(run.features.clone())?;
    let m = mel.extract(&mixture)?;
    let r = mel.extract(&reference)?;
    if run.model.t_prime(m.frames) == 0 || run.model.t_prime(r.frames) == 0 {
        return Err(Error::InvalidInput("mixture and reference must each span at least 4 analysis frames".into()));
    }
    let two_pass = !a.single_pass && ckpt.meta.ee_trained && run.enhancement.two_pass;
    let inf = infer_batch(&ckpt.model, &[&r], &[&m], &run.enhancement, two_pass)?;
    let scores = inf[0].scores();
    let mut events = decode_events(scores, &run.decoding, &a.class);
    for e in &mut events {
        e.onset = (e.onset * 1000.0).round() / 1000.0;
        e.offset = (e.offset.min(mixture.duration()) * 1000.0).round() / 1000.0;
    }
    create_dir(&a.out)?;
    run.save(&a.out)?;
    let json = serde_json::to_string_pretty(&events)?;
    write(&a.out.join(EVENTS_JSON), &json)?;
    let mut csv = String::from("time_s,score\n");
    for (i, v) in scores.values.iter().enumerate() {
        csv.push_str(&format!("{:.3},{v:.6}\n", i as f64 * scores.frame_resolution));
    }
    write(&a.out.join(SCORES_CSV), csv)?;
    Ok(json + "\n")
}

pub const SWEEP_TXT: &str = "sweep.txt";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";

fn sweep_key(name: &str) -> Result<&'static str> {
    Ok(match name {
        "tau" => "enhancement.tau",
        "alpha" => "loss.duration.alpha",
        "beta" => "loss.focal.beta",
        other => return Err(usage(format!("cannot sweep `{other}` (tau, alpha, beta)"))),
    })
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<String> {
    let base = train_config(&a.model, &a.decode, &a.config)?;
    let split = parse_split(&a.split)?;
    let names: Vec<&str> = a.param.split(',').map(str::trim).collect();
    let keys = names.iter().map(|n| sweep_key(n)).collect::<Result<Vec<_>>>()?;
    let grid: Vec<Vec<f64>> = match keys.len() {
        1 => {
            if !a.values2.is_empty() {
                return Err(usage("--values2 needs a two-parameter --param"));
            }
            a.values.iter().map(|v| vec![*v]).collect()
        }
        2 => {
            if a.values2.is_empty() {
                return Err(usage("a two-parameter sweep needs --values2"));
            }
            a.values.iter().flat_map(|x| a.values2.iter().map(move |y| vec![*x, *y])).collect()
        }
        _ => return Err(usage("--param takes one parameter or a pair")),
    };
    let mut points = grid.clone();
    points.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    points.dedup();

    let manifest = DatasetManifest::load(&a.data)?;
    let stats = load_stats(&a.data)?;
    create_dir(&a.out)?;
    base.save(&a.out)?;
    let mut rows = Vec::new();
    for p in &points {
        let mut run = base.clone();
        let mut tag = Vec::new();
        for ((k, n), v) in keys.iter().zip(&names).zip(p) {
            run = run.set(k, &format!("{v:?}"))?;
            tag.push(format!("{n}={v}"));
        }
        run.validate()?;
        let dir = a.out.join(tag.join("_"));
        create_dir(&dir)?;
        run.save(&dir)?;
        eprintln!("sweep point {}", tag.join(" "));
        let out = training::train(&manifest, &run, stats.as_ref(), Some(&dir), &mut Progress)?;
        let eval = training::evaluate(&out.best, &manifest, split, &run, true, stats.as_ref())?;
        write(&dir.join(REPORT_JSON), serde_json::to_vec_pretty(&eval.report)?)?;
        rows.push(report::SweepRow {
            values: names.iter().map(|n| n.to_string()).zip(p.iter().copied()).collect(),
            segment_f: eval.report.segment.macro_f,
            event_f: eval.report.event.macro_f,
        });
    }
    let text = report::sweep_table(&rows);
    write(&a.out.join(SWEEP_TXT), &text)?;
    write(&a.out.join(SWEEP_JSON), serde_json::to_vec_pretty(&rows)?)?;
    let mut csv = names.join(",") + ",segment_f,event_f\n";
    for r in &rows {
        let vals: Vec<String> = r.values.iter().map(|v| v.1.to_string()).collect();
        csv.push_str(&format!("{},{},{}\n", vals.join(","), r.segment_f, r.event_f));
    }
    write(&a.out.join(SWEEP_CSV), csv)?;
    if keys.len() == 2 {
        let mut xs = a.values.clone();
        let mut ys = a.values2.clone();
        for v in [&mut xs, &mut ys] {
            v.sort_by(|p, q| p.partial_cmp(q).unwrap_or(std::cmp::Ordering::Equal));
            v.dedup();
        }
        let lookup = |i: usize, j: usize, seg: bool| {
            rows.iter()
                .find(|r| r.values[0].1 == xs[i] && r.values[1].1 == ys[j])
                .map(|r| if seg { r.segment_f } else { r.event_f })
                .unwrap_or(0.0)
        };
        report::heatmap(&a.out.join("sweep_segment.svg"), "segment-F", (names[0], &xs), (names[1], &ys), |i, j| lookup(i, j, true))?;
        report::heatmap(&a.out.join("sweep_event.svg"), "event-F", (names[0], &xs), (names[1], &ys), |i, j| lookup(i, j, false))?;
    }
    Ok(text)
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match &cli.command {
        Command::BuildData(a) => cmd_build_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let msg = e.to_string();
            let _ = writeln!(err, "error: {msg}");
            let _ = serde_json::to_writer(&mut *err, &ErrorLine { error: &msg });
            let _ = writeln!(err);
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
