//! Training loop, previous-epoch score cache, and split evaluation.

use crate::audio::{read_wav, AudioClip};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::events::Event;
use crate::features::{render_frame_labels, MelExtractor, MelSpectrogram};
use crate::losses::DurationStats;
use crate::metrics::{decode_events, duration_bucket_report, BucketRow, EventAccumulator, FScoreReport, SegmentAccumulator, DEFAULT_BUCKETS};
use crate::model::{detect, embed_batch, infer_batch, stack_mels, FrameScores, TsdModel};
use crate::params::{Adam, Session};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Enhancement after warm-up; off means every epoch uses the plain
    /// embedding.
    pub ee_enabled: bool,
    pub seed: u64,
    /// Largest batch used for validation and evaluation forward passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 50,
            ee_enabled: true,
            seed: 0,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, warmup_epochs: usize) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.ee_enabled && self.epochs < warmup_epochs {
            return Err(Error::Config(format!(
                "{} epochs do not cover the {warmup_epochs} warm-up epochs",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Scores of one sample from a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub epoch: usize,
    pub scores: Vec<f64>,
}

/// Most recent training-pass scores per sample, stamped with their epoch.
#[derive(Clone, Debug, Default)]
pub struct ScoreCache {
    entries: HashMap<String, CacheEntry>,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: &str, epoch: usize, scores: Vec<f64>) {
        self.entries.insert(sample_id.to_string(), CacheEntry { epoch, scores });
    }

    /// Entry written in an epoch before `epoch`; entries from the running epoch
    /// are never visible to it.
    pub fn before(&self, sample_id: &str, epoch: usize) -> Option<&CacheEntry> {
        self.entries.get(sample_id).filter(|e| e.epoch < epoch)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A manifest record with features and labels ready for the network.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub sample_id: String,
    pub target_class: String,
    /// Target-class events only.
    pub events: Vec<Event>,
    pub is_negative: bool,
    pub clip_duration: f64,
    pub reference: MelSpectrogram,
    pub mixture: MelSpectrogram,
    /// Frame labels at the network's output resolution.
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub sample_id: String,
    pub message: String,
}

/// Crops or pads to exactly `duration` seconds: silence for mixtures, looping
/// for references.
fn fit_length(clip: &AudioClip, duration: f64, looped: bool) -> AudioClip {
    let n = (duration * clip.sample_rate as f64).round() as usize;
    let mut samples = Vec::with_capacity(n);
    if looped && !clip.is_empty() {
        samples.extend(clip.samples.iter().cycle().take(n));
    } else {
        samples.extend(clip.samples.iter().take(n));
        samples.resize(n, 0.0);
    }
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Loads audio, extracts log-mels and renders labels for one split. Records
/// whose audio cannot be read are returned as errors.
pub fn prepare_split(manifest: &DatasetManifest, split: Split, run: &RunConfig) -> Result<(Vec<PreparedRecord>, Vec<RecordError>)> {
    let mel = MelExtractor::new(run.features.clone())?;
    let clip_duration = run.data.clip_duration;
    let ref_duration = run.data.bank.reference_duration;
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for r in manifest.split(split) {
        let load = || -> Result<PreparedRecord> {
            let mix = fit_length(&read_wav(manifest.path(&r.mixture_path))?, clip_duration, false);
            let reference = fit_length(&read_wav(manifest.path(&r.reference_path))?, ref_duration, true);
            let mixture = mel.extract(&mix)?;
            let t_prime = run.model.t_prime(mixture.frames);
            let events: Vec<Event> = r
                .target_events()
                .into_iter()
                .filter_map(|mut e| {
                    e.offset = e.offset.min(clip_duration);
                    (e.onset < e.offset).then_some(e)
                })
                .collect();
            let labels = render_frame_labels(&events, clip_duration, t_prime)?.values;
            Ok(PreparedRecord {
                sample_id: r.sample_id.clone(),
                target_class: r.target_class.clone(),
                events,
                is_negative: r.is_negative,
                clip_duration,
                reference: mel.extract(&reference)?,
                mixture,
                labels,
            })
        };
        match load() {
            Ok(p) => ok.push(p),
            Err(e) => errors.push(RecordError {
                sample_id: r.sample_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok((ok, errors))
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Training-pass scores per sample.
    pub scores: Vec<Vec<f64>>,
}

/// Per-sample loss multipliers.
fn sample_weights(records: &[&PreparedRecord], run: &RunConfig, stats: Option<&DurationStats>) -> Result<Vec<f64>> {
    let empty = DurationStats::default();
    let stats = stats.unwrap_or(&empty);
    records.iter().map(|r| run.loss.sample_weight(&r.target_class, stats)).collect()
}

fn batch_tensors(records: &[&PreparedRecord]) -> Result<(Tensor, Tensor, Tensor)> {
    let refs: Vec<&MelSpectrogram> = records.iter().map(|r| &r.reference).collect();
    let mixes: Vec<&MelSpectrogram> = records.iter().map(|r| &r.mixture).collect();
    let t = records[0].labels.len();
    let mut labels = Vec::with_capacity(records.len() * t);
    for r in records {
        if r.labels.len() != t {
            return Err(Error::Shape(format!("{}: {} label frames, batch has {t}", r.sample_id, r.labels.len())));
        }
        labels.extend_from_slice(&r.labels);
    }
    Ok((stack_mels(&refs)?, stack_mels(&mixes)?, Tensor::from_parts(vec![records.len(), t], labels)))
}

/// One optimizer step. Returns a numeric error, and leaves the model
/// untouched, if the loss or any gradient is not finite.
pub fn train_step(
    model: &mut TsdModel,
    opt: &mut Adam,
    records: &[&PreparedRecord],
    cached: &[Option<&[f64]>],
    enhance_active: bool,
    run: &RunConfig,
    stats: Option<&DurationStats>,
) -> Result<StepOutput> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weights = sample_weights(records, run, stats)?;
    let (refs, mixes, labels) = batch_tensors(records)?;
    let loss_fn = run.loss.frame_loss();
    let g = Graph::new();
    let s = Session::training(&g, &model.params);
    let r = g.constant(refs);
    let m = g.constant(mixes);
    let emb = embed_batch(&s, &model.config, r, m, cached, &run.enhancement, enhance_active)?;
    let probs = detect(&s, &model.config, m, emb)?;
    let loss = loss_fn.on_tape(&g, probs, &labels, &weights)?;
    let value = g.value(loss).item();
    let p = g.value(probs);
    let t = p.dim(1);
    let scores: Vec<Vec<f64>> = p.data().chunks(t).map(|c| c.to_vec()).collect();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let mut grads = g.backward(loss);
    let named = s.collect_grads(&mut grads);
    if let Some((name, _)) = named.iter().find(|(_, t)| !t.all_finite()) {
        return Err(Error::Numeric(format!("gradient of {name} is not finite")));
    }
    let bn = s.take_bn_updates();
    drop(s);
    opt.step(&mut model.params, &named)?;
    for (prefix, mean, var) in bn {
        model.params.update_running_stats(&prefix, &mean, &var, model.config.bn_momentum)?;
    }
    Ok(StepOutput { loss: value, scores })
}

/// What the trainer saw for one batch.
#[derive(Clone, Debug)]
pub struct BatchInfo {
    pub epoch: usize,
    pub batch: usize,
    pub sample_ids: Vec<String>,
    /// Epoch stamp of the cache entry used per sample, if any.
    pub cache_epochs: Vec<Option<usize>>,
    pub enhance_active: bool,
    pub loss: f64,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub segment_f: Option<f64>,
    pub event_f: Option<f64>,
    /// Whether validation used two-pass inference.
    pub two_pass: Option<bool>,
}

pub trait TrainObserver {
    fn on_batch(&mut self, _info: &BatchInfo) {}
    fn on_epoch(&mut self, _log: &EpochLog) {}
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    /// Checkpoint with the best validation segment-F (the last one without a
    /// validation split).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

fn enhance_active(run: &RunConfig, epoch: usize) -> bool {
    run.train.ee_enabled && epoch >= run.enhancement.warmup_epochs
}

fn dump_divergence(dir: &Path, epoch: usize, batch: usize, records: &[&PreparedRecord], model: &TsdModel, detail: &str) -> Result<PathBuf> {
    let norms: std::collections::BTreeMap<&String, f64> = model.params.params().map(|(n, t)| (n, t.norm())).collect();
    let dump = serde_json::json!({
        "epoch": epoch,
        "batch": batch,
        "detail": detail,
        "sample_ids": records.iter().map(|r| &r.sample_id).collect::<Vec<_>>(),
        "target_classes": records.iter().map(|r| &r.target_class).collect::<Vec<_>>(),
        "parameter_norms": norms,
    });
    let path = dir.join(format!("diverged_e{epoch}_b{batch}.json"));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Trains on the manifest's train split, validating on its val split after
/// every epoch. With `out_dir`, writes the metric log, best and last
/// checkpoints, and a diagnostic file if training diverges.
pub fn train(
    manifest: &DatasetManifest,
    run: &RunConfig,
    stats: Option<&DurationStats>,
    out_dir: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    run.validate()?;
    let (train_set, errors) = prepare_split(manifest, Split::Train, run)?;
    if let Some(e) = errors.first() {
        return Err(Error::InvalidInput(format!("{}: {}", e.sample_id, e.message)));
    }
    if train_set.is_empty() {
        return Err(Error::InvalidInput("manifest has no training records".into()));
    }
    let (val_set, _) = prepare_split(manifest, Split::Val, run)?;
    train_prepared(&train_set, &val_set, run, stats, out_dir, observer)
}

/// [`train`] on records that are already loaded.
pub fn train_prepared(
    train_set: &[PreparedRecord],
    val_set: &[PreparedRecord],
    run: &RunConfig,
    stats: Option<&DurationStats>,
    out_dir: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    run.validate()?;
    // fail early rather than after the first epoch
    sample_weights(&train_set.iter().collect::<Vec<_>>(), run, stats)?;
    let config_hash = run.hash()?;
    let mut model = TsdModel::new(run.model.clone(), run.train.seed)?;
    let mut opt = Adam::new(run.train.lr);
    let mut cache = ScoreCache::new();
    let mut log = Vec::new();
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(LOG_FILE);
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut emit = |entry: EpochLog, observer: &mut dyn TrainObserver| -> Result<()> {
        if let Some((f, p)) = log_file.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(p.as_path(), e))?;
        }
        observer.on_epoch(&entry);
        log.push(entry);
        Ok(())
    };
    let snapshot = |model: &TsdModel, opt: &Adam, epoch: usize| {
        Checkpoint::new(
            model.clone(),
            opt.clone(),
            epoch,
            config_hash.clone(),
            run.features.clone(),
            run.enhancement.clone(),
            run.train.ee_enabled && epoch >= run.enhancement.warmup_epochs,
        )
    };

    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..run.train.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ (epoch as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let active = enhance_active(run, epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for (bi, chunk) in order.chunks(run.train.batch_size).enumerate() {
            let records: Vec<&PreparedRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let entries: Vec<Option<&CacheEntry>> = records.iter().map(|r| cache.before(&r.sample_id, epoch)).collect();
            let slots: Vec<Option<&[f64]>> = entries.iter().map(|e| e.map(|e| e.scores.as_slice())).collect();
            let out = match train_step(&mut model, &mut opt, &records, &slots, active, run, stats) {
                Ok(o) => o,
                Err(Error::Numeric(detail)) => {
                    let detail = match out_dir {
                        Some(d) => {
                            let p = dump_divergence(d, epoch, bi, &records, &model, &detail)?;
                            format!("{detail} (diagnostics in {})", p.display())
                        }
                        None => detail,
                    };
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                        detail,
                    });
                }
                Err(e) => return Err(e),
            };
            observer.on_batch(&BatchInfo {
                epoch,
                batch: bi,
                sample_ids: records.iter().map(|r| r.sample_id.clone()).collect(),
                cache_epochs: entries.iter().map(|e| e.map(|e| e.epoch)).collect(),
                enhance_active: active,
                loss: out.loss,
            });
            for (r, s) in records.iter().zip(out.scores) {
                cache.insert(&r.sample_id, epoch, s);
            }
            loss_sum += out.loss * records.len() as f64;
            seen += records.len();
        }
        emit(
            EpochLog {
                epoch,
                split: "train".into(),
                loss: loss_sum / seen as f64,
                segment_f: None,
                event_f: None,
                two_pass: None,
            },
            observer,
        )?;

        let ckpt = snapshot(&model, &opt, epoch);
        if !val_set.is_empty() {
            let two_pass = active && run.enhancement.two_pass;
            let eval = evaluate_prepared(&model, val_set, run, two_pass, stats)?;
            let seg = eval.report.segment.macro_f;
            emit(
                EpochLog {
                    epoch,
                    split: "val".into(),
                    loss: eval.report.loss,
                    segment_f: Some(seg),
                    event_f: Some(eval.report.event.macro_f),
                    two_pass: Some(two_pass),
                },
                observer,
            )?;
            if best.as_ref().is_none_or(|(b, _)| seg > *b) {
                if let Some(d) = out_dir {
                    ckpt.save(&d.join(BEST_CHECKPOINT))?;
                }
                best = Some((seg, ckpt.clone()));
            }
        }
        if let Some(d) = out_dir {
            ckpt.save(&d.join(LAST_CHECKPOINT))?;
        }
    }
    let last = snapshot(&model, &opt, run.train.epochs.saturating_sub(1));
    let best = match best {
        Some((_, b)) => b,
        None => {
            if let Some(d) = out_dir {
                last.save(&d.join(BEST_CHECKPOINT))?;
            }
            last.clone()
        }
    };
    Ok(TrainOutcome { best, last, log })
}

/// Scores and decoded events of one evaluated clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub target_class: String,
    pub scores: FrameScores,
    pub events: Vec<Event>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_clips: usize,
    pub two_pass: bool,
    /// Mean frame loss under the configured loss, without duration weights.
    pub loss: f64,
    pub segment: FScoreReport,
    pub event: FScoreReport,
    pub segment_buckets: Option<Vec<BucketRow>>,
    pub event_buckets: Option<Vec<BucketRow>>,
    /// Records that could not be evaluated.
    pub errors: Vec<RecordError>,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Scores every record and accumulates both F-measures.
pub fn evaluate_prepared(
    model: &TsdModel,
    records: &[PreparedRecord],
    run: &RunConfig,
    two_pass: bool,
    stats: Option<&DurationStats>,
) -> Result<Evaluation> {
    let mut seg = SegmentAccumulator::new(run.metrics.segment);
    let mut evt = EventAccumulator::new(run.metrics.collar, run.metrics.offset_ratio);
    let loss_fn = run.loss.frame_loss();
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(records.len());
    for chunk in records.chunks(run.train.eval_batch_size) {
        let refs: Vec<&MelSpectrogram> = chunk.iter().map(|r| &r.reference).collect();
        let mixes: Vec<&MelSpectrogram> = chunk.iter().map(|r| &r.mixture).collect();
        let out = infer_batch(model, &refs, &mixes, &run.enhancement, two_pass)?;
        for (r, inf) in chunk.iter().zip(out) {
            let scores = inf.scores().clone();
            loss_sum += loss_fn.mean(&scores.values, &r.labels)?;
            let mut events = decode_events(&scores, &run.decoding, &r.target_class);
            for e in &mut events {
                e.offset = e.offset.min(r.clip_duration);
            }
            seg.add_clip(&r.events, &events, r.clip_duration);
            evt.add_clip(&r.events, &events);
            predictions.push(Prediction {
                sample_id: r.sample_id.clone(),
                target_class: r.target_class.clone(),
                scores,
                events,
            });
        }
    }
    let segment = seg.report();
    let event = evt.report();
    let buckets = |rep: &FScoreReport| stats.map(|s| duration_bucket_report(rep, s, &DEFAULT_BUCKETS)).transpose();
    let report = EvalReport {
        n_clips: records.len(),
        two_pass,
        loss: if records.is_empty() { 0.0 } else { loss_sum / records.len() as f64 },
        segment_buckets: buckets(&segment)?,
        event_buckets: buckets(&event)?,
        segment,
        event,
        errors: vec![],
    };
    Ok(Evaluation { report, predictions })
}

/// Evaluates a checkpoint on one split. Two-pass inference runs only when
/// requested and the checkpoint was trained with enhancement. Unreadable
/// records are reported and skipped.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    split: Split,
    run: &RunConfig,
    two_pass: bool,
    stats: Option<&DurationStats>,
) -> Result<Evaluation> {
    let mut run = run.clone();
    run.features = ckpt.meta.features.clone();
    run.model = ckpt.model.config.clone();
    run.enhancement = ckpt.meta.enhancement.clone();
    let (records, errors) = prepare_split(manifest, split, &run)?;
    let two_pass = two_pass && ckpt.meta.ee_trained;
    let mut eval = evaluate_prepared(&ckpt.model, &records, &run, two_pass, stats)?;
    eval.report.errors = errors;
    Ok(eval)
}
