//! Corpus construction: event banks, mixture synthesis, and the on-disk
//! manifest of (mixture, reference, annotation) records.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.jsonl          one ManifestRecord per line
//! duration_stats.json     {class: mean event seconds} over the train split
//! audio/{split}/{id}_mix.wav
//! audio/{split}/{id}_ref.wav
//! ```

use crate::audio::{read_wav, write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::events::{validate_events, Event};
use crate::features::{hz_to_mel, mel_to_hz};
use crate::losses::DurationStats;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Instance `i` of a class pool belongs to this split (3:1:1).
    fn owns(self, i: usize) -> bool {
        match i % 5 {
            0..=2 => self == Split::Train,
            3 => self == Split::Val,
            _ => self == Split::Test,
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SPLITS
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// Audio of one class: isolated event instances and reference recordings.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAudio {
    pub events: Vec<AudioClip>,
    pub references: Vec<AudioClip>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventBank {
    pub classes: Vec<String>,
    pub audio: BTreeMap<String, ClassAudio>,
}

impl EventBank {
    pub fn class(&self, name: &str) -> Result<&ClassAudio> {
        self.audio
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("class `{name}` not in bank")))
    }

    fn validate(&self) -> Result<()> {
        for c in &self.classes {
            let a = self.class(c)?;
            if a.events.is_empty() || a.references.is_empty() {
                return Err(Error::Capacity(format!("class `{c}` needs event and reference clips")));
            }
        }
        Ok(())
    }
}

/// Event durations (seconds) cycled over classes by default: transient,
/// short, medium and long.
pub const DURATION_PRESETS: [(f64, f64); 4] = [(0.3, 0.9), (1.0, 2.5), (2.5, 5.0), (5.0, 8.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub n_classes: usize,
    pub events_per_class: usize,
    pub references_per_class: usize,
    pub reference_duration: f64,
    /// Overrides the per-class duration presets when set.
    pub duration_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            events_per_class: 30,
            references_per_class: 10,
            reference_duration: 4.0,
            duration_range: None,
            seed: 7,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.events_per_class == 0 || self.references_per_class == 0 || !(self.reference_duration > 0.0) {
            return Err(Error::Config("bank needs event and reference clips".into()));
        }
        if let Some((lo, hi)) = self.duration_range {
            if !(lo > 0.0 && lo <= hi && hi <= 10.0) {
                return Err(Error::Config(format!("duration range ({lo}, {hi}) outside (0, 10]")));
            }
        }
        Ok(())
    }

    pub fn durations(&self, class: usize) -> (f64, f64) {
        self.duration_range.unwrap_or(DURATION_PRESETS[class % DURATION_PRESETS.len()])
    }
}

pub fn class_name(i: usize) -> String {
    format!("class{i:02}")
}

/// Frequency band `[lo, hi]` in Hz of synthetic class `c` out of `n`: equal
/// slices of the mel axis between 150 Hz and 12 kHz, using the middle 60%.
pub fn class_band(c: usize, n: usize) -> (f64, f64) {
    let (lo, hi) = (hz_to_mel(150.0), hz_to_mel(12_000.0));
    let w = (hi - lo) / n as f64;
    let a = lo + (c as f64 + 0.2) * w;
    let b = lo + (c as f64 + 0.8) * w;
    (mel_to_hz(a), mel_to_hz(b))
}

/// Amplitude-modulation rate of class `c`, in Hz.
fn class_am_rate(c: usize) -> f64 {
    2.0 + 1.5 * c as f64
}

/// Gaussian noise shaped by `gain(freq_hz)` in the frequency domain and
/// normalised to unit RMS.
fn shaped_noise(rng: &mut ChaCha8Rng, n: usize, gain: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        *v *= gain(bin as f64 * df);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter().map(|v| v / rms).collect()
    } else {
        out
    }
}

fn to_clip(samples: Vec<f64>) -> AudioClip {
    AudioClip {
        samples: samples.into_iter().map(|v| v as f32).collect(),
        sample_rate: SAMPLE_RATE,
    }
}

/// Linear fade over `ms` milliseconds at both ends.
fn fade(samples: &mut [f64], ms: f64) {
    let n = ((ms / 1000.0) * SAMPLE_RATE as f64) as usize;
    let n = n.min(samples.len() / 2);
    let len = samples.len();
    for i in 0..n {
        let g = i as f64 / n as f64;
        samples[i] *= g;
        samples[len - 1 - i] *= g;
    }
}

/// One instance of class `c`: band-limited noise with a class-specific
/// amplitude modulation, RMS 0.1.
fn class_texture(rng: &mut ChaCha8Rng, c: usize, n_classes: usize, duration: f64) -> Vec<f64> {
    let n = ((duration * SAMPLE_RATE as f64).round() as usize).max(1);
    let (lo, hi) = class_band(c, n_classes);
    let noise = shaped_noise(rng, n, |f| if f >= lo && f <= hi { 1.0 } else { 0.0 });
    let rate = class_am_rate(c);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut x: Vec<f64> = noise
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i as f64 / SAMPLE_RATE as f64;
            v * (1.0 + 0.6 * (std::f64::consts::TAU * rate * t + phase).sin())
        })
        .collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    for v in &mut x {
        *v *= 0.1 / rms;
    }
    fade(&mut x, 5.0);
    x
}

/// Broadband background with a 1/f power slope, RMS `rms`.
pub fn background_noise(seed: u64, duration: f64, rms: f64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (duration * SAMPLE_RATE as f64).round() as usize;
    let x = shaped_noise(&mut rng, n, |f| if f < 20.0 { 0.0 } else { 1.0 / f.sqrt() });
    to_clip(x.into_iter().map(|v| v * rms).collect())
}

/// Deterministic synthetic bank: class `c` occupies its own slice of the mel
/// axis. References are held-out instances laid end to end over
/// `reference_duration` seconds on top of low-level background noise.
pub fn synthesize_event_bank_with(cfg: &BankConfig) -> Result<EventBank> {
    cfg.validate()?;
    let mut audio = BTreeMap::new();
    let mut classes = Vec::with_capacity(cfg.n_classes);
    for c in 0..cfg.n_classes {
        let name = class_name(c);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(c as u64 + 1)));
        let (lo, hi) = cfg.durations(c);
        let events = (0..cfg.events_per_class)
            .map(|_| {
                let d = rng.random_range(lo..=hi);
                to_clip(class_texture(&mut rng, c, cfg.n_classes, d))
            })
            .collect();
        let references = (0..cfg.references_per_class)
            .map(|_| {
                let total = (cfg.reference_duration * SAMPLE_RATE as f64).round() as usize;
                let mut out = vec![0.0; total];
                let mut pos = 0;
                while pos < total {
                    let d = rng.random_range(lo..=hi);
                    let x = class_texture(&mut rng, c, cfg.n_classes, d);
                    let take = x.len().min(total - pos);
                    out[pos..pos + take].copy_from_slice(&x[..take]);
                    pos += take + (rng.random_range(0.1..0.4) * SAMPLE_RATE as f64) as usize;
                }
                let bg_seed = rng.random();
                let bg = background_noise(bg_seed, cfg.reference_duration, 0.01);
                for (o, b) in out.iter_mut().zip(&bg.samples) {
                    *o += *b as f64;
                }
                to_clip(out)
            })
            .collect();
        audio.insert(name.clone(), ClassAudio { events, references });
        classes.push(name);
    }
    Ok(EventBank { classes, audio })
}

pub fn synthesize_event_bank(n_classes: usize, seed: u64) -> Result<EventBank> {
    synthesize_event_bank_with(&BankConfig {
        n_classes,
        seed,
        ..BankConfig::default()
    })
}

/// Loads a bank from `root/<class>/events/*.wav` and `root/<class>/references/*.wav`.
pub fn load_event_bank(root: &Path) -> Result<EventBank> {
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut audio = BTreeMap::new();
    for class_dir in list(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let load = |sub: &str| -> Result<Vec<AudioClip>> {
            list(&class_dir.join(sub))?
                .iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .map(read_wav)
                .collect()
        };
        audio.insert(
            name,
            ClassAudio {
                events: load("events")?,
                references: load("references")?,
            },
        );
    }
    let bank = EventBank {
        classes: audio.keys().cloned().collect(),
        audio,
    };
    if bank.classes.len() < 2 {
        return Err(Error::Capacity(format!("{} holds fewer than 2 classes", root.display())));
    }
    bank.validate()?;
    Ok(bank)
}

/// One event placed in a mixture. `source` indexes the class's event clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureEvent {
    pub class: String,
    pub onset: f64,
    pub source: usize,
    /// Event-to-background energy ratio over the event span, in dB.
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub duration: f64,
    pub background: AudioClip,
    pub events: Vec<MixtureEvent>,
}

/// Mixes the events into the background at their onsets and SNRs. If the sum
/// would clip, the whole mixture is scaled to a 0.99 peak.
pub fn build_mixture(spec: &MixtureSpec, bank: &EventBank) -> Result<(AudioClip, Vec<Event>)> {
    let n = (spec.duration * SAMPLE_RATE as f64).round() as usize;
    if spec.background.sample_rate != SAMPLE_RATE || spec.background.len() != n {
        return Err(Error::InvalidSpec(format!(
            "background must be {} samples at {SAMPLE_RATE} Hz",
            n
        )));
    }
    let mut mix: Vec<f64> = spec.background.samples.iter().map(|&v| v as f64).collect();
    let mut events = Vec::with_capacity(spec.events.len());
    for e in &spec.events {
        let clip = bank.class(&e.class)?.events.get(e.source).ok_or_else(|| {
            Error::InvalidSpec(format!("class `{}` has no event clip {}", e.class, e.source))
        })?;
        let start = (e.onset * SAMPLE_RATE as f64).round() as usize;
        let offset = e.onset + clip.duration();
        if !(e.onset >= 0.0) || offset > spec.duration + 1e-9 || start + clip.len() > n || !e.snr_db.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "{} event [{}, {offset}] does not fit a {} s clip",
                e.class, e.onset, spec.duration
            )));
        }
        let span = &spec.background.samples[start..start + clip.len()];
        let bg_energy: f64 = span.iter().map(|&v| (v as f64).powi(2)).sum();
        let ev_energy = clip.energy();
        let gain = if bg_energy > 0.0 && ev_energy > 0.0 {
            (bg_energy / ev_energy * 10f64.powf(e.snr_db / 10.0)).sqrt()
        } else {
            10f64.powf(e.snr_db / 20.0)
        };
        for (m, &s) in mix[start..start + clip.len()].iter_mut().zip(&clip.samples) {
            *m += gain * s as f64;
        }
        events.push(Event::new(e.onset, offset, e.class.clone()));
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.99 {
        let s = 0.99 / peak;
        mix.iter_mut().for_each(|v| *v *= s);
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    Ok((to_clip(mix), events))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub bank: BankConfig,
    /// Records per split: train, val, test.
    pub sizes: [usize; 3],
    pub negative_ratio: f64,
    /// Inclusive range of events per mixture.
    pub events_per_clip: (usize, usize),
    pub snr_db: (f64, f64),
    pub clip_duration: f64,
    pub background_rms: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            bank: BankConfig::default(),
            sizes: [200, 50, 50],
            negative_ratio: 0.2,
            events_per_clip: (1, 3),
            snr_db: (-5.0, 15.0),
            clip_duration: 10.0,
            background_rms: 0.02,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.bank.validate()?;
        if !(0.0..1.0).contains(&self.negative_ratio) {
            return Err(Error::Config(format!("negative ratio {} outside [0, 1)", self.negative_ratio)));
        }
        let (a, b) = self.events_per_clip;
        if a == 0 || a > b {
            return Err(Error::Config(format!("events per clip ({a}, {b}) invalid")));
        }
        if !(self.snr_db.0 <= self.snr_db.1) || !(self.clip_duration > 0.0) || !(self.background_rms > 0.0) {
            return Err(Error::Config("invalid SNR range, clip duration or background level".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sample_id: String,
    /// Relative POSIX path under the dataset root.
    pub mixture_path: String,
    pub reference_path: String,
    pub target_class: String,
    /// Every event in the mixture, any class.
    pub events: Vec<Event>,
    pub is_negative: bool,
    pub split: Split,
}

impl ManifestRecord {
    /// Events of the target class.
    pub fn target_events(&self) -> Vec<Event> {
        crate::events::of_class(&self.events, &self.target_class)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "duration_stats.json";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.records.iter().map(|r| r.target_class.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if !seen.insert(r.sample_id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", r.sample_id)));
            }
            records.push(r);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }
}

/// SHA-256 of the manifest file, hex encoded.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let path = root.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Records each instance may serve, per split, before the bank counts as too
/// small.
const MAX_REUSE: usize = 50;

fn record_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 32) | index as u64);
    rng
}

/// Events of a record: the target (for positives) plus random others, with
/// no two events of one class overlapping.
fn draw_events(
    rng: &mut ChaCha8Rng,
    bank: &EventBank,
    pools: &BTreeMap<&str, Vec<usize>>,
    target: &str,
    negative: bool,
    cfg: &DatasetConfig,
) -> Vec<MixtureEvent> {
    let count = rng.random_range(cfg.events_per_clip.0..=cfg.events_per_clip.1);
    let others: Vec<&String> = bank.classes.iter().filter(|c| c.as_str() != target).collect();
    let mut placed: Vec<(MixtureEvent, f64)> = Vec::new();
    for i in 0..count {
        let class = if i == 0 && !negative {
            target
        } else if negative {
            others[rng.random_range(0..others.len())].as_str()
        } else {
            bank.classes[rng.random_range(0..bank.classes.len())].as_str()
        };
        let pool = &pools[class];
        let source = pool[rng.random_range(0..pool.len())];
        let dur = bank.audio[class].events[source].duration();
        let room = (cfg.clip_duration - dur).max(0.0);
        let snr_db = rng.random_range(cfg.snr_db.0..=cfg.snr_db.1);
        for _ in 0..50 {
            let onset = (rng.random_range(0.0..=room) * 100.0).floor() / 100.0;
            let clash = placed
                .iter()
                .any(|(e, off)| e.class == class && onset < *off && e.onset < onset + dur);
            if !clash {
                placed.push((
                    MixtureEvent {
                        class: class.to_string(),
                        onset,
                        source,
                        snr_db,
                    },
                    onset + dur,
                ));
                break;
            }
        }
    }
    placed.into_iter().map(|(e, _)| e).collect()
}

/// Builds every split, writes audio, manifest and duration statistics under
/// `root`, and returns the manifest.
pub fn build_dataset(bank: &EventBank, cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    bank.validate()?;
    let n_classes = bank.classes.len();
    let mut records = Vec::new();
    for split in SPLITS {
        let size = cfg.sizes[split as usize];
        let mut ev_pools = BTreeMap::new();
        let mut ref_pools = BTreeMap::new();
        for c in &bank.classes {
            let a = &bank.audio[c];
            let ev: Vec<usize> = (0..a.events.len()).filter(|&i| split.owns(i)).collect();
            let rf: Vec<usize> = (0..a.references.len()).filter(|&i| split.owns(i)).collect();
            let need = size.div_ceil(n_classes);
            if size > 0 && (ev.is_empty() || rf.is_empty() || need > MAX_REUSE * rf.len().min(ev.len())) {
                return Err(Error::Capacity(format!(
                    "class `{c}` has {} event / {} reference clips for {size} {split} records",
                    ev.len(),
                    rf.len()
                )));
            }
            ev_pools.insert(c.as_str(), ev);
            ref_pools.insert(c.as_str(), rf);
        }

        let mut order_rng = record_rng(cfg.seed, split, usize::MAX >> 1);
        let n_neg = (cfg.negative_ratio * size as f64).round() as usize;
        let mut negative = vec![false; size];
        negative[..n_neg].fill(true);
        negative.shuffle(&mut order_rng);

        for (i, &is_negative) in negative.iter().enumerate() {
            let mut rng = record_rng(cfg.seed, split, i);
            let target = bank.classes[i % n_classes].as_str();
            let events = draw_events(&mut rng, bank, &ev_pools, target, is_negative, cfg);
            let background = background_noise(rng.random(), cfg.clip_duration, cfg.background_rms);
            let spec = MixtureSpec {
                duration: cfg.clip_duration,
                background,
                events,
            };
            let (mixture, events) = build_mixture(&spec, bank)?;
            let rp = &ref_pools[target];
            let reference = &bank.audio[target].references[rp[rng.random_range(0..rp.len())]];

            let id = format!("{}-{i:05}", split.name());
            let mixture_path = format!("audio/{}/{id}_mix.wav", split.name());
            let reference_path = format!("audio/{}/{id}_ref.wav", split.name());
            write_wav(root.join(&mixture_path), &mixture)?;
            write_wav(root.join(&reference_path), reference)?;
            records.push(ManifestRecord {
                sample_id: id,
                mixture_path,
                reference_path,
                target_class: target.to_string(),
                events,
                is_negative,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.save()?;
    compute_duration_stats(&manifest)?.save(&root.join(STATS_FILE))?;
    Ok(manifest)
}

/// Per-class mean event duration over the train split. Every target class
/// must have at least one training event.
pub fn compute_duration_stats(manifest: &DatasetManifest) -> Result<DurationStats> {
    let stats = DurationStats::from_events(manifest.split(Split::Train).flat_map(|r| r.events.iter()));
    for c in manifest.classes() {
        stats.get(&c)?;
    }
    Ok(stats)
}

/// Checks a manifest's annotations against its clip duration and the
/// positive/negative contract.
pub fn validate_manifest(manifest: &DatasetManifest, clip_duration: f64) -> Result<()> {
    for r in &manifest.records {
        validate_events(&r.events, clip_duration)?;
        let has_target = r.events.iter().any(|e| e.class == r.target_class);
        if has_target == r.is_negative {
            return Err(Error::InvalidAnnotation(format!(
                "{}: target class presence contradicts is_negative = {}",
                r.sample_id, r.is_negative
            )));
        }
    }
    Ok(())
}
