//! Log-mel front end and frame-level label rendering.
//!
//! Frames are centred: frame `i` covers samples `[i*hop - window/2, i*hop + window/2)`
//! of the zero-padded signal, giving `1 + n_samples / hop` frames (1001 for a
//! 10 s clip at 32 kHz with hop 320).

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::events::{validate_events, Event};
use crate::tensor::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Added to the mel power before the logarithm.
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window: 1024,
            hop: 320,
            n_mels: 64,
            fmin: 50.0,
            fmax: 14_000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.hop == 0 || self.window < self.hop {
            return Err(Error::InvalidArgument(format!(
                "need n_mels >= 1 and window >= hop >= 1 (window {}, hop {}, n_mels {})",
                self.window, self.hop, self.n_mels
            )));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::InvalidArgument(format!(
                "mel range [{}, {}] invalid for {} Hz",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        Ok(())
    }

    /// Number of frames produced for `n_samples` input samples.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.hop
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// `t x n_mels` matrix of log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub n_mels: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.frames, self.n_mels], self.data.clone())
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Precomputed window, FFT plan and HTK triangular filterbank.
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mels` rows of `window/2 + 1` weights.
    filters: Vec<Vec<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        let filters = htk_filterbank(&cfg);
        Ok(Self {
            cfg,
            window,
            fft,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.is_empty() {
            return Err(Error::InvalidInput("empty clip".into()));
        }
        if let Some(i) = clip.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        let resampled;
        let clip = if clip.sample_rate != self.cfg.sample_rate {
            resampled = clip.resample(self.cfg.sample_rate);
            &resampled
        } else {
            clip
        };
        let cfg = &self.cfg;
        let n = cfg.window;
        let half = n / 2;
        let frames = cfg.frame_count(clip.len());
        let bins = n / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; bins];
        let mut data = Vec::with_capacity(frames * cfg.n_mels);
        for t in 0..frames {
            let start = (t * cfg.hop) as isize - half as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = start + i as isize;
                let x = if s >= 0 && (s as usize) < clip.len() {
                    clip.samples[s as usize] as f64
                } else {
                    0.0
                };
                *slot = Complex::new(x * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..bins]) {
                *p = c.norm_sqr();
            }
            for f in &self.filters {
                let e: f64 = f.iter().zip(&power).map(|(w, p)| w * p).sum();
                data.push((e + cfg.log_floor).ln());
            }
        }
        Ok(MelSpectrogram {
            frames,
            n_mels: cfg.n_mels,
            hop: cfg.hop,
            sample_rate: cfg.sample_rate,
            data,
        })
    }
}

fn htk_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.window / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram of `clip` with the given analysis parameters.
pub fn extract_logmel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg.clone())?.extract(clip)
}

/// Binary target-presence labels at network frame resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub values: Vec<f64>,
    /// Seconds per frame.
    pub resolution: f64,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Frame `i` spans `[i*Δ, (i+1)*Δ)` with `Δ = clip_duration / t_prime` and is set
/// when at least half of that span is covered by some event.
pub fn render_frame_labels(events: &[Event], clip_duration: f64, t_prime: usize) -> Result<FrameLabels> {
    if t_prime == 0 {
        return Err(Error::InvalidArgument("t_prime must be at least 1".into()));
    }
    if !(clip_duration > 0.0) {
        return Err(Error::InvalidArgument(format!("clip duration {clip_duration} must be positive")));
    }
    validate_events(events, clip_duration)?;
    let delta = clip_duration / t_prime as f64;
    let mut values = vec![0.0; t_prime];
    for e in events {
        let first = ((e.onset / delta).floor().max(0.0) as usize).min(t_prime - 1);
        let last = ((e.offset / delta).ceil() as usize).min(t_prime);
        for (i, v) in values.iter_mut().enumerate().take(last).skip(first) {
            let (a, b) = (i as f64 * delta, (i + 1) as f64 * delta);
            let overlap = e.offset.min(b) - e.onset.max(a);
            if overlap >= 0.5 * delta - 1e-9 {
                *v = 1.0;
            }
        }
    }
    Ok(FrameLabels {
        values,
        resolution: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tone(freq: f64, seconds: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let samples = (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn ten_second_clip_gives_1001_by_64() {
        let clip = AudioClip::silence(10.0, SAMPLE_RATE);
        let mel = extract_logmel(&clip, &MelConfig::default()).unwrap();
        assert_eq!((mel.frames, mel.n_mels), (1001, 64));
    }

    #[test]
    fn silence_is_constant_log_floor() {
        let clip = AudioClip::silence(0.5, SAMPLE_RATE);
        let mel = extract_logmel(&clip, &MelConfig::default()).unwrap();
        let floor = 1e-10f64.ln();
        assert!(mel.data.iter().all(|&v| v == floor));
    }

    /// Independent oracle: naive DFT of one frame and a separately written
    /// HTK filterbank evaluated at bin frequencies.
    fn oracle_mel_argmax(clip: &AudioClip, frames: &[usize]) -> usize {
        let (n, hop, n_mels) = (1024usize, 320usize, 64usize);
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let pts: Vec<f64> = (0..n_mels + 2)
            .map(|i| inv(mel(50.0) + (mel(14000.0) - mel(50.0)) * i as f64 / (n_mels as f64 + 1.0)))
            .collect();
        let mut avg = vec![0.0; n_mels];
        for &t in frames {
            let start = t * hop - n / 2;
            let mut power = vec![0.0; n / 2 + 1];
            for (k, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
                    let x = clip.samples[start + i] as f64 * w;
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                *p = re * re + im * im;
            }
            for m in 0..n_mels {
                for (k, p) in power.iter().enumerate() {
                    let f = k as f64 * 32000.0 / n as f64;
                    let up = (f - pts[m]) / (pts[m + 1] - pts[m]);
                    let down = (pts[m + 2] - f) / (pts[m + 2] - pts[m + 1]);
                    avg[m] += up.min(down).max(0.0) * p;
                }
            }
        }
        (0..n_mels).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap()
    }

    #[test]
    fn pure_tone_peaks_in_the_band_holding_its_frequency() {
        let clip = tone(1000.0, 10.0);
        let mel = extract_logmel(&clip, &MelConfig::default()).unwrap();
        let mut avg = vec![0.0; 64];
        for t in 0..mel.frames {
            for (a, v) in avg.iter_mut().zip(mel.row(t)) {
                *a += v.exp();
            }
        }
        let got = (0..64).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        let want = oracle_mel_argmax(&clip, &[100, 400, 700]);
        assert_eq!(got, want);
        // the chosen band's centre is the one nearest 1 kHz on the mel scale
        let lo = hz_to_mel(50.0);
        let step = (hz_to_mel(14000.0) - lo) / 65.0;
        let nearest = ((hz_to_mel(1000.0) - lo) / step - 1.0).round() as usize;
        assert_eq!(got, nearest);
    }

    #[test]
    fn deterministic_output() {
        let clip = tone(440.0, 1.0);
        let a = extract_logmel(&clip, &MelConfig::default()).unwrap();
        let b = extract_logmel(&clip, &MelConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_empty_and_bad_parameters() {
        let empty = AudioClip::new(vec![], SAMPLE_RATE).unwrap();
        assert!(matches!(extract_logmel(&empty, &MelConfig::default()), Err(Error::InvalidInput(_))));
        let nan = AudioClip { samples: vec![0.0, f32::NAN], sample_rate: SAMPLE_RATE };
        assert!(matches!(extract_logmel(&nan, &MelConfig::default()), Err(Error::InvalidInput(_))));
        let cfg = MelConfig { hop: 2048, ..MelConfig::default() };
        assert!(extract_logmel(&tone(100.0, 0.1), &cfg).is_err());
    }

    #[test]
    fn label_rendering_examples() {
        let empty = render_frame_labels(&[], 10.0, 250).unwrap();
        assert!(empty.values.iter().all(|&v| v == 0.0));
        let full = render_frame_labels(&[Event::new(0.0, 10.0, "a")], 10.0, 250).unwrap();
        assert!(full.values.iter().all(|&v| v == 1.0));

        let ev = [Event::new(2.0, 4.0, "a")];
        let labels = render_frame_labels(&ev, 10.0, 250).unwrap();
        // brute-force per-frame overlap
        let delta = 10.0 / 250.0;
        for i in 0..250 {
            let (a, b) = (i as f64 * delta, (i + 1) as f64 * delta);
            let overlap = (4.0f64.min(b) - 2.0f64.max(a)).max(0.0);
            let want = if overlap >= delta / 2.0 - 1e-9 { 1.0 } else { 0.0 };
            assert_eq!(labels.values[i], want, "frame {i}");
        }
        let on: Vec<usize> = (0..250).filter(|&i| labels.values[i] == 1.0).collect();
        assert_eq!(on, (50..100).collect::<Vec<_>>());
    }

    #[test]
    fn label_rendering_errors() {
        assert!(matches!(
            render_frame_labels(&[Event::new(3.0, 2.0, "a")], 10.0, 250),
            Err(Error::InvalidAnnotation(_))
        ));
        assert!(render_frame_labels(&[], 10.0, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn frame_count_follows_centered_framing(n in 1usize..20_000) {
            let clip = AudioClip::new(vec![0.1; n], SAMPLE_RATE).unwrap();
            let cfg = MelConfig { n_mels: 8, ..MelConfig::default() };
            let mel = extract_logmel(&clip, &cfg).unwrap();
            prop_assert_eq!(mel.frames, 1 + n / 320);
            prop_assert!(mel.data.iter().all(|v| v.is_finite()));
        }

        #[test]
        fn adding_an_event_never_clears_a_frame(
            on in 0.0f64..9.0, len in 0.0f64..3.0, on2 in 0.0f64..9.0, len2 in 0.0f64..3.0, t in 1usize..300
        ) {
            let a = Event::new(on, (on + len).min(10.0), "a");
            let b = Event::new(on2, (on2 + len2).min(10.0), "b");
            let before = render_frame_labels(std::slice::from_ref(&a), 10.0, t).unwrap();
            let after = render_frame_labels(&[a, b], 10.0, t).unwrap();
            for (x, y) in before.values.iter().zip(&after.values) {
                prop_assert!(y >= x);
            }
        }
    }
}
