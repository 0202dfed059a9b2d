use std::collections::{BTreeMap, BTreeSet};
use tsd_core::audio::{read_wav, AudioClip, SAMPLE_RATE};
use tsd_core::dataset::*;
use tsd_core::events::Event;
use tsd_core::features::{extract_logmel, render_frame_labels, MelConfig};
use tsd_core::metrics::{decode_events, DecodingConfig};
use tsd_core::model::FrameScores;
use tsd_core::Error;

fn small_bank() -> EventBank {
    synthesize_event_bank_with(&BankConfig {
        n_classes: 4,
        events_per_class: 10,
        references_per_class: 5,
        ..BankConfig::default()
    })
    .unwrap()
}

#[test]
fn bank_is_deterministic() {
    let a = small_bank();
    let b = small_bank();
    assert_eq!(a, b);
    let c = synthesize_event_bank_with(&BankConfig {
        n_classes: 4,
        events_per_class: 10,
        references_per_class: 5,
        seed: 8,
        ..BankConfig::default()
    })
    .unwrap();
    assert_ne!(a, c);
    assert!(synthesize_event_bank(1, 0).is_err());
}

/// Mean mel power profile over all event clips of a class.
fn mel_profile(clips: &[AudioClip]) -> Vec<f64> {
    let cfg = MelConfig::default();
    let mut acc = vec![0.0; cfg.n_mels];
    let mut n = 0;
    for c in clips {
        let m = extract_logmel(c, &cfg).unwrap();
        for t in 0..m.frames {
            for (a, v) in acc.iter_mut().zip(m.row(t)) {
                *a += v.exp();
            }
            n += 1;
        }
    }
    acc.iter().map(|v| v / n as f64).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn class_signatures_are_spectrally_distinct() {
    let bank = small_bank();
    let profiles: Vec<Vec<f64>> = bank.classes.iter().map(|c| mel_profile(&bank.audio[c].events[..3])).collect();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let r = pearson(&profiles[i], &profiles[j]);
            assert!(r < 0.5, "classes {i}, {j}: r = {r}");
        }
    }
    // references share their class's signature
    for (i, c) in bank.classes.iter().enumerate() {
        let r = pearson(&profiles[i], &mel_profile(&bank.audio[c].references[..1]));
        assert!(r > 0.8, "class {i} reference r = {r}");
    }
}

#[test]
fn durations_follow_the_configured_range() {
    let bank = synthesize_event_bank_with(&BankConfig {
        n_classes: 3,
        events_per_class: 20,
        references_per_class: 1,
        duration_range: Some((0.3, 0.9)),
        ..BankConfig::default()
    })
    .unwrap();
    for c in &bank.classes {
        for e in &bank.audio[c].events {
            assert!((0.3..=0.9).contains(&e.duration()), "{}", e.duration());
        }
    }
    let default = small_bank();
    let d: Vec<f64> = default.classes.iter().flat_map(|c| default.audio[c].events.iter().map(|e| e.duration())).collect();
    assert!(d.iter().any(|&x| x < 1.0));
    assert!(d.iter().any(|&x| (2.0..=8.0).contains(&x)));
}

fn quiet_background(seed: u64) -> AudioClip {
    background_noise(seed, 10.0, 0.02)
}

#[test]
fn mixture_bookkeeping() {
    let bank = small_bank();
    let bg = quiet_background(1);
    let (mix, ev) = build_mixture(
        &MixtureSpec {
            duration: 10.0,
            background: bg.clone(),
            events: vec![],
        },
        &bank,
    )
    .unwrap();
    assert!(ev.is_empty());
    assert_eq!(mix, bg);

    let class = &bank.classes[1];
    let source = bank.audio[class]
        .events
        .iter()
        .position(|e| (e.duration() - 1.0).abs() < 0.5)
        .unwrap();
    let dur = bank.audio[class].events[source].duration();
    let spec = MixtureSpec {
        duration: 10.0,
        background: bg.clone(),
        events: vec![MixtureEvent {
            class: class.clone(),
            onset: 2.0,
            source,
            snr_db: 0.0,
        }],
    };
    let (_, ev) = build_mixture(&spec, &bank).unwrap();
    assert_eq!(ev, vec![Event::new(2.0, 2.0 + dur, class.clone())]);

    let mut late = spec.clone();
    late.events[0].onset = 10.0 - dur / 2.0;
    assert!(matches!(build_mixture(&late, &bank), Err(Error::InvalidSpec(_))));
    let mut unknown = spec.clone();
    unknown.events[0].class = "nope".into();
    assert!(matches!(build_mixture(&unknown, &bank), Err(Error::InvalidSpec(_))));
}

#[test]
fn mixture_snr_matches_energy_ratio() {
    let bank = small_bank();
    for (k, snr) in [20.0, 0.0, -5.0, 10.0].into_iter().enumerate() {
        let bg = quiet_background(10 + k as u64);
        let class = &bank.classes[k % 4];
        let clip = &bank.audio[class].events[k];
        let onset = 1.5;
        let spec = MixtureSpec {
            duration: 10.0,
            background: bg.clone(),
            events: vec![MixtureEvent {
                class: class.clone(),
                onset,
                source: k,
                snr_db: snr,
            }],
        };
        let (mix, _) = build_mixture(&spec, &bank).unwrap();
        let start = (onset * SAMPLE_RATE as f64) as usize;
        let end = start + clip.len();
        // a global peak rescale may apply; recover it from the event-free part
        let (mut num, mut den) = (0.0, 0.0);
        for i in (0..start).chain(end..mix.len()) {
            let b = bg.samples[i] as f64;
            num += mix.samples[i] as f64 * b;
            den += b * b;
        }
        let scale = num / den;
        let mut ev_e = 0.0;
        let mut bg_e = 0.0;
        for i in start..end {
            let b = scale * bg.samples[i] as f64;
            ev_e += (mix.samples[i] as f64 - b).powi(2);
            bg_e += b * b;
        }
        let measured = 10.0 * (ev_e / bg_e).log10();
        assert!((measured - snr).abs() <= 1.0, "target {snr}, measured {measured}");
    }
}

fn build(sizes: [usize; 3], ratio: f64, dir: &std::path::Path) -> DatasetManifest {
    let cfg = DatasetConfig {
        sizes,
        negative_ratio: ratio,
        ..DatasetConfig::default()
    };
    build_dataset(&synthesize_event_bank(4, 3).unwrap(), &cfg, dir).unwrap()
}

#[test]
fn full_size_manifest_scan() {
    let dir = tempfile::tempdir().unwrap();
    let m = build([200, 50, 50], 0.2, dir.path());
    assert_eq!(m.records.len(), 300);
    let ids: BTreeSet<&str> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
    assert_eq!(ids.len(), 300);
    let paths: BTreeSet<&str> = m.records.iter().map(|r| r.mixture_path.as_str()).collect();
    assert_eq!(paths.len(), 300);

    for split in SPLITS {
        let recs: Vec<&ManifestRecord> = m.split(split).collect();
        let covered: BTreeSet<&str> = recs.iter().map(|r| r.target_class.as_str()).collect();
        assert_eq!(covered.len(), 4, "{split}");
        let neg = recs.iter().filter(|r| r.is_negative).count();
        assert_eq!(neg, (0.2 * recs.len() as f64).round() as usize);
        for r in recs {
            assert!(r.mixture_path.starts_with(&format!("audio/{split}/")));
            assert!(!r.mixture_path.contains('\\'));
        }
    }
    for r in &m.records {
        let classes: BTreeSet<&str> = r.events.iter().map(|e| e.class.as_str()).collect();
        assert_eq!(classes.contains(r.target_class.as_str()), !r.is_negative, "{}", r.sample_id);
        assert!(!r.events.is_empty());
        for e in &r.events {
            assert!(0.0 <= e.onset && e.onset < e.offset && e.offset <= 10.0 + 1e-9);
        }
    }
    validate_manifest(&m, 10.0).unwrap();

    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);

    // duration statistics equal a hand-summed mean over train events
    let stats = tsd_core::losses::DurationStats::load(&dir.path().join(STATS_FILE)).unwrap();
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in m.split(Split::Train) {
        for e in &r.events {
            let s = sums.entry(e.class.as_str()).or_default();
            s.0 += e.offset - e.onset;
            s.1 += 1;
        }
    }
    for (c, (s, n)) in sums {
        assert!((stats.get(c).unwrap() - s / n as f64).abs() < 1e-9);
    }

    let mix = read_wav(dir.path().join(&m.records[0].mixture_path)).unwrap();
    assert_eq!(mix.sample_rate, SAMPLE_RATE);
    assert_eq!(mix.len(), 320_000);
}

#[test]
fn dataset_bytes_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build([8, 4, 4], 0.25, a.path());
    build([8, 4, 4], 0.25, b.path());
    assert_eq!(manifest_hash(a.path()).unwrap(), manifest_hash(b.path()).unwrap());
    for r in &ma.records {
        for p in [&r.mixture_path, &r.reference_path] {
            assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
        }
    }
}

#[test]
fn zero_negative_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let m = build([8, 4, 4], 0.0, dir.path());
    assert!(m.records.iter().all(|r| !r.is_negative));
}

#[test]
fn capacity_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bank = synthesize_event_bank_with(&BankConfig {
        n_classes: 2,
        events_per_class: 3,
        references_per_class: 3,
        ..BankConfig::default()
    })
    .unwrap();
    // no instance left for the val/test pools
    let err = build_dataset(&bank, &DatasetConfig::default(), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Capacity(_)), "{err}");
    let bad = DatasetConfig {
        negative_ratio: 1.0,
        ..DatasetConfig::default()
    };
    assert!(build_dataset(&small_bank(), &bad, dir.path()).is_err());
}

#[test]
fn duration_stats_examples() {
    let rec = |split, events: Vec<Event>| ManifestRecord {
        sample_id: format!("{}", events.len()),
        mixture_path: String::new(),
        reference_path: String::new(),
        target_class: "a".into(),
        events,
        is_negative: false,
        split,
    };
    let one = DatasetManifest {
        root: ".".into(),
        records: vec![rec(Split::Train, vec![Event::new(1.0, 3.0, "a")])],
    };
    assert_eq!(compute_duration_stats(&one).unwrap().get("a").unwrap(), 2.0);
    let two = DatasetManifest {
        root: ".".into(),
        records: vec![rec(
            Split::Train,
            vec![Event::new(0.0, 1.0, "a"), Event::new(5.0, 8.0, "a")],
        )],
    };
    assert_eq!(compute_duration_stats(&two).unwrap().get("a").unwrap(), 2.0);
    let val_only = DatasetManifest {
        root: ".".into(),
        records: vec![rec(Split::Val, vec![Event::new(0.0, 1.0, "a")])],
    };
    assert!(matches!(compute_duration_stats(&val_only), Err(Error::MissingStats(_))));
}

#[test]
fn manifest_labels_round_trip_through_decoding() {
    let dir = tempfile::tempdir().unwrap();
    let m = build([12, 4, 4], 0.0, dir.path());
    let raw = DecodingConfig {
        threshold: 0.5,
        median_window: 1,
    };
    for r in &m.records {
        let truth = r.target_events();
        let labels = render_frame_labels(&truth, 10.0, 250).unwrap();
        let scores = FrameScores {
            values: labels.values,
            frame_resolution: 0.04,
        };
        let dec = decode_events(&scores, &raw, &r.target_class);
        // overlapping same-class events never occur, but touching ones merge
        assert!(dec.len() <= truth.len());
        for d in &dec {
            assert!(truth.iter().any(|t| (t.onset - d.onset).abs() <= 0.04 + 1e-9));
        }
        for t in &truth {
            assert!(dec.iter().any(|d| d.onset <= t.onset + 0.04 + 1e-9 && d.offset >= t.offset - 0.04 - 1e-9));
        }
    }
}
