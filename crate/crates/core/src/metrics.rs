//! Score decoding and segment/event based F-measures.
//!
//! Counts are pooled per class over all clips, F is computed per class, and the
//! macro average is the plain mean over classes that have any count.
//!
//! Segment activity uses half-open intervals: an event `[on, off)` activates
//! segment `k` iff it overlaps `[k s, (k+1) s)` with positive length.
//! Event matching is a maximum one-to-one matching under the onset collar and
//! offset tolerance.

use crate::error::{Error, Result};
use crate::events::Event;
use crate::losses::DurationStats;
use crate::model::FrameScores;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Absorbs round-off in boundary arithmetic.
const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    pub threshold: f64,
    /// Median filter length in frames (odd).
    pub median_window: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 5,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.median_window % 2 == 0 {
            return Err(Error::Config(format!(
                "decoding needs a threshold in (0, 1) and an odd median window, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Running median with edge replication.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let half = window / 2;
    let n = values.len() as isize;
    let mut buf = Vec::with_capacity(window);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend((i - half as isize..=i + half as isize).map(|j| values[j.clamp(0, n - 1) as usize]));
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect()
}

/// Median filter, threshold (`>=`), and merge runs of active frames into
/// events with frame-aligned boundaries.
pub fn decode_events(scores: &FrameScores, cfg: &DecodingConfig, class: &str) -> Vec<Event> {
    let smooth = median_filter(&scores.values, cfg.median_window);
    let dt = scores.frame_resolution;
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in smooth.iter().chain(std::iter::once(&f64::NEG_INFINITY)).enumerate() {
        match (v >= cfg.threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Event::new(s as f64 * dt, i as f64 * dt, class));
                start = None;
            }
            _ => {}
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FScoreReport {
    pub per_class: BTreeMap<String, ClassScore>,
    pub macro_f: f64,
    pub total: Counts,
}

impl FScoreReport {
    pub fn from_counts(counts: &BTreeMap<String, Counts>) -> Self {
        let mut per_class = BTreeMap::new();
        let mut total = Counts::default();
        for (class, c) in counts.iter().filter(|(_, c)| !c.is_empty()) {
            total.add(*c);
            per_class.insert(
                class.clone(),
                ClassScore {
                    counts: *c,
                    precision: c.precision(),
                    recall: c.recall(),
                    f: c.f_score(),
                },
            );
        }
        let macro_f = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().map(|s| s.f).sum::<f64>() / per_class.len() as f64
        };
        Self {
            per_class,
            macro_f,
            total,
        }
    }
}

fn group<'a>(events: &'a [Event]) -> BTreeMap<&'a str, Vec<&'a Event>> {
    let mut m: BTreeMap<&str, Vec<&Event>> = BTreeMap::new();
    for e in events {
        m.entry(e.class.as_str()).or_default().push(e);
    }
    m
}

fn classes<'a>(r: &BTreeMap<&'a str, Vec<&Event>>, h: &BTreeMap<&'a str, Vec<&Event>>) -> Vec<&'a str> {
    let mut c: Vec<&str> = r.keys().chain(h.keys()).copied().collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Segment-level counts, pooled per class over clips.
#[derive(Clone, Debug)]
pub struct SegmentAccumulator {
    pub segment: f64,
    counts: BTreeMap<String, Counts>,
}

impl SegmentAccumulator {
    pub fn new(segment: f64) -> Self {
        Self {
            segment,
            counts: BTreeMap::new(),
        }
    }

    fn activity(&self, events: &[&Event], n_seg: usize) -> Vec<bool> {
        let mut active = vec![false; n_seg];
        for e in events.iter().filter(|e| e.offset > e.onset) {
            let first = ((e.onset / self.segment) + TOL).floor().max(0.0) as usize;
            let end = (((e.offset / self.segment) - TOL).ceil().max(0.0) as usize).min(n_seg);
            for slot in active.iter_mut().take(end).skip(first) {
                *slot = true;
            }
        }
        active
    }

    pub fn add_clip(&mut self, reference: &[Event], hypothesis: &[Event], clip_duration: f64) {
        let n_seg = ((clip_duration / self.segment) - TOL).ceil().max(0.0) as usize;
        let (r, h) = (group(reference), group(hypothesis));
        for class in classes(&r, &h) {
            let ra = self.activity(r.get(class).map(Vec::as_slice).unwrap_or(&[]), n_seg);
            let ha = self.activity(h.get(class).map(Vec::as_slice).unwrap_or(&[]), n_seg);
            let mut c = Counts::default();
            for (a, b) in ra.iter().zip(&ha) {
                match (a, b) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    _ => {}
                }
            }
            self.counts.entry(class.to_string()).or_default().add(c);
        }
    }

    pub fn counts(&self) -> &BTreeMap<String, Counts> {
        &self.counts
    }

    pub fn report(&self) -> FScoreReport {
        FScoreReport::from_counts(&self.counts)
    }
}

/// Segment length and event tolerances, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub segment: f64,
    pub collar: f64,
    pub offset_ratio: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            segment: 1.0,
            collar: 0.2,
            offset_ratio: 0.2,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment > 0.0) || !(self.collar >= 0.0) || !(self.offset_ratio >= 0.0) {
            return Err(Error::Config(format!("invalid metric parameters {self:?}")));
        }
        Ok(())
    }
}

/// Event-level counts under the onset collar / offset tolerance rule.
#[derive(Clone, Debug)]
pub struct EventAccumulator {
    pub collar: f64,
    pub offset_ratio: f64,
    counts: BTreeMap<String, Counts>,
}

impl EventAccumulator {
    pub fn new(collar: f64, offset_ratio: f64) -> Self {
        Self {
            collar,
            offset_ratio,
            counts: BTreeMap::new(),
        }
    }

    /// Whether `hyp` may be matched to `reference`.
    pub fn compatible(&self, reference: &Event, hyp: &Event) -> bool {
        let off_tol = self.collar.max(self.offset_ratio * reference.duration());
        (hyp.onset - reference.onset).abs() <= self.collar + TOL && (hyp.offset - reference.offset).abs() <= off_tol + TOL
    }

    pub fn add_clip(&mut self, reference: &[Event], hypothesis: &[Event]) {
        let (r, h) = (group(reference), group(hypothesis));
        for class in classes(&r, &h) {
            let re = r.get(class).map(Vec::as_slice).unwrap_or(&[]);
            let he = h.get(class).map(Vec::as_slice).unwrap_or(&[]);
            let adj: Vec<Vec<usize>> = re
                .iter()
                .map(|a| (0..he.len()).filter(|&j| self.compatible(a, he[j])).collect())
                .collect();
            let tp = max_matching(&adj, he.len());
            self.counts.entry(class.to_string()).or_default().add(Counts {
                tp,
                fp: he.len() - tp,
                fn_: re.len() - tp,
            });
        }
    }

    pub fn counts(&self) -> &BTreeMap<String, Counts> {
        &self.counts
    }

    pub fn report(&self) -> FScoreReport {
        FScoreReport::from_counts(&self.counts)
    }
}

/// Size of a maximum matching; `adj[i]` lists the right vertices of left `i`.
pub fn max_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; n_right];
    (0..adj.len())
        .filter(|&i| augment(i, adj, &mut vec![false; n_right], &mut owner))
        .count()
}

/// Segment-based scores of a single clip.
pub fn segment_f(reference: &[Event], hypothesis: &[Event], clip_duration: f64, segment: f64) -> FScoreReport {
    let mut acc = SegmentAccumulator::new(segment);
    acc.add_clip(reference, hypothesis, clip_duration);
    acc.report()
}

/// Event-based scores of a single clip.
pub fn event_f(reference: &[Event], hypothesis: &[Event], collar: f64, offset_ratio: f64) -> FScoreReport {
    let mut acc = EventAccumulator::new(collar, offset_ratio);
    acc.add_clip(reference, hypothesis);
    acc.report()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: f64,
    pub hi: f64,
    pub classes: Vec<String>,
    /// `None` when no class falls in the bucket.
    pub macro_f: Option<f64>,
}

pub const DEFAULT_BUCKETS: [f64; 6] = [0.0, 1.0, 3.0, 5.0, 7.0, 10.0];

/// Groups classes by mean event duration; every bucket is `[lo, hi)` except
/// the last, which is closed.
pub fn duration_bucket_report(report: &FScoreReport, stats: &DurationStats, edges: &[f64]) -> Result<Vec<BucketRow>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(format!("bucket edges must increase: {edges:?}")));
    }
    let mut rows: Vec<BucketRow> = edges
        .windows(2)
        .map(|w| BucketRow {
            lo: w[0],
            hi: w[1],
            classes: vec![],
            macro_f: None,
        })
        .collect();
    let last = rows.len() - 1;
    let mut sums = vec![0.0; rows.len()];
    for (class, score) in &report.per_class {
        let d = stats.get(class)?;
        let slot = rows
            .iter()
            .position(|r| d >= r.lo && d < r.hi)
            .or_else(|| (d == rows[last].hi).then_some(last));
        if let Some(i) = slot {
            rows[i].classes.push(class.clone());
            sums[i] += score.f;
        }
    }
    for (r, s) in rows.iter_mut().zip(sums) {
        if !r.classes.is_empty() {
            r.macro_f = Some(s / r.classes.len() as f64);
        }
    }
    Ok(rows)
}
