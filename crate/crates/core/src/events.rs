use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One annotated (or detected) occurrence of a sound class, in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset: f64,
    pub offset: f64,
    pub class: String,
}

pub type EventList = Vec<Event>;

impl Event {
    pub fn new(onset: f64, offset: f64, class: impl Into<String>) -> Self {
        Self {
            onset,
            offset,
            class: class.into(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Slack for annotation bounds that went through decimal round trips.
const BOUND_TOL: f64 = 1e-6;

/// Checks `0 <= onset <= offset <= clip_duration` for every event.
pub fn validate_events(events: &[Event], clip_duration: f64) -> Result<()> {
    for e in events {
        if !(e.onset.is_finite() && e.offset.is_finite()) {
            return Err(Error::InvalidAnnotation(format!("non-finite bounds in {e:?}")));
        }
        if e.offset < e.onset {
            return Err(Error::InvalidAnnotation(format!(
                "offset {} precedes onset {} ({})",
                e.offset, e.onset, e.class
            )));
        }
        if e.onset < -BOUND_TOL || e.offset > clip_duration + BOUND_TOL {
            return Err(Error::InvalidAnnotation(format!(
                "event [{}, {}] outside clip of {clip_duration} s",
                e.onset, e.offset
            )));
        }
    }
    Ok(())
}

/// Events of one class, sorted by onset.
pub fn of_class(events: &[Event], class: &str) -> EventList {
    let mut out: EventList = events.iter().filter(|e| e.class == class).cloned().collect();
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    out
}
