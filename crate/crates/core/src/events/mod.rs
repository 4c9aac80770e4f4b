//! Event-camera streams: the container formats, a deterministic scene
//! synthesizer and binning into binary spike frames.

mod format;
mod frames;
mod synth;

pub use format::{parse_event_file, serialize_binary, serialize_csv, BINARY_MAGIC};
pub use frames::{bin_index, bin_to_frames};
pub use synth::{synth_moving_bar, synth_pattern, PatternSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off = 0,
    On = 1,
}

impl Polarity {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }
}

/// One change event. `t` is in microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub polarity: Polarity,
}

impl Event {
    pub fn new(t: u32, x: u16, y: u16, polarity: Polarity) -> Self {
        Self { t, x, y, polarity }
    }
}

/// Time-ordered events on a fixed sensor geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates geometry and ordering. Events must already be sorted by `t`.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            check_bounds(i, e, width, height)?;
        }
        if let Some(i) = events.windows(2).position(|w| w[1].t < w[0].t) {
            return Err(Error::Record {
                index: i + 1,
                message: format!(
                    "timestamp {} is earlier than the preceding {}",
                    events[i + 1].t,
                    events[i].t
                ),
            });
        }
        Ok(Self { width, height, events })
    }

    /// Validates geometry and stably sorts by timestamp.
    pub fn from_unsorted(width: u16, height: u16, mut events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            check_bounds(i, e, width, height)?;
        }
        events.sort_by_key(|e| e.t);
        Ok(Self { width, height, events })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// `(t_min, t_max)`, or `None` for an empty stream.
    pub fn time_span(&self) -> Option<(u32, u32)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }
}

fn check_bounds(index: usize, e: &Event, width: u16, height: u16) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(Error::Record {
            index,
            message: format!("coordinate ({}, {}) outside {}x{} sensor", e.x, e.y, width, height),
        });
    }
    Ok(())
}
