//! Deterministic synthetic scenes. All randomness comes from a ChaCha stream
//! seeded by the caller, so equal arguments give identical streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

fn check_geometry(width: u16, height: u16) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::validation(format!("zero-area sensor geometry {width}x{height}")));
    }
    Ok(())
}

fn push_noise(
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Event>,
    width: u16,
    height: u16,
    duration_us: u32,
    rate_hz: f64,
) -> Result<()> {
    if !(rate_hz >= 0.0 && rate_hz.is_finite()) {
        return Err(Error::validation(format!("noise rate {rate_hz} must be >= 0")));
    }
    let lambda = rate_hz * f64::from(width) * f64::from(height) * f64::from(duration_us) * 1e-6;
    if lambda <= 0.0 {
        return Ok(());
    }
    let count = Poisson::new(lambda)
        .map_err(|e| Error::validation(format!("noise process: {e}")))?
        .sample(rng) as usize;
    out.reserve(count);
    for _ in 0..count {
        let t = rng.random_range(0..duration_us);
        let x = rng.random_range(0..width);
        let y = rng.random_range(0..height);
        let polarity = if rng.random::<bool>() {
            Polarity::On
        } else {
            Polarity::Off
        };
        out.push(Event::new(t, x, y, polarity));
    }
    Ok(())
}

/// Full-height vertical bar drifting horizontally (wrapping at the border)
/// over uniform Poisson background noise.
///
/// The bar is `max(1, width / 8)` columns wide and starts centred. At `t = 0`
/// every covered pixel emits ON; afterwards each integer-column crossing emits
/// ON along the leading edge and OFF along the trailing edge.
pub fn synth_moving_bar(
    width: u16,
    height: u16,
    velocity_px_per_s: f64,
    duration_us: u32,
    noise_rate_hz: f64,
    seed: u64,
) -> Result<EventStream> {
    check_geometry(width, height)?;
    if duration_us == 0 {
        return Err(Error::validation("duration must be > 0"));
    }
    if !velocity_px_per_s.is_finite() {
        return Err(Error::validation("velocity must be finite"));
    }
    let w = i64::from(width);
    let bar = (w / 8).max(1);
    let start = (w - bar) / 2;
    let column = |c: i64| c.rem_euclid(w) as u16;

    let mut events = Vec::new();
    for c in start..start + bar {
        for y in 0..height {
            events.push(Event::new(0, column(c), y, Polarity::On));
        }
    }

    let v = velocity_px_per_s;
    let end_pos = start as f64 + v * f64::from(duration_us) * 1e-6;
    let steps = (end_pos.floor() as i64 - start).abs();
    for k in 1..=steps {
        // `p` is the left edge after the k-th crossing.
        let (p, crossing) = if v > 0.0 {
            (start + k, (start + k) as f64)
        } else {
            (start - k, (start - k + 1) as f64)
        };
        let t_us = ((crossing - start as f64) / v * 1e6).round();
        if t_us < 0.0 || t_us >= f64::from(duration_us) {
            continue;
        }
        let t = t_us as u32;
        let (on_col, off_col) = if v > 0.0 { (p + bar - 1, p - 1) } else { (p, p + bar) };
        for y in 0..height {
            events.push(Event::new(t, column(on_col), y, Polarity::On));
            events.push(Event::new(t, column(off_col), y, Polarity::Off));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    push_noise(&mut rng, &mut events, width, height, duration_us, noise_rate_hz)?;
    EventStream::from_unsorted(width, height, events)
}

/// A rectangular stimulus that fires in chosen temporal bins.
///
/// In each active bin a `pixel_fraction` subset of the rectangle emits one ON
/// event at a random time inside the bin. Two OFF anchor events at pixel
/// `(0, 0)`, one at `t = 0` and one at `t = duration_us - 1`, pin the stream's
/// time span so bin `b` of the generator maps to frame `b` after binning.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternSpec {
    pub width: u16,
    pub height: u16,
    pub bins: usize,
    pub duration_us: u32,
    /// `(x0, y0, w, h)` of the stimulus rectangle.
    pub rect: (u16, u16, u16, u16),
    pub active_bins: Vec<usize>,
    pub pixel_fraction: f64,
    pub noise_rate_hz: f64,
}

pub fn synth_pattern(pattern: &PatternSpec, seed: u64) -> Result<EventStream> {
    check_geometry(pattern.width, pattern.height)?;
    if pattern.bins == 0 || pattern.duration_us < pattern.bins as u32 {
        return Err(Error::validation("pattern needs bins >= 1 and duration >= bins"));
    }
    let (x0, y0, rw, rh) = pattern.rect;
    if u32::from(x0) + u32::from(rw) > u32::from(pattern.width) || u32::from(y0) + u32::from(rh) > u32::from(pattern.height) {
        return Err(Error::validation("stimulus rectangle exceeds sensor"));
    }
    if !(0.0..=1.0).contains(&pattern.pixel_fraction) {
        return Err(Error::validation("pixel fraction must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = vec![
        Event::new(0, 0, 0, Polarity::Off),
        Event::new(pattern.duration_us - 1, 0, 0, Polarity::Off),
    ];
    let bin_len = u64::from(pattern.duration_us) / pattern.bins as u64;
    for &b in &pattern.active_bins {
        if b >= pattern.bins {
            return Err(Error::validation(format!("active bin {b} >= {}", pattern.bins)));
        }
        let lo = b as u64 * bin_len;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                if rng.random::<f64>() < pattern.pixel_fraction {
                    let t = lo + rng.random_range(0..bin_len);
                    events.push(Event::new(t as u32, x, y, Polarity::On));
                }
            }
        }
    }
    push_noise(
        &mut rng,
        &mut events,
        pattern.width,
        pattern.height,
        pattern.duration_us,
        pattern.noise_rate_hz,
    )?;
    EventStream::from_unsorted(pattern.width, pattern.height, events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::serialize_binary;

    #[test]
    fn static_bar_only_emits_initial_transient() {
        let s = synth_moving_bar(32, 16, 0.0, 1_000_000, 0.0, 1).unwrap();
        assert!(s.events().iter().all(|e| e.t == 0));
        assert_eq!(s.len(), 4 * 16);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_moving_bar(32, 32, 40.0, 500_000, 50.0, 9).unwrap();
        let b = synth_moving_bar(32, 32, 40.0, 500_000, 50.0, 9).unwrap();
        assert_eq!(serialize_binary(&a), serialize_binary(&b));
        let c = synth_moving_bar(32, 32, 40.0, 500_000, 50.0, 10).unwrap();
        assert_ne!(serialize_binary(&a), serialize_binary(&c));
    }

    #[test]
    fn poisson_noise_count_within_three_sigma() {
        // Static bar transient = 4 columns x 32 rows = 128 events.
        let s = synth_moving_bar(32, 32, 0.0, 1_000_000, 100.0, 3).unwrap();
        let noise = s.len() as f64 - 128.0;
        let mean = 100.0 * 32.0 * 32.0;
        assert!((noise - mean).abs() <= 3.0 * mean.sqrt(), "noise count {noise}");
    }

    #[test]
    fn moving_bar_edges_have_expected_polarity() {
        // 8 px/s for 1 s: eight crossings, each 16 ON + 16 OFF.
        let s = synth_moving_bar(16, 16, 8.0, 1_000_000, 0.0, 0).unwrap();
        let moving: Vec<_> = s.events().iter().filter(|e| e.t > 0).collect();
        assert_eq!(moving.len(), 7 * 32);
        let first_t = moving[0].t;
        assert_eq!(first_t, 125_000);
        let on: Vec<u16> = moving
            .iter()
            .filter(|e| e.t == first_t && e.polarity == Polarity::On)
            .map(|e| e.x)
            .collect();
        let off: Vec<u16> = moving
            .iter()
            .filter(|e| e.t == first_t && e.polarity == Polarity::Off)
            .map(|e| e.x)
            .collect();
        // Bar covers columns 7..9 at start, 8..10 after the first crossing.
        assert!(on.iter().all(|&x| x == 9));
        assert!(off.iter().all(|&x| x == 7));
    }

    #[test]
    fn zero_area_rejected() {
        assert!(synth_moving_bar(0, 4, 1.0, 10, 0.0, 0).is_err());
        assert!(synth_moving_bar(4, 4, 1.0, 0, 0.0, 0).is_err());
    }

    #[test]
    fn pattern_bins_map_to_frames() {
        let pattern = PatternSpec {
            width: 8,
            height: 8,
            bins: 8,
            duration_us: 8000,
            rect: (4, 4, 4, 4),
            active_bins: vec![2, 5],
            pixel_fraction: 1.0,
            noise_rate_hz: 0.0,
        };
        let s = synth_pattern(&pattern, 4).unwrap();
        let f = crate::events::bin_to_frames(&s, 8, 8, 8).unwrap();
        for b in 0..8 {
            let on: usize = (4..8)
                .flat_map(|y| (4..8).map(move |x| (y, x)))
                .map(|(y, x)| f.get(b, 1, y, x) as usize)
                .sum();
            assert_eq!(on, if b == 2 || b == 5 { 16 } else { 0 }, "bin {b}");
        }
    }
}
