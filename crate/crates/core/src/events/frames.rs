use super::EventStream;
use crate::error::{Error, Result};
use crate::tensor::SpikeTensor;

/// Temporal bin of timestamp `t` when `[t_min, t_max]` is split into
/// `bins` equal parts.
pub fn bin_index(t: u32, t_min: u32, t_max: u32, bins: usize) -> usize {
    let span = u64::from(t_max - t_min) + 1;
    let b = (bins as u64 * u64::from(t - t_min)) / span;
    (b as usize).min(bins - 1)
}

/// Accumulates events into a `(T, 2, H_out, W_out)` binary tensor.
///
/// Channel 0 holds OFF events and channel 1 ON events. A cell is set when at
/// least one event lands in it; spatial reduction is an integer block OR.
pub fn bin_to_frames(
    stream: &EventStream,
    timesteps: usize,
    out_height: usize,
    out_width: usize,
) -> Result<SpikeTensor> {
    if timesteps == 0 {
        return Err(Error::validation("timestep count must be >= 1"));
    }
    if out_height == 0 || out_width == 0 {
        return Err(Error::validation("output frame size must be non-zero"));
    }
    let (h, w) = (stream.height() as usize, stream.width() as usize);
    if h % out_height != 0 || w % out_width != 0 {
        return Err(Error::validation(format!(
            "output {out_height}x{out_width} does not divide sensor {h}x{w}"
        )));
    }
    let (block_h, block_w) = (h / out_height, w / out_width);
    let mut frames = SpikeTensor::zeros(timesteps, 2, out_height, out_width)?;
    let Some((t_min, t_max)) = stream.time_span() else {
        return Ok(frames);
    };
    for e in stream.events() {
        let b = bin_index(e.t, t_min, t_max, timesteps);
        frames.set(
            b,
            e.polarity.bit() as usize,
            e.y as usize / block_h,
            e.x as usize / block_w,
            true,
        );
    }
    Ok(frames)
}
