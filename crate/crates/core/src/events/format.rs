//! `SPK1` binary container and the `t,x,y,p` CSV fallback.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! 53 50 4B 31        magic "SPK1"
//! u16 width, u16 height, u32 count
//! count x { u32 t_us, u16 x, u16 y, u8 polarity }
//! ```

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: [u8; 4] = *b"SPK1";
const HEADER_LEN: usize = 12;
const RECORD_LEN: usize = 9;
const CSV_HEADER: &str = "t,x,y,p";

/// Parses either container, chosen by the leading bytes.
pub fn parse_event_file(raw: &[u8]) -> Result<EventStream> {
    if raw.starts_with(&BINARY_MAGIC) {
        parse_binary(raw)
    } else {
        let text = std::str::from_utf8(raw).map_err(|_| Error::format("input is neither SPK1 binary nor UTF-8 CSV"))?;
        parse_csv(text)
    }
}

fn parse_binary(raw: &[u8]) -> Result<EventStream> {
    if raw.len() < HEADER_LEN {
        return Err(Error::format(format!(
            "SPK1 header needs {HEADER_LEN} bytes, got {}",
            raw.len()
        )));
    }
    let width = u16::from_le_bytes([raw[4], raw[5]]);
    let height = u16::from_le_bytes([raw[6], raw[7]]);
    let count = u32::from_le_bytes([raw[8], raw[9], raw[10], raw[11]]) as usize;
    let body = &raw[HEADER_LEN..];
    let expected = count
        .checked_mul(RECORD_LEN)
        .ok_or_else(|| Error::format("event count overflows"))?;
    if body.len() != expected {
        return Err(Error::format(format!(
            "header declares {count} records ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }

    let mut events = Vec::with_capacity(count);
    for (index, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]);
        let x = u16::from_le_bytes([rec[4], rec[5]]);
        let y = u16::from_le_bytes([rec[6], rec[7]]);
        let polarity = Polarity::from_bit(rec[8]).ok_or_else(|| Error::Record {
            index,
            message: format!("polarity byte {} is not 0 or 1", rec[8]),
        })?;
        events.push(Event { t, x, y, polarity });
    }
    EventStream::new(width, height, events)
}

fn parse_csv(text: &str) -> Result<EventStream> {
    let mut geometry: Option<(u16, u16)> = None;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    // Leading comments may carry `# width=W height=H`.
    let header = loop {
        match lines.next() {
            None => return Err(Error::format("empty input: missing CSV header t,x,y,p")),
            Some((_, l)) if l.is_empty() => continue,
            Some((_, l)) if l.starts_with('#') => {
                if let Some(g) = parse_geometry_comment(l)? {
                    geometry = Some(g);
                }
            }
            Some((_, l)) => break l,
        }
    };
    if header.replace(' ', "") != CSV_HEADER {
        return Err(Error::format(format!(
            "expected CSV header `{CSV_HEADER}`, found `{header}`"
        )));
    }

    let mut events = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let index = events.len();
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "line {line_no}: expected 4 fields, found {}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::format(format!("line {line_no}: invalid {what}"));
        let t: u32 = fields[0].parse().map_err(|_| bad("timestamp"))?;
        let x: u16 = fields[1].parse().map_err(|_| bad("x"))?;
        let y: u16 = fields[2].parse().map_err(|_| bad("y"))?;
        let p: u8 = fields[3].parse().map_err(|_| bad("polarity"))?;
        let polarity = Polarity::from_bit(p).ok_or_else(|| Error::Record {
            index,
            message: format!("polarity {p} is not 0 or 1"),
        })?;
        events.push(Event { t, x, y, polarity });
    }

    let (width, height) = match geometry {
        Some(g) => g,
        None => {
            let w = events.iter().map(|e| u32::from(e.x) + 1).max().unwrap_or(0);
            let h = events.iter().map(|e| u32::from(e.y) + 1).max().unwrap_or(0);
            let w = u16::try_from(w).map_err(|_| Error::format("inferred width exceeds u16"))?;
            let h = u16::try_from(h).map_err(|_| Error::format("inferred height exceeds u16"))?;
            (w, h)
        }
    };
    EventStream::from_unsorted(width, height, events)
}

fn parse_geometry_comment(line: &str) -> Result<Option<(u16, u16)>> {
    let mut width = None;
    let mut height = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            let parsed = || {
                value
                    .parse::<u16>()
                    .map_err(|_| Error::format(format!("invalid geometry value `{value}`")))
            };
            match key {
                "width" => width = Some(parsed()?),
                "height" => height = Some(parsed()?),
                _ => {}
            }
        }
    }
    Ok(width.zip(height))
}

pub fn serialize_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(&BINARY_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u32).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.polarity.bit());
    }
    out
}

/// CSV with a leading geometry comment so empty or edge-free streams
/// keep their sensor size.
pub fn serialize_csv(stream: &EventStream) -> String {
    let mut out = format!("# width={} height={}\n{CSV_HEADER}\n", stream.width(), stream.height());
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.polarity.bit()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_record() -> Vec<u8> {
        let mut raw = b"SPK1".to_vec();
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&5u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&2u16.to_le_bytes());
        raw.push(1);
        raw
    }

    #[test]
    fn single_binary_record() {
        let s = parse_event_file(&one_record()).unwrap();
        assert_eq!((s.width(), s.height()), (4, 4));
        assert_eq!(s.events(), &[Event::new(5, 1, 2, Polarity::On)]);
        assert_eq!(serialize_binary(&s), one_record());
    }

    #[test]
    fn hex_example_matches_layout() {
        let raw = one_record();
        let hex: Vec<String> = raw.iter().map(|b| format!("{b:02X}")).collect();
        assert_eq!(
            hex.join(" "),
            "53 50 4B 31 04 00 04 00 01 00 00 00 05 00 00 00 01 00 02 00 01"
        );
    }

    #[test]
    fn header_only_csv_is_empty() {
        let s = parse_event_file(b"t,x,y,p\n").unwrap();
        assert!(s.is_empty());
        assert_eq!(s.time_span(), None);
    }

    #[test]
    fn csv_rows_are_sorted() {
        let s = parse_event_file(b"t,x,y,p\n10,0,0,1\n3,1,0,0\n7,2,1,1\n").unwrap();
        let ts: Vec<u32> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![3, 7, 10]);
        assert_eq!((s.width(), s.height()), (3, 2));
    }

    #[test]
    fn decreasing_binary_timestamps_rejected() {
        let events = [(10u32, 0u16), (3, 1), (7, 2)];
        let mut raw = b"SPK1".to_vec();
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&3u32.to_le_bytes());
        for (t, x) in events {
            raw.extend_from_slice(&t.to_le_bytes());
            raw.extend_from_slice(&x.to_le_bytes());
            raw.extend_from_slice(&0u16.to_le_bytes());
            raw.push(1);
        }
        match parse_event_file(&raw) {
            Err(Error::Record { index: 1, .. }) => {}
            other => panic!("expected record error at 1, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_coordinate_names_record() {
        let text = "# width=4 height=4\nt,x,y,p\n1,0,0,1\n2,4,0,1\n";
        match parse_event_file(text.as_bytes()) {
            Err(Error::Record { index: 1, .. }) => {}
            other => panic!("expected record error at 1, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(parse_event_file(b"SPK1\x01"), Err(Error::Format(_))));
        assert!(matches!(parse_event_file(b"a,b,c\n"), Err(Error::Format(_))));
        assert!(matches!(parse_event_file(b""), Err(Error::Format(_))));
        assert!(matches!(parse_event_file(b"t,x,y,p\n1,2,3\n"), Err(Error::Format(_))));
        assert!(matches!(
            parse_event_file(b"t,x,y,p\n1,2,3,2\n"),
            Err(Error::Record { index: 0, .. })
        ));
        let mut truncated = one_record();
        truncated.pop();
        assert!(matches!(parse_event_file(&truncated), Err(Error::Format(_))));
        assert!(matches!(parse_event_file(&[0xff, 0xfe]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip_keeps_geometry() {
        let s = EventStream::new(8, 6, vec![Event::new(1, 7, 5, Polarity::Off)]).unwrap();
        let back = parse_event_file(serialize_csv(&s).as_bytes()).unwrap();
        assert_eq!(back, s);
    }
}
