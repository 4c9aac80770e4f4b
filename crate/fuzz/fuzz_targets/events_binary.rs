#![no_main]

use libfuzzer_sys::fuzz_target;
use spiketok::events::{bin_to_frames, parse_event_file, serialize_binary, BINARY_MAGIC};

fuzz_target!(|data: &[u8]| {
    // Force the binary branch so the fuzzer never wastes time on the CSV path.
    let mut raw = BINARY_MAGIC.to_vec();
    raw.extend_from_slice(data);
    if let Ok(stream) = parse_event_file(&raw) {
        assert_eq!(serialize_binary(&stream), raw);
        let (w, h) = (usize::from(stream.width()), usize::from(stream.height()));
        if w * h <= 1 << 16 {
            let _ = bin_to_frames(&stream, 4, h, w);
        }
    }
});
