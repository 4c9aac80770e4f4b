#![no_main]

use libfuzzer_sys::fuzz_target;
use spiketok::events::{parse_event_file, serialize_csv};

fuzz_target!(|data: &[u8]| {
    if data.starts_with(b"SPK1") {
        return;
    }
    if let Ok(stream) = parse_event_file(data) {
        let text = serialize_csv(&stream);
        assert_eq!(parse_event_file(text.as_bytes()).unwrap(), stream);
    }
});
