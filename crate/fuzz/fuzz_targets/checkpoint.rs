#![no_main]

use libfuzzer_sys::fuzz_target;
use spiketok::checkpoint::{parse_checkpoint, serialize_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = parse_checkpoint(data) {
        let text = serialize_checkpoint(&model);
        assert_eq!(parse_checkpoint(text.as_bytes()).unwrap(), model);
    }
});
