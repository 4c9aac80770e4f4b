#![no_main]

use libfuzzer_sys::fuzz_target;
use spiketok::config::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::parse(text) {
        assert_eq!(PipelineConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }
});
