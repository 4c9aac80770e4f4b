//! Replays the checked-in fuzz corpus through the same properties the fuzz
//! targets assert, so the seeds stay valid on a stable toolchain.

use std::path::PathBuf;

use spiketok::checkpoint::{parse_checkpoint, serialize_checkpoint};
use spiketok::config::PipelineConfig;
use spiketok::events::{parse_event_file, serialize_binary, serialize_csv, BINARY_MAGIC};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn binary_event_seeds() {
    let mut parsed = 0;
    for (name, data) in seeds("events_binary") {
        let mut raw = BINARY_MAGIC.to_vec();
        raw.extend_from_slice(&data);
        if let Ok(stream) = parse_event_file(&raw) {
            assert_eq!(serialize_binary(&stream), raw, "{name}");
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn csv_event_seeds() {
    for (name, data) in seeds("events_csv") {
        let stream = parse_event_file(&data).unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = serialize_csv(&stream);
        assert_eq!(parse_event_file(text.as_bytes()).unwrap(), stream, "{name}");
    }
}

#[test]
fn config_seeds() {
    let mut parsed = 0;
    for (name, data) in seeds("config") {
        if let Ok(cfg) = PipelineConfig::parse(std::str::from_utf8(&data).unwrap()) {
            assert_eq!(PipelineConfig::parse(&cfg.serialize()).unwrap(), cfg, "{name}");
            parsed += 1;
        }
    }
    assert_eq!(parsed, 2);
}

#[test]
fn checkpoint_seeds() {
    let mut parsed = 0;
    for (name, data) in seeds("checkpoint") {
        if let Ok(model) = parse_checkpoint(&data) {
            let text = serialize_checkpoint(&model);
            assert_eq!(parse_checkpoint(text.as_bytes()).unwrap(), model, "{name}");
            parsed += 1;
        }
    }
    assert_eq!(parsed, 1);
}
