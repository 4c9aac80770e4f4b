mod common;

use common::desk_config;
use spiketok::temporal::CueAblation;
use spiketok::train::{train_synthetic, Task};

// Frozen regression bound on one recorded seed of the desk setup; the
// five-seed spread is 0.86 to 0.98.
#[test]
fn early_vs_late_full_model_reaches_095() {
    let cfg = desk_config(Task::EarlyLate, 2, CueAblation::NONE, None);
    let out = train_synthetic(&cfg).unwrap();
    let acc = out.final_test().unwrap().accuracy;
    assert!(acc >= 0.95, "test accuracy {acc}");
}
