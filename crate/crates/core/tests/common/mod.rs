use spiketok::config::PipelineConfig;
use spiketok::temporal::CueAblation;
use spiketok::train::Task;

/// Desk-scale training setup shared by criteria 10 and 12. Hard reset keeps
/// the encoder's time-pooled features exactly shift-invariant, so timing can
/// only reach the classifier through the cue path.
pub fn desk_config(task: Task, seed: u64, ablation: CueAblation, fixed_k: Option<usize>) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    for (k, v) in [
        ("frames.height", "16"),
        ("frames.width", "16"),
        ("stsg.k_min", "2"),
        ("hilif.reset", "hard"),
        ("train.batch_size", "4"),
        ("train.lr", "0.005"),
        ("train.epochs", "80"),
        ("train.train_samples", "64"),
        ("train.test_samples", "64"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.seed = seed;
    cfg.train.task = task;
    cfg.train.ablation = ablation;
    cfg.train.fixed_k = fixed_k;
    cfg.validate().unwrap();
    cfg
}
