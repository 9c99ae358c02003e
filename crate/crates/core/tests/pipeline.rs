use jasr::config::Config;
use jasr::pipeline::{synthesize, train_data, Dataset};
use jasr::trainer::{run_training, Experiment};

#[test]
fn tiny_preset_synthesizes_and_round_trips() {
    let cfg = Config::tiny();
    let ds = synthesize(&cfg).unwrap();
    assert_eq!(ds.supervised.len(), 80);
    assert_eq!(ds.unsup_audio.len(), 30);
    assert_eq!(ds.unsup_text.len(), 80);
    for (name, set) in ds.partitions.sets() {
        assert!(!set.is_empty(), "{name} is empty");
    }
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path(), cfg.corpus.feature_dim, cfg.corpus.frame_step_ms).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn tiny_preset_trains_every_experiment() {
    let mut cfg = Config::tiny();
    cfg.train.steps = 3;
    let ds = synthesize(&cfg).unwrap();
    let data = train_data(&cfg, &ds).unwrap();
    for e in Experiment::ALL {
        let out = run_training(e, &cfg.model, &cfg.train, &data, None, cfg.seed, None, |_| {}).unwrap();
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.checkpoint.step, 3);
    }
}
