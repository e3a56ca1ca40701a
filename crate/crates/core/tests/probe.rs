mod common;

use common::tiny_config;
use rclstr::config::{Config, ProbeMode};
use rclstr::probe::{
    evaluate, export_embeddings, load_encoder, probe_strips, score, strip_labels, train_head, train_probe, HeadConfig,
    ProbeParams,
};
use rclstr::seed::stream;
use rclstr::train::{pretrain, DataSource};

fn pretrained(cfg: &Config) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(cfg, DataSource::Synthetic, dir.path(), None, |_| {}).unwrap();
    (dir, out.final_checkpoint)
}

#[test]
fn probing_never_touches_the_checkpoint() {
    let cfg = tiny_config();
    let (_dir, ckpt) = pretrained(&cfg);
    let before = std::fs::read(&ckpt).unwrap();
    let encoder = load_encoder(&ckpt, &cfg).unwrap();
    let strips = probe_strips(&cfg, stream::PROBE_TRAIN, cfg.probe_train_strips).unwrap();

    let frozen = train_probe(&cfg, &encoder.params, &strips, ProbeMode::Frozen).unwrap();
    assert!(frozen.encoder.is_none());
    let mut short = cfg.clone();
    short.probe_iterations = 5;
    let tuned = train_probe(&short, &encoder.params, &strips, ProbeMode::Finetune).unwrap();
    assert_ne!(tuned.encoder.as_ref().unwrap(), &encoder.params);

    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert_eq!(load_encoder(&ckpt, &cfg).unwrap().params, encoder.params);

    let again = train_probe(&cfg, &encoder.params, &strips, ProbeMode::Frozen).unwrap();
    assert_eq!(again, frozen);

    let path = _dir.path().join("probe.rcl");
    frozen.save(&path, &cfg).unwrap();
    assert_eq!(ProbeParams::load(&path, &cfg).unwrap(), frozen);
    tuned.save(&path, &short).unwrap();
    assert_eq!(ProbeParams::load(&path, &short).unwrap(), tuned);
}

#[test]
fn scoring_examples() {
    let cfg = Config::default();
    let alphabet = cfg.alphabet().unwrap();
    let strips = probe_strips(&cfg, stream::PROBE_EVAL, 200).unwrap();
    let truth = strip_labels(&alphabet, &strips, cfg.frames);

    let oracle = score(&alphabet, &strips, &truth, cfg.frames, String::new(), String::new());
    assert_eq!(oracle.word_accuracy, 1.0);
    assert_eq!(oracle.frame_accuracy, 1.0);
    let diag: usize = (0..alphabet.num_classes()).map(|c| oracle.confusion[c][c]).sum();
    assert_eq!(diag, oracle.frames);

    let empty = score(&alphabet, &[], &[], cfg.frames, String::new(), String::new());
    assert_eq!((empty.frame_accuracy, empty.word_accuracy, empty.frames), (0.0, 0.0, 0));

    let mut rng = rclstr::seed::rng(3);
    let random: Vec<usize> = truth
        .iter()
        .map(|_| rand::Rng::random_range(&mut rng, 0..alphabet.num_classes()))
        .collect();
    let r = score(&alphabet, &strips, &random, cfg.frames, String::new(), String::new());
    let p = 1.0 / alphabet.num_classes() as f64;
    let sigma = (p * (1.0 - p) / r.frames as f64).sqrt();
    assert!((r.frame_accuracy - p).abs() < 3.0 * sigma, "{} vs {p}", r.frame_accuracy);
}

#[test]
fn head_learns_separable_features() {
    let classes = 11;
    let frames = 4;
    let labels: Vec<usize> = (0..40 * frames).map(|i| (i * 7 + i / 3) % classes).collect();
    let features: Vec<f32> = labels
        .iter()
        .flat_map(|&l| (0..classes).map(move |c| if c == l { 1.0 } else { 0.0 }))
        .collect();
    let hc = HeadConfig {
        iterations: 300,
        lr: 0.5,
        momentum: 0.9,
        batch: 8,
        frames,
        seed: 0,
    };
    let head = train_head(&features, &labels, classes, classes, &hc).unwrap();
    assert_eq!(head.predict(&features).unwrap(), labels);
    assert!(train_head(&[], &[], classes, classes, &hc).is_err());
}

#[test]
fn random_encoder_probe_beats_chance() {
    let mut cfg = tiny_config();
    cfg.iterations = 0;
    let (_dir, ckpt) = pretrained(&cfg);
    let encoder = load_encoder(&ckpt, &cfg).unwrap();
    let train = probe_strips(&cfg, stream::PROBE_TRAIN, cfg.probe_train_strips).unwrap();
    let eval = probe_strips(&cfg, stream::PROBE_EVAL, cfg.probe_eval_strips).unwrap();
    let head = train_probe(&cfg, &encoder.params, &train, ProbeMode::Frozen).unwrap();
    let report = evaluate(&cfg, &encoder.params, &head, &eval, &encoder.id).unwrap();
    assert!(report.frame_accuracy > 1.0 / 11.0, "{}", report.frame_accuracy);
    assert_eq!(report.checkpoint_id, encoder.id);
    assert_eq!(report.frames, cfg.probe_eval_strips * cfg.frames);
    let empty = evaluate(&cfg, &encoder.params, &head, &[], &encoder.id).unwrap();
    assert_eq!(empty.word_accuracy, 0.0);
}

#[test]
fn embedding_export() {
    let cfg = tiny_config();
    let (dir, ckpt) = pretrained(&cfg);
    let encoder = load_encoder(&ckpt, &cfg).unwrap();
    let strips = probe_strips(&cfg, stream::PROBE_EVAL, 3).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    export_embeddings(&cfg, &encoder.params, &strips, &a).unwrap();
    export_embeddings(&cfg, &encoder.params, &strips, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut reader = csv::Reader::from_path(&a).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 3 + cfg.embed_dim);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * cfg.frames);
    for row in &rows {
        let norm: f64 = row.iter().skip(3).map(|v| v.parse::<f64>().unwrap().powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-5, "{norm}");
    }
}
