#![allow(dead_code)]

use rclstr::ndiff::{Array, DiffArray, Tape};

/// `[n, d]` constant from row vectors.
pub fn rows<'t>(tape: &'t Tape<f64>, rows: &[Vec<f64>]) -> DiffArray<'t, f64> {
    tape.constant(matrix(rows))
}

/// `[n, d]` trainable leaf from row vectors.
pub fn param_rows<'t>(tape: &'t Tape<f64>, rows: &[Vec<f64>]) -> DiffArray<'t, f64> {
    tape.param(matrix(rows))
}

pub fn matrix(rows: &[Vec<f64>]) -> Array<f64> {
    Array::new(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Small, fast run config: every module on, 4-image batches, K=128.
pub fn tiny_config() -> rclstr::config::Config {
    let mut cfg = rclstr::config::Config::default();
    cfg.apply_overrides(&[
        "batch_size=4",
        "conv1_channels=8",
        "conv2_channels=8",
        "features=16",
        "embed_dim=8",
        "bank_size=128",
        "iterations=6",
        "probe_iterations=60",
        "probe_train_strips=40",
        "probe_eval_strips=20",
        "probe_batch=8",
    ])
    .unwrap();
    cfg
}
