//! Pre-train + frozen-probe cells over toggle combinations and seeds, and
//! their summary table.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::config::{Config, ProbeMode};
use crate::losses::Toggles;
use crate::probe::{self, EvalReport, ProbeError};
use crate::seed::stream;
use crate::train::{pretrain, DataSource, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AblationError> = std::result::Result<T, E>;

/// One row of the table: an untrained encoder or a toggle combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Row {
    RandomInit,
    Pretrained(Toggles),
}

impl Row {
    /// `none`, `reg`, `reg+hier`, `reg+hier+con`.
    pub const CANONICAL: [Row; 4] = [
        Row::Pretrained(Toggles::NONE),
        Row::Pretrained(Toggles {
            reg: true,
            hier: false,
            con: false,
        }),
        Row::Pretrained(Toggles {
            reg: true,
            hier: true,
            con: false,
        }),
        Row::Pretrained(Toggles::ALL),
    ];

    pub fn label(&self) -> String {
        match self {
            Row::RandomInit => "random".into(),
            Row::Pretrained(t) => t.label(),
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Row {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "random" => Ok(Row::RandomInit),
            other => other.parse().map(Row::Pretrained),
        }
    }
}

/// Outcome of one (row, seed) cell.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CellResult {
    pub row: String,
    pub seed: u64,
    pub frame_accuracy: f64,
    pub word_accuracy: f64,
    /// Total loss of the first and last pre-training iteration (NaN for
    /// the random-init row).
    pub first_loss: f64,
    pub last_loss: f64,
    pub pretrain_seconds: f64,
    pub dir: PathBuf,
}

/// The run config of a cell: `base` with the cell's seed and toggles. The
/// random-init row trains for zero iterations.
pub fn cell_config(base: &Config, row: Row, seed: u64) -> Config {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match row {
        Row::RandomInit => cfg.iterations = 0,
        Row::Pretrained(t) => cfg.set_toggles(t),
    }
    cfg
}

/// Pre-trains into `dir`, trains a frozen probe and evaluates it on the
/// held-out strips; writes `config.txt`, `probe.rcl` and `report.json`.
pub fn run_cell(base: &Config, row: Row, seed: u64, dir: &Path) -> Result<CellResult> {
    let cfg = cell_config(base, row, seed);
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_file_text())?;
    let started = Instant::now();
    let out = pretrain(&cfg, DataSource::Synthetic, dir, None, |_| {})?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let (report, _) = probe_checkpoint(&cfg, &out.final_checkpoint, dir)?;
    Ok(CellResult {
        row: row.label(),
        seed,
        frame_accuracy: report.frame_accuracy,
        word_accuracy: report.word_accuracy,
        first_loss: out.first_loss,
        last_loss: out.last_loss,
        pretrain_seconds,
        dir: dir.to_path_buf(),
    })
}

/// Frozen probe on the checkpoint's online encoder, evaluated on the
/// held-out strips; writes `probe.rcl` and `report.json` into `dir`.
pub fn probe_checkpoint(cfg: &Config, checkpoint: &Path, dir: &Path) -> Result<(EvalReport, probe::ProbeParams)> {
    let encoder = probe::load_encoder(checkpoint, cfg)?;
    let train = probe::probe_strips(cfg, stream::PROBE_TRAIN, cfg.probe_train_strips)?;
    let eval = probe::probe_strips(cfg, stream::PROBE_EVAL, cfg.probe_eval_strips)?;
    let head = probe::train_probe(cfg, &encoder.params, &train, ProbeMode::Frozen)?;
    head.save(&dir.join("probe.rcl"), cfg)?;
    let report = probe::evaluate(cfg, &encoder.params, &head, &eval, &encoder.id)?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    Ok((report, head))
}

/// Per-row means over seeds.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RowSummary {
    pub row: String,
    pub seeds: Vec<u64>,
    pub mean_word_accuracy: f64,
    pub mean_frame_accuracy: f64,
}

pub fn summarize(results: &[CellResult]) -> Vec<RowSummary> {
    let mut rows: Vec<RowSummary> = Vec::new();
    for r in results {
        if !rows.iter().any(|s| s.row == r.row) {
            let cells: Vec<&CellResult> = results.iter().filter(|c| c.row == r.row).collect();
            let n = cells.len() as f64;
            rows.push(RowSummary {
                row: r.row.clone(),
                seeds: cells.iter().map(|c| c.seed).collect(),
                mean_word_accuracy: cells.iter().map(|c| c.word_accuracy).sum::<f64>() / n,
                mean_frame_accuracy: cells.iter().map(|c| c.frame_accuracy).sum::<f64>() / n,
            });
        }
    }
    rows
}

/// Markdown table of [`summarize`].
pub fn render_table(summary: &[RowSummary]) -> String {
    let mut s = String::from("| row | seeds | word acc (%) | frame acc (%) |\n|---|---|---|---|\n");
    for r in summary {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} |\n",
            r.row,
            seeds.join(","),
            100.0 * r.mean_word_accuracy,
            100.0 * r.mean_frame_accuracy
        ));
    }
    s
}

/// Runs every (row, seed) cell under `out_dir/<row>/seed_<s>`, appending
/// each finished cell to `cells.jsonl` and rewriting `table.md` so partial
/// results survive an interruption.
pub fn ablation_matrix(
    base: &Config,
    rows: &[Row],
    seeds: &[u64],
    out_dir: &Path,
    mut progress: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    std::fs::create_dir_all(out_dir)?;
    let mut cells_file = std::fs::File::create(out_dir.join("cells.jsonl"))?;
    let mut results = Vec::new();
    for row in rows {
        for &seed in seeds {
            let dir = out_dir.join(row.label()).join(format!("seed_{seed}"));
            let cell = run_cell(base, *row, seed, &dir)?;
            writeln!(cells_file, "{}", serde_json::to_string(&cell).expect("cell serialize"))?;
            cells_file.flush()?;
            progress(&cell);
            results.push(cell);
            std::fs::write(out_dir.join("table.md"), render_table(&summarize(&results)))?;
        }
    }
    Ok(results)
}
