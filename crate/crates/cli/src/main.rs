use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rclstr::ablation::{self, AblationError, Row};
use rclstr::checkpoint::{self, CheckpointError, Records};
use rclstr::checks;
use rclstr::config::{Config, ConfigError};
use rclstr::ndiff::gradcheck::DEFAULT_TOLERANCE;
use rclstr::probe::{self, ProbeError, ProbeParams};
use rclstr::seed::{self, stream};
use rclstr::textgen::{self, dataset};
use rclstr::train::{self, DataSource, TrainError, TrainState};

#[derive(Parser)]
#[command(name = "rclstr", version, about = "Self-supervised pre-training for synthetic text strips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Complete config file (every key present). Defaults are used without it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file and RCLSTR_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; nothing is written outside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run seed, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a fixed dataset of labelled strips to `dataset.rcld`.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Pre-train the encoder; writes checkpoints and `metrics.jsonl`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset from `gen-data` instead of freshly rendered strips.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a linear probe on a checkpoint; writes `probe.rcl` and `report.json`.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `frozen` or `finetune`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        labels_fraction: Option<f64>,
        /// Also write frame embeddings of the held-out strips to `embeddings.csv`.
        #[arg(long)]
        export: bool,
    },
    /// Evaluate an existing probe; writes `report.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        probe: PathBuf,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Dump a checkpoint (names, shapes, norms) or a dataset header.
    Inspect {
        path: Option<PathBuf>,
        /// Print the default config as a complete config file instead.
        #[arg(long, conflicts_with = "path")]
        defaults: bool,
    },
    /// Pre-train + frozen probe for each toggle row and seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated rows (`none`, `reg`, `reg+hier`, `reg+hier+con`, `random`).
        #[arg(long, default_value = "none,reg,reg+hier,reg+hier+con")]
        rows: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Add the random-init row.
        #[arg(long)]
        random: bool,
    },
}

/// Resolves the run config (file < environment < overrides < seed),
/// validates it and writes the snapshot into the output directory.
fn resolve(common: &Common, extra: &[String]) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Config::from_file_text(&text)?
        }
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars())?;
    cfg.apply_overrides(&common.overrides)?;
    cfg.apply_overrides(extra)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    std::fs::write(common.out.join("config.txt"), cfg.to_file_text())?;
    Ok(cfg)
}

fn gen_data(common: &Common, count: usize) -> anyhow::Result<()> {
    let cfg = resolve(common, &[])?;
    let alphabet = cfg.alphabet()?;
    let render = cfg.render();
    let stream_seed = seed::mix(cfg.seed, stream::GEN_DATA);
    let strips = (0..count as u64)
        .map(|i| textgen::generate_strip(&alphabet, cfg.word_lengths(), &render, stream_seed, i))
        .collect::<Result<Vec<_>, _>>()?;
    let path = common.out.join("dataset.rcld");
    dataset::write_dataset(BufWriter::new(File::create(&path)?), &strips)?;
    eprintln!("wrote {} strips to {}", count, path.display());
    Ok(())
}

fn pretrain(common: &Common, data: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = resolve(common, &[])?;
    let source = match data {
        Some(path) => {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            DataSource::Strips(dataset::read_dataset(BufReader::new(file))?.1)
        }
        None => DataSource::Synthetic,
    };
    let start = resume.map(|p| TrainState::load(p, &cfg)).transpose()?;
    let every = (cfg.iterations / 20).max(1);
    let out = train::pretrain(&cfg, source, &common.out, start, |m| {
        if m.iteration == 1 || m.iteration % every == 0 {
            eprintln!(
                "iter {:>6}  loss {:.4}  grad {:.3}  {:.1}s",
                m.iteration, m.losses.total, m.grad_norm, m.wall_time_s
            );
        }
    })?;
    eprintln!("final checkpoint {}", out.final_checkpoint.display());
    Ok(())
}

fn parse_mode(mode: Option<&str>) -> Vec<String> {
    mode.map(|m| vec![format!("probe_mode={m}")]).unwrap_or_default()
}

fn run_probe(
    common: &Common,
    checkpoint: &Path,
    mode: Option<&str>,
    labels_fraction: Option<f64>,
    export: bool,
) -> anyhow::Result<()> {
    let mut extra = parse_mode(mode);
    if let Some(f) = labels_fraction {
        extra.push(format!("labels_fraction={f}"));
    }
    let cfg = resolve(common, &extra)?;
    let encoder = probe::load_encoder(checkpoint, &cfg)?;
    let train_strips = probe::probe_strips(&cfg, stream::PROBE_TRAIN, cfg.probe_train_strips)?;
    let eval_strips = probe::probe_strips(&cfg, stream::PROBE_EVAL, cfg.probe_eval_strips)?;
    let head = probe::train_probe(&cfg, &encoder.params, &train_strips, cfg.probe_mode)?;
    head.save(&common.out.join("probe.rcl"), &cfg)?;
    let report = probe::evaluate(&cfg, &encoder.params, &head, &eval_strips, &encoder.id)?;
    std::fs::write(common.out.join("report.json"), report.to_json())?;
    if export {
        let params = head.encoder.as_ref().unwrap_or(&encoder.params);
        probe::export_embeddings(&cfg, params, &eval_strips, &common.out.join("embeddings.csv"))?;
    }
    println!(
        "frame accuracy {:.4}  word accuracy {:.4}  ({} words)",
        report.frame_accuracy, report.word_accuracy, report.words
    );
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, probe_path: &Path) -> anyhow::Result<()> {
    let cfg = resolve(common, &[])?;
    let encoder = probe::load_encoder(checkpoint, &cfg)?;
    let head = ProbeParams::load(probe_path, &cfg)?;
    let eval_strips = probe::probe_strips(&cfg, stream::PROBE_EVAL, cfg.probe_eval_strips)?;
    let report = probe::evaluate(&cfg, &encoder.params, &head, &eval_strips, &encoder.id)?;
    std::fs::write(common.out.join("report.json"), report.to_json())?;
    println!(
        "frame accuracy {:.4}  word accuracy {:.4}  ({} words)",
        report.frame_accuracy, report.word_accuracy, report.words
    );
    Ok(())
}

/// Prints the table; `Ok(false)` when any row failed.
fn gradcheck(common: &Common, tolerance: f64) -> anyhow::Result<bool> {
    resolve(common, &[])?;
    let mut table = format!("{:<28} {:<24} {:>12}  result\n", "op", "shape", "max rel err");
    let mut all = true;
    for case in checks::all_cases() {
        let row = case.evaluate(tolerance);
        all &= row.passed;
        table.push_str(&format!(
            "{:<28} {:<24} {:>12.3e}  {}\n",
            row.op,
            row.shape,
            row.max_rel_err,
            if row.passed { "PASS" } else { "FAIL" }
        ));
    }
    print!("{table}");
    std::fs::write(common.out.join("gradcheck.txt"), &table)?;
    Ok(all)
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let mut magic = [0u8; 4];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .with_context(|| format!("reading {}", path.display()))?;
    if &magic == checkpoint::MAGIC {
        let records = Records::load(path)?;
        println!("{:<32} {:<16} {:>14}", "name", "shape", "l2 norm");
        for (name, array) in &records.0 {
            let norm = array.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            println!("{:<32} {:<16} {:>14.6e}", name, format!("{:?}", array.shape()), norm);
        }
    } else if &magic == dataset::MAGIC {
        let header = dataset::read_header(&mut BufReader::new(File::open(path)?))?;
        println!("dataset version {}", header.version);
        println!("strips {}", header.count);
        println!("height {}", header.height);
        println!("width {}", header.width);
    } else {
        bail!("{}: neither a checkpoint nor a dataset", path.display());
    }
    Ok(())
}

fn ablate(common: &Common, rows: &str, seeds: &str, random: bool) -> anyhow::Result<()> {
    let mut parsed = Vec::new();
    if random {
        parsed.push(Row::RandomInit);
    }
    for r in rows.split(',').filter(|r| !r.trim().is_empty()) {
        let row: Row = r.parse().map_err(|reason| ConfigError::InvalidValue {
            key: "rows".into(),
            value: r.into(),
            reason,
        })?;
        if !parsed.contains(&row) {
            parsed.push(row);
        }
    }
    let seeds = seeds
        .split(',')
        .map(|s| {
            s.trim().parse::<u64>().map_err(|e| ConfigError::InvalidValue {
                key: "seeds".into(),
                value: s.into(),
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = resolve(common, &[])?;
    let results = ablation::ablation_matrix(&cfg, &parsed, &seeds, &common.out, |cell| {
        eprintln!(
            "{} seed {}: word {:.4} frame {:.4} ({:.0}s)",
            cell.row, cell.seed, cell.word_accuracy, cell.frame_accuracy, cell.pretrain_seconds
        );
    })?;
    print!("{}", ablation::render_table(&ablation::summarize(&results)));
    Ok(())
}

/// The config error behind `err`, if the failure is the config's fault.
fn config_error(err: &anyhow::Error) -> Option<&ConfigError> {
    fn from_train(e: &TrainError) -> Option<&ConfigError> {
        match e {
            TrainError::Config(c) => Some(c),
            _ => None,
        }
    }
    fn from_probe(e: &ProbeError) -> Option<&ConfigError> {
        match e {
            ProbeError::Config(c) => Some(c),
            ProbeError::Train(t) => from_train(t),
            _ => None,
        }
    }
    if let Some(c) = err.downcast_ref::<ConfigError>() {
        return Some(c);
    }
    if let Some(t) = err.downcast_ref::<TrainError>() {
        return from_train(t);
    }
    if let Some(p) = err.downcast_ref::<ProbeError>() {
        return from_probe(p);
    }
    match err.downcast_ref::<AblationError>() {
        Some(AblationError::Train(t)) => from_train(t),
        Some(AblationError::Probe(p)) => from_probe(p),
        _ => None,
    }
}

/// A checkpoint written under a different config.
fn digest_mismatch(err: &anyhow::Error) -> bool {
    let is = |c: &CheckpointError| matches!(c, CheckpointError::DigestMismatch { .. });
    err.downcast_ref::<CheckpointError>().is_some_and(is)
        || matches!(err.downcast_ref::<TrainError>(), Some(TrainError::Checkpoint(c)) if is(c))
        || matches!(err.downcast_ref::<ProbeError>(), Some(ProbeError::Checkpoint(c)) if is(c))
}

fn report_error(err: &anyhow::Error) -> ExitCode {
    let (kind, key, code) = match config_error(err) {
        Some(c) => ("config", c.key().map(str::to_string), 2),
        None if digest_mismatch(err) => ("config", None, 2),
        None => ("runtime", None, 1),
    };
    let line = serde_json::json!({
        "error": kind,
        "key": key,
        "message": format!("{err:#}"),
    });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, count } => gen_data(common, *count),
        Command::Pretrain { common, data, resume } => pretrain(common, data.as_deref(), resume.as_deref()),
        Command::Probe {
            common,
            checkpoint,
            mode,
            labels_fraction,
            export,
        } => run_probe(common, checkpoint, mode.as_deref(), *labels_fraction, *export),
        Command::Eval {
            common,
            checkpoint,
            probe,
        } => eval(common, checkpoint, probe),
        Command::Gradcheck { common, tolerance } => match gradcheck(common, *tolerance) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
        Command::Inspect { path, defaults } => match (path, defaults) {
            (_, true) => {
                print!("{}", Config::default().to_file_text());
                Ok(())
            }
            (Some(p), false) => inspect(p),
            (None, false) => Err(anyhow::anyhow!("inspect needs a path or --defaults")),
        },
        Command::Ablate {
            common,
            rows,
            seeds,
            random,
        } => ablate(common, rows, seeds, *random),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}
