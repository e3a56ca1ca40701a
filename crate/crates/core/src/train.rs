//! Pre-training loop: two augmented views, a group-shuffled view for the
//! online branch, hierarchical losses against per-level banks, SGD with
//! momentum, momentum-encoder update, then enqueue.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bank::{BankError, Level, NegativeBank};
use crate::checkpoint::{CheckpointError, Records};
use crate::config::{Config, ConfigError};
use crate::encoder::{image_array, EncoderError, EncoderParams, ModelPair, PARAM_NAMES};
use crate::losses::{self, active_levels, LevelInputs, LossBreakdown, LossError, LossInputs};
use crate::ndiff::{Array, NdiffError};
use crate::permute::{self, PermuteError};
use crate::seed::{self, stream};
use crate::textgen::{self, generate_strip, ImageBatch, TextStrip, TextgenError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data exhausted: iteration {iteration} needs strip {needed} but the dataset holds {available}")]
    DataExhausted {
        iteration: u64,
        needed: u64,
        available: usize,
    },
    #[error("non-finite loss at iteration {iteration} (data stream seed {data_seed:#x}, permutation seed {perm_seed:#x}, terms {terms})")]
    NonFiniteLoss {
        iteration: u64,
        data_seed: u64,
        perm_seed: u64,
        terms: String,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Permute(#[from] PermuteError),
    #[error(transparent)]
    Textgen(#[from] TextgenError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// `v := μ·v + (g + wd·p)`, `p := p − lr·v`, elementwise.
pub fn sgd_step(
    params: &mut [Array<f32>],
    grads: &[Array<f32>],
    velocity: &mut [Array<f32>],
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(NdiffError::ShapeMismatch {
            op: "sgd_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), velocity.len()],
        }
        .into());
    }
    let (lr, wd, mu) = (lr as f32, weight_decay as f32, momentum as f32);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(NdiffError::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            }
            .into());
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub pair: ModelPair,
    /// SGD velocity, one array per online parameter.
    pub velocity: Vec<Array<f32>>,
    /// Indexed by [`Level::index`].
    pub banks: Vec<NegativeBank>,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn init(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let pair = ModelPair::init(&cfg.encoder(), cfg.ema_momentum, seed::mix(cfg.seed, stream::INIT))?;
        let velocity = pair.online.arrays.iter().map(|a| Array::zeros(a.shape())).collect();
        let bank_seed = seed::mix(cfg.seed, stream::BANKS);
        let banks = Level::ALL
            .iter()
            .map(|&l| NegativeBank::init(l, cfg.bank_size, cfg.embed_dim, seed::mix(bank_seed, l.index() as u64)))
            .collect::<Result<_, _>>()?;
        let mut state = Self {
            pair,
            velocity,
            banks,
            iteration: 0,
        };
        if cfg.bank_warmup {
            state.warm_banks(cfg)?;
        }
        Ok(state)
    }

    /// Overwrites every bank the run will touch with momentum keys of
    /// augmented warm-up strips (a stream disjoint from training data),
    /// until each has received at least `K` keys.
    fn warm_banks(&mut self, cfg: &Config) -> Result<()> {
        let enc = cfg.encoder();
        let (alphabet, render, aug) = (cfg.alphabet()?, cfg.render(), cfg.augment());
        let warm_seed = seed::mix(cfg.seed, stream::BANK_WARMUP);
        let levels = touched_levels(cfg);
        let b = cfg.batch_size;
        let mut received = 0;
        let mut batch = 0u64;
        // the word level receives the fewest keys per batch
        while received < cfg.bank_size {
            let mut pixels = Vec::with_capacity(b * cfg.height * cfg.width);
            for j in 0..b as u64 {
                let index = batch * b as u64 + j;
                let strip = generate_strip(&alphabet, cfg.word_lengths(), &render, warm_seed, index)?;
                pixels.extend(textgen::augment(&strip, &aug, seed::mix(seed::mix(warm_seed, index), 3)));
            }
            let tape = crate::ndiff::Tape::<f32>::new();
            let momentum = self.pair.momentum.bind(&tape, false);
            let seq = momentum.encode(&enc, &tape.constant(image_array(&enc, b, &pixels)?))?;
            for &level in &levels {
                let keys = momentum.predict_level(&enc, &seq, level)?;
                self.banks[level.index()].enqueue_dequeue(keys.value_ref().data())?;
            }
            received += b * levels.iter().map(|&l| enc.atoms(l)).min().unwrap_or(1);
            batch += 1;
        }
        Ok(())
    }

    pub fn to_records(&self, cfg: &Config) -> Records {
        let mut r = Records::default();
        r.push_u64("meta.iteration", self.iteration);
        r.push_u64("meta.digest", cfg.digest_u64());
        for (name, a) in self.pair.online.named() {
            r.push(format!("online.{name}"), a.clone());
        }
        for (name, a) in self.pair.momentum.named() {
            r.push(format!("momentum.{name}"), a.clone());
        }
        for (name, a) in PARAM_NAMES.iter().zip(&self.velocity) {
            r.push(format!("velocity.{name}"), a.clone());
        }
        for b in &self.banks {
            let storage = Array::new(&[b.capacity(), b.dim()], b.storage().to_vec()).expect("bank shape");
            r.push(format!("bank.{}.storage", b.level().name()), storage);
            r.push_u64(format!("bank.{}.cursor", b.level().name()), b.cursor() as u64);
            r.push_u64(format!("bank.{}.fill", b.level().name()), b.fill() as u64);
        }
        r
    }

    /// Restores state, refusing checkpoints written under another config.
    pub fn from_records(records: &Records, cfg: &Config) -> Result<Self> {
        let found = records.require_u64("meta.digest")?;
        let expected = cfg.digest_u64();
        if found != expected {
            return Err(CheckpointError::DigestMismatch { found, expected }.into());
        }
        let enc = cfg.encoder();
        let group = |prefix: &str| -> Result<Vec<Array<f32>>> {
            PARAM_NAMES
                .iter()
                .map(|n| Ok(records.require(&format!("{prefix}.{n}"))?.clone()))
                .collect()
        };
        let online = EncoderParams::from_arrays(&enc, group("online")?)?;
        let momentum = EncoderParams::from_arrays(&enc, group("momentum")?)?;
        let velocity = group("velocity")?;
        let mut banks = Vec::new();
        for level in Level::ALL {
            let storage = records.require(&format!("bank.{}.storage", level.name()))?;
            let cursor = records.require_u64(&format!("bank.{}.cursor", level.name()))? as usize;
            let fill = records.require_u64(&format!("bank.{}.fill", level.name()))? as usize;
            let dim = *storage.shape().last().unwrap_or(&0);
            banks.push(NegativeBank::from_parts(level, dim, storage.data().to_vec(), cursor, fill)?);
        }
        Ok(Self {
            pair: ModelPair {
                online,
                momentum,
                m: cfg.ema_momentum,
            },
            velocity,
            banks,
            iteration: records.require_u64("meta.iteration")?,
        })
    }

    pub fn save(&self, path: &Path, cfg: &Config) -> Result<()> {
        Ok(self.to_records(cfg).save(path)?)
    }

    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        Self::from_records(&Records::load(path)?, cfg)
    }
}

/// Banks that receive keys each iteration: the active levels, plus the
/// subword and word banks whenever cross-hierarchy consistency is on.
pub fn touched_levels(cfg: &Config) -> Vec<Level> {
    let toggles = cfg.toggles();
    let mut touched = active_levels(toggles, &cfg.hierarchy_levels.0);
    if toggles.con {
        for l in [Level::Subword, Level::Word] {
            if !touched.contains(&l) {
                touched.push(l);
            }
        }
    }
    touched.sort();
    touched
}

/// Observable steps of one iteration, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainEvent {
    LossComputed { iteration: u64 },
    Enqueued { iteration: u64, level: Level, keys: usize },
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub toggles: String,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    pub bank_fill: Vec<usize>,
    pub banks_touched: Vec<&'static str>,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Where pre-training strips come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Fresh strips rendered from the run seed; never runs out.
    Synthetic,
    /// A fixed dataset consumed in order.
    Strips(Vec<TextStrip>),
}

/// Two augmented views of a batch.
pub struct ViewPair {
    pub query: ImageBatch,
    pub key: ImageBatch,
}

pub struct Trainer {
    cfg: Config,
    state: TrainState,
    data: DataSource,
    hook: Option<Box<dyn FnMut(&TrainEvent)>>,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: Config, data: DataSource) -> Result<Self> {
        let state = TrainState::init(&cfg)?;
        Self::from_state(cfg, state, data)
    }

    pub fn from_state(cfg: Config, state: TrainState, data: DataSource) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state,
            data,
            hook: None,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// Receives every [`TrainEvent`].
    pub fn set_hook(&mut self, hook: impl FnMut(&TrainEvent) + 'static) {
        self.hook = Some(Box::new(hook));
    }

    fn emit(&mut self, event: TrainEvent) {
        if let Some(h) = self.hook.as_mut() {
            h(&event);
        }
    }

    fn data_seed(&self) -> u64 {
        seed::mix(self.cfg.seed, stream::PRETRAIN_DATA)
    }

    /// Query and key views of the batch for `iteration`.
    pub fn views(&self, iteration: u64) -> Result<ViewPair> {
        let cfg = &self.cfg;
        let (alphabet, render, aug) = (cfg.alphabet()?, cfg.render(), cfg.augment());
        let b = cfg.batch_size as u64;
        let data_seed = self.data_seed();
        let mut query = Vec::with_capacity(cfg.batch_size);
        let mut key = Vec::with_capacity(cfg.batch_size);
        for j in 0..b {
            let index = iteration * b + j;
            let strip = match &self.data {
                DataSource::Synthetic => generate_strip(&alphabet, cfg.word_lengths(), &render, data_seed, index)?,
                DataSource::Strips(strips) => strips
                    .get(index as usize)
                    .cloned()
                    .ok_or(TrainError::DataExhausted {
                        iteration,
                        needed: index,
                        available: strips.len(),
                    })?,
            };
            if strip.height != cfg.height || strip.width != cfg.width {
                return Err(ConfigError::Invalid(format!(
                    "dataset strips are {}×{}, config expects {}×{}",
                    strip.height, strip.width, cfg.height, cfg.width
                ))
                .into());
            }
            let item = seed::mix(data_seed, index);
            query.push(textgen::augment(&strip, &aug, seed::mix(item, 2)));
            key.push(textgen::augment(&strip, &aug, seed::mix(item, 3)));
        }
        Ok(ViewPair {
            query: ImageBatch::from_images(cfg.height, cfg.width, &query),
            key: ImageBatch::from_images(cfg.height, cfg.width, &key),
        })
    }

    /// Runs one iteration and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let cfg = self.cfg.clone();
        let it = self.state.iteration;
        let enc = cfg.encoder();
        let toggles = cfg.toggles();
        let loss_cfg = cfg.losses();
        let b = cfg.batch_size;
        let views = self.views(it)?;
        let perm_seed = seed::mix(seed::mix(cfg.seed, stream::PERMUTATION), it);

        let active = active_levels(toggles, &cfg.hierarchy_levels.0);
        let mut needed = active.clone();
        if toggles.con {
            needed = Level::ALL.to_vec();
        }
        let touched = touched_levels(&cfg);

        // permuted view of the first floor(B/M)·M images; the rest pass through
        let regularized = if toggles.reg {
            let covered = b / cfg.group_size * cfg.group_size;
            let head = ImageBatch {
                count: covered,
                height: cfg.height,
                width: cfg.width,
                data: views.query.data[..covered * cfg.height * cfg.width].to_vec(),
            };
            let division = permute::divide(&head, cfg.patches, cfg.division_strategy)?;
            let (mut shuffled, record) = permute::shuffle_groups(&division, cfg.group_size, perm_seed)?;
            shuffled.data.extend_from_slice(&views.query.data[covered * cfg.height * cfg.width..]);
            shuffled.count = b;
            let frame_mask = permute::boundary_mask(cfg.division_strategy, cfg.patches, cfg.frames);
            Some((shuffled, record, covered, frame_mask))
        } else {
            None
        };

        let tape = crate::ndiff::Tape::<f32>::new();
        let online = self.state.pair.online.bind(&tape, true);
        let momentum = self.state.pair.momentum.bind(&tape, false);
        assert!(
            momentum.vars.iter().all(|v| !v.requires_grad()),
            "momentum parameters must stay off the optimizer's list"
        );
        let x_q = tape.constant(image_array(&enc, b, &views.query.data)?);
        let x_k = tape.constant(image_array(&enc, b, &views.key.data)?);
        let seq_q = online.encode(&enc, &x_q)?;
        let seq_k = momentum.encode(&enc, &x_k)?;
        let seq_reg = match &regularized {
            Some((images, record, _, _)) => {
                let x_r = tape.constant(image_array(&enc, b, &images.data)?);
                Some(permute::unshuffle_features(&online.encode(&enc, &x_r)?, record)?)
            }
            None => None,
        };

        let mut levels: [Option<LevelInputs<'_, f32>>; 3] = [None, None, None];
        let mut keys: [Option<Array<f32>>; 3] = [None, None, None];
        for &level in &needed {
            let q = online.predict_level(&enc, &seq_q, level)?;
            let p = momentum.predict_level(&enc, &seq_k, level)?;
            let atoms = enc.atoms(level);
            let (q_reg, reg_mask) = match (&seq_reg, &regularized) {
                (Some(seq_r), Some((_, _, covered, frame_mask))) if active.contains(&level) => {
                    let q_reg = online.predict_level(&enc, seq_r, level)?;
                    let mask: Vec<bool> = (0..b * atoms)
                        .map(|r| r / atoms < *covered && (level != Level::Frame || frame_mask[r % atoms]))
                        .collect();
                    let mask = if mask.iter().all(|&m| m) { None } else { Some(mask) };
                    (Some(q_reg), mask)
                }
                _ => (None, None),
            };
            keys[level.index()] = Some(p.value());
            let bank = tape.constant(self.state.banks[level.index()].as_negatives());
            levels[level.index()] = Some(LevelInputs {
                q,
                p,
                q_reg,
                reg_mask,
                bank,
            });
        }
        let [frame, subword, word] = levels;
        let inputs = LossInputs {
            frame,
            subword,
            word,
            frames: cfg.frames,
            subword_bins: cfg.subword_bins,
        };
        let (total, breakdown) = losses::total_loss(&inputs, &loss_cfg, toggles, &cfg.hierarchy_levels.0)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iteration: it + 1,
                data_seed: self.data_seed(),
                perm_seed,
                terms: format!("{breakdown:?}"),
            });
        }
        self.emit(TrainEvent::LossComputed { iteration: it + 1 });

        let mut grads = total.backward()?;
        let mut grads: Vec<Array<f32>> = online
            .vars
            .iter()
            .map(|v| grads.take(v).expect("online parameter gradient"))
            .collect();
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)))
            .sum::<f64>()
            .sqrt();
        if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            let s = (cfg.grad_clip / grad_norm) as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }

        sgd_step(
            &mut self.state.pair.online.arrays,
            &grads,
            &mut self.state.velocity,
            cfg.lr,
            cfg.weight_decay,
            cfg.sgd_momentum,
        )?;
        self.state.pair.momentum_update(cfg.ema_momentum)?;

        // enqueue strictly after the loss used the pre-update banks
        for &level in &touched {
            let k = keys[level.index()].take().expect("keys for touched level");
            let count = k.shape()[0];
            self.state.banks[level.index()].enqueue_dequeue(k.data())?;
            self.emit(TrainEvent::Enqueued {
                iteration: it + 1,
                level,
                keys: count,
            });
        }
        self.state.iteration += 1;

        Ok(MetricsRecord {
            iteration: self.state.iteration,
            toggles: toggles.label(),
            losses: breakdown,
            grad_norm,
            bank_fill: self.state.banks.iter().map(|b| b.fill()).collect(),
            banks_touched: touched.iter().map(|l| l.name()).collect(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        })
    }
}

/// Files written by [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.rcl"))
}

/// Trains from `start` (or from scratch) up to `cfg.iterations`, writing
/// `metrics.jsonl`, periodic checkpoints and `final.rcl` into `out_dir`.
pub fn pretrain(
    cfg: &Config,
    data: DataSource,
    out_dir: &Path,
    start: Option<TrainState>,
    mut progress: impl FnMut(&MetricsRecord),
) -> Result<PretrainOutput> {
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = match start {
        Some(state) => Trainer::from_state(cfg.clone(), state, data)?,
        None => Trainer::new(cfg.clone(), data)?,
    };
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(trainer.state().iteration > 0)
            .write(true)
            .truncate(trainer.state().iteration == 0)
            .open(&metrics_path)?,
    );
    let mut checkpoints = Vec::new();
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    while trainer.state().iteration < cfg.iterations {
        let rec = trainer.step()?;
        if first.is_nan() {
            first = rec.losses.total;
        }
        last = rec.losses.total;
        writeln!(metrics, "{}", rec.to_json())?;
        progress(&rec);
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 {
            let path = checkpoint_path(out_dir, rec.iteration);
            trainer.state().save(&path, cfg)?;
            checkpoints.push(path);
        }
    }
    metrics.flush()?;
    let final_checkpoint = out_dir.join("final.rcl");
    trainer.state().save(&final_checkpoint, cfg)?;
    Ok(PretrainOutput {
        final_checkpoint,
        checkpoints,
        metrics: metrics_path,
        first_loss: first,
        last_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_two_step_trajectory() {
        let mut p = vec![Array::<f32>::full(&[1], 1.0)];
        let g = vec![Array::<f32>::full(&[1], 1.0)];
        let mut v = vec![Array::<f32>::zeros(&[1])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.9).unwrap();
        assert!((v[0].data()[0] - 1.0).abs() < 1e-7 && (p[0].data()[0] - 0.9).abs() < 1e-7);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.9).unwrap();
        assert!((v[0].data()[0] - 1.9).abs() < 1e-6 && (p[0].data()[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn sgd_plain_descent_and_coasting() {
        let mut p = vec![Array::<f32>::full(&[2], 2.0)];
        let mut v = vec![Array::<f32>::zeros(&[2])];
        sgd_step(&mut p, &[Array::full(&[2], 0.5)], &mut v, 0.2, 0.0, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.9, 1.9]);
        let mut v = vec![Array::<f32>::full(&[2], 1.0)];
        sgd_step(&mut p, &[Array::zeros(&[2])], &mut v, 0.1, 0.0, 0.5).unwrap();
        assert_eq!(v[0].data(), &[0.5, 0.5]);
        assert!((p[0].data()[0] - 1.85).abs() < 1e-6);
        assert!(sgd_step(&mut p, &[Array::zeros(&[3])], &mut v, 0.1, 0.0, 0.5).is_err());
    }
}
