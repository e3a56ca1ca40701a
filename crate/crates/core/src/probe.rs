//! Linear frame classifier over encoder sequence features: training in
//! frozen or fine-tune mode, evaluation, and embedding export.
//!
//! The head is an affine map `F → C` applied to every frame, where `C` is
//! the alphabet size plus BLANK.

use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::bank::Level;
use crate::checkpoint::{CheckpointError, Records};
use crate::config::{Config, ConfigError, ProbeMode};
use crate::encoder::{image_array, init_bound, EncoderConfig, EncoderError, EncoderParams, PARAM_NAMES};
use crate::ndiff::{Array, DiffArray, NdiffError, Tape};
use crate::seed::{self, stream};
use crate::textgen::{self, frame_labels, generate_strip, Alphabet, TextStrip, TextgenError};
use crate::train::{sgd_step, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Textgen(#[from] TextgenError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no labeled strips to train on")]
    NoData,
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

/// Strips encoded per forward pass when extracting features.
const ENCODE_CHUNK: usize = 64;

/// Trained probe head, plus the fine-tuned encoder in fine-tune mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    /// `[F, C]`.
    pub weight: Array<f32>,
    /// `[C]`.
    pub bias: Array<f32>,
    pub encoder: Option<EncoderParams<f32>>,
}

impl ProbeParams {
    pub fn features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Class logits `[R, C]` for feature rows `[R, F]`.
    fn logits<'t>(&self, tape: &'t Tape<f32>, rows: &DiffArray<'t, f32>, head: Option<&HeadVars<'t>>) -> Result<DiffArray<'t, f32>> {
        let (w, b) = match head {
            Some(h) => (h.weight, h.bias),
            None => (tape.constant(self.weight.clone()), tape.constant(self.bias.clone())),
        };
        Ok(rows.matmul(&w)?.add(&b)?)
    }

    /// Predicted class per row of `[R, F]` features.
    pub fn predict(&self, features: &[f32]) -> Result<Vec<usize>> {
        let f = self.features();
        let tape = Tape::<f32>::new();
        let rows = tape.constant(Array::new(&[features.len() / f, f], features.to_vec())?);
        let logits = self.logits(&tape, &rows, None)?.value();
        Ok(logits.data().chunks(self.classes()).map(argmax).collect())
    }

    pub fn to_records(&self, cfg: &Config) -> Records {
        let mut r = Records::default();
        r.push_u64("meta.digest", cfg.digest_u64());
        r.push("probe.weight", self.weight.clone());
        r.push("probe.bias", self.bias.clone());
        if let Some(enc) = &self.encoder {
            for (name, a) in enc.named() {
                r.push(format!("online.{name}"), a.clone());
            }
        }
        r
    }

    pub fn from_records(records: &Records, cfg: &Config) -> Result<Self> {
        check_digest(records, cfg)?;
        let encoder = if records.get(&format!("online.{}", PARAM_NAMES[0])).is_some() {
            Some(online_params(records, &cfg.encoder())?)
        } else {
            None
        };
        let p = Self {
            weight: records.require("probe.weight")?.clone(),
            bias: records.require("probe.bias")?.clone(),
            encoder,
        };
        let (f, c) = (cfg.features, cfg.alphabet()?.num_classes());
        if p.weight.shape() != [f, c] || p.bias.shape() != [c] {
            return Err(CheckpointError::Format(format!(
                "probe head has shape {:?}, expected [{f}, {c}]",
                p.weight.shape()
            ))
            .into());
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path, cfg: &Config) -> Result<()> {
        Ok(self.to_records(cfg).save(path)?)
    }

    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        Self::from_records(&Records::load(path)?, cfg)
    }
}

struct HeadVars<'t> {
    weight: DiffArray<'t, f32>,
    bias: DiffArray<'t, f32>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_digest(records: &Records, cfg: &Config) -> Result<()> {
    let found = records.require_u64("meta.digest")?;
    let expected = cfg.digest_u64();
    if found != expected {
        return Err(CheckpointError::DigestMismatch { found, expected }.into());
    }
    Ok(())
}

fn online_params(records: &Records, enc: &EncoderConfig) -> Result<EncoderParams<f32>> {
    let arrays = PARAM_NAMES
        .iter()
        .map(|n| Ok(records.require(&format!("online.{n}"))?.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncoderParams::from_arrays(enc, arrays)?)
}

/// An encoder read from a training checkpoint, with the checkpoint's id.
#[derive(Debug, Clone)]
pub struct LoadedEncoder {
    pub params: EncoderParams<f32>,
    /// First 16 hex digits of the SHA-256 of the checkpoint file.
    pub id: String,
}

/// Loads the online encoder of a training checkpoint written under `cfg`.
pub fn load_encoder(path: &Path, cfg: &Config) -> Result<LoadedEncoder> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    let records = Records::read(bytes.as_slice())?;
    check_digest(&records, cfg)?;
    let digest = Sha256::digest(&bytes);
    let id = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(LoadedEncoder {
        params: online_params(&records, &cfg.encoder())?,
        id,
    })
}

/// `count` labeled strips of the given seed stream (e.g.
/// [`stream::PROBE_TRAIN`] or [`stream::PROBE_EVAL`]).
pub fn probe_strips(cfg: &Config, stream_index: u64, count: usize) -> Result<Vec<TextStrip>> {
    let alphabet = cfg.alphabet()?;
    let render = cfg.render();
    let stream_seed = seed::mix(cfg.seed, stream_index);
    (0..count as u64)
        .map(|i| Ok(generate_strip(&alphabet, cfg.word_lengths(), &render, stream_seed, i)?))
        .collect()
}

/// Frame class labels, strip-major: `strips × T`.
pub fn strip_labels(alphabet: &Alphabet, strips: &[TextStrip], frames: usize) -> Vec<usize> {
    strips
        .iter()
        .flat_map(|s| frame_labels(s, frames).into_iter().map(|l| alphabet.class_of(l)))
        .collect()
}

fn strip_pixels(strips: &[TextStrip]) -> Vec<f32> {
    strips.iter().flat_map(|s| s.pixels.iter().copied()).collect()
}

/// Sequence features as frame rows `[strips·T, F]`, strip-major.
pub fn extract_features(enc: &EncoderConfig, params: &EncoderParams<f32>, strips: &[TextStrip]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(strips.len() * enc.frames * enc.features);
    for chunk in strips.chunks(ENCODE_CHUNK) {
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape, false);
        let x = tape.constant(image_array(enc, chunk.len(), &strip_pixels(chunk))?);
        let rows = frame_rows(&bound.encode(enc, &x)?)?;
        out.extend_from_slice(rows.value_ref().data());
    }
    Ok(out)
}

/// Normalized frame-level embeddings `[strips·T, D]`, strip-major.
pub fn extract_embeddings(enc: &EncoderConfig, params: &EncoderParams<f32>, strips: &[TextStrip]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(strips.len() * enc.frames * enc.embed_dim);
    for chunk in strips.chunks(ENCODE_CHUNK) {
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape, false);
        let x = tape.constant(image_array(enc, chunk.len(), &strip_pixels(chunk))?);
        let seq = bound.encode(enc, &x)?;
        let z = bound.predict_level(enc, &seq, Level::Frame)?;
        out.extend_from_slice(z.value_ref().data());
    }
    Ok(out)
}

/// `[B, F, T]` to `[B·T, F]`.
fn frame_rows<'t>(seq: &DiffArray<'t, f32>) -> Result<DiffArray<'t, f32>> {
    let s = seq.shape();
    Ok(seq.swap_last2()?.reshape(&[s[0] * s[2], s[1]])?)
}

/// Head hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub iterations: u64,
    pub lr: f64,
    pub momentum: f64,
    /// Strips (groups of `frames` rows) per batch.
    pub batch: usize,
    pub frames: usize,
    pub seed: u64,
}

impl HeadConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            iterations: cfg.probe_iterations,
            lr: cfg.probe_lr,
            momentum: cfg.sgd_momentum,
            batch: cfg.probe_batch,
            frames: cfg.frames,
            seed: cfg.seed,
        }
    }
}

fn init_head(f: usize, classes: usize, seed_value: u64) -> (Array<f32>, Array<f32>) {
    let mut rng = seed::rng(seed::mix(seed_value, stream::PROBE_INIT));
    let bound = init_bound(&[f, classes]) as f32;
    let w = (0..f * classes).map(|_| rng.random_range(-bound..=bound)).collect();
    (Array::new(&[f, classes], w).expect("shape"), Array::zeros(&[classes]))
}

/// Mean per-frame cross-entropy of `[R, C]` logits.
fn cross_entropy<'t>(logits: &DiffArray<'t, f32>, labels: &[usize]) -> Result<DiffArray<'t, f32>> {
    let c = logits.shape()[1];
    let logp = logits.log_softmax(1, 1.0)?;
    let picked = logp.gather(labels.iter().enumerate().map(|(r, &l)| r * c + l).collect(), &[labels.len()])?;
    Ok(picked.mean_all().scale(-1.0))
}

fn batch_strips(rng: &mut impl Rng, available: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..available)).collect()
}

/// Trains a head on fixed feature rows `[strips·T, F]` with class labels;
/// the encoder never enters the optimizer.
pub fn train_head(features: &[f32], labels: &[usize], f: usize, classes: usize, hc: &HeadConfig) -> Result<ProbeParams> {
    if labels.is_empty() || features.len() != labels.len() * f {
        return Err(ProbeError::NoData);
    }
    let strips = labels.len() / hc.frames;
    let (weight, bias) = init_head(f, classes, hc.seed);
    let mut head = ProbeParams {
        weight,
        bias,
        encoder: None,
    };
    let mut velocity = vec![Array::zeros(&[f, classes]), Array::zeros(&[classes])];
    let mut rng = seed::rng(seed::mix(hc.seed, stream::PROBE_BATCHES));
    for _ in 0..hc.iterations {
        let picks = batch_strips(&mut rng, strips, hc.batch);
        let mut rows = Vec::with_capacity(picks.len() * hc.frames * f);
        let mut targets = Vec::with_capacity(picks.len() * hc.frames);
        for &s in &picks {
            rows.extend_from_slice(&features[s * hc.frames * f..(s + 1) * hc.frames * f]);
            targets.extend_from_slice(&labels[s * hc.frames..(s + 1) * hc.frames]);
        }
        let tape = Tape::<f32>::new();
        let vars = HeadVars {
            weight: tape.param(head.weight.clone()),
            bias: tape.param(head.bias.clone()),
        };
        let x = tape.constant(Array::new(&[targets.len(), f], rows)?);
        let loss = cross_entropy(&head.logits(&tape, &x, Some(&vars))?, &targets)?;
        let mut grads = loss.backward()?;
        let g = vec![
            grads.take(&vars.weight).expect("weight gradient"),
            grads.take(&vars.bias).expect("bias gradient"),
        ];
        let mut params = vec![head.weight.clone(), head.bias.clone()];
        drop(grads);
        sgd_step(&mut params, &g, &mut velocity, hc.lr, 0.0, hc.momentum)?;
        head.bias = params.pop().expect("bias");
        head.weight = params.pop().expect("weight");
    }
    Ok(head)
}

/// Strips actually used for probe training under `labels_fraction`.
pub fn labeled_subset(cfg: &Config, strips: &[TextStrip]) -> usize {
    ((strips.len() as f64 * cfg.labels_fraction).round() as usize).clamp(1, strips.len().max(1))
}

/// Trains the probe. Frozen mode caches encoder features once and only
/// the head is optimized; fine-tune mode also updates a copy of the
/// encoder with the pre-training learning rate.
pub fn train_probe(cfg: &Config, encoder: &EncoderParams<f32>, strips: &[TextStrip], mode: ProbeMode) -> Result<ProbeParams> {
    cfg.validate()?;
    if strips.is_empty() {
        return Err(ProbeError::NoData);
    }
    let strips = &strips[..labeled_subset(cfg, strips)];
    let enc = cfg.encoder();
    let alphabet = cfg.alphabet()?;
    let labels = strip_labels(&alphabet, strips, cfg.frames);
    let hc = HeadConfig::from_config(cfg);
    match mode {
        ProbeMode::Frozen => {
            let features = extract_features(&enc, encoder, strips)?;
            train_head(&features, &labels, cfg.features, alphabet.num_classes(), &hc)
        }
        ProbeMode::Finetune => finetune(cfg, encoder, strips, &labels, &hc),
    }
}

fn finetune(
    cfg: &Config,
    encoder: &EncoderParams<f32>,
    strips: &[TextStrip],
    labels: &[usize],
    hc: &HeadConfig,
) -> Result<ProbeParams> {
    let enc = cfg.encoder();
    let (f, t) = (cfg.features, cfg.frames);
    let classes = cfg.alphabet()?.num_classes();
    let (weight, bias) = init_head(f, classes, hc.seed);
    let mut head = ProbeParams {
        weight,
        bias,
        encoder: None,
    };
    let mut params = encoder.clone();
    let mut enc_velocity: Vec<Array<f32>> = params.arrays.iter().map(|a| Array::zeros(a.shape())).collect();
    let mut head_velocity = vec![Array::zeros(&[f, classes]), Array::zeros(&[classes])];
    let mut rng = seed::rng(seed::mix(hc.seed, stream::PROBE_BATCHES));
    for _ in 0..hc.iterations {
        let picks = batch_strips(&mut rng, strips.len(), hc.batch);
        let chosen: Vec<TextStrip> = picks.iter().map(|&s| strips[s].clone()).collect();
        let targets: Vec<usize> = picks.iter().flat_map(|&s| labels[s * t..(s + 1) * t].iter().copied()).collect();
        let tape = Tape::<f32>::new();
        let bound = params.bind(&tape, true);
        let vars = HeadVars {
            weight: tape.param(head.weight.clone()),
            bias: tape.param(head.bias.clone()),
        };
        let x = tape.constant(image_array(&enc, chosen.len(), &strip_pixels(&chosen))?);
        let rows = frame_rows(&bound.encode(&enc, &x)?)?;
        let loss = cross_entropy(&head.logits(&tape, &rows, Some(&vars))?, &targets)?;
        let mut grads = loss.backward()?;
        let enc_grads: Vec<Array<f32>> = bound
            .vars
            .iter()
            .map(|v| grads.take(v).unwrap_or_else(|| Array::zeros(&v.shape())))
            .collect();
        let head_grads = vec![
            grads.take(&vars.weight).expect("weight gradient"),
            grads.take(&vars.bias).expect("bias gradient"),
        ];
        drop(grads);
        sgd_step(&mut params.arrays, &enc_grads, &mut enc_velocity, cfg.lr, cfg.weight_decay, hc.momentum)?;
        let mut hp = vec![head.weight.clone(), head.bias.clone()];
        sgd_step(&mut hp, &head_grads, &mut head_velocity, hc.lr, 0.0, hc.momentum)?;
        head.bias = hp.pop().expect("bias");
        head.weight = hp.pop().expect("weight");
    }
    head.encoder = Some(params);
    Ok(head)
}

/// Evaluation summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub frame_accuracy: f64,
    pub word_accuracy: f64,
    pub frames: usize,
    pub words: usize,
    pub correct_frames: usize,
    pub correct_words: usize,
    /// Class names in confusion order; the last is BLANK.
    pub classes: Vec<String>,
    /// `confusion[truth][predicted]` frame counts.
    pub confusion: Vec<Vec<usize>>,
    pub config_digest: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialize")
    }
}

/// Class names for reports and exports; BLANK is spelled out.
pub fn class_names(alphabet: &Alphabet) -> Vec<String> {
    let mut names: Vec<String> = alphabet.symbols().iter().map(|c| c.to_string()).collect();
    names.push("BLANK".into());
    names
}

/// Scores per-frame class predictions (strip-major, `T` per strip).
/// An empty set yields zero totals and zero accuracies.
pub fn score(
    alphabet: &Alphabet,
    strips: &[TextStrip],
    predicted: &[usize],
    frames: usize,
    config_digest: String,
    checkpoint_id: String,
) -> EvalReport {
    let c = alphabet.num_classes();
    let truth = strip_labels(alphabet, strips, frames);
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct_frames = 0;
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
        correct_frames += usize::from(t == p);
    }
    let mut correct_words = 0;
    for (s, strip) in strips.iter().enumerate() {
        let labels: Vec<Option<char>> = predicted[s * frames..(s + 1) * frames]
            .iter()
            .map(|&k| alphabet.label_of(k))
            .collect();
        correct_words += usize::from(textgen::collapse(&labels) == strip.text);
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    EvalReport {
        frame_accuracy: ratio(correct_frames, truth.len()),
        word_accuracy: ratio(correct_words, strips.len()),
        frames: truth.len(),
        words: strips.len(),
        correct_frames,
        correct_words,
        classes: class_names(alphabet),
        confusion,
        config_digest,
        checkpoint_id,
    }
}

/// Scores the probe on `strips`. A fine-tuned probe carries its own
/// encoder, which takes precedence over `encoder`.
pub fn evaluate(
    cfg: &Config,
    encoder: &EncoderParams<f32>,
    probe: &ProbeParams,
    strips: &[TextStrip],
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let enc = cfg.encoder();
    let alphabet = cfg.alphabet()?;
    let params = probe.encoder.as_ref().unwrap_or(encoder);
    let predicted = if strips.is_empty() {
        Vec::new()
    } else {
        probe.predict(&extract_features(&enc, params, strips)?)?
    };
    Ok(score(&alphabet, strips, &predicted, cfg.frames, cfg.digest_hex(), checkpoint_id.to_string()))
}

/// Writes one CSV row per frame: `strip,frame,label,e0..e{D-1}` with the
/// normalized frame embeddings, in strip then frame order.
pub fn export_embeddings(cfg: &Config, encoder: &EncoderParams<f32>, strips: &[TextStrip], path: &Path) -> Result<()> {
    let enc = cfg.encoder();
    let alphabet = cfg.alphabet()?;
    let names = class_names(&alphabet);
    let (t, d) = (cfg.frames, cfg.embed_dim);
    let embeddings = extract_embeddings(&enc, encoder, strips)?;
    let labels = strip_labels(&alphabet, strips, t);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["strip".to_string(), "frame".into(), "label".into()];
    header.extend((0..d).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (row, (values, &label)) in embeddings.chunks(d).zip(&labels).enumerate() {
        let mut rec = vec![(row / t).to_string(), (row % t).to_string(), names[label].clone()];
        rec.extend(values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
