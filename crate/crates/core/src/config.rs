//! Run configuration: one flat `key = value` namespace shared by every
//! subcommand.
//!
//! A config file lists every key, one per line, with `#` comments. Later
//! sources override earlier ones: file, then `RCLSTR_<KEY>` environment
//! variables, then command-line pairs.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::bank::Level;
use crate::encoder::EncoderConfig;
use crate::losses::{CrossKind, LossConfig, Toggles};
use crate::permute::DivisionStrategy;
use crate::textgen::{Alphabet, AugmentConfig, RenderConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("missing config key {0:?}")]
    MissingKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    /// The key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::MissingKey(k) => Some(k),
            ConfigError::InvalidValue { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeMode {
    #[default]
    Frozen,
    Finetune,
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeMode::Frozen => "frozen",
            ProbeMode::Finetune => "finetune",
        })
    }
}

impl FromStr for ProbeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "frozen" => Ok(ProbeMode::Frozen),
            "finetune" => Ok(ProbeMode::Finetune),
            other => Err(format!("unknown probe mode {other:?} (frozen, finetune)")),
        }
    }
}

/// Comma-separated list of hierarchy levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelSet(pub Vec<Level>);

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|l| l.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LevelSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut levels = Vec::new();
        for part in s.split(',') {
            let level: Level = part.trim().parse()?;
            if !levels.contains(&level) {
                levels.push(level);
            }
        }
        levels.sort();
        Ok(LevelSet(levels))
    }
}

/// Wrapper so enum-like config values print the way they parse.
macro_rules! display_via_name {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    )*};
}
display_via_name!(CrossKind, DivisionStrategy);

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr, digest = $dig:expr; )*) => {
        /// Every tunable of a run. See [`Config::describe`] for per-key docs.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key {
                    $( stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|e| ConfigError::InvalidValue {
                            key: key.into(),
                            value: value.into(),
                            reason: e.to_string(),
                        })?;
                    } )*
                    other => return Err(ConfigError::UnknownKey(other.into())),
                }
                Ok(())
            }

            /// `(key, value)` for every key, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($key), self.$key.to_string()) ),*]
            }

            /// `(key, doc)` for every key.
            pub fn describe() -> Vec<(&'static str, &'static str)> {
                vec![$( (stringify!($key), concat!($($doc),*).trim()) ),*]
            }

            fn digest_keys() -> &'static [&'static str] {
                const K: &[&str] = &[$( if $dig { stringify!($key) } else { "" } ),*];
                K
            }
        }
    };
}

config! {
    /// Global seed; every random stream derives from it.
    seed: u64 = 0, digest = true;
    /// Ordered symbol set; the probe adds one BLANK class.
    alphabet: String = "ABCDEFGHIJ".into(), digest = true;
    /// Strip height in pixels.
    height: usize = 16, digest = true;
    /// Strip width in pixels.
    width: usize = 64, digest = true;
    /// Glyph cell width in pixels.
    advance: usize = 8, digest = true;
    /// Shortest sampled word.
    word_len_min: usize = 2, digest = true;
    /// Longest sampled word.
    word_len_max: usize = 6, digest = true;
    /// Contrast factor range lower bound.
    aug_contrast_min: f32 = 0.5, digest = true;
    /// Contrast factor range upper bound.
    aug_contrast_max: f32 = 1.0, digest = true;
    /// Blur sigma range lower bound.
    aug_blur_min: f32 = 0.5, digest = true;
    /// Blur sigma range upper bound.
    aug_blur_max: f32 = 1.5, digest = true;
    /// Largest vertical crop fraction per side.
    aug_crop_max: f32 = 0.2, digest = true;
    /// Largest horizontal crop fraction per side.
    aug_hcrop_max: f32 = 0.02, digest = true;
    /// Largest Gaussian noise standard deviation.
    aug_noise_std: f32 = 0.05, digest = true;
    /// Channels of the first conv layer.
    conv1_channels: usize = 16, digest = true;
    /// Channels of the second conv layer.
    conv2_channels: usize = 32, digest = true;
    /// Sequence feature size F.
    features: usize = 32, digest = true;
    /// Sequence length T.
    frames: usize = 16, digest = true;
    /// Contrastive embedding size D.
    embed_dim: usize = 16, digest = true;
    /// Subword atoms per image.
    subword_bins: usize = 4, digest = true;
    /// Pre-training iterations.
    iterations: u64 = 2000, digest = false;
    /// Images per batch B.
    batch_size: usize = 32, digest = true;
    /// SGD learning rate (constant).
    lr: f64 = 1e-2, digest = true;
    /// Coupled weight decay.
    weight_decay: f64 = 1e-4, digest = true;
    /// SGD momentum.
    sgd_momentum: f64 = 0.9, digest = true;
    /// Global gradient-norm clip before the SGD step (0 = off).
    grad_clip: f64 = 5.0, digest = true;
    /// Momentum-encoder coefficient m.
    ema_momentum: f64 = 0.999, digest = true;
    /// Negative bank capacity K per level.
    bank_size: usize = 512, digest = true;
    /// Replace the random initial bank rows with momentum keys of warm-up
    /// batches before the first iteration.
    bank_warmup: bool = true, digest = true;
    /// InfoNCE temperature.
    tau_info: f64 = 0.07, digest = true;
    /// Symmetric-KL temperature.
    tau_kl: f64 = 0.1, digest = true;
    /// Weight of the KL term.
    alpha: f64 = 1.0, digest = true;
    /// Cross-hierarchy term: kl_only or relational.
    cross_hierarchy_loss_kind: CrossKind = CrossKind::KlOnly, digest = true;
    /// Levels summed when hierarchy is on.
    hierarchy_levels: LevelSet = LevelSet(Level::ALL.to_vec()), digest = true;
    /// Regularization on permuted images.
    reg: bool = true, digest = true;
    /// Frame and subword levels.
    hier: bool = true, digest = true;
    /// Cross-hierarchy consistency.
    con: bool = true, digest = true;
    /// Patches per image N.
    patches: usize = 2, digest = true;
    /// Images per shuffle group M.
    group_size: usize = 2, digest = true;
    /// direct, drop_boundary or vertical_projection.
    division_strategy: DivisionStrategy = DivisionStrategy::Direct, digest = true;
    /// Checkpoint interval in iterations (0 = only at the end).
    checkpoint_every: u64 = 0, digest = false;
    /// frozen or finetune.
    probe_mode: ProbeMode = ProbeMode::Frozen, digest = false;
    /// Probe SGD iterations.
    probe_iterations: u64 = 2000, digest = false;
    /// Probe learning rate.
    probe_lr: f64 = 0.05, digest = false;
    /// Strips per probe batch.
    probe_batch: usize = 64, digest = false;
    /// Labeled strips available to the probe.
    probe_train_strips: usize = 2000, digest = false;
    /// Held-out strips for evaluation.
    probe_eval_strips: usize = 500, digest = false;
    /// Fraction of the labeled strips used.
    labels_fraction: f64 = 1.0, digest = false;
}

impl Config {
    /// Parses a complete config file: every key must appear exactly once.
    pub fn from_file_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            cfg.set(key, value)?;
            let key = Self::KEYS.iter().find(|k| **k == key).expect("set accepted the key");
            if seen.contains(key) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key);
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(ConfigError::MissingKey((*missing).into()));
        }
        Ok(cfg)
    }

    /// Applies `RCLSTR_<KEY>` variables; other variables are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        for (k, v) in vars {
            if let Some(key) = k.as_ref().strip_prefix("RCLSTR_") {
                self.set(&key.to_ascii_lowercase(), v.as_ref())?;
            }
        }
        Ok(())
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<(), ConfigError> {
        for pair in pairs {
            let (k, v) = pair.as_ref().split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                message: format!("override {:?} is not key=value", pair.as_ref()),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// The config as a complete, commented file; parses back to `self`.
    pub fn to_file_text(&self) -> String {
        let docs = Self::describe();
        let mut s = String::new();
        for ((key, value), (_, doc)) in self.entries().into_iter().zip(docs) {
            s.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        s
    }

    /// SHA-256 over the keys that determine pre-training results
    /// (iteration count, checkpoint interval and probe keys excluded).
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let keys = Self::digest_keys();
        for (key, value) in self.entries() {
            if keys.contains(&key) {
                h.update(format!("{key}={value}\n"));
            }
        }
        h.finalize().into()
    }

    /// First 8 bytes of [`Config::digest`].
    pub fn digest_u64(&self) -> u64 {
        u64::from_be_bytes(self.digest()[..8].try_into().expect("8 bytes"))
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            reg: self.reg,
            hier: self.hier,
            con: self.con,
        }
    }

    pub fn set_toggles(&mut self, t: Toggles) {
        self.reg = t.reg;
        self.hier = t.hier;
        self.con = t.con;
    }

    pub fn alphabet(&self) -> Result<Alphabet, ConfigError> {
        Alphabet::new(&self.alphabet).map_err(|e| ConfigError::InvalidValue {
            key: "alphabet".into(),
            value: self.alphabet.clone(),
            reason: e.to_string(),
        })
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            height: self.height,
            width: self.width,
            advance: self.advance,
            glyph_height: ((self.height * 5 / 8).max(7).min(self.height), (self.height * 7 / 8).max(7).min(self.height)),
            ..RenderConfig::default()
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            contrast_range: (self.aug_contrast_min, self.aug_contrast_max),
            blur_sigma_range: (self.aug_blur_min, self.aug_blur_max),
            crop_fraction_range: (0.0, self.aug_crop_max),
            hcrop_fraction_range: (0.0, self.aug_hcrop_max),
            noise_std: self.aug_noise_std,
            op_probability: [1.0; 4],
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            height: self.height,
            width: self.width,
            channels: (self.conv1_channels, self.conv2_channels),
            features: self.features,
            frames: self.frames,
            embed_dim: self.embed_dim,
            subword_bins: self.subword_bins,
        }
    }

    pub fn losses(&self) -> LossConfig {
        LossConfig {
            tau_info: self.tau_info,
            tau_kl: self.tau_kl,
            alpha: self.alpha,
            cross_kind: self.cross_hierarchy_loss_kind,
        }
    }

    pub fn word_lengths(&self) -> (usize, usize) {
        (self.word_len_min, self.word_len_max)
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.alphabet()?;
        self.render().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.augment().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.encoder().geometry().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.losses().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let max_chars = self.render().max_chars();
        if self.word_len_min == 0 || self.word_len_min > self.word_len_max || self.word_len_max > max_chars {
            return invalid(format!(
                "word lengths {}..={} must lie in [1, {max_chars}]",
                self.word_len_min, self.word_len_max
            ));
        }
        if self.batch_size == 0 || self.bank_size == 0 {
            return invalid("batch_size and bank_size must be positive".into());
        }
        if self.patches == 0 || !self.frames.is_multiple_of(self.patches) || !self.width.is_multiple_of(self.patches) {
            return invalid(format!(
                "patches {} must divide frames {} and width {}",
                self.patches, self.frames, self.width
            ));
        }
        if self.group_size == 0 || (self.reg && self.batch_size < self.group_size) {
            return invalid(format!("group_size {} must be in [1, batch_size]", self.group_size));
        }
        if self.batch_size * self.frames > self.bank_size {
            return invalid(format!(
                "bank_size {} smaller than the {} frame keys enqueued per iteration",
                self.bank_size,
                self.batch_size * self.frames
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return invalid(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.sgd_momentum) {
            return invalid("lr must be > 0, weight_decay ≥ 0, sgd_momentum in [0, 1)".into());
        }
        if !(self.grad_clip >= 0.0) {
            return invalid(format!("grad_clip {} must be ≥ 0", self.grad_clip));
        }
        if self.hierarchy_levels.0.is_empty() {
            return invalid("hierarchy_levels is empty".into());
        }
        if !(self.labels_fraction > 0.0 && self.labels_fraction <= 1.0) {
            return invalid(format!("labels_fraction {} outside (0, 1]", self.labels_fraction));
        }
        if self.probe_batch == 0 || self.probe_train_strips == 0 || !(self.probe_lr > 0.0) {
            return invalid("probe_batch, probe_train_strips and probe_lr must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_file_text();
        assert_eq!(Config::from_file_text(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys() {
        let text = Config::default().to_file_text().replace("tau_kl = 0.1\n", "");
        assert_eq!(Config::from_file_text(&text), Err(ConfigError::MissingKey("tau_kl".into())));
        let text = format!("{}\nbogus = 1\n", Config::default().to_file_text());
        assert_eq!(Config::from_file_text(&text), Err(ConfigError::UnknownKey("bogus".into())));
        let mut cfg = Config::default();
        assert!(cfg.set("lr", "fast").is_err());
    }

    #[test]
    fn precedence_file_env_cli() {
        let text = Config::default().to_file_text().replace("lr = 0.01", "lr = 0.5");
        let mut cfg = Config::from_file_text(&text).unwrap();
        assert_eq!(cfg.lr, 0.5);
        cfg.apply_env([("RCLSTR_LR", "0.25"), ("HOME", "/root")]).unwrap();
        assert_eq!(cfg.lr, 0.25);
        cfg.apply_overrides(&["lr=0.125"]).unwrap();
        assert_eq!(cfg.lr, 0.125);
        assert!(cfg.apply_env([("RCLSTR_NOPE", "1")]).is_err());
    }

    #[test]
    fn digest_ignores_iteration_count_only() {
        let a = Config::default();
        let mut b = a.clone();
        b.iterations = 5;
        b.probe_lr = 0.3;
        assert_eq!(a.digest(), b.digest());
        b.tau_info = 0.2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn level_set_parsing() {
        let s: LevelSet = "word, frame".parse().unwrap();
        assert_eq!(s.0, vec![Level::Frame, Level::Word]);
        assert_eq!(s.to_string(), "frame,word");
        assert!("frame,x".parse::<LevelSet>().is_err());
    }
}
