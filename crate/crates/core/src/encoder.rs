//! Column encoder, sequence projector and per-level predictors, in online
//! and momentum copies.
//!
//! ```text
//! [B,1,H,W] conv (3, kw) stride (1, r) → relu → maxpool (2,1)
//!           conv (3, 1)                → relu → maxpool (2,1)
//!           conv (h_rem, 1)            → relu            → [B,F,1,T]
//! projector: framewise affine F→F → relu → width-3 sequence conv F→F
//! ```
//!
//! With `r = floor(W/T)` and `kw = W − (T−1)·r` the first conv produces
//! exactly `T` columns. No padding anywhere in the column stack.

use rand::Rng;

use crate::bank::Level;
use crate::ndiff::{Array, DiffArray, NdiffError, Scalar, Tape};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of the first two conv layers.
    pub channels: (usize, usize),
    /// Sequence feature size `F`.
    pub features: usize,
    /// Sequence length `T`.
    pub frames: usize,
    /// Contrastive embedding size `D`.
    pub embed_dim: usize,
    /// Subword atoms per image.
    pub subword_bins: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 64,
            channels: (16, 32),
            features: 32,
            frames: 16,
            embed_dim: 16,
            subword_bins: 4,
        }
    }
}

/// Derived conv-stack geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub stride: usize,
    pub kernel_width: usize,
    /// Height left for the last conv to collapse.
    pub final_kernel_height: usize,
}

impl EncoderConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.height < 10 {
            return bad(format!("height {} below the minimum of 10", self.height));
        }
        if self.frames == 0 || self.width < self.frames {
            return bad(format!("width {} cannot produce {} frames", self.width, self.frames));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.features == 0 || self.embed_dim == 0 {
            return bad("channel and feature sizes must be positive".into());
        }
        if self.subword_bins == 0 || self.subword_bins > self.frames {
            return bad(format!(
                "subword bins {} outside [1, {}]",
                self.subword_bins, self.frames
            ));
        }
        let stride = self.width / self.frames;
        let kernel_width = self.width - (self.frames - 1) * stride;
        let h = ((self.height - 2) / 2 - 2) / 2;
        Ok(Geometry {
            stride,
            kernel_width,
            final_kernel_height: h,
        })
    }

    /// Atoms per image at `level`.
    pub fn atoms(&self, level: Level) -> usize {
        match level {
            Level::Frame => self.frames,
            Level::Subword => self.subword_bins,
            Level::Word => 1,
        }
    }
}

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const CONV3_W: usize = 4;
pub const CONV3_B: usize = 5;
pub const PROJ_W: usize = 6;
pub const PROJ_B: usize = 7;
pub const SEQ_W: usize = 8;
pub const SEQ_B: usize = 9;

/// Index of the predictor weight for `level`; its bias follows.
pub fn predictor_index(level: Level) -> usize {
    10 + 2 * level.index()
}

pub const PARAM_NAMES: [&str; 16] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "proj.weight",
    "proj.bias",
    "seq.weight",
    "seq.bias",
    "pred.frame.weight",
    "pred.frame.bias",
    "pred.subword.weight",
    "pred.subword.bias",
    "pred.word.weight",
    "pred.word.bias",
];

/// Shapes of every parameter, in [`PARAM_NAMES`] order.
pub fn param_shapes(cfg: &EncoderConfig) -> Result<Vec<Vec<usize>>> {
    let g = cfg.geometry()?;
    let (c1, c2) = cfg.channels;
    let (f, d) = (cfg.features, cfg.embed_dim);
    Ok(vec![
        vec![c1, 1, 3, g.kernel_width],
        vec![c1],
        vec![c2, c1, 3, 1],
        vec![c2],
        vec![f, c2, g.final_kernel_height, 1],
        vec![f],
        vec![f, f],
        vec![f],
        vec![f, f, 3],
        vec![f],
        vec![f, d],
        vec![d],
        vec![f, d],
        vec![d],
        vec![f, d],
        vec![d],
    ])
}

fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        2 => shape[0],
        _ => shape[1..].iter().product(),
    }
}

/// Weight bound used at init: `sqrt(6 / fan_in)`.
pub fn init_bound(shape: &[usize]) -> f64 {
    (6.0 / fan_in(shape) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub arrays: Vec<Array<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Uniform weights in `±sqrt(6/fan_in)`, zero biases.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let arrays = param_shapes(cfg)?
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Array::zeros(&shape);
                }
                let bound = init_bound(&shape);
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect();
                Array::new(&shape, data).expect("param shape")
            })
            .collect();
        Ok(Self { arrays })
    }

    pub fn from_arrays(cfg: &EncoderConfig, arrays: Vec<Array<T>>) -> Result<Self> {
        let shapes = param_shapes(cfg)?;
        if arrays.len() != shapes.len() {
            return Err(EncoderError::Shape(format!(
                "{} parameter arrays, expected {}",
                arrays.len(),
                shapes.len()
            )));
        }
        for ((a, s), name) in arrays.iter().zip(&shapes).zip(PARAM_NAMES) {
            if a.shape() != s.as_slice() {
                return Err(EncoderError::Shape(format!(
                    "{name} has shape {:?}, expected {s:?}",
                    a.shape()
                )));
            }
        }
        Ok(Self { arrays })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            arrays: self.arrays.iter().map(|a| a.cast()).collect(),
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Array<T>)> {
        PARAM_NAMES.iter().copied().zip(&self.arrays)
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.is_finite())
    }

    /// Lifts every array onto `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .arrays
                .iter()
                .map(|a| {
                    if trainable {
                        tape.param(a.clone())
                    } else {
                        tape.constant(a.clone())
                    }
                })
                .collect(),
        }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, T> {
    pub vars: Vec<DiffArray<'t, T>>,
}

/// Packs `count` images of `H × W` into a `[count, 1, H, W]` array.
pub fn image_array<T: Scalar>(cfg: &EncoderConfig, count: usize, pixels: &[f32]) -> Result<Array<T>> {
    if pixels.len() != count * cfg.height * cfg.width {
        return Err(EncoderError::Shape(format!(
            "{} pixels for {count} images of {}×{}",
            pixels.len(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(Array::new(
        &[count, 1, cfg.height, cfg.width],
        pixels.iter().map(|&v| T::from_f32(v).expect("finite pixel")).collect(),
    )?)
}

fn affine_rows<'t, T: Scalar>(
    x: &DiffArray<'t, T>,
    w: &DiffArray<'t, T>,
    b: &DiffArray<'t, T>,
) -> Result<DiffArray<'t, T>> {
    Ok(x.matmul(w)?.add(b)?)
}

impl<'t, T: Scalar> Bound<'t, T> {
    fn var(&self, i: usize) -> &DiffArray<'t, T> {
        &self.vars[i]
    }

    /// `[B,1,H,W]` images to `[B,F,T]` sequence features.
    pub fn encode(&self, cfg: &EncoderConfig, images: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        let g = cfg.geometry()?;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.height || shape[3] != cfg.width {
            return Err(EncoderError::Shape(format!(
                "expected [B, 1, {}, {}], got {shape:?}",
                cfg.height, cfg.width
            )));
        }
        let (b, f, t) = (shape[0], cfg.features, cfg.frames);
        let x = images
            .conv2d(self.var(CONV1_W), Some(self.var(CONV1_B)), (1, g.stride))?
            .relu()
            .maxpool2d((2, 1))?;
        let x = x
            .conv2d(self.var(CONV2_W), Some(self.var(CONV2_B)), (1, 1))?
            .relu()
            .maxpool2d((2, 1))?;
        let x = x
            .conv2d(self.var(CONV3_W), Some(self.var(CONV3_B)), (1, 1))?
            .relu();
        debug_assert_eq!(x.shape(), vec![b, f, 1, t]);
        let rows = x.reshape(&[b, f, t])?.swap_last2()?.reshape(&[b * t, f])?;
        let mixed = affine_rows(&rows, self.var(PROJ_W), self.var(PROJ_B))?.relu();
        let seq = mixed.reshape(&[b, t, f])?.swap_last2()?;
        Ok(seq.conv1d_seq(self.var(SEQ_W), Some(self.var(SEQ_B)), 1)?)
    }

    /// Normalized level atoms `[B·atoms, D]`, image-major.
    pub fn predict_level(
        &self,
        cfg: &EncoderConfig,
        seq: &DiffArray<'t, T>,
        level: Level,
    ) -> Result<DiffArray<'t, T>> {
        let shape = seq.shape();
        let [b, f, _] = shape[..] else {
            return Err(EncoderError::Shape(format!("expected [B, F, T], got {shape:?}")));
        };
        let atoms = match level {
            Level::Frame => seq.swap_last2()?,
            Level::Subword => seq.avgpool_seq(cfg.subword_bins)?.swap_last2()?,
            Level::Word => seq.mean(2)?,
        };
        let n = cfg.atoms(level);
        let rows = atoms.reshape(&[b * n, f])?;
        let i = predictor_index(level);
        let z = affine_rows(&rows, self.var(i), self.var(i + 1))?;
        Ok(z.l2_normalize(1)?)
    }
}

/// Online and momentum copies; the momentum copy is only ever changed by
/// [`ModelPair::momentum_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub online: EncoderParams<f32>,
    pub momentum: EncoderParams<f32>,
    pub m: f64,
}

impl ModelPair {
    pub fn init(cfg: &EncoderConfig, m: f64, seed: u64) -> Result<Self> {
        check_momentum(m)?;
        let online = EncoderParams::init(cfg, seed)?;
        Ok(Self {
            momentum: online.clone(),
            online,
            m,
        })
    }

    /// `momentum := m·momentum + (1−m)·online`.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        check_momentum(m)?;
        let m32 = m as f32;
        let rest = 1.0 - m32;
        for (k, q) in self.momentum.arrays.iter_mut().zip(&self.online.arrays) {
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m32 * *kv + rest * qv;
            }
        }
        Ok(())
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(EncoderError::Domain(format!("momentum {m} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_encode(params: &EncoderParams<f32>, cfg: &EncoderConfig, pixels: &[f32], count: usize) -> Array<f32> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let x = tape.constant(image_array(cfg, count, pixels).unwrap());
        bound.encode(cfg, &x).unwrap().value()
    }

    #[test]
    fn desk_geometry() {
        let g = EncoderConfig::default().geometry().unwrap();
        assert_eq!(g, Geometry { stride: 4, kernel_width: 4, final_kernel_height: 2 });
        let large = EncoderConfig {
            height: 32,
            width: 100,
            frames: 26,
            ..EncoderConfig::default()
        };
        assert_eq!(large.geometry().unwrap().final_kernel_height, 6);
        assert!(EncoderConfig { height: 9, ..EncoderConfig::default() }.geometry().is_err());
    }

    #[test]
    fn encode_shape_and_zero_image() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(&cfg, 0).unwrap();
        let out = run_encode(&p, &cfg, &vec![0.0; 2 * 16 * 64], 2);
        assert_eq!(out.shape(), &[2, 32, 16]);
        assert!(out.is_finite());
        let noisy: Vec<f32> = (0..16 * 64).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        assert!(run_encode(&p, &cfg, &noisy, 1).is_finite());
        let tape = Tape::new();
        let bad = tape.constant(Array::<f32>::zeros(&[1, 1, 16, 60]));
        assert!(p.bind(&tape, false).encode(&cfg, &bad).is_err());
    }

    #[test]
    fn level_atoms_are_unit_norm() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::<f64>::init(&cfg, 1).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        let data: Vec<f64> = (0..2 * 32 * 16).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.3).collect();
        let seq = tape.constant(Array::new(&[2, 32, 16], data).unwrap());
        for (level, atoms) in [(Level::Frame, 32), (Level::Subword, 8), (Level::Word, 2)] {
            let z = bound.predict_level(&cfg, &seq, level).unwrap().value();
            assert_eq!(z.shape(), &[atoms, 16]);
            for r in 0..atoms {
                let n: f64 = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_sequence_gives_identical_subword_atoms() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::<f64>::init(&cfg, 2).unwrap();
        let tape = Tape::new();
        let data: Vec<f64> = (0..32 * 16).map(|i| (i / 16) as f64 * 0.1 - 1.0).collect();
        let seq = tape.constant(Array::new(&[1, 32, 16], data).unwrap());
        let z = p.bind(&tape, false).predict_level(&cfg, &seq, Level::Subword).unwrap().value();
        for r in 1..4 {
            assert_eq!(z.row(r), z.row(0));
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::<f32>::init(&cfg, 5).unwrap();
        assert_eq!(a, EncoderParams::init(&cfg, 5).unwrap());
        assert_ne!(a, EncoderParams::init(&cfg, 6).unwrap());
        for (name, arr) in a.named() {
            if arr.rank() == 1 {
                assert!(arr.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = init_bound(arr.shape()) as f32;
                assert!(arr.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
        let pair = ModelPair::init(&cfg, 0.999, 5).unwrap();
        assert_eq!(pair.online, pair.momentum);
    }

    #[test]
    fn momentum_update_rules() {
        let cfg = EncoderConfig::default();
        let mut pair = ModelPair::init(&cfg, 0.999, 0).unwrap();
        pair.online = EncoderParams::init(&cfg, 1).unwrap();
        let before = pair.momentum.clone();
        pair.momentum_update(1.0).unwrap();
        assert_eq!(pair.momentum, before);
        pair.momentum_update(0.0).unwrap();
        assert_eq!(pair.momentum, pair.online);

        for a in pair.momentum.arrays.iter_mut() {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for a in pair.online.arrays.iter_mut() {
            a.data_mut().iter_mut().for_each(|v| *v = 2.0);
        }
        pair.momentum_update(0.5).unwrap();
        assert!(pair.momentum.arrays.iter().all(|a| a.data().iter().all(|&v| v == 1.0)));
        assert!(pair.momentum_update(1.5).is_err());
        assert!(pair.momentum_update(-0.1).is_err());
    }

    #[test]
    fn momentum_converges_geometrically() {
        let cfg = EncoderConfig::default();
        let mut pair = ModelPair::init(&cfg, 0.9, 0).unwrap();
        pair.online = EncoderParams::init(&cfg, 1).unwrap();
        let online = pair.online.clone();
        let dist = |p: &ModelPair| -> f64 {
            p.momentum
                .arrays
                .iter()
                .zip(&p.online.arrays)
                .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = dist(&pair);
        for _ in 0..5 {
            pair.momentum_update(0.9).unwrap();
            let d = dist(&pair);
            assert!((d / prev - 0.9).abs() < 1e-3, "{}", d / prev);
            prev = d;
        }
        assert_eq!(pair.online, online);
    }
}
