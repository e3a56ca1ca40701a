//! Synthetic text strips: word sampling, deterministic rendering, frame
//! labels for the probe, and greedy readout.

mod augment;
pub mod dataset;
mod font;

pub use augment::{augment, AugmentConfig};
pub use font::{supported_symbols, Glyph, GLYPH_COLS, GLYPH_ROWS};

use rand::Rng;

use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TextgenError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot render an empty word")]
    EmptyWord,
    #[error("word of {chars} symbols does not fit in width {width} (max {max_chars})")]
    DoesNotFit {
        chars: usize,
        width: usize,
        max_chars: usize,
    },
    #[error("symbol {0:?} not in alphabet")]
    UnknownSymbol(char),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
}

pub type Result<T, E = TextgenError> = std::result::Result<T, E>;

/// Ordered symbol set. Class `i` of the probe is `symbols[i]`; the class
/// after the last symbol is BLANK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(TextgenError::Config("alphabet is empty".into()));
        }
        for (i, &c) in symbols.iter().enumerate() {
            if Glyph::lookup(c).is_none() {
                return Err(TextgenError::Config(format!("no glyph for symbol {c:?}")));
            }
            if symbols[..i].contains(&c) {
                return Err(TextgenError::Config(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// Number of probe classes (symbols + BLANK).
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn blank_class(&self) -> usize {
        self.symbols.len()
    }

    pub fn class_of(&self, label: Option<char>) -> usize {
        label
            .and_then(|c| self.index_of(c))
            .unwrap_or(self.blank_class())
    }

    pub fn label_of(&self, class: usize) -> Option<char> {
        self.symbols.get(class).copied()
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new("ABCDEFGHIJ").expect("default alphabet")
    }
}

/// Strip geometry and rendering jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Horizontal distance between consecutive glyph cells, in pixels.
    pub advance: usize,
    /// Rendered glyph height range (inclusive), in pixels.
    pub glyph_height: (usize, usize),
    /// Maximum rightward shift of a glyph inside its cell.
    pub x_jitter: usize,
    pub background: f32,
    /// Texture depth below the background level.
    pub texture: f32,
    /// Ink intensity range.
    pub ink: (f32, f32),
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 64,
            advance: 8,
            glyph_height: (10, 14),
            x_jitter: 1,
            background: 0.15,
            texture: 0.1,
            ink: (0.6, 1.0),
        }
    }
}

impl RenderConfig {
    pub fn max_chars(&self) -> usize {
        self.width / self.advance.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TextgenError::Config(m));
        if self.advance == 0 || self.advance > self.width {
            return bad(format!("advance {} outside [1, width]", self.advance));
        }
        if GLYPH_COLS + self.x_jitter > self.advance {
            return bad(format!(
                "glyph width {} plus jitter {} exceeds advance {}",
                GLYPH_COLS, self.x_jitter, self.advance
            ));
        }
        let (lo, hi) = self.glyph_height;
        if lo == 0 || lo > hi || hi > self.height {
            return bad(format!("glyph height range {lo}..={hi} invalid for height {}", self.height));
        }
        if !(0.0..=1.0).contains(&self.background)
            || self.texture < 0.0
            || self.texture > self.background
        {
            return bad("background/texture levels outside [0, 1]".into());
        }
        if !(self.ink.0 > self.background && self.ink.0 <= self.ink.1 && self.ink.1 <= 1.0) {
            return bad("ink range must lie above the background and within 1".into());
        }
        Ok(())
    }
}

/// A rendered grayscale strip with per-character pixel spans.
#[derive(Debug, Clone, PartialEq)]
pub struct TextStrip {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub text: String,
    /// Half-open `[x_start, x_end)` per character.
    pub glyph_spans: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Uniform i.i.d. word with length drawn from `length_range` (inclusive).
pub fn sample_word(
    alphabet: &Alphabet,
    length_range: (usize, usize),
    max_chars: usize,
    seed: u64,
) -> Result<String> {
    let (lo, hi) = length_range;
    if lo == 0 || lo > hi || hi > max_chars {
        return Err(TextgenError::Config(format!(
            "length range {lo}..={hi} not within [1, {max_chars}]"
        )));
    }
    let mut rng = seed::rng(seed);
    let len = rng.random_range(lo..=hi);
    Ok((0..len)
        .map(|_| alphabet.symbols()[rng.random_range(0..alphabet.len())])
        .collect())
}

/// Renders `word` left to right. Each glyph sits in its own `advance`-wide
/// cell with a small seeded shift and height; the word starts at a seeded
/// cell offset.
pub fn render(word: &str, cfg: &RenderConfig, seed: u64) -> Result<TextStrip> {
    cfg.validate()?;
    let chars: Vec<char> = word.chars().collect();
    if chars.is_empty() {
        return Err(TextgenError::EmptyWord);
    }
    let max_chars = cfg.max_chars();
    if chars.len() > max_chars {
        return Err(TextgenError::DoesNotFit {
            chars: chars.len(),
            width: cfg.width,
            max_chars,
        });
    }
    let glyphs = chars
        .iter()
        .map(|&c| Glyph::lookup(c).ok_or(TextgenError::UnknownSymbol(c)))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = seed::rng(seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut pixels: Vec<f32> = (0..h * w)
        .map(|_| cfg.background - cfg.texture * rng.random::<f32>())
        .collect();

    let first_cell = rng.random_range(0..=max_chars - chars.len());
    let ink = rng.random_range(cfg.ink.0..=cfg.ink.1);
    let mut spans = Vec::with_capacity(chars.len());
    for (i, glyph) in glyphs.iter().enumerate() {
        let gh = rng.random_range(cfg.glyph_height.0..=cfg.glyph_height.1);
        let dx = rng.random_range(0..=cfg.x_jitter);
        let y0 = rng.random_range(0..=h - gh);
        let x0 = (first_cell + i) * cfg.advance + dx;
        for y in 0..gh {
            let src_row = y * GLYPH_ROWS / gh;
            for col in 0..GLYPH_COLS {
                if glyph.bitmap[src_row][col] {
                    pixels[(y0 + y) * w + x0 + col] = ink;
                }
            }
        }
        spans.push((x0, x0 + GLYPH_COLS));
    }

    Ok(TextStrip {
        height: h,
        width: w,
        pixels,
        text: word.to_string(),
        glyph_spans: spans,
        seed,
    })
}

/// Label per frame: frame `t` covers `[t·W/T, (t+1)·W/T)` and takes the
/// symbol whose span contains the interval's center, else BLANK (`None`).
pub fn frame_labels(strip: &TextStrip, frames: usize) -> Vec<Option<char>> {
    let frames = frames.max(1);
    let step = strip.width as f64 / frames as f64;
    (0..frames)
        .map(|t| {
            let center = (t as f64 + 0.5) * step;
            strip
                .glyph_spans
                .iter()
                .zip(strip.text.chars())
                .find(|((s, e), _)| (*s as f64) <= center && center < *e as f64)
                .map(|(_, c)| c)
        })
        .collect()
}

/// Greedy CTC-style readout: merge consecutive duplicates, then drop BLANKs.
pub fn collapse(frames: &[Option<char>]) -> String {
    let mut out = String::new();
    let mut prev: Option<Option<char>> = None;
    for &f in frames {
        if prev != Some(f) {
            if let Some(c) = f {
                out.push(c);
            }
        }
        prev = Some(f);
    }
    out
}

/// A batch of equally sized grayscale images, `count × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn from_images(height: usize, width: usize, images: &[Vec<f32>]) -> Self {
        let mut data = Vec::with_capacity(images.len() * height * width);
        for img in images {
            assert_eq!(img.len(), height * width, "image size");
            data.extend_from_slice(img);
        }
        Self {
            count: images.len(),
            height,
            width,
            data,
        }
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, i: usize, y: usize, x: usize) -> f32 {
        self.data[(i * self.height + y) * self.width + x]
    }
}

/// Deterministic labelled strip `index` of the stream `stream_seed`.
pub fn generate_strip(
    alphabet: &Alphabet,
    length_range: (usize, usize),
    cfg: &RenderConfig,
    stream_seed: u64,
    index: u64,
) -> Result<TextStrip> {
    let item = seed::mix(stream_seed, index);
    let word = sample_word(alphabet, length_range, cfg.max_chars(), seed::mix(item, 0))?;
    render(&word, cfg, seed::mix(item, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strip_with_spans(width: usize, text: &str, spans: Vec<(usize, usize)>) -> TextStrip {
        TextStrip {
            height: 1,
            width,
            pixels: vec![0.0; width],
            text: text.into(),
            glyph_spans: spans,
            seed: 0,
        }
    }

    #[test]
    fn forced_word() {
        let a = Alphabet::new("A").unwrap();
        assert_eq!(sample_word(&a, (1, 1), 8, 42).unwrap(), "A");
        assert!(sample_word(&a, (0, 1), 8, 42).is_err());
        assert!(sample_word(&a, (3, 9), 8, 42).is_err());
    }

    #[test]
    fn word_is_deterministic() {
        let a = Alphabet::default();
        assert_eq!(
            sample_word(&a, (3, 6), 8, 9).unwrap(),
            sample_word(&a, (3, 6), 8, 9).unwrap()
        );
    }

    #[test]
    fn symbol_frequencies_within_binomial_bound() {
        let a = Alphabet::default();
        let mut counts = [0usize; 10];
        let mut total = 0usize;
        let mut i = 0u64;
        while total < 10_000 {
            for c in sample_word(&a, (1, 1), 8, seed::mix(123, i)).unwrap().chars() {
                counts[a.index_of(c).unwrap()] += 1;
                total += 1;
            }
            i += 1;
        }
        let sigma = (total as f64 * 0.1 * 0.9).sqrt();
        for &c in &counts {
            assert!((c as f64 - total as f64 * 0.1).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn render_spans_and_ink_locality() {
        let cfg = RenderConfig::default();
        let s = render("AB", &cfg, 5).unwrap();
        assert_eq!(s.glyph_spans.len(), 2);
        assert!(s.glyph_spans[0].1 <= s.glyph_spans[1].0);
        for y in 0..s.height {
            for x in 0..s.width {
                if s.pixels[y * s.width + x] > cfg.background {
                    assert!(s.glyph_spans.iter().any(|&(a, b)| a <= x && x < b));
                }
            }
        }
        assert_eq!(s, render("AB", &cfg, 5).unwrap());

        let s = render("A", &cfg, 11).unwrap();
        let (mut mass, mut mx) = (0.0f64, 0.0f64);
        for y in 0..s.height {
            for x in 0..s.width {
                let v = s.pixels[y * s.width + x];
                if v > cfg.background {
                    mass += v as f64;
                    mx += v as f64 * (x as f64 + 0.5);
                }
            }
        }
        let cx = mx / mass;
        let (a, b) = s.glyph_spans[0];
        assert!(a as f64 <= cx && cx < b as f64);
    }

    #[test]
    fn render_errors() {
        let cfg = RenderConfig::default();
        assert!(matches!(render("", &cfg, 0), Err(TextgenError::EmptyWord)));
        assert!(matches!(render("ABCDEFGHI", &cfg, 0), Err(TextgenError::DoesNotFit { .. })));
    }

    #[test]
    fn frame_label_examples() {
        let s = strip_with_spans(64, "AB", vec![(0, 32), (32, 64)]);
        let l = frame_labels(&s, 8);
        assert_eq!(l, [Some('A'); 4].into_iter().chain([Some('B'); 4]).collect::<Vec<_>>());

        let s = strip_with_spans(64, "AB", vec![(0, 24), (32, 64)]);
        let l = frame_labels(&s, 8);
        assert_eq!(l[3], None);
        assert_eq!(l[2], Some('A'));

        let s = strip_with_spans(64, "AB", vec![(10, 30), (30, 40)]);
        assert_eq!(frame_labels(&s, 1), vec![Some('B')]);
    }

    #[test]
    fn collapse_examples() {
        let (a, b) = (Some('A'), Some('B'));
        assert_eq!(collapse(&[a, a, None, b, b]), "AB");
        assert_eq!(collapse(&[a, None, a]), "AA");
        assert_eq!(collapse(&[None, None]), "");
    }

    #[test]
    fn ground_truth_labels_collapse_to_word_at_default_geometry() {
        let a = Alphabet::default();
        let cfg = RenderConfig::default();
        for i in 0..500 {
            let s = generate_strip(&a, (1, 8), &cfg, 77, i).unwrap();
            assert_eq!(collapse(&frame_labels(&s, 16)), s.text);
        }
    }
}
