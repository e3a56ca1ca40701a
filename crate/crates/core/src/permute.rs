//! Patch permutation across image groups and its inverse on frame features.
//!
//! Images are cut into `N` horizontal patches, groups of `M` images pool
//! their `N·M` patches, and a uniform permutation reassembles them into `M`
//! new images. Within a group, slot `s` is patch `s % N` of image `s / N`;
//! slot `s` of the output receives the patch originally at position
//! `pi[s]`.

use rand::seq::SliceRandom;

use crate::ndiff::{DiffArray, NdiffError, Scalar};
use crate::seed;
use crate::textgen::ImageBatch;

#[derive(Debug, thiserror::Error)]
pub enum PermuteError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("group error: {0}")]
    Group(String),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T, E = PermuteError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DivisionStrategy {
    /// Equal cuts at multiples of `W/N`.
    #[default]
    Direct,
    /// Equal cuts; frames adjacent to each cut are excluded from the
    /// regularization loss.
    DropBoundary,
    /// Cut at the least-ink column near each equal cut.
    VerticalProjection,
}

impl DivisionStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::DropBoundary => "drop_boundary",
            Self::VerticalProjection => "vertical_projection",
        }
    }
}

impl std::str::FromStr for DivisionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Self::Direct),
            "drop_boundary" => Ok(Self::DropBoundary),
            "vertical_projection" => Ok(Self::VerticalProjection),
            other => Err(format!(
                "unknown division strategy {other:?} (direct, drop_boundary, vertical_projection)"
            )),
        }
    }
}

/// Patches of a batch, `count × n` patches of `height × patch_width`.
#[derive(Debug, Clone)]
pub struct Division {
    pub n: usize,
    pub count: usize,
    pub height: usize,
    pub patch_width: usize,
    pub strategy: DivisionStrategy,
    /// Interior cut columns per image (`n − 1` each).
    pub cuts: Vec<Vec<usize>>,
    patches: Vec<Vec<f32>>,
}

impl Division {
    /// Patch `k` of image `i`, row-major `height × patch_width`.
    pub fn patch(&self, i: usize, k: usize) -> &[f32] {
        &self.patches[i * self.n + k]
    }

    /// Frames kept by the regularization loss: for `drop_boundary`, the
    /// frame on each side of every cut is dropped.
    pub fn frame_mask(&self, frames: usize) -> Vec<bool> {
        boundary_mask(self.strategy, self.n, frames)
    }
}

/// Keep-mask over `frames` frame positions (`true` = used in the loss).
pub fn boundary_mask(strategy: DivisionStrategy, n: usize, frames: usize) -> Vec<bool> {
    let mut mask = vec![true; frames];
    if strategy == DivisionStrategy::DropBoundary && n > 1 {
        for k in 1..n {
            let cut = k * frames / n;
            mask[cut - 1] = false;
            if cut < frames {
                mask[cut] = false;
            }
        }
    }
    mask
}

fn column_ink(images: &ImageBatch, i: usize, x: usize) -> f32 {
    (0..images.height).map(|y| images.pixel(i, y, x)).sum()
}

/// Cuts every image into `n` patches of width `W/n`.
pub fn divide(images: &ImageBatch, n: usize, strategy: DivisionStrategy) -> Result<Division> {
    let (h, w) = (images.height, images.width);
    if n == 0 || w % n != 0 {
        return Err(PermuteError::Shape(format!("width {w} not divisible by {n} patches")));
    }
    let pw = w / n;
    let mut cuts = Vec::with_capacity(images.count);
    let mut patches = Vec::with_capacity(images.count * n);
    for i in 0..images.count {
        let mut bounds = vec![0usize];
        for k in 1..n {
            let nominal = k * pw;
            let cut = match strategy {
                DivisionStrategy::Direct | DivisionStrategy::DropBoundary => nominal,
                DivisionStrategy::VerticalProjection => {
                    let r = w / (4 * n);
                    let lo = nominal.saturating_sub(r).max(bounds[k - 1] + 1);
                    let hi = (nominal + r).min(w - 1);
                    // least ink; ties go to the column nearest the equal cut, then leftmost
                    (lo..=hi)
                        .min_by(|&a, &b| {
                            column_ink(images, i, a)
                                .total_cmp(&column_ink(images, i, b))
                                .then(a.abs_diff(nominal).cmp(&b.abs_diff(nominal)))
                                .then(a.cmp(&b))
                        })
                        .unwrap_or(nominal)
                }
            };
            bounds.push(cut);
        }
        bounds.push(w);
        for k in 0..n {
            let (start, end) = (bounds[k], bounds[k + 1]);
            let mut patch = Vec::with_capacity(h * pw);
            for y in 0..h {
                for c in 0..pw {
                    // crop on the right, or pad by repeating the last column
                    let x = (start + c).min(end - 1);
                    patch.push(images.pixel(i, y, x));
                }
            }
            patches.push(patch);
        }
        cuts.push(bounds[1..n].to_vec());
    }
    Ok(Division {
        n,
        count: images.count,
        height: h,
        patch_width: pw,
        strategy,
        cuts,
        patches,
    })
}

/// Per-group slot permutations for the first `covered` images of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationRecord {
    pub n: usize,
    pub m: usize,
    /// `groups[g][s]` = group-local position of the patch placed at slot `s`.
    pub groups: Vec<Vec<usize>>,
}

impl PermutationRecord {
    pub fn new(n: usize, m: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        for pi in &groups {
            let mut sorted = pi.clone();
            sorted.sort_unstable();
            if sorted != (0..n * m).collect::<Vec<_>>() {
                return Err(PermuteError::Group(format!("{pi:?} is not a permutation of 0..{}", n * m)));
            }
        }
        Ok(Self { n, m, groups })
    }

    pub fn identity(n: usize, m: usize, groups: usize) -> Self {
        Self {
            n,
            m,
            groups: vec![(0..n * m).collect(); groups],
        }
    }

    /// Images covered by the record.
    pub fn covered(&self) -> usize {
        self.groups.len() * self.m
    }

    /// `(image, block)` whose content lands at output `(image, block)`
    /// under the forward shuffle.
    fn source_of(&self, image: usize, block: usize) -> (usize, usize) {
        if image >= self.covered() {
            return (image, block);
        }
        let g = image / self.m;
        let slot = (image % self.m) * self.n + block;
        let pos = self.groups[g][slot];
        (g * self.m + pos / self.n, pos % self.n)
    }

    /// `(image, block)` of the shuffled output that holds the content
    /// originally at `(image, block)`.
    fn slot_of(&self, image: usize, block: usize) -> (usize, usize) {
        if image >= self.covered() {
            return (image, block);
        }
        let g = image / self.m;
        let pos = (image % self.m) * self.n + block;
        let slot = self.groups[g].iter().position(|&p| p == pos).expect("bijection");
        (g * self.m + slot / self.n, slot % self.n)
    }
}

/// Reassembles permuted images from `division` using explicit per-group
/// permutations (`perms.len()` groups of `m` images).
pub fn shuffle_with(division: &Division, m: usize, perms: Vec<Vec<usize>>) -> Result<(ImageBatch, PermutationRecord)> {
    let (n, h, pw) = (division.n, division.height, division.patch_width);
    if m == 0 || perms.len() * m > division.count {
        return Err(PermuteError::Group(format!(
            "{} groups of {m} exceed batch of {}",
            perms.len(),
            division.count
        )));
    }
    let record = PermutationRecord::new(n, m, perms)?;
    let w = n * pw;
    let covered = record.covered();
    let mut data = vec![0.0f32; covered * h * w];
    for img in 0..covered {
        for block in 0..n {
            let (si, sb) = record.source_of(img, block);
            let patch = division.patch(si, sb);
            for y in 0..h {
                let dst = (img * h + y) * w + block * pw;
                data[dst..dst + pw].copy_from_slice(&patch[y * pw..(y + 1) * pw]);
            }
        }
    }
    Ok((
        ImageBatch {
            count: covered,
            height: h,
            width: w,
            data,
        },
        record,
    ))
}

/// Draws a uniform permutation per group of `m` images and reassembles.
pub fn shuffle_groups(division: &Division, m: usize, rng_seed: u64) -> Result<(ImageBatch, PermutationRecord)> {
    if m == 0 || !division.count.is_multiple_of(m) {
        return Err(PermuteError::Group(format!(
            "batch of {} not divisible into groups of {m}",
            division.count
        )));
    }
    let groups = division.count / m;
    let mut rng = seed::rng(rng_seed);
    let perms = (0..groups)
        .map(|_| {
            let mut pi: Vec<usize> = (0..division.n * m).collect();
            pi.shuffle(&mut rng);
            pi
        })
        .collect();
    shuffle_with(division, m, perms)
}

fn block_index(shape: &[usize], record: &PermutationRecord, forward: bool) -> Result<Vec<usize>> {
    let [b, f, t] = shape else {
        return Err(PermuteError::Shape(format!("expected [B, F, T], got {shape:?}")));
    };
    let (b, f, t) = (*b, *f, *t);
    if t % record.n != 0 {
        return Err(PermuteError::Shape(format!("{t} frames not divisible by {} patches", record.n)));
    }
    if b < record.covered() {
        return Err(PermuteError::Shape(format!(
            "{b} feature rows but record covers {}",
            record.covered()
        )));
    }
    let per = t / record.n;
    let mut index = Vec::with_capacity(b * f * t);
    for img in 0..b {
        for ch in 0..f {
            for frame in 0..t {
                let (si, sb) = if forward {
                    record.source_of(img, frame / per)
                } else {
                    record.slot_of(img, frame / per)
                };
                index.push((si * f + ch) * t + sb * per + frame % per);
            }
        }
    }
    Ok(index)
}

/// Moves frame blocks of `[B, F, T]` features computed on shuffled images
/// back to the positions their patches came from. Images beyond the
/// record's coverage pass through unchanged.
pub fn unshuffle_features<'t, T: Scalar>(
    features: &DiffArray<'t, T>,
    record: &PermutationRecord,
) -> Result<DiffArray<'t, T>> {
    let shape = features.shape();
    let index = block_index(&shape, record, false)?;
    Ok(features.gather(index, &shape)?)
}

/// Forward block shuffle on `[B, F, T]` features (the inverse of
/// [`unshuffle_features`]).
pub fn permute_blocks<'t, T: Scalar>(
    features: &DiffArray<'t, T>,
    record: &PermutationRecord,
) -> Result<DiffArray<'t, T>> {
    let shape = features.shape();
    let index = block_index(&shape, record, true)?;
    Ok(features.gather(index, &shape)?)
}
