//! Contrastive losses over normalized level atoms and negative banks.
//!
//! Every loss takes atoms as `[A, D]` rows with unit norm and a bank as a
//! `[K, D]` constant, and reduces over atoms by the mean.

use crate::bank::Level;
use crate::ndiff::{pool_bounds, DiffArray, NdiffError, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("regularization mask excludes every atom")]
    MaskAllFalse,
    #[error("missing inputs for level {0}")]
    MissingLevel(&'static str),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossKind {
    /// Symmetric KL only.
    #[default]
    KlOnly,
    /// InfoNCE plus weighted symmetric KL.
    Relational,
}

impl CrossKind {
    pub fn name(self) -> &'static str {
        match self {
            CrossKind::KlOnly => "kl_only",
            CrossKind::Relational => "relational",
        }
    }
}

impl std::str::FromStr for CrossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kl_only" => Ok(CrossKind::KlOnly),
            "relational" => Ok(CrossKind::Relational),
            other => Err(format!("unknown cross-hierarchy loss kind {other:?} (kl_only, relational)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau_info: f64,
    pub tau_kl: f64,
    pub alpha: f64,
    pub cross_kind: CrossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_info: 0.07,
            tau_kl: 0.1,
            alpha: 1.0,
            cross_kind: CrossKind::KlOnly,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau_info)?;
        check_tau(self.tau_kl)?;
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(LossError::Domain(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        Ok(())
    }
}

/// Which modules contribute to the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub reg: bool,
    pub hier: bool,
    pub con: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        reg: true,
        hier: true,
        con: true,
    };
    pub const NONE: Toggles = Toggles {
        reg: false,
        hier: false,
        con: false,
    };

    /// `none`, or `+`-joined subset of `reg`, `hier`, `con`.
    pub fn label(self) -> String {
        let mut parts = Vec::new();
        if self.reg {
            parts.push("reg");
        }
        if self.hier {
            parts.push("hier");
        }
        if self.con {
            parts.push("con");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl std::str::FromStr for Toggles {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut t = Toggles::NONE;
        if s == "none" {
            return Ok(t);
        }
        for part in s.split('+') {
            match part.trim() {
                "reg" => t.reg = true,
                "hier" => t.hier = true,
                "con" => t.con = true,
                other => return Err(format!("unknown toggle {other:?} (reg, hier, con, none)")),
            }
        }
        Ok(t)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::Domain(format!("temperature {tau} must be > 0")))
    }
}

fn check_shapes<T: Scalar>(q: &DiffArray<'_, T>, p: &DiffArray<'_, T>, bank: &DiffArray<'_, T>) -> Result<usize> {
    let (qs, ps, bs) = (q.shape(), p.shape(), bank.shape());
    if qs.len() != 2 || qs != ps || bs.len() != 2 || bs[1] != qs[1] || bs[0] == 0 || qs[0] == 0 {
        return Err(LossError::Shape(format!("q {qs:?}, p {ps:?}, bank {bs:?}")));
    }
    Ok(qs[0])
}

/// Mean over atoms of `−log softmax([q·p, q·n_1, …, q·n_K] / τ)[0]`.
pub fn info_nce<'t, T: Scalar>(
    q: &DiffArray<'t, T>,
    p: &DiffArray<'t, T>,
    bank: &DiffArray<'t, T>,
    tau: f64,
) -> Result<DiffArray<'t, T>> {
    check_tau(tau)?;
    let a = check_shapes(q, p, bank)?;
    let k = bank.shape()[0];
    let pos = q.mul(p)?.sum(1)?.reshape(&[a, 1])?;
    let neg = q.matmul_t(bank)?;
    let log_probs = pos.concat_last(&neg)?.log_softmax(1, T::from_f64_lossy(tau))?;
    let positive = log_probs.gather((0..a).map(|r| r * (k + 1)).collect(), &[a])?;
    Ok(positive.mean_all().scale(-T::one()))
}

/// Mean over atoms of `½·KL(P‖Q) + ½·KL(Q‖P)`, where `Q` and `P` are the
/// softmax similarity distributions of `q` and `p` over the bank.
pub fn symmetric_kl<'t, T: Scalar>(
    q: &DiffArray<'t, T>,
    p: &DiffArray<'t, T>,
    bank: &DiffArray<'t, T>,
    tau: f64,
) -> Result<DiffArray<'t, T>> {
    check_tau(tau)?;
    check_shapes(q, p, bank)?;
    let tau = T::from_f64_lossy(tau);
    let log_q = q.matmul_t(bank)?.log_softmax(1, tau)?;
    let log_p = p.matmul_t(bank)?.log_softmax(1, tau)?;
    // ½ Σ (P − Q)(log P − log Q) is exactly symmetric in (q, p)
    let diff = log_p.exp().sub(&log_q.exp())?;
    let per_atom = diff.mul(&log_p.sub(&log_q)?)?.sum(1)?;
    Ok(per_atom.mean_all().scale(T::from_f64_lossy(0.5)))
}

/// `info_nce + α·symmetric_kl`; the KL term is skipped entirely at `α = 0`.
pub fn relational<'t, T: Scalar>(
    q: &DiffArray<'t, T>,
    p: &DiffArray<'t, T>,
    bank: &DiffArray<'t, T>,
    cfg: &LossConfig,
) -> Result<DiffArray<'t, T>> {
    cfg.validate()?;
    let info = info_nce(q, p, bank, cfg.tau_info)?;
    if cfg.alpha == 0.0 {
        return Ok(info);
    }
    let kl = symmetric_kl(q, p, bank, cfg.tau_kl)?;
    Ok(info.add(&kl.scale(T::from_f64_lossy(cfg.alpha)))?)
}

/// `relational(q, p) + relational(q_reg, p)` with the second term restricted
/// to atoms where `mask` is true.
pub fn regularized<'t, T: Scalar>(
    q: &DiffArray<'t, T>,
    q_reg: &DiffArray<'t, T>,
    mask: Option<&[bool]>,
    p: &DiffArray<'t, T>,
    bank: &DiffArray<'t, T>,
    cfg: &LossConfig,
) -> Result<DiffArray<'t, T>> {
    let plain = relational(q, p, bank, cfg)?;
    if q_reg.shape() != q.shape() {
        return Err(LossError::Shape(format!("q_reg {:?} vs q {:?}", q_reg.shape(), q.shape())));
    }
    let reg = match mask {
        None => relational(q_reg, p, bank, cfg)?,
        Some(mask) => {
            if mask.len() != q.shape()[0] {
                return Err(LossError::Shape(format!("mask of {} for {} atoms", mask.len(), q.shape()[0])));
            }
            let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            if rows.is_empty() {
                return Err(LossError::MaskAllFalse);
            }
            if rows.len() == mask.len() {
                relational(q_reg, p, bank, cfg)?
            } else {
                relational(&q_reg.select_rows(&rows)?, &p.select_rows(&rows)?, bank, cfg)?
            }
        }
    };
    Ok(plain.add(&reg)?)
}

/// Inputs of one hierarchy level.
#[derive(Clone)]
pub struct LevelInputs<'t, T> {
    /// Online atoms of the first view, `[B·atoms, D]`.
    pub q: DiffArray<'t, T>,
    /// Momentum atoms of the second view (no tape links).
    pub p: DiffArray<'t, T>,
    /// Online atoms of the permuted view, already unshuffled.
    pub q_reg: Option<DiffArray<'t, T>>,
    /// Atoms kept by the regularization term.
    pub reg_mask: Option<Vec<bool>>,
    pub bank: DiffArray<'t, T>,
}

impl<'t, T: Scalar> LevelInputs<'t, T> {
    /// Regularized loss when a permuted view is present, else relational.
    pub fn loss(&self, cfg: &LossConfig) -> Result<DiffArray<'t, T>> {
        match &self.q_reg {
            Some(q_reg) => regularized(&self.q, q_reg, self.reg_mask.as_deref(), &self.p, &self.bank, cfg),
            None => relational(&self.q, &self.p, &self.bank, cfg),
        }
    }
}

/// Sum of per-level losses; returns the total and each level's term.
pub fn hierarchical<'t, T: Scalar>(
    levels: &[(Level, &LevelInputs<'t, T>)],
    cfg: &LossConfig,
) -> Result<(DiffArray<'t, T>, Vec<(Level, DiffArray<'t, T>)>)> {
    let mut terms = Vec::with_capacity(levels.len());
    let mut total: Option<DiffArray<'t, T>> = None;
    for &(level, inputs) in levels {
        let term = inputs.loss(cfg)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
        terms.push((level, term));
    }
    let total = total.ok_or_else(|| LossError::Domain("empty hierarchy".into()))?;
    Ok((total, terms))
}

/// Bin index of every frame under `avgpool_seq` boundaries.
pub fn frame_bins(frames: usize, bins: usize) -> Vec<usize> {
    let mut out = vec![0; frames];
    for b in 0..bins {
        let (s, e) = pool_bounds(frames, bins, b);
        out[s..e].iter_mut().for_each(|v| *v = b);
    }
    out
}

fn cross_term<'t, T: Scalar>(
    q: &DiffArray<'t, T>,
    p: &DiffArray<'t, T>,
    bank: &DiffArray<'t, T>,
    cfg: &LossConfig,
) -> Result<DiffArray<'t, T>> {
    match cfg.cross_kind {
        CrossKind::KlOnly => symmetric_kl(q, p, bank, cfg.tau_kl),
        CrossKind::Relational => relational(q, p, bank, cfg),
    }
}

/// Frame-to-subword and subword-to-word consistency terms.
///
/// Frame atom `t` of image `b` is paired with the momentum subword atom of
/// the bin containing `t`; each subword atom with its image's momentum word
/// atom. Banks are those of the upper level.
#[allow(clippy::too_many_arguments)]
pub fn cross_hierarchy<'t, T: Scalar>(
    frame_q: &DiffArray<'t, T>,
    subword_q: &DiffArray<'t, T>,
    subword_p: &DiffArray<'t, T>,
    word_p: &DiffArray<'t, T>,
    subword_bank: &DiffArray<'t, T>,
    word_bank: &DiffArray<'t, T>,
    frames: usize,
    bins: usize,
    cfg: &LossConfig,
) -> Result<(DiffArray<'t, T>, DiffArray<'t, T>)> {
    let images = word_p.shape()[0];
    if frame_q.shape()[0] != images * frames || subword_q.shape()[0] != images * bins || subword_p.shape() != subword_q.shape() {
        return Err(LossError::Shape(format!(
            "frame {:?}, subword {:?}/{:?}, word {:?} for {frames} frames and {bins} bins",
            frame_q.shape(),
            subword_q.shape(),
            subword_p.shape(),
            word_p.shape()
        )));
    }
    let bin_of = frame_bins(frames, bins);
    let f2s_rows: Vec<usize> = (0..images * frames)
        .map(|r| (r / frames) * bins + bin_of[r % frames])
        .collect();
    let s2w_rows: Vec<usize> = (0..images * bins).map(|r| r / bins).collect();
    let f2s = cross_term(frame_q, &subword_p.select_rows(&f2s_rows)?, subword_bank, cfg)?;
    let s2w = cross_term(subword_q, &word_p.select_rows(&s2w_rows)?, word_bank, cfg)?;
    Ok((f2s, s2w))
}

/// Loss inputs for all levels of one iteration.
pub struct LossInputs<'t, T> {
    pub frame: Option<LevelInputs<'t, T>>,
    pub subword: Option<LevelInputs<'t, T>>,
    pub word: Option<LevelInputs<'t, T>>,
    pub frames: usize,
    pub subword_bins: usize,
}

impl<'t, T: Scalar> LossInputs<'t, T> {
    pub fn level(&self, level: Level) -> Option<&LevelInputs<'t, T>> {
        match level {
            Level::Frame => self.frame.as_ref(),
            Level::Subword => self.subword.as_ref(),
            Level::Word => self.word.as_ref(),
        }
    }

    fn need(&self, level: Level) -> Result<&LevelInputs<'t, T>> {
        self.level(level).ok_or(LossError::MissingLevel(level.name()))
    }
}

/// Named per-term values of a total loss; disabled terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LossBreakdown {
    pub frame: Option<f64>,
    pub subword: Option<f64>,
    pub word: Option<f64>,
    pub f2s: Option<f64>,
    pub s2w: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn enabled_sum(&self) -> f64 {
        [self.frame, self.subword, self.word, self.f2s, self.s2w]
            .iter()
            .flatten()
            .sum()
    }
}

/// Levels whose loss terms are active under `toggles`; with `hier` off only
/// the word level remains.
pub fn active_levels(toggles: Toggles, hierarchy: &[Level]) -> Vec<Level> {
    if toggles.hier {
        Level::ALL.into_iter().filter(|l| hierarchy.contains(l)).collect()
    } else {
        vec![Level::Word]
    }
}

/// Sum of the enabled level and cross-hierarchy terms, in the fixed order
/// frame, subword, word, f2s, s2w. With `reg` off the permuted views are
/// ignored.
pub fn total_loss<'t, T: Scalar>(
    inputs: &LossInputs<'t, T>,
    cfg: &LossConfig,
    toggles: Toggles,
    hierarchy: &[Level],
) -> Result<(DiffArray<'t, T>, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<DiffArray<'t, T>> = None;
    let mut push = |term: DiffArray<'t, T>, slot: &mut Option<f64>| -> Result<()> {
        *slot = Some(term.item().to_f64_lossy());
        total = Some(match total.take() {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
        Ok(())
    };
    for level in active_levels(toggles, hierarchy) {
        let li = inputs.need(level)?;
        let term = if toggles.reg {
            li.loss(cfg)?
        } else {
            relational(&li.q, &li.p, &li.bank, cfg)?
        };
        let slot = match level {
            Level::Frame => &mut breakdown.frame,
            Level::Subword => &mut breakdown.subword,
            Level::Word => &mut breakdown.word,
        };
        push(term, slot)?;
    }
    if toggles.con {
        let (f, s, w) = (inputs.need(Level::Frame)?, inputs.need(Level::Subword)?, inputs.need(Level::Word)?);
        let (f2s, s2w) = cross_hierarchy(
            &f.q,
            &s.q,
            &s.p,
            &w.p,
            &s.bank,
            &w.bank,
            inputs.frames,
            inputs.subword_bins,
            cfg,
        )?;
        push(f2s, &mut breakdown.f2s)?;
        push(s2w, &mut breakdown.s2w)?;
    }
    let total = total.ok_or_else(|| LossError::Domain("no active loss terms".into()))?;
    breakdown.total = total.item().to_f64_lossy();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{Array, Tape};
    use std::f64::consts::E;

    fn rows<'t>(tape: &'t Tape<f64>, rows: &[&[f64]]) -> DiffArray<'t, f64> {
        let d = rows[0].len();
        tape.constant(Array::new(&[rows.len(), d], rows.concat()).unwrap())
    }

    const E1: [f64; 3] = [1.0, 0.0, 0.0];
    const E2: [f64; 3] = [0.0, 1.0, 0.0];
    const E3: [f64; 3] = [0.0, 0.0, 1.0];

    #[test]
    fn info_nce_closed_forms() {
        let tape = Tape::new();
        let q = rows(&tape, &[&E1]);
        let bank = rows(&tape, &[&E2, &E3]);
        let v = info_nce(&q, &q, &bank, 1.0).unwrap().item();
        assert!((v - (1.0 + 2.0 / E).ln()).abs() < 1e-6);
        assert!((v - 0.551445).abs() < 1e-6);
        let v = info_nce(&q, &q, &bank, 0.5).unwrap().item();
        assert!((v - (1.0 + 2.0 * (-2.0f64).exp()).ln()).abs() < 1e-6);
        assert!((v - 0.2395448).abs() < 1e-6);
        assert!(info_nce(&q, &q, &bank, 0.0).is_err());
        let short = rows(&tape, &[&[1.0, 0.0]]);
        assert!(info_nce(&q, &q, &short, 1.0).is_err());
    }

    #[test]
    fn symmetric_kl_cases() {
        let tape = Tape::new();
        let q = rows(&tape, &[&E1]);
        let p = rows(&tape, &[&E2]);
        let bank = rows(&tape, &[&E1, &E2]);
        let v = symmetric_kl(&q, &p, &bank, 1.0).unwrap().item();
        assert!((v - (E - 1.0) / (E + 1.0)).abs() < 1e-6);
        assert!((v - 0.5f64.tanh()).abs() < 1e-12);
        assert!(symmetric_kl(&q, &q, &bank, 1.0).unwrap().item().abs() < 1e-9);
        let single = rows(&tape, &[&E3]);
        assert!(symmetric_kl(&q, &p, &single, 1.0).unwrap().item().abs() < 1e-12);
        let r = symmetric_kl(&p, &q, &bank, 1.0).unwrap().item();
        assert_eq!(r, v);
    }

    #[test]
    fn relational_alpha_zero_is_info_nce_bit_for_bit() {
        let tape = Tape::new();
        let q = rows(&tape, &[&[0.6, 0.8, 0.0]]);
        let p = rows(&tape, &[&E1]);
        let bank = rows(&tape, &[&E2, &E3]);
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let a = relational(&q, &p, &bank, &cfg).unwrap().item();
        let b = info_nce(&q, &p, &bank, cfg.tau_info).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
        let cfg = LossConfig {
            alpha: 3.0,
            ..LossConfig::default()
        };
        let same = relational(&q, &q, &bank, &cfg).unwrap().item();
        assert!((same - info_nce(&q, &q, &bank, cfg.tau_info).unwrap().item()).abs() < 1e-12);
    }

    #[test]
    fn regularized_restriction() {
        let tape = Tape::new();
        let q = rows(&tape, &[&E1, &[0.6, 0.8, 0.0]]);
        let p = rows(&tape, &[&E2, &E3]);
        let bank = rows(&tape, &[&E2, &E3, &[0.0, 0.6, 0.8]]);
        let cfg = LossConfig::default();
        let rel = relational(&q, &p, &bank, &cfg).unwrap().item();
        let twice = regularized(&q, &q, None, &p, &bank, &cfg).unwrap().item();
        assert!((twice - 2.0 * rel).abs() < 1e-12);
        let one = regularized(&q, &q, Some(&[false, true]), &p, &bank, &cfg).unwrap().item();
        let second = relational(&q.select_rows(&[1]).unwrap(), &p.select_rows(&[1]).unwrap(), &bank, &cfg)
            .unwrap()
            .item();
        assert!((one - rel - second).abs() < 1e-12);
        assert!(matches!(
            regularized(&q, &q, Some(&[false, false]), &p, &bank, &cfg),
            Err(LossError::MaskAllFalse)
        ));
    }

    #[test]
    fn info_nce_nonnegative_and_monotone_in_similarity() {
        let tape = Tape::new();
        let bank = rows(&tape, &[&E2, &E3, &[0.0, 0.6, 0.8]]);
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let theta = std::f64::consts::PI * (1.0 - i as f64 / 10.0);
            let q = rows(&tape, &[&E1]);
            let p = rows(&tape, &[&[theta.cos(), 0.0, theta.sin()]]);
            let v = info_nce(&q, &p, &bank, 0.5).unwrap().item();
            assert!(v >= 0.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn toggles_parse_and_label() {
        assert_eq!("none".parse::<Toggles>().unwrap(), Toggles::NONE);
        assert_eq!("reg+hier+con".parse::<Toggles>().unwrap(), Toggles::ALL);
        assert_eq!(Toggles::ALL.label(), "reg+hier+con");
        assert!("reg+x".parse::<Toggles>().is_err());
    }

    #[test]
    fn frame_bins_follow_pool_bounds() {
        assert_eq!(frame_bins(16, 4), [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3]);
        assert_eq!(frame_bins(5, 5), [0, 1, 2, 3, 4]);
        let b = frame_bins(26, 4);
        assert_eq!((b[5], b[6], b[12], b[13], b[19]), (0, 1, 1, 2, 3));
    }
}
