//! Registry of gradient checks: every differentiable primitive plus the
//! composite losses and the encoder pipeline, in 64-bit mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::Level;
use crate::encoder::{image_array, EncoderConfig, EncoderParams};
use crate::fixtures::random_unit_rows;
use crate::losses::{self, CrossKind, LevelInputs, LossConfig, LossInputs, Toggles};
use crate::ndiff::gradcheck::{grad_check_with, primitive_cases, random_array, GradCheckCase, DEFAULT_STEP};
use crate::ndiff::{Array, DiffArray, NdiffError};
use crate::permute::{boundary_mask, DivisionStrategy, PermutationRecord};

type NResult<T> = std::result::Result<T, NdiffError>;

fn lift<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> NResult<T> {
    r.map_err(|e| NdiffError::DomainError(e.to_string()))
}

fn unit_array(seed: u64, n: usize, d: usize) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::new(&[n, d], random_unit_rows(&mut rng, n, d).concat()).expect("shape")
}

fn randn(seed: u64, shapes: &[Vec<usize>]) -> Vec<Array<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_array(&mut rng, s, -1.0, 1.0)).collect()
}

fn normalized<'t>(x: &DiffArray<'t, f64>) -> NResult<DiffArray<'t, f64>> {
    x.l2_normalize(1)
}

/// `[B, D, T]` sequence to normalized `[B·T, D]` rows.
fn seq_rows<'t>(x: &DiffArray<'t, f64>) -> NResult<DiffArray<'t, f64>> {
    let s = x.shape();
    x.swap_last2()?.reshape(&[s[0] * s[2], s[1]])?.l2_normalize(1)
}

fn loss_config(tau: f64) -> LossConfig {
    LossConfig {
        tau_info: tau,
        tau_kl: tau * 1.5,
        alpha: 0.7,
        cross_kind: CrossKind::KlOnly,
    }
}

/// Gradient checks for the composite losses, three shapes each.
pub fn composite_cases() -> Vec<GradCheckCase> {
    let mut c = Vec::new();
    let shapes = [(2usize, 3usize, 4usize, 0.5f64), (4, 5, 3, 1.0), (3, 8, 5, 0.2)];
    for (i, &(a, k, d, tau)) in shapes.iter().enumerate() {
        let s = 400 + 10 * i as u64;
        let desc = format!("A={a} K={k} D={d} tau={tau}");
        let cfg = loss_config(tau);
        let bank = unit_array(s + 1, k, d);
        let inputs = randn(s, &[vec![a, d], vec![a, d]]);
        macro_rules! pair_case {
            ($name:expr, |$q:ident, $p:ident, $b:ident| $body:expr) => {{
                let (bank, inputs, cfg) = (bank.clone(), inputs.clone(), cfg.clone());
                let _ = &cfg;
                c.push(GradCheckCase::new($name, desc.clone(), move || {
                    grad_check_with(
                        |tape, xs| {
                            let $q = normalized(&xs[0])?;
                            let $p = normalized(&xs[1])?;
                            let $b = tape.constant(bank.clone());
                            lift($body)
                        },
                        &inputs,
                        DEFAULT_STEP,
                    )
                }));
            }};
        }
        pair_case!("info_nce", |q, p, b| losses::info_nce(&q, &p, &b, tau));
        pair_case!("symmetric_kl", |q, p, b| losses::symmetric_kl(&q, &p, &b, tau));
        pair_case!("relational", |q, p, b| losses::relational(&q, &p, &b, &cfg));
    }

    // regularized through unshuffle and a drop-boundary mask
    for (i, &(n, m, t, d)) in [(2usize, 2usize, 4usize, 3usize), (2, 1, 6, 4), (4, 2, 8, 3)].iter().enumerate() {
        let s = 500 + 10 * i as u64;
        let b = 2 * m;
        let desc = format!("B={b} D={d} T={t} N={n} M={m}");
        let cfg = loss_config(0.5);
        let bank = unit_array(s + 1, 6, d);
        let inputs = randn(s, &[vec![b, d, t], vec![b, d, t], vec![b * t, d]]);
        let mut rng = ChaCha8Rng::seed_from_u64(s + 2);
        let groups = (0..b / m)
            .map(|_| {
                let mut pi: Vec<usize> = (0..n * m).collect();
                rand::seq::SliceRandom::shuffle(pi.as_mut_slice(), &mut rng);
                pi
            })
            .collect();
        let record = PermutationRecord::new(n, m, groups).expect("permutation");
        let frame_mask = boundary_mask(DivisionStrategy::DropBoundary, n, t);
        let mask: Vec<bool> = (0..b * t).map(|r| frame_mask[r % t]).collect();
        c.push(GradCheckCase::new("regularized+unshuffle", desc, move || {
            grad_check_with(
                |tape, xs| {
                    let q = seq_rows(&xs[0])?;
                    let q_reg = seq_rows(&lift(crate::permute::unshuffle_features(&xs[1], &record))?)?;
                    let p = normalized(&xs[2])?;
                    let bank = tape.constant(bank.clone());
                    lift(losses::regularized(&q, &q_reg, Some(&mask), &p, &bank, &cfg))
                },
                &inputs,
                DEFAULT_STEP,
            )
        }));
    }

    // hierarchical and cross-hierarchy on per-level rows of `images` images
    for (i, &(images, t, bins, d, kind)) in [
        (1usize, 4usize, 2usize, 3usize, CrossKind::KlOnly),
        (2, 6, 4, 4, CrossKind::Relational),
        (2, 8, 4, 3, CrossKind::KlOnly),
    ]
    .iter()
    .enumerate()
    {
        let s = 600 + 10 * i as u64;
        let desc = format!("B={images} T={t} bins={bins} D={d} {}", kind.name());
        let cfg = LossConfig {
            cross_kind: kind,
            ..loss_config(0.5)
        };
        let banks: Vec<Array<f64>> = (0..3).map(|l| unit_array(s + 1 + l, 5, d)).collect();
        let atoms = [images * t, images * bins, images];
        let shapes: Vec<Vec<usize>> = atoms.iter().flat_map(|&a| [vec![a, d], vec![a, d]]).collect();
        let inputs = randn(s, &shapes);
        {
            let (banks, inputs, cfg) = (banks.clone(), inputs.clone(), cfg.clone());
            c.push(GradCheckCase::new("hierarchical", desc.clone(), move || {
                grad_check_with(
                    |tape, xs| {
                        let levels: Vec<LevelInputs<'_, f64>> = (0..3)
                            .map(|l| {
                                Ok(LevelInputs {
                                    q: normalized(&xs[2 * l])?,
                                    p: normalized(&xs[2 * l + 1])?,
                                    q_reg: None,
                                    reg_mask: None,
                                    bank: tape.constant(banks[l].clone()),
                                })
                            })
                            .collect::<NResult<_>>()?;
                        let refs: Vec<(Level, &LevelInputs<'_, f64>)> = Level::ALL.into_iter().zip(levels.iter()).collect();
                        Ok(lift(losses::hierarchical(&refs, &cfg))?.0)
                    },
                    &inputs,
                    DEFAULT_STEP,
                )
            }));
        }
        c.push(GradCheckCase::new("cross_hierarchy", desc, move || {
            grad_check_with(
                |tape, xs| {
                    let rows: Vec<DiffArray<'_, f64>> = xs.iter().map(normalized).collect::<NResult<_>>()?;
                    let (f2s, s2w) = lift(losses::cross_hierarchy(
                        &rows[0],
                        &rows[2],
                        &rows[3],
                        &rows[5],
                        &tape.constant(banks[1].clone()),
                        &tape.constant(banks[2].clone()),
                        t,
                        bins,
                        &cfg,
                    ))?;
                    f2s.add(&s2w)
                },
                &inputs,
                DEFAULT_STEP,
            )
        }));
    }

    // full pipeline: encoder parameters through every loss term
    for (i, (height, width, frames, channels)) in [(10usize, 8usize, 4usize, (2usize, 2usize)), (12, 12, 4, (2, 3)), (10, 16, 8, (1, 2))]
        .into_iter()
        .enumerate()
    {
        let s = 700 + 10 * i as u64;
        let cfg = EncoderConfig {
            height,
            width,
            channels,
            features: 3,
            frames,
            embed_dim: 3,
            subword_bins: 2,
        };
        let desc = format!("H={height} W={width} T={frames} F=3 D=3");
        let mut rng = ChaCha8Rng::seed_from_u64(s + 1);
        // positive biases keep the tiny network away from all-zero features
        let mut params = EncoderParams::<f64>::init(&cfg, s).expect("config");
        for a in params.arrays.iter_mut().filter(|a| a.rank() == 1) {
            *a = random_array(&mut rng, a.shape(), 0.1, 0.5);
        }
        let b = 2;
        let pixels: Vec<f32> = (0..b * height * width).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let images = image_array::<f64>(&cfg, b, &pixels).expect("pixels");
        let loss_cfg = loss_config(0.5);
        let banks: Vec<Array<f64>> = (0..3).map(|l| unit_array(s + 2 + l, 4, 3)).collect();
        let p_inputs = randn(s + 5, &[vec![b * frames, 3], vec![b * 2, 3], vec![b, 3]]);
        c.push(GradCheckCase::new("encoder+total_loss", desc, move || {
            grad_check_with(
                |tape, xs| {
                    let bound = crate::encoder::Bound { vars: xs.to_vec() };
                    let x = tape.constant(images.clone());
                    let seq = lift(bound.encode(&cfg, &x))?;
                    let mut levels: Vec<LevelInputs<'_, f64>> = Vec::new();
                    for (l, level) in Level::ALL.into_iter().enumerate() {
                        levels.push(LevelInputs {
                            q: lift(bound.predict_level(&cfg, &seq, level))?,
                            p: normalized(&tape.constant(p_inputs[l].clone()))?,
                            q_reg: None,
                            reg_mask: None,
                            bank: tape.constant(banks[l].clone()),
                        });
                    }
                    let mut it = levels.into_iter();
                    let inputs = LossInputs {
                        frame: it.next(),
                        subword: it.next(),
                        word: it.next(),
                        frames,
                        subword_bins: 2,
                    };
                    Ok(lift(losses::total_loss(&inputs, &loss_cfg, Toggles::ALL, &Level::ALL))?.0)
                },
                &params.arrays,
                DEFAULT_STEP,
            )
        }));
    }
    c
}

/// Every registered check.
pub fn all_cases() -> Vec<GradCheckCase> {
    let mut c = primitive_cases();
    c.extend(composite_cases());
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::gradcheck::DEFAULT_TOLERANCE;

    #[test]
    fn composite_losses_pass() {
        for case in composite_cases() {
            let row = case.evaluate(DEFAULT_TOLERANCE);
            assert!(row.passed, "{} {} err={}", row.op, row.shape, row.max_rel_err);
        }
    }
}
