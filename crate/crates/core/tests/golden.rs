mod common;

use common::{param_rows, rel_close, rows};
use rclstr::fixtures::{build_fixtures, parse_fixtures, random_instance, random_unit_rows, render_fixtures, GoldenFixture, FIXTURE_SEED};
use rclstr::losses::{self, CrossKind, LossConfig};
use rclstr::ndiff::{pool_bounds, Tape};
use rclstr::permute::{boundary_mask, divide, shuffle_with, DivisionStrategy};
use rclstr::textgen::ImageBatch;

const GOLDEN: &str = include_str!("../fixtures/golden.txt");

fn committed() -> Vec<GoldenFixture> {
    parse_fixtures(GOLDEN).unwrap()
}

fn expected(name: &str) -> Vec<f64> {
    committed()
        .into_iter()
        .find(|f| f.name == name)
        .unwrap_or_else(|| panic!("fixture {name} missing"))
        .expected
}

fn cfg(kind: CrossKind) -> LossConfig {
    LossConfig {
        tau_info: 0.07,
        tau_kl: 0.1,
        alpha: 1.0,
        cross_kind: kind,
    }
}

#[test]
fn regenerated_file_is_byte_identical() {
    let text = render_fixtures(FIXTURE_SEED, &build_fixtures(FIXTURE_SEED));
    assert_eq!(text, GOLDEN);
    assert_eq!(text, render_fixtures(FIXTURE_SEED, &build_fixtures(FIXTURE_SEED)));
    for f in committed() {
        assert!(f.origin == "closed-form" || f.origin == "oracle", "{}", f.name);
        assert!(f.origin != "oracle" || !f.oracle.is_empty(), "{}", f.name);
        assert!(!f.expected.is_empty());
    }
}

#[test]
fn closed_forms() {
    let e = std::f64::consts::E;
    assert!((expected("info_nce_orthogonal_tau1")[0] - (1.0 + 2.0 / e).ln()).abs() < 1e-6);
    assert!((expected("info_nce_orthogonal_tau0.5")[0] - 0.2395448).abs() < 1e-6);
    assert!((expected("symmetric_kl_two_point")[0] - 0.462117).abs() < 1e-6);
}

#[test]
fn losses_match_fixtures() {
    let (e1, e2, e3) = (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]);
    let tape = Tape::new();
    let q = rows(&tape, std::slice::from_ref(&e1));
    let bank = rows(&tape, &[e2.clone(), e3]);
    let v = losses::info_nce(&q, &q, &bank, 1.0).unwrap().item();
    assert!(rel_close(v, expected("info_nce_orthogonal_tau1")[0], 1e-12));
    assert!(rel_close(v, expected("info_nce_orthogonal_oracle")[0], 1e-12));
    let v = losses::info_nce(&q, &q, &bank, 0.5).unwrap().item();
    assert!(rel_close(v, expected("info_nce_orthogonal_tau0.5")[0], 1e-12));
    let two = rows(&tape, &[e1.clone(), e2.clone()]);
    let v = losses::symmetric_kl(&q, &rows(&tape, &[e2]), &two, 1.0).unwrap().item();
    assert!(rel_close(v, expected("symmetric_kl_two_point")[0], 1e-12));

    let c = cfg(CrossKind::KlOnly);
    let (q, p, bank) = random_instance(FIXTURE_SEED, 1, 8, 4);
    let (q, p, bank) = (rows(&tape, &q), rows(&tape, &p), rows(&tape, &bank));
    let info = losses::info_nce(&q, &p, &bank, c.tau_info).unwrap().item();
    assert!(rel_close(info, expected("info_nce_random")[0], 1e-10));
    let kl = losses::symmetric_kl(&q, &p, &bank, c.tau_kl).unwrap().item();
    assert!(rel_close(kl, expected("symmetric_kl_random")[0], 1e-10));
    let rel = losses::relational(&q, &p, &bank, &c).unwrap().item();
    assert!(rel_close(rel, expected("relational_random")[0], 1e-10));

    let (q, p, bank) = random_instance(FIXTURE_SEED + 1, 8, 16, 8);
    let (q_reg, _, _) = random_instance(FIXTURE_SEED + 2, 8, 1, 8);
    let mask: Vec<bool> = (0..8).map(|i| i != 3 && i != 4).collect();
    let v = losses::regularized(
        &rows(&tape, &q),
        &rows(&tape, &q_reg),
        Some(&mask),
        &rows(&tape, &p),
        &rows(&tape, &bank),
        &c,
    )
    .unwrap()
    .item();
    assert!(rel_close(v, expected("regularized_random")[0], 1e-10));
}

#[test]
fn cross_hierarchy_matches_fixtures() {
    let mut rng = rclstr::seed::rng(FIXTURE_SEED + 3);
    let frame_q = random_unit_rows(&mut rng, 16, 6);
    let subword_q = random_unit_rows(&mut rng, 8, 6);
    let subword_p = random_unit_rows(&mut rng, 8, 6);
    let word_p = random_unit_rows(&mut rng, 2, 6);
    let sub_bank = random_unit_rows(&mut rng, 12, 6);
    let word_bank = random_unit_rows(&mut rng, 12, 6);
    for (kind, name) in [(CrossKind::KlOnly, "cross_hierarchy_kl_only"), (CrossKind::Relational, "cross_hierarchy_relational")] {
        let tape = Tape::new();
        let (f2s, s2w) = losses::cross_hierarchy(
            &rows(&tape, &frame_q),
            &rows(&tape, &subword_q),
            &rows(&tape, &subword_p),
            &rows(&tape, &word_p),
            &rows(&tape, &sub_bank),
            &rows(&tape, &word_bank),
            8,
            4,
            &cfg(kind),
        )
        .unwrap();
        let want = expected(name);
        assert!(rel_close(f2s.item(), want[0], 1e-10), "{name} f2s");
        assert!(rel_close(s2w.item(), want[1], 1e-10), "{name} s2w");
    }
}

#[test]
fn gradient_matches_fixture() {
    let (q, p, bank) = random_instance(FIXTURE_SEED, 1, 8, 4);
    let tape = Tape::new();
    let qv = param_rows(&tape, &q);
    let loss = losses::info_nce(&qv, &rows(&tape, &p), &rows(&tape, &bank), 0.07).unwrap();
    let grads = loss.backward().unwrap();
    let g = grads.get(&qv).unwrap();
    for (a, b) in g.data().iter().zip(expected("info_nce_gradient_q")) {
        assert!(rel_close(*a, b, 1e-6), "{a} vs {b}");
    }
}

#[test]
fn index_fixtures() {
    // slots of [B1|A1] [B2|A2] hold patches pi(s)
    let pi: Vec<usize> = expected("permutation_slots").iter().map(|&v| v as usize).collect();
    let images = ImageBatch {
        count: 2,
        height: 1,
        width: 2,
        data: vec![0.0, 1.0, 2.0, 3.0],
    };
    let d = divide(&images, 2, DivisionStrategy::Direct).unwrap();
    let (out, _) = shuffle_with(&d, 2, vec![pi.clone()]).unwrap();
    let got: Vec<usize> = out.data.iter().map(|&v| v as usize).collect();
    assert_eq!(got, pi);

    for (t, s) in [(26usize, 4usize), (16, 4)] {
        let want = expected(&format!("avgpool_bounds_{t}_{s}"));
        let mut got: Vec<f64> = (0..s).map(|b| pool_bounds(t, s, b).0 as f64).collect();
        got.push(pool_bounds(t, s, s - 1).1 as f64);
        assert_eq!(got, want);
    }
    let mask = boundary_mask(DivisionStrategy::DropBoundary, 2, 16);
    let dropped: Vec<f64> = (0..16).filter(|&t| !mask[t]).map(|t| t as f64).collect();
    assert_eq!(dropped, expected("drop_boundary_frames"));
}
