//! Brute-force reference values and the golden fixture file.
//!
//! The oracles below are deliberately naive loops over plain `f64` slices.
//! They share nothing with [`crate::losses`] or the tape, so agreement
//! between the two is evidence rather than tautology.
//!
//! Fixture file format: blocks separated by blank lines,
//!
//! ```text
//! [name]
//! origin = closed-form | oracle
//! input = free text description including the seed
//! oracle = how the expected value was produced
//! expected = space-separated values
//! ```
//!
//! Lines starting with `#` are comments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::seed;

pub mod oracle {
    //! Direct summation references in 64-bit floats.

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    fn softmax(logits: &[f64]) -> Vec<f64> {
        let mut m = f64::NEG_INFINITY;
        for &l in logits {
            if l > m {
                m = l;
            }
        }
        let mut z = 0.0;
        for &l in logits {
            z += (l - m).exp();
        }
        let mut out = Vec::new();
        for &l in logits {
            out.push((l - m).exp() / z);
        }
        out
    }

    pub fn info_nce(q: &[Vec<f64>], p: &[Vec<f64>], bank: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for a in 0..q.len() {
            let pos = dot(&q[a], &p[a]) / tau;
            let mut m = pos;
            for n in bank {
                m = m.max(dot(&q[a], n) / tau);
            }
            let mut z = (pos - m).exp();
            for n in bank {
                z += (dot(&q[a], n) / tau - m).exp();
            }
            total += -(pos - m - z.ln());
        }
        total / q.len() as f64
    }

    pub fn symmetric_kl(q: &[Vec<f64>], p: &[Vec<f64>], bank: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for a in 0..q.len() {
            let lq: Vec<f64> = bank.iter().map(|n| dot(&q[a], n) / tau).collect();
            let lp: Vec<f64> = bank.iter().map(|n| dot(&p[a], n) / tau).collect();
            let (dq, dp) = (softmax(&lq), softmax(&lp));
            let mut kl_pq = 0.0;
            let mut kl_qp = 0.0;
            for k in 0..bank.len() {
                kl_pq += dp[k] * (dp[k] / dq[k]).ln();
                kl_qp += dq[k] * (dq[k] / dp[k]).ln();
            }
            total += 0.5 * kl_pq + 0.5 * kl_qp;
        }
        total / q.len() as f64
    }

    pub fn relational(q: &[Vec<f64>], p: &[Vec<f64>], bank: &[Vec<f64>], tau_info: f64, tau_kl: f64, alpha: f64) -> f64 {
        info_nce(q, p, bank, tau_info) + alpha * symmetric_kl(q, p, bank, tau_kl)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn regularized(
        q: &[Vec<f64>],
        q_reg: &[Vec<f64>],
        mask: &[bool],
        p: &[Vec<f64>],
        bank: &[Vec<f64>],
        tau_info: f64,
        tau_kl: f64,
        alpha: f64,
    ) -> f64 {
        let mut kept_q = Vec::new();
        let mut kept_p = Vec::new();
        for i in 0..q.len() {
            if mask[i] {
                kept_q.push(q_reg[i].clone());
                kept_p.push(p[i].clone());
            }
        }
        relational(q, p, bank, tau_info, tau_kl, alpha) + relational(&kept_q, &kept_p, bank, tau_info, tau_kl, alpha)
    }

    /// Bin containing frame `t`, searched explicitly over the floor-bounded
    /// bins `[floor(b·T/S), floor((b+1)·T/S))`.
    pub fn bin_of(t: usize, frames: usize, bins: usize) -> usize {
        for b in 0..bins {
            let lo = (b * frames) as f64 / bins as f64;
            let hi = ((b + 1) * frames) as f64 / bins as f64;
            if (t as f64) >= lo.floor() && (t as f64) < hi.floor() {
                return b;
            }
        }
        panic!("frame {t} outside every bin");
    }

    /// `(f2s, s2w)` by explicit loops over images, frames and bins. With
    /// `relational_kind` the terms use InfoNCE + α·KL, else KL only.
    #[allow(clippy::too_many_arguments)]
    pub fn cross_hierarchy(
        frame_q: &[Vec<f64>],
        subword_q: &[Vec<f64>],
        subword_p: &[Vec<f64>],
        word_p: &[Vec<f64>],
        subword_bank: &[Vec<f64>],
        word_bank: &[Vec<f64>],
        frames: usize,
        bins: usize,
        tau_info: f64,
        tau_kl: f64,
        alpha: f64,
        relational_kind: bool,
    ) -> (f64, f64) {
        let images = word_p.len();
        let term = |q: &[Vec<f64>], p: &[Vec<f64>], bank: &[Vec<f64>]| {
            if relational_kind {
                relational(q, p, bank, tau_info, tau_kl, alpha)
            } else {
                symmetric_kl(q, p, bank, tau_kl)
            }
        };
        let mut f_pos = Vec::new();
        for img in 0..images {
            for t in 0..frames {
                f_pos.push(subword_p[img * bins + bin_of(t, frames, bins)].clone());
            }
        }
        let mut s_pos = Vec::new();
        for img in 0..images {
            for _ in 0..bins {
                s_pos.push(word_p[img].clone());
            }
        }
        (term(frame_q, &f_pos, subword_bank), term(subword_q, &s_pos, word_bank))
    }

    /// Central-difference gradient of `f` at `x`.
    pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::new();
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            g.push((up - down) / (2.0 * h));
        }
        g
    }
}

/// `n` random unit rows of dimension `d`.
pub fn random_unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Random loss instance used by the seeded fixtures: `(q, p, bank)`.
pub fn random_instance(seed: u64, atoms: usize, k: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seed::rng(seed);
    let q = random_unit_rows(&mut rng, atoms, d);
    let p = random_unit_rows(&mut rng, atoms, d);
    let bank = random_unit_rows(&mut rng, k, d);
    (q, p, bank)
}

/// One fixture block.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenFixture {
    pub name: String,
    pub origin: String,
    pub input: String,
    pub oracle: String,
    pub expected: Vec<f64>,
}

fn fmt_values(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.15e}")).collect::<Vec<_>>().join(" ")
}

fn fixture(name: &str, origin: &str, input: String, oracle: &str, expected: Vec<f64>) -> GoldenFixture {
    GoldenFixture {
        name: name.into(),
        origin: origin.into(),
        input,
        oracle: oracle.into(),
        expected,
    }
}

/// Recomputes every fixture from the oracles.
pub fn build_fixtures(seed: u64) -> Vec<GoldenFixture> {
    let e = std::f64::consts::E;
    let e1 = vec![1.0, 0.0, 0.0];
    let e2 = vec![0.0, 1.0, 0.0];
    let e3 = vec![0.0, 0.0, 1.0];
    let (ti, tk, alpha) = (0.07, 0.1, 1.0);
    let mut out = vec![
        fixture(
            "info_nce_orthogonal_tau1",
            "closed-form",
            "q=p=e1, bank={e2,e3}, tau=1".into(),
            "closed form log(1+2/e)",
            vec![(1.0 + 2.0 / e).ln()],
        ),
        fixture(
            "info_nce_orthogonal_tau0.5",
            "closed-form",
            "q=p=e1, bank={e2,e3}, tau=0.5".into(),
            "closed form log(1+2e^-2)",
            vec![(1.0 + 2.0 * (-2.0f64).exp()).ln()],
        ),
        fixture(
            "symmetric_kl_two_point",
            "oracle",
            "q=e1, p=e2, bank={e1,e2}, tau=1".into(),
            "oracle::symmetric_kl enumeration; equals tanh(1/2)",
            vec![oracle::symmetric_kl(std::slice::from_ref(&e1), std::slice::from_ref(&e2), &[e1.clone(), e2.clone()], 1.0)],
        ),
        fixture(
            "info_nce_orthogonal_oracle",
            "oracle",
            "q=p=e1, bank={e2,e3}, tau=1".into(),
            "oracle::info_nce direct summation",
            vec![oracle::info_nce(std::slice::from_ref(&e1), std::slice::from_ref(&e1), &[e2, e3], 1.0)],
        ),
    ];

    let (q, p, bank) = random_instance(seed, 1, 8, 4);
    let info = oracle::info_nce(&q, &p, &bank, ti);
    let kl = oracle::symmetric_kl(&q, &p, &bank, tk);
    let input = format!("random_instance(seed={seed}, atoms=1, K=8, D=4), tau_info={ti}, tau_kl={tk}");
    out.push(fixture("info_nce_random", "oracle", input.clone(), "oracle::info_nce direct summation", vec![info]));
    out.push(fixture("symmetric_kl_random", "oracle", input.clone(), "oracle::symmetric_kl direct summation", vec![kl]));
    out.push(fixture(
        "relational_random",
        "oracle",
        format!("{input}, alpha={alpha}"),
        "sum of the two oracle values above",
        vec![oracle::relational(&q, &p, &bank, ti, tk, alpha)],
    ));

    let (q, p, bank) = random_instance(seed + 1, 8, 16, 8);
    let (q_reg, _, _) = random_instance(seed + 2, 8, 1, 8);
    let mask: Vec<bool> = (0..8).map(|i| i != 3 && i != 4).collect();
    out.push(fixture(
        "regularized_random",
        "oracle",
        format!(
            "q,p,bank=random_instance(seed={}, atoms=8, K=16, D=8), q_reg=q of random_instance(seed={}, 8, 1, 8), mask drops atoms 3 and 4, alpha={alpha}",
            seed + 1,
            seed + 2
        ),
        "oracle::regularized compositional sum",
        vec![oracle::regularized(&q, &q_reg, &mask, &p, &bank, ti, tk, alpha)],
    ));

    // two images, T=8 frames, 4 bins
    let mut rng = seed::rng(seed + 3);
    let frame_q = random_unit_rows(&mut rng, 16, 6);
    let subword_q = random_unit_rows(&mut rng, 8, 6);
    let subword_p = random_unit_rows(&mut rng, 8, 6);
    let word_p = random_unit_rows(&mut rng, 2, 6);
    let sub_bank = random_unit_rows(&mut rng, 12, 6);
    let word_bank = random_unit_rows(&mut rng, 12, 6);
    let input = format!("seed {}: 2 images, T=8, 4 bins, D=6, K=12, drawn in order frame_q, subword_q, subword_p, word_p, subword bank, word bank", seed + 3);
    let (f2s, s2w) = oracle::cross_hierarchy(
        &frame_q, &subword_q, &subword_p, &word_p, &sub_bank, &word_bank, 8, 4, ti, tk, alpha, false,
    );
    out.push(fixture("cross_hierarchy_kl_only", "oracle", input.clone(), "oracle::cross_hierarchy explicit bin loops", vec![f2s, s2w]));
    let (f2s, s2w) = oracle::cross_hierarchy(
        &frame_q, &subword_q, &subword_p, &word_p, &sub_bank, &word_bank, 8, 4, ti, tk, alpha, true,
    );
    out.push(fixture("cross_hierarchy_relational", "oracle", input, "oracle::cross_hierarchy explicit bin loops", vec![f2s, s2w]));

    let (q, p, bank) = random_instance(seed, 1, 8, 4);
    let grad = oracle::numeric_gradient(|x| oracle::info_nce(&[x.to_vec()], &p, &bank, ti), &q[0], 1e-6);
    out.push(fixture(
        "info_nce_gradient_q",
        "oracle",
        format!("d info_nce / d q at random_instance(seed={seed}, 1, 8, 4), tau={ti}"),
        "central difference of oracle::info_nce, h=1e-6",
        grad,
    ));

    // slot s of the output receives group position pi(s); [A1 A2 B1 B2] = 0..4
    let pi = [2usize, 0, 3, 1];
    out.push(fixture(
        "permutation_slots",
        "oracle",
        "N=2, M=2, pi=(2,0,3,1), patches A1=0 A2=1 B1=2 B2=3".into(),
        "index bookkeeping: slot s receives patch pi(s)",
        pi.iter().map(|&s| s as f64).collect(),
    ));
    for (t, s) in [(26usize, 4usize), (16, 4)] {
        let bounds: Vec<f64> = (0..=s).map(|b| ((b * t) as f64 / s as f64).floor()).collect();
        out.push(fixture(
            &format!("avgpool_bounds_{t}_{s}"),
            "oracle",
            format!("T={t}, bins={s}"),
            "floor(b*T/bins) for b=0..=bins",
            bounds,
        ));
    }
    out.push(fixture(
        "drop_boundary_frames",
        "oracle",
        "T=16, N=2".into(),
        "frames k*T/N-1 and k*T/N for k=1..N-1",
        vec![7.0, 8.0],
    ));
    out
}

pub fn render_fixtures(seed: u64, fixtures: &[GoldenFixture]) -> String {
    let mut s = format!("# golden fixtures (seed {seed}), regenerate with: cargo run -p rclstr-cli --bin rclstr-fixtures\n");
    for f in fixtures {
        s.push('\n');
        s.push_str(&format!("[{}]\n", f.name));
        s.push_str(&format!("origin = {}\n", f.origin));
        s.push_str(&format!("input = {}\n", f.input));
        s.push_str(&format!("oracle = {}\n", f.oracle));
        s.push_str(&format!("expected = {}\n", fmt_values(&f.expected)));
    }
    s
}

#[derive(Debug, thiserror::Error)]
#[error("fixture parse error on line {line}: {message}")]
pub struct FixtureParseError {
    pub line: usize,
    pub message: String,
}

pub fn parse_fixtures(text: &str) -> Result<Vec<GoldenFixture>, FixtureParseError> {
    let mut out: Vec<GoldenFixture> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |message: String| FixtureParseError { line: i + 1, message };
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push(fixture(name, "", String::new(), "", Vec::new()));
            continue;
        }
        let current = out.last_mut().ok_or_else(|| err("field outside a block".into()))?;
        let (key, value) = line.split_once(" = ").ok_or_else(|| err(format!("expected key = value: {line:?}")))?;
        match key {
            "origin" => current.origin = value.into(),
            "input" => current.input = value.into(),
            "oracle" => current.oracle = value.into(),
            "expected" => {
                current.expected = value
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| err(format!("{v:?}: {e}"))))
                    .collect::<Result<_, _>>()?
            }
            other => return Err(err(format!("unknown key {other:?}"))),
        }
    }
    Ok(out)
}

/// Default seed of the committed fixture file.
pub const FIXTURE_SEED: u64 = 0;
