//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, DiffArray, Result, Tape};

/// Max relative error between the tape gradient of scalar `f` at `x` and a
/// central difference with step `h`, measured as
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Array<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, DiffArray<'t, f64>) -> Result<DiffArray<'t, f64>>,
{
    grad_check_with(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once; the error is the max over
/// every coordinate of every input.
pub fn grad_check_with<F>(f: F, inputs: &[Array<f64>], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[DiffArray<'t, f64>]) -> Result<DiffArray<'t, f64>>,
{
    let analytic: Vec<Array<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let grads = f(&tape, &vars)?.backward()?;
        vars.iter()
            .map(|v| grads.get(v).cloned().expect("input requires grad"))
            .collect()
    };

    let eval = |perturbed: &[Array<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|a| tape.constant(a.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (slot, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            work[slot].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[slot].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One row of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub op: String,
    pub shape: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// A registered check: `run` returns the max relative error.
pub struct GradCheckCase {
    pub op: &'static str,
    pub shape: String,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

impl GradCheckCase {
    pub fn new(op: &'static str, shape: String, run: impl Fn() -> Result<f64> + 'static) -> Self {
        Self {
            op,
            shape,
            run: Box::new(run),
        }
    }

    pub fn evaluate(&self, tolerance: f64) -> GradCheckRow {
        let (err, passed) = match (self.run)() {
            Ok(e) => (e, e < tolerance),
            Err(_) => (f64::NAN, false),
        };
        GradCheckRow {
            op: self.op.to_string(),
            shape: self.shape.clone(),
            max_rel_err: err,
            passed,
        }
    }
}

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Uniform random array in `[lo, hi)`.
pub fn random_array(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Reduces an array-valued output to a scalar with fixed random weights so
/// that every output coordinate contributes a distinct gradient.
pub fn weighted_sum<'t>(y: DiffArray<'t, f64>, seed: u64) -> Result<DiffArray<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_array(&mut rng, &y.shape(), -1.0, 1.0);
    let w = y.tape().constant(w);
    Ok(y.mul(&w)?.sum_all())
}

fn fmt_shapes(shapes: &[&[usize]]) -> String {
    shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

macro_rules! case {
    ($cases:ident, $name:expr, $seed:expr, [$($shape:expr),+], ($lo:expr, $hi:expr), |$tape:ident, $xs:ident| $body:expr) => {{
        let shapes: Vec<Vec<usize>> = vec![$($shape.to_vec()),+];
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let desc = fmt_shapes(&refs);
        let seed: u64 = $seed;
        $cases.push(GradCheckCase::new($name, desc, move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Array<f64>> =
                shapes.iter().map(|s| random_array(&mut rng, s, $lo, $hi)).collect();
            grad_check_with(
                |$tape, $xs| {
                    let _ = $tape;
                    let y = $body?;
                    weighted_sum(y, seed)
                },
                &inputs,
                DEFAULT_STEP,
            )
        }));
    }};
}

/// Checks for every differentiable primitive, three shapes each.
pub fn primitive_cases() -> Vec<GradCheckCase> {
    let mut c = Vec::new();
    for (i, (a, b)) in [
        (vec![3], vec![3]),
        (vec![2, 4], vec![4]),
        (vec![2, 3, 2], vec![3, 2]),
    ]
    .into_iter()
    .enumerate()
    {
        let s = i as u64;
        case!(c, "add", 100 + s, [a, b], (-1.0, 1.0), |t, x| x[0].add(&x[1]));
        case!(c, "sub", 110 + s, [a, b], (-1.0, 1.0), |t, x| x[0].sub(&x[1]));
        case!(c, "mul", 120 + s, [a, b], (-1.0, 1.0), |t, x| x[0].mul(&x[1]));
    }
    for (i, shape) in [vec![4], vec![3, 5], vec![2, 2, 3]].into_iter().enumerate() {
        let s = i as u64;
        let last = shape.len() - 1;
        let total: usize = shape.iter().product();
        case!(c, "scale", 130 + s, [shape], (-1.0, 1.0), |t, x| Ok::<_, super::NdiffError>(x[0].scale(-1.7)));
        case!(c, "relu", 140 + s, [shape], (-1.0, 1.0), |t, x| Ok::<_, super::NdiffError>(x[0].relu()));
        case!(c, "exp", 150 + s, [shape], (-1.0, 1.0), |t, x| Ok::<_, super::NdiffError>(x[0].exp()));
        case!(c, "log", 160 + s, [shape], (0.2, 2.0), |t, x| x[0].log());
        case!(c, "sum", 170 + s, [shape], (-1.0, 1.0), |t, x| x[0].sum(0));
        case!(c, "mean", 180 + s, [shape], (-1.0, 1.0), |t, x| x[0].mean(last));
        case!(c, "softmax", 190 + s, [shape], (-2.0, 2.0), |t, x| x[0].softmax(last, 0.5));
        case!(c, "log_softmax", 200 + s, [shape], (-2.0, 2.0), |t, x| x[0].log_softmax(0, 0.7));
        case!(c, "l2_normalize", 210 + s, [shape], (-1.0, 1.0), |t, x| x[0].l2_normalize(last));
        case!(c, "reshape", 220 + s, [shape], (-1.0, 1.0), |t, x| x[0].reshape(&[total]));
        case!(c, "sum_all", 320 + s, [shape], (-1.0, 1.0), |t, x| Ok::<_, super::NdiffError>(x[0].exp().sum_all()));
        case!(c, "mean_all", 330 + s, [shape], (-1.0, 1.0), |t, x| Ok::<_, super::NdiffError>(x[0].exp().mean_all()));
    }
    for (i, (m, k, n)) in [(3, 4, 2), (1, 5, 3), (4, 2, 6)].into_iter().enumerate() {
        let s = i as u64;
        case!(c, "matmul", 230 + s, [[m, k], [k, n]], (-1.0, 1.0), |t, x| x[0].matmul(&x[1]));
        case!(c, "matmul_t", 240 + s, [[m, k], [n, k]], (-1.0, 1.0), |t, x| x[0].matmul_t(&x[1]));
        case!(c, "concat_last", 250 + s, [[m, k], [m, n]], (-1.0, 1.0), |t, x| x[0].concat_last(&x[1]));
        case!(c, "swap_last2", 260 + s, [[m, k, n]], (-1.0, 1.0), |t, x| x[0].swap_last2());
    }
    for (i, (shape, bins)) in [(vec![2, 8], 4usize), (vec![3, 26], 4), (vec![2, 2, 7], 3)]
        .into_iter()
        .enumerate()
    {
        case!(c, "avgpool_seq", 270 + i as u64, [shape], (-1.0, 1.0), |t, x| x[0].avgpool_seq(bins));
    }
    for (i, (xs, ws, stride)) in [
        ([1, 1, 6, 6], [1, 1, 3, 3], (1, 1)),
        ([2, 2, 5, 8], [3, 2, 3, 4], (1, 4)),
        ([1, 3, 7, 7], [2, 3, 2, 2], (2, 2)),
    ]
    .into_iter()
    .enumerate()
    {
        let cout = ws[0];
        case!(c, "conv2d", 280 + i as u64, [xs, ws, [cout]], (-1.0, 1.0), |t, x| x[0].conv2d(&x[1], Some(&x[2]), stride));
    }
    for (i, (xs, window)) in [([1, 1, 4, 4], (2, 2)), ([2, 3, 7, 5], (2, 1)), ([1, 2, 6, 6], (3, 2))]
        .into_iter()
        .enumerate()
    {
        case!(c, "maxpool2d", 290 + i as u64, [xs], (-1.0, 1.0), |t, x| x[0].maxpool2d(window));
    }
    for (i, (xs, ws, pad)) in [
        ([1, 2, 5], [2, 2, 3], 1usize),
        ([2, 3, 8], [4, 3, 3], 1),
        ([1, 1, 6], [2, 1, 2], 0),
    ]
    .into_iter()
    .enumerate()
    {
        let cout = ws[0];
        case!(c, "conv1d_seq", 300 + i as u64, [xs, ws, [cout]], (-1.0, 1.0), |t, x| x[0].conv1d_seq(&x[1], Some(&x[2]), pad));
    }
    for (i, n) in [4usize, 6, 9].into_iter().enumerate() {
        let index: Vec<usize> = (0..n).rev().chain([0, 0, n / 2]).collect();
        let len = index.len();
        case!(c, "gather", 310 + i as u64, [[n]], (-1.0, 1.0), |t, x| x[0].gather(index.clone(), &[len]));
        let picks: Vec<usize> = (0..n).step_by(2).chain([1, 1]).collect();
        case!(c, "select_rows", 340 + i as u64, [[n, 3]], (-1.0, 1.0), |t, x| x[0].select_rows(&picks));
    }
    c
}
