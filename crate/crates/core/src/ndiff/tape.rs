use std::cell::{Ref, RefCell};

use super::{split_axis, Array, NdiffError, Result, Scalar};

/// Backward rule for a user-defined operation: receives the input values,
/// the forward output and the upstream gradient, and returns one gradient
/// per input (same shapes as the inputs).
pub type BackwardFn<T> = Box<dyn Fn(&[&Array<T>], &Array<T>, &Array<T>) -> Vec<Array<T>>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Exp(usize),
    Log(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        x: usize,
        axis: usize,
        temp: T,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
        temp: T,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
        axis: usize,
    },
    Mean {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    AvgPoolSeq {
        x: usize,
        bins: usize,
    },
    L2Normalize {
        x: usize,
        axis: usize,
        norms: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: (usize, usize),
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    Conv1dSeq {
        x: usize,
        w: usize,
        b: Option<usize>,
        pad: usize,
    },
    Reshape(usize),
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    SwapLast2(usize),
    ConcatLast(usize, usize),
    Custom {
        inputs: Vec<usize>,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of one forward pass. Build a fresh tape per pass; drop it after
/// [`DiffArray::backward`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct DiffArray<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by tape position.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, x: &DiffArray<'_, T>) -> Option<&Array<T>> {
        self.grads.get(x.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, x: &DiffArray<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(x.id).and_then(|g| g.take())
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(NdiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// `out[m×n] += a · b` with optional transposed storage of either side.
/// `ta`: `a` is stored `k×m`; `tb`: `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    T::gemm_acc(m, k, n, a, rsa, csa, b, rsb, csb, out, n);
}

fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_acc(&mut out, a, b, m, k, n, ta, tb);
    out
}

/// Patch geometry of a valid 2-d cross-correlation over one image.
#[derive(Clone, Copy)]
struct Patches {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `[cin·kh·kw, oh·ow]` patch matrix of one `[cin, h, w]` image.
    fn unfold<T: Scalar>(&self, x: &[T], out: &mut [T]) {
        let n = self.cols();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut out[r * n..(r + 1) * n];
                    for oy in 0..self.oh {
                        let src = (c * self.h + oy * self.sh + ky) * self.w + kx;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if self.sw == 1 {
                            drow.copy_from_slice(&x[src..src + self.ow]);
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = x[src + ox * self.sw];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patches::unfold`]: scatter-adds a patch matrix into `gx`.
    fn fold<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        let n = self.cols();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[r * n..(r + 1) * n];
                    for oy in 0..self.oh {
                        let dst = (c * self.h + oy * self.sh + ky) * self.w + kx;
                        let srow = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &v) in srow.iter().enumerate() {
                            let p = dst + ox * self.sw;
                            gx[p] = gx[p] + v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(
    geo: Patches,
    xd: &[T],
    wv: &[T],
    bias: Option<&[T]>,
    bn: usize,
    cout: usize,
    image: impl Fn(&[T], usize) -> Vec<T>,
) -> Vec<T> {
    let (rows, cols) = (geo.rows(), geo.cols());
    let plane = cout * cols;
    let mut out = vec![T::zero(); bn * plane];
    let mut patches = vec![T::zero(); rows * cols];
    for n in 0..bn {
        let o = &mut out[n * plane..(n + 1) * plane];
        if let Some(bv) = bias {
            for (c, row) in o.chunks_mut(cols).enumerate() {
                row.iter_mut().for_each(|v| *v = bv[c]);
            }
        }
        geo.unfold(&image(xd, n), &mut patches);
        gemm_acc(o, wv, &patches, cout, rows, cols, false, false);
    }
    out
}

type Accumulate<'a, T> = dyn FnMut(usize, &mut dyn FnMut(&mut [T])) + 'a;

/// Shared backward pass of the convolutions. `image(n)` yields image `n`
/// as seen by the kernel (padded if needed); `scatter` maps a gradient of
/// that view back onto the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    acc: &mut Accumulate<'_, T>,
    geo: Patches,
    (x, w, b): (usize, usize, Option<usize>),
    (bn, cout): (usize, usize),
    wv: &[T],
    g: &[T],
    image: impl Fn(usize) -> Vec<T>,
    scatter: impl Fn(&mut [T], usize, &[T]),
) {
    let (rows, cols) = (geo.rows(), geo.cols());
    let plane = cout * cols;
    acc(w, &mut |gw| {
        let mut patches = vec![T::zero(); rows * cols];
        for n in 0..bn {
            geo.unfold(&image(n), &mut patches);
            gemm_acc(gw, &g[n * plane..(n + 1) * plane], &patches, cout, cols, rows, false, true);
        }
    });
    acc(x, &mut |gx| {
        let mut gimg = vec![T::zero(); geo.cin * geo.h * geo.w];
        for n in 0..bn {
            let mut gpatches = vec![T::zero(); rows * cols];
            gemm_acc(&mut gpatches, wv, &g[n * plane..(n + 1) * plane], rows, cout, cols, true, false);
            gimg.iter_mut().for_each(|v| *v = T::zero());
            geo.fold(&gpatches, &mut gimg);
            scatter(gx, n, &gimg);
        }
    });
    if let Some(b) = b {
        acc(b, &mut |gb| {
            for n in 0..bn {
                for (o, gbo) in gb.iter_mut().enumerate() {
                    let s = n * plane + o * cols;
                    for &gv in &g[s..s + cols] {
                        *gbo = *gbo + gv;
                    }
                }
            }
        });
    }
}

/// Pads each `[cin, t]` row with `pad` zeros on both sides.
fn pad_seq<T: Scalar>(x: &[T], cin: usize, t: usize, pad: usize) -> Vec<T> {
    let tp = t + 2 * pad;
    let mut out = vec![T::zero(); cin * tp];
    for c in 0..cin {
        out[c * tp + pad..c * tp + pad + t].copy_from_slice(&x[c * t..(c + 1) * t]);
    }
    out
}

/// Half-open frame range `[floor(b·t/bins), floor((b+1)·t/bins))` of bin `b`.
pub fn pool_bounds(t: usize, bins: usize, b: usize) -> (usize, usize) {
    (b * t / bins, (b + 1) * t / bins)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf that accumulates a gradient.
    pub fn param(&self, value: Array<T>) -> DiffArray<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array<T>) -> DiffArray<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[DiffArray<'t, T>],
        value: Array<T>,
        backward: BackwardFn<T>,
    ) -> DiffArray<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|x| x.id).collect();
        let rg = self.any_requires_grad(&ids);
        self.push(value, Op::Custom { inputs: ids, backward }, rg)
    }

    fn push(&self, value: Array<T>, op: Op<T>, requires_grad: bool) -> DiffArray<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        DiffArray {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn any_requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Array<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root].value.shape();
        if nodes[root].value.len() != 1 {
            return Err(NdiffError::NotScalar(root_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                self.propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                Some(Array::new(node.value.shape(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &nodes[id].value;
        let val = |i: usize| &nodes[i].value;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[i].requires_grad {
                return;
            }
            let slot = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]);
            f(slot);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                acc(*a, &mut |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x = *x + y;
                    }
                });
                let inner = val(*b).len().max(1);
                acc(*b, &mut |gb| {
                    for chunk in g.chunks(inner) {
                        for (o, &y) in gb.iter_mut().zip(chunk) {
                            *o = *o + sign * y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = val(*a).data();
                let bv = val(*b).data();
                let inner = bv.len().max(1);
                acc(*a, &mut |ga| {
                    for (gac, gc) in ga.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((o, &y), &bb) in gac.iter_mut().zip(gc).zip(bv) {
                            *o = *o + y * bb;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (gc, ac) in g.chunks(inner).zip(av.chunks(inner)) {
                        for ((o, &y), &aa) in gb.iter_mut().zip(gc).zip(ac) {
                            *o = *o + y * aa;
                        }
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                for (o, &y) in gx.iter_mut().zip(g) {
                    *o = *o + y * *s;
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |gx| {
                for (i, o) in gx.iter_mut().enumerate() {
                    *o = *o + g[i] * out.data()[i];
                }
            }),
            Op::Log(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] / xv[i];
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = val(*a).data();
                let bv = val(*b).data();
                acc(*a, &mut |ga| {
                    // ga[m×k] += g[m×n] · b (b stored n×k when transposed)
                    gemm_acc(ga, g, bv, m, n, k, false, !*trans_b);
                });
                acc(*b, &mut |gb| {
                    if *trans_b {
                        // gb[n×k] += gᵀ · a
                        gemm_acc(gb, g, av, n, m, k, true, false);
                    } else {
                        // gb[k×n] += aᵀ · g
                        gemm_acc(gb, av, g, k, m, n, true, false);
                    }
                });
            }
            Op::Softmax { x, axis, temp } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot = dot + g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = gx[p] + y[p] * (g[p] - dot) / *temp;
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis, temp, probs } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut total = T::zero();
                            for j in 0..len {
                                total = total + g[base + j * inner];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = gx[p] + (g[p] - probs[p] * total) / *temp;
                            }
                        }
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                let p = (o * len + j) * inner + i;
                                gx[p] = gx[p] + g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::AvgPoolSeq { x, bins } => {
                let t = *val(*x).shape().last().unwrap();
                let rows = val(*x).len() / t;
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        for b in 0..*bins {
                            let (s, e) = pool_bounds(t, *bins, b);
                            let share = g[r * bins + b] / T::from_usize(e - s).unwrap();
                            for f in s..e {
                                gx[r * t + f] = gx[r * t + f] + share;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let norm = norms[o * inner + i];
                            let mut dot = T::zero();
                            for j in 0..len {
                                let p = base + j * inner;
                                dot = dot + g[p] * y[p];
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] = gx[p] + (g[p] - y[p] * dot) / norm;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let geo = Patches {
                    cin: xs[1],
                    h: xs[2],
                    w: xs[3],
                    kh: ws[2],
                    kw: ws[3],
                    sh: stride.0,
                    sw: stride.1,
                    oh: out.shape()[2],
                    ow: out.shape()[3],
                };
                let size = geo.cin * geo.h * geo.w;
                conv_backward(
                    &mut acc,
                    geo,
                    (*x, *w, *b),
                    (xs[0], ws[0]),
                    val(*w).data(),
                    g,
                    |n| val(*x).data()[n * size..(n + 1) * size].to_vec(),
                    |gx, n, gimg| {
                        for (o, &v) in gx[n * size..(n + 1) * size].iter_mut().zip(gimg) {
                            *o = *o + v;
                        }
                    },
                );
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |gx| {
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[i];
                }
            }),
            Op::Conv1dSeq { x, w, b, pad } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (cin, t, pad) = (xs[1], xs[2], *pad);
                let geo = Patches {
                    cin,
                    h: 1,
                    w: t + 2 * pad,
                    kh: 1,
                    kw: ws[2],
                    sh: 1,
                    sw: 1,
                    oh: 1,
                    ow: out.shape()[2],
                };
                let tp = t + 2 * pad;
                conv_backward(
                    &mut acc,
                    geo,
                    (*x, *w, *b),
                    (xs[0], ws[0]),
                    val(*w).data(),
                    g,
                    |n| pad_seq(&val(*x).data()[n * cin * t..(n + 1) * cin * t], cin, t, pad),
                    |gx, n, gimg| {
                        for c in 0..cin {
                            let dst = &mut gx[(n * cin + c) * t..(n * cin + c + 1) * t];
                            for (o, &v) in dst.iter_mut().zip(&gimg[c * tp + pad..c * tp + pad + t]) {
                                *o = *o + v;
                            }
                        }
                    },
                );
            }
            Op::Reshape(x) => acc(*x, &mut |gx| {
                for (o, &y) in gx.iter_mut().zip(g) {
                    *o = *o + y;
                }
            }),
            Op::Gather { x, index } => acc(*x, &mut |gx| {
                for (i, &src) in index.iter().enumerate() {
                    gx[src] = gx[src] + g[i];
                }
            }),
            Op::SwapLast2(x) => {
                let s = out.shape();
                let r = s.len();
                let (a, b) = (s[r - 2], s[r - 1]);
                let batches = out.len() / (a * b);
                acc(*x, &mut |gx| {
                    for n in 0..batches {
                        for i in 0..a {
                            for j in 0..b {
                                // out[n, i, j] = in[n, j, i]
                                let p = n * a * b + j * a + i;
                                gx[p] = gx[p] + g[n * a * b + i * b + j];
                            }
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let na = *val(*a).shape().last().unwrap();
                let nb = *val(*b).shape().last().unwrap();
                let rows = val(*a).len() / na;
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        for j in 0..na {
                            ga[r * na + j] = ga[r * na + j] + g[r * (na + nb) + j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..nb {
                            gb[r * nb + j] = gb[r * nb + j] + g[r * (na + nb) + na + j];
                        }
                    }
                });
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Array<T>> = inputs.iter().map(|&i| val(i)).collect();
                let gout = Array::new(out.shape(), g.to_vec()).expect("gradient shape");
                let gin = backward(&ins, out, &gout);
                for (&i, gi) in inputs.iter().zip(gin) {
                    acc(i, &mut |gx| {
                        for (o, &y) in gx.iter_mut().zip(gi.data()) {
                            *o = *o + y;
                        }
                    });
                }
            }
        }
    }
}

impl<'t, T: Scalar> DiffArray<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Array<T> {
        self.tape.value(self.id).clone()
    }

    /// Borrow of the forward value. Do not hold across tape operations.
    pub fn value_ref(&self) -> Ref<'t, Array<T>> {
        self.tape.value(self.id)
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Runs reverse-mode accumulation from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }

    fn unary(&self, value: Array<T>, op: Op<T>) -> DiffArray<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary_map(
        &self,
        other: &DiffArray<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Array<T>> {
        let a = self.tape.value(self.id);
        let b = self.tape.value(other.id);
        suffix_broadcast(name, a.shape(), b.shape())?;
        let inner = b.len().max(1);
        let data = a
            .data()
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Array::new(a.shape(), data)
    }

    fn binary(&self, other: &DiffArray<'t, T>, value: Array<T>, op: Op<T>) -> DiffArray<'t, T> {
        let rg = self.tape.any_requires_grad(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        let v = self.binary_map(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        let v = self.binary_map(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        let v = self.binary_map(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: T) -> DiffArray<'t, T> {
        let v = self.tape.value(self.id).map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn relu(&self) -> DiffArray<'t, T> {
        let v = self
            .tape
            .value(self.id)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(&self) -> DiffArray<'t, T> {
        let v = self.tape.value(self.id).map(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<DiffArray<'t, T>> {
        let v = {
            let x = self.tape.value(self.id);
            if let Some(bad) = x.data().iter().find(|&&v| v <= T::zero()) {
                return Err(NdiffError::DomainError(format!("log of non-positive value {bad}")));
            }
            x.map(|v| v.ln())
        };
        Ok(self.unary(v, Op::Log(self.id)))
    }

    fn matmul_impl(&self, other: &DiffArray<'t, T>, trans_b: bool) -> Result<DiffArray<'t, T>> {
        let (v, m, k, n) = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let err = || NdiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            if a.rank() != 2 || b.rank() != 2 {
                return Err(err());
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (kb, n) = if trans_b {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != kb {
                return Err(err());
            }
            let data = gemm(a.data(), b.data(), m, k, n, false, trans_b);
            (Array::new(&[m, n], data)?, m, k, n)
        };
        Ok(self.binary(
            other,
            v,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
                trans_b,
            },
        ))
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self[m×k] · other[n×k]ᵀ`.
    pub fn matmul_t(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(NdiffError::ShapeMismatch {
                op,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        Ok(shape)
    }

    fn softmax_impl(&self, axis: usize, temperature: T, log: bool) -> Result<DiffArray<'t, T>> {
        if !(temperature > T::zero()) {
            return Err(NdiffError::DomainError(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let (v, probs) = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let mut out = vec![T::zero(); xd.len()];
            let mut probs = vec![T::zero(); xd.len()];
            let inv = T::one() / temperature;
            if inner == 1 {
                // contiguous rows
                for ((xr, or), pr) in xd.chunks(len).zip(out.chunks_mut(len)).zip(probs.chunks_mut(len)) {
                    let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v)) * inv;
                    for ((o, p), &v) in or.iter_mut().zip(pr.iter_mut()).zip(xr) {
                        *o = v * inv - mx;
                        *p = o.exp();
                    }
                    let total: T = pr.iter().copied().sum();
                    let (lse, rt) = (total.ln(), T::one() / total);
                    for (o, p) in or.iter_mut().zip(pr.iter_mut()) {
                        *p = *p * rt;
                        *o = if log { *o - lse } else { *p };
                    }
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut mx = T::neg_infinity();
                        for j in 0..len {
                            mx = mx.max(xd[base + j * inner]);
                        }
                        mx = mx * inv;
                        let mut total = T::zero();
                        for j in 0..len {
                            let p = base + j * inner;
                            let z = xd[p] * inv - mx;
                            out[p] = z;
                            probs[p] = z.exp();
                            total = total + probs[p];
                        }
                        let (lse, rt) = (total.ln(), T::one() / total);
                        for j in 0..len {
                            let p = base + j * inner;
                            probs[p] = probs[p] * rt;
                            out[p] = if log { out[p] - lse } else { probs[p] };
                        }
                    }
                }
            }
            (Array::new(&shape, out)?, probs)
        };
        let op = if log {
            Op::LogSoftmax {
                x: self.id,
                axis,
                temp: temperature,
                probs,
            }
        } else {
            Op::Softmax {
                x: self.id,
                axis,
                temp: temperature,
            }
        };
        Ok(self.unary(v, op))
    }

    /// `softmax(self / temperature)` along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize, temperature: T) -> Result<DiffArray<'t, T>> {
        self.softmax_impl(axis, temperature, false)
    }

    /// `log_softmax(self / temperature)` along `axis`.
    pub fn log_softmax(&self, axis: usize, temperature: T) -> Result<DiffArray<'t, T>> {
        self.softmax_impl(axis, temperature, true)
    }

    fn reduce_impl(&self, axis: usize, mean: bool) -> Result<DiffArray<'t, T>> {
        let shape = self.check_axis("reduce", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for (o, block) in xd.chunks(len * inner).enumerate() {
                let acc = &mut out[o * inner..(o + 1) * inner];
                if inner == 1 {
                    acc[0] = block.iter().copied().sum();
                    continue;
                }
                for row in block.chunks(inner) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
            }
            if mean {
                let n = T::from_usize(len).unwrap();
                for v in &mut out {
                    *v = *v / n;
                }
            }
            Array::new(&out_shape, out)?
        };
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        Ok(self.unary(v, op))
    }

    pub fn sum(&self, axis: usize) -> Result<DiffArray<'t, T>> {
        self.reduce_impl(axis, false)
    }

    pub fn mean(&self, axis: usize) -> Result<DiffArray<'t, T>> {
        self.reduce_impl(axis, true)
    }

    pub fn sum_all(&self) -> DiffArray<'t, T> {
        let total = self.tape.value(self.id).data().iter().copied().sum::<T>();
        self.unary(Array::scalar(total), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> DiffArray<'t, T> {
        let n = self.tape.value(self.id).len();
        self.sum_all().scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Adaptive average pooling of the last axis (length `t`) into `bins`
    /// bins; bin `b` averages `[floor(b·t/bins), floor((b+1)·t/bins))`.
    pub fn avgpool_seq(&self, bins: usize) -> Result<DiffArray<'t, T>> {
        let shape = self.shape();
        let t = *shape.last().ok_or_else(|| NdiffError::DomainError("avgpool_seq on scalar".into()))?;
        if bins == 0 || bins > t {
            return Err(NdiffError::DomainError(format!(
                "avgpool_seq bins {bins} outside [1, {t}]"
            )));
        }
        let rows = shape.iter().product::<usize>() / t;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = bins;
        let v = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let mut out = Vec::with_capacity(rows * bins);
            for r in 0..rows {
                for b in 0..bins {
                    let (s, e) = pool_bounds(t, bins, b);
                    let total: T = xd[r * t + s..r * t + e].iter().copied().sum();
                    out.push(total / T::from_usize(e - s).unwrap());
                }
            }
            Array::new(&out_shape, out)?
        };
        Ok(self.unary(v, Op::AvgPoolSeq { x: self.id, bins }))
    }

    /// Scales every slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<DiffArray<'t, T>> {
        let shape = self.check_axis("l2_normalize", axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let eps = T::from_f64_lossy(1e-12);
        let (v, norms) = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let mut out = vec![T::zero(); xd.len()];
            let mut norms = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut ss = T::zero();
                    for j in 0..len {
                        let v = xd[base + j * inner];
                        ss = ss + v * v;
                    }
                    let norm = ss.sqrt();
                    if !(norm > eps) {
                        return Err(NdiffError::DegenerateInput(format!(
                            "slice {} has norm {norm}",
                            o * inner + i
                        )));
                    }
                    for j in 0..len {
                        out[base + j * inner] = xd[base + j * inner] / norm;
                    }
                    norms.push(norm);
                }
            }
            (Array::new(&shape, out)?, norms)
        };
        Ok(self.unary(
            v,
            Op::L2Normalize {
                x: self.id,
                axis,
                norms,
            },
        ))
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`, no padding.
    pub fn conv2d(
        &self,
        kernels: &DiffArray<'t, T>,
        bias: Option<&DiffArray<'t, T>>,
        stride: (usize, usize),
    ) -> Result<DiffArray<'t, T>> {
        let xs = self.shape();
        let ws = kernels.shape();
        let err = |rhs: Vec<usize>| NdiffError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs,
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(err(ws.clone()));
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h || kw > wd {
            return Err(err(ws.clone()));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(err(b.shape()));
            }
        }
        let (sh, sw) = stride;
        let oh = (h - kh) / sh + 1;
        let ow = (wd - kw) / sw + 1;
        let v = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(kernels.id);
            let bv = bias.map(|b| self.tape.value(b.id).data().to_vec());
            let geo = Patches {
                cin,
                h,
                w: wd,
                kh,
                kw,
                sh,
                sw,
                oh,
                ow,
            };
            let out = conv_forward(geo, x.data(), w.data(), bv.as_deref(), bn, cout, |xd, n| {
                xd[n * cin * h * wd..(n + 1) * cin * h * wd].to_vec()
            });
            Array::new(&[bn, cout, oh, ow], out)?
        };
        let mut ids = vec![self.id, kernels.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let rg = self.tape.any_requires_grad(&ids);
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                x: self.id,
                w: kernels.id,
                b: bias.map(|b| b.id),
                stride,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling of `[B,C,H,W]` with the given window;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn maxpool2d(&self, window: (usize, usize)) -> Result<DiffArray<'t, T>> {
        let xs = self.shape();
        let (wh, ww) = window;
        if xs.len() != 4 || wh == 0 || ww == 0 || wh > xs[2] || ww > xs[3] {
            return Err(NdiffError::ShapeMismatch {
                op: "maxpool2d",
                lhs: xs,
                rhs: vec![wh, ww],
            });
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / wh, w / ww);
        let (v, argmax) = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let mut out = Vec::with_capacity(bn * c * oh * ow);
            let mut argmax = Vec::with_capacity(bn * c * oh * ow);
            for plane in 0..bn * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane * h * w + oy * wh * w + ox * ww;
                        for dy in 0..wh {
                            for dx in 0..ww {
                                let p = plane * h * w + (oy * wh + dy) * w + ox * ww + dx;
                                if xd[p] > xd[best] {
                                    best = p;
                                }
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            (Array::new(&[bn, c, oh, ow], out)?, argmax)
        };
        Ok(self.unary(v, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// Sequence convolution of `[B,Cin,T]` with `[Cout,Cin,k]`, stride 1 and
    /// `pad` zero frames on each side.
    pub fn conv1d_seq(
        &self,
        kernels: &DiffArray<'t, T>,
        bias: Option<&DiffArray<'t, T>>,
        pad: usize,
    ) -> Result<DiffArray<'t, T>> {
        let xs = self.shape();
        let ws = kernels.shape();
        let err = |rhs: Vec<usize>| NdiffError::ShapeMismatch {
            op: "conv1d_seq",
            lhs: xs.clone(),
            rhs,
        };
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || ws[2] > xs[2] + 2 * pad {
            return Err(err(ws.clone()));
        }
        let (bn, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(err(b.shape()));
            }
        }
        let to = t + 2 * pad - k + 1;
        let v = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(kernels.id);
            let bv = bias.map(|b| self.tape.value(b.id).data().to_vec());
            let geo = Patches {
                cin,
                h: 1,
                w: t + 2 * pad,
                kh: 1,
                kw: k,
                sh: 1,
                sw: 1,
                oh: 1,
                ow: to,
            };
            let out = conv_forward(geo, x.data(), w.data(), bv.as_deref(), bn, cout, |xd, n| {
                pad_seq(&xd[n * cin * t..(n + 1) * cin * t], cin, t, pad)
            });
            Array::new(&[bn, cout, to], out)?
        };
        let mut ids = vec![self.id, kernels.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let rg = self.tape.any_requires_grad(&ids);
        Ok(self.tape.push(
            v,
            Op::Conv1dSeq {
                x: self.id,
                w: kernels.id,
                b: bias.map(|b| b.id),
                pad,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffArray<'t, T>> {
        let v = self.tape.value(self.id).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// `out[i] = self.flat[index[i]]`, shaped `shape`. Backward scatter-adds.
    pub fn gather(&self, index: Vec<usize>, shape: &[usize]) -> Result<DiffArray<'t, T>> {
        let v = {
            let x = self.tape.value(self.id);
            if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
                return Err(NdiffError::ShapeMismatch {
                    op: "gather",
                    lhs: x.shape().to_vec(),
                    rhs: vec![bad],
                });
            }
            Array::new(shape, index.iter().map(|&i| x.data()[i]).collect())?
        };
        Ok(self.unary(v, Op::Gather { x: self.id, index }))
    }

    /// Rows of a rank-2 array, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<DiffArray<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(NdiffError::ShapeMismatch {
                op: "select_rows",
                lhs: shape,
                rhs: vec![],
            });
        }
        let cols = shape[1];
        let index = rows
            .iter()
            .flat_map(|&r| (r * cols..(r + 1) * cols).collect::<Vec<_>>())
            .collect();
        self.gather(index, &[rows.len(), cols])
    }

    /// Swaps the last two axes.
    pub fn swap_last2(&self) -> Result<DiffArray<'t, T>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(NdiffError::ShapeMismatch {
                op: "swap_last2",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (a, b) = (shape[r - 2], shape[r - 1]);
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let v = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            let batches = xd.len() / (a * b).max(1);
            let mut out = vec![T::zero(); xd.len()];
            for n in 0..batches {
                for i in 0..a {
                    for j in 0..b {
                        out[n * a * b + j * a + i] = xd[n * a * b + i * b + j];
                    }
                }
            }
            Array::new(&out_shape, out)?
        };
        Ok(self.unary(v, Op::SwapLast2(self.id)))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&self, other: &DiffArray<'t, T>) -> Result<DiffArray<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(NdiffError::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let na = *sa.last().unwrap();
        let nb = *sb.last().unwrap();
        let rows = sa.iter().product::<usize>() / na.max(1);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = na + nb;
        let v = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let mut out = Vec::with_capacity(rows * (na + nb));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * na..(r + 1) * na]);
                out.extend_from_slice(&b.data()[r * nb..(r + 1) * nb]);
            }
            Array::new(&out_shape, out)?
        };
        Ok(self.binary(other, v, Op::ConcatLast(self.id, other.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], v: &[f64]) -> Array<f64> {
        Array::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_inverts_exp() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[0.5, 1.0]));
        let y = x.exp().log().unwrap().value();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(NdiffError::DomainError(_))));
    }

    #[test]
    fn product_rule() {
        let tape = Tape::<f64>::new();
        let a = tape.param(arr(&[1], &[2.0]));
        let b = tape.param(arr(&[1], &[3.0]));
        let g = a.mul(&b).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.get(&a).unwrap().data(), &[3.0]);
        assert_eq!(g.get(&b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn trailing_broadcast_only() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Array::zeros(&[2, 3]));
        let ok = tape.constant(Array::zeros(&[3]));
        let bad = tape.constant(Array::zeros(&[2]));
        assert!(a.add(&ok).is_ok());
        assert!(matches!(a.add(&bad), Err(NdiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(arr(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(arr(&[2, 2], &[1.5, -2.0, 0.25, 7.0]));
        assert_eq!(eye.matmul(&m).unwrap().value(), m.value());
        let a = tape.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(arr(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(&ones).unwrap().value().data(), &[3.0, 7.0]);
        assert!(matches!(a.matmul(&tape.constant(Array::zeros(&[3, 1]))), Err(NdiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax(0, 1.0).unwrap().value().data(), &[0.5, 0.5]);
        let x = tape.constant(arr(&[2], &[1.0, 0.0]));
        let y = x.softmax(0, 1.0).unwrap().value();
        assert!((y.data()[0] - 0.73106).abs() < 1e-5);
        assert!((y.data()[1] - 0.26894).abs() < 1e-5);
        let x = tape.constant(arr(&[2], &[10.0, 0.0]));
        let y = x.softmax(0, 0.1).unwrap().value();
        assert!(y.is_finite());
        assert!(y.data()[1] < 1e-40 && y.data()[1] >= 0.0);
        assert!(matches!(x.softmax(0, 0.0), Err(NdiffError::DomainError(_))));
    }

    #[test]
    fn reductions() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[3], &[2.0, 4.0, 6.0]));
        assert_eq!(x.mean(0).unwrap().item(), 4.0);
        assert_eq!(tape.constant(Array::zeros(&[4])).sum(0).unwrap().item(), 0.0);
        let x = tape.param(Array::full(&[5], 1.0));
        let g = x.mean(0).unwrap().backward().unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(x.mean(1).is_err());
    }

    #[test]
    fn avgpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[1, 8], &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0]));
        assert_eq!(x.avgpool_seq(4).unwrap().value().data(), &[2.0, 6.0, 10.0, 14.0]);
        let bounds: Vec<usize> = (0..=4).map(|b| pool_bounds(26, 4, b).0).collect();
        assert_eq!(bounds, vec![0, 6, 13, 19, 26]);
        let c = tape.constant(Array::full(&[2, 26], 0.3));
        assert!(c.avgpool_seq(4).unwrap().value().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(x.avgpool_seq(0).is_err());
        assert!(x.avgpool_seq(9).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2], &[3.0, 4.0]));
        let y = x.l2_normalize(0).unwrap().value();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(x.l2_normalize(0).unwrap().l2_normalize(0).unwrap().value(), y);
        let z = tape.constant(Array::zeros(&[1, 3]));
        assert!(matches!(z.l2_normalize(1), Err(NdiffError::DegenerateInput(_))));
    }

    #[test]
    fn conv_identity_and_pool_constant() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64 * 0.1).collect();
        let x = tape.constant(arr(&[1, 2, 3, 4], &data));
        let mut k = vec![0.0; 4];
        k[0] = 1.0;
        k[3] = 1.0;
        let w = tape.constant(arr(&[2, 2, 1, 1], &k));
        assert_eq!(x.conv2d(&w, None, (1, 1)).unwrap().value(), x.value());
        let c = tape.constant(Array::full(&[1, 1, 4, 6], 0.7));
        let p = c.maxpool2d((2, 3)).unwrap().value();
        assert_eq!(p.shape(), &[1, 1, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(arr(&[2], &[1.0, 2.0]));
        let g = x.mul(&x).unwrap().sum_all().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(arr(&[3], &[1.0, -2.0, 5.0]));
        let loss = x.sum_all().add(&x.sum_all()).unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 2.0, 2.0]);

        assert!(matches!(x.backward(), Err(NdiffError::NotScalar(_))));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.param(arr(&[2], &[1.0, 2.0]));
        let y = tape.param(arr(&[2], &[1.0, 2.0]));
        let g = x.sum_all().backward().unwrap();
        assert_eq!(g.get(&y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn swap_and_concat() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(x.swap_last2().unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let y = tape.constant(arr(&[2, 1], &[9.0, 8.0]));
        assert_eq!(
            y.concat_last(&x).unwrap().value().data(),
            &[9.0, 1.0, 2.0, 3.0, 8.0, 4.0, 5.0, 6.0]
        );
    }
}
