//! The tape: an append-only list of nodes in topological order, each
//! holding its forward value and the rule that propagates its gradient back
//! into its inputs.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Bilinear sampling stencil: four `(flat index, weight)` taps.
pub(crate) type Taps<T> = [(usize, T); 4];

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy { a: Var, s: Var },
    AddRow { a: Var, bias: Var },
    ScaleRows { a: Var, s: Var },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ClampMin(Var, T),
    MaxAll { a: Var, index: usize },
    MaxRows { a: Var, index: Vec<usize> },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Im2Col { a: Var, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize },
    Bilinear { a: Var, c: usize, taps: Vec<Taps<T>> },
    SampleRows { a: Var, taps: Vec<Taps<T>> },
    GatherRows { a: Var, index: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Pad2d { a: Var, lambda: Var, h: usize, w: usize, px: usize, py: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Single-writer record of one forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a single-element output. Every node reachable from
    /// `output` is visited exactly once, in reverse recording order.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must hold one value, has shape {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        macro_rules! grad_of {
            ($v:expr) => {{
                let n = self.nodes[$v.0].value.len();
                grads[$v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = dims(self.shape_of(*a));
                let (br, bc) = dims(self.shape_of(*b));
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let sa = strides(ar, ac, *ta);
                let sb = strides(br, bc, *tb);
                let (ad, bd) = (self.data(*a), self.data(*b));
                {
                    let ga = grad_of!(a);
                    if !*ta {
                        // dA[m,k] += dC[m,n] op(B)^T[n,k]
                        T::gemm(m, n, k, T::one(), g, (n as isize, 1), bd, (sb.1, sb.0), T::one(), ga, (k as isize, 1));
                    } else {
                        // A stored [k,m]: dA += op(B)[k,n] dC^T[n,m]
                        T::gemm(k, n, m, T::one(), bd, sb, g, (1, n as isize), T::one(), ga, (m as isize, 1));
                    }
                }
                let gb = grad_of!(b);
                if !*tb {
                    // dB[k,n] += op(A)^T[k,m] dC[m,n]
                    T::gemm(k, m, n, T::one(), ad, (sa.1, sa.0), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                } else {
                    // B stored [n,k]: dB += dC^T[n,m] op(A)[m,k]
                    T::gemm(n, m, k, T::one(), g, (1, n as isize), ad, sa, T::one(), gb, (k as isize, 1));
                }
            }
            Op::Add(a, b) => {
                add_into(grad_of!(a), g);
                add_into(grad_of!(b), g);
            }
            Op::Sub(a, b) => {
                add_into(grad_of!(a), g);
                let gb = grad_of!(b);
                for (d, &v) in gb.iter_mut().zip(g) {
                    *d -= v;
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = grad_of!(a);
                for ((d, &v), &o) in ga.iter_mut().zip(g).zip(bd) {
                    *d += v * o;
                }
                let gb = grad_of!(b);
                for ((d, &v), &o) in gb.iter_mut().zip(g).zip(ad) {
                    *d += v * o;
                }
            }
            Op::Scale(a, s) => {
                let ga = grad_of!(a);
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }
            Op::ScaleBy { a, s } => {
                let sv = self.data(*s)[0];
                let ad = self.data(*a);
                let ds = g.iter().zip(ad).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                grad_of!(s)[0] += ds;
                let ga = grad_of!(a);
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d += v * sv;
                }
            }
            Op::ScaleRows { a, s } => {
                let sv = self.data(*s).to_vec();
                let ad = self.data(*a);
                let m = (ad.len() / sv.len().max(1)).max(1);
                let ds: Vec<T> = g
                    .chunks_exact(m)
                    .zip(ad.chunks_exact(m))
                    .map(|(gr, ar)| gr.iter().zip(ar).fold(T::zero(), |acc, (&u, &v)| acc + u * v))
                    .collect();
                add_into(grad_of!(s), &ds);
                let ga = grad_of!(a);
                for ((d, &v), i) in ga.iter_mut().zip(g).zip(0..) {
                    *d += v * sv[i / m];
                }
            }
            Op::AddRow { a, bias } => {
                add_into(grad_of!(a), g);
                let d = self.nodes[bias.0].value.len();
                let gb = grad_of!(bias);
                for row in g.chunks_exact(d) {
                    add_into(gb, row);
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                let ga = grad_of!(a);
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(ad) {
                    if x > T::zero() {
                        *d += v;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = grad_of!(a);
                for ((d, &v), &s) in ga.iter_mut().zip(g).zip(y) {
                    *d += v * s * (T::one() - s);
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = *node.value.shape().last().expect("rank >= 1");
                let ga = grad_of!(a);
                for ((gr, yr), dr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                    for ((d, &u), &v) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += v * (u - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let cols = *node.value.shape().last().expect("rank >= 1");
                let ga = grad_of!(a);
                for ((gr, yr), dr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                    let total = gr.iter().fold(T::zero(), |acc, &u| acc + u);
                    for ((d, &u), &l) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += u - l.exp() * total;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                let ad = self.data(*a);
                let ga = grad_of!(a);
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(ad) {
                    if x > *floor {
                        *d += v;
                    }
                }
            }
            Op::MaxAll { a, index } => {
                grad_of!(a)[*index] += g[0];
            }
            Op::MaxRows { a, index } => {
                let ga = grad_of!(a);
                for (&i, &v) in index.iter().zip(g) {
                    ga[i] += v;
                }
            }
            Op::MaxPool2 { a, argmax } => {
                let c = *node.value.shape().last().expect("rank 2");
                let ga = grad_of!(a);
                for (o, &src) in argmax.iter().enumerate() {
                    // argmax holds the source row per (output row, channel)
                    let ch = o % c;
                    ga[src * c + ch] += g[o];
                }
            }
            Op::Im2Col { a, h, w, c, k, stride, pad } => {
                let ga = grad_of!(a);
                im2col_visit(*h, *w, *c, *k, *stride, *pad, |col_idx, src_idx| {
                    ga[src_idx] += g[col_idx];
                });
            }
            Op::Bilinear { a, c, taps } => {
                let ga = grad_of!(a);
                for (p, t) in taps.iter().enumerate() {
                    let gp = &g[p * c..(p + 1) * c];
                    for &(cell, wgt) in t {
                        if wgt != T::zero() {
                            for (d, &v) in ga[cell * c..(cell + 1) * c].iter_mut().zip(gp) {
                                *d += wgt * v;
                            }
                        }
                    }
                }
            }
            Op::SampleRows { a, taps } => {
                let cols = self.shape_of(*a)[1];
                let ga = grad_of!(a);
                for (r, t) in taps.iter().enumerate() {
                    for &(cell, wgt) in t {
                        ga[r * cols + cell] += wgt * g[r];
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let c = self.shape_of(*a)[1];
                let ga = grad_of!(a);
                for (o, &src) in index.iter().enumerate() {
                    add_into(&mut ga[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                }
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = dims(self.shape_of(*a));
                let len = node.value.shape()[1];
                let ga = grad_of!(a);
                for r in 0..rows {
                    add_into(&mut ga[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let pc = self.shape_of(*p)[1];
                    let gp = grad_of!(p);
                    for r in 0..rows {
                        add_into(&mut gp[r * pc..(r + 1) * pc], &g[r * total + offset..r * total + offset + pc]);
                    }
                    offset += pc;
                }
            }
            Op::Pad2d { a, lambda, h, w, px, py } => {
                let c = self.nodes[lambda.0].value.len();
                let wp = w + 2 * px;
                let hp = h + 2 * py;
                {
                    let ga = grad_of!(a);
                    for r in 0..*h {
                        for col in 0..*w {
                            let dst = (r * w + col) * c;
                            let src = ((r + py) * wp + col + px) * c;
                            add_into(&mut ga[dst..dst + c], &g[src..src + c]);
                        }
                    }
                }
                let gl = grad_of!(lambda);
                for r in 0..hp {
                    for col in 0..wp {
                        let inside = r >= *py && r < py + h && col >= *px && col < px + w;
                        if !inside {
                            let src = (r * wp + col) * c;
                            add_into(gl, &g[src..src + c]);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (rows, cols) = dims(self.shape_of(*a));
                let ga = grad_of!(a);
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::Reshape(a) => add_into(grad_of!(a), g),
            Op::Sum(a) => {
                let ga = grad_of!(a);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

/// Gradients of one output with respect to every node it depends on.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when `v` is unreachable.
    pub fn tensor(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        let shape = tape.value(v).shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("matching shape"),
            None => Tensor::zeros(shape),
        }
    }
}

pub(crate) fn dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        _ => unreachable!("rank checked at record time"),
    }
}

/// Strides of `op(A)` for a row-major `rows x cols` buffer.
pub(crate) fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    let _ = rows;
    if transposed {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Enumerates `(column-matrix index, source index)` pairs of an HWC im2col.
pub(crate) fn im2col_visit(
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mut f: impl FnMut(usize, usize),
) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let row_len = k * k * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * row_len;
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = base + (ky * k + kx) * c;
                    for ch in 0..c {
                        f(dst + ch, src + ch);
                    }
                }
            }
        }
    }
}
