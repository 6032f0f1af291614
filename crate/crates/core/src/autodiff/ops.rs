//! Forward recording of every differentiable operation.
//!
//! Feature grids are stored as token matrices `[h * w, c]` whose rows walk
//! the grid in row-major order. Sampling points use the cell-center
//! convention: cell `(r, c)` sits at continuous coordinate `(c + 0.5, r + 0.5)`.

use super::tape::{im2col_visit, strides, Op, Tape, Taps, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

impl<T: Real> Tape<T> {
    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(out, op)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat(a, "matmul")?;
        let (br, bc) = self.mat(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            strides(ar, ac, ta),
            self.value(b).data(),
            strides(br, bc, tb),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }))
    }

    /// `a b` for rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `a^T b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&u, &v)| u + v).collect(),
        )?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&u, &v)| u - v).collect(),
        )?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&u, &v)| u * v).collect(),
        )?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    /// Multiplication by a single-element tensor (the only broadcast).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale must hold one value, has {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).data()[0];
        Ok(self.unary(a, |v| v * sv, Op::ScaleBy { a, s }))
    }

    /// Multiplies row `i` of `a: [n, m]` by `s[i]`, `s: [n, 1]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (n, m) = self.mat(a, "scale_rows")?;
        if self.value(s).len() != n {
            return Err(Error::shape(
                "scale_rows",
                format!("{} scales for {n} rows", self.value(s).len()),
            ));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for (row, &f) in out.chunks_exact_mut(m.max(1)).zip(&sv) {
            row.iter_mut().for_each(|o| *o *= f);
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::ScaleRows { a, s }))
    }

    /// Adds `bias: [d]` to every row of `a: [n, d]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.mat(a, "add_row")?;
        if self.value(bias).len() != d {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} for {d} columns", self.value(bias).len()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            for (o, &v) in row.iter_mut().zip(&b) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddRow { a, bias }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.mat(a, "softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(row[0], |x, y| x.max(y));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::SoftmaxRows(a)))
    }

    /// Log-softmax along the last axis of a rank-2 tensor.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.mat(a, "log_softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(row[0], |x, y| x.max(y));
            let sum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            let log_z = max + sum.ln();
            for v in row.iter_mut() {
                *v -= log_z;
            }
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::LogSoftmaxRows(a)))
    }

    /// Joint softmax over every entry, whatever the shape.
    pub fn softmax_all(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let flat = self.reshape(a, &[1, n])?;
        let s = self.softmax_rows(flat)?;
        self.reshape(s, &shape)
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        self.unary(a, |v| v.max(floor), Op::ClampMin(a, floor))
    }

    /// Global maximum; the gradient flows to the first maximizer in
    /// row-major order.
    pub fn max_reduce(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        if x.is_empty() {
            return Err(Error::shape("max_reduce", "empty tensor"));
        }
        let mut index = 0;
        for (i, v) in x.iter().enumerate() {
            if *v > x[index] {
                index = i;
            }
        }
        let m = x[index];
        Ok(self.push(Tensor::scalar(m), Op::MaxAll { a, index }))
    }

    /// Maximum of each row of `a: [n, m]` as `[n, 1]`; the gradient flows to
    /// the first maximizer of each row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.mat(a, "max_rows")?;
        if m == 0 {
            return Err(Error::shape("max_rows", "rows are empty"));
        }
        let x = self.value(a).data();
        let mut index = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for (r, row) in x.chunks_exact(m).enumerate() {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            index.push(r * m + best);
            out.push(row[best]);
        }
        Ok(self.push(Tensor::new(vec![n, 1], out)?, Op::MaxRows { a, index }))
    }

    /// 2x2 max pooling with stride 2 over a `[h * w, c]` grid; odd edges
    /// keep their partial window. Returns the pooled grid and its size.
    pub fn max_pool2(&mut self, a: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let (n, c) = self.mat(a, "max_pool2")?;
        if n != h * w {
            return Err(Error::shape("max_pool2", format!("{n} rows for {h}x{w} grid")));
        }
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(a).data();
        let mut out = vec![T::zero(); ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let o = oy * wo + ox;
                for ch in 0..c {
                    let mut best_row = (2 * oy) * w + 2 * ox;
                    let mut best = x[best_row * c + ch];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (iy, ix) = (2 * oy + dy, 2 * ox + dx);
                        if iy < h && ix < w {
                            let r = iy * w + ix;
                            if x[r * c + ch] > best {
                                best = x[r * c + ch];
                                best_row = r;
                            }
                        }
                    }
                    out[o * c + ch] = best;
                    argmax[o * c + ch] = best_row;
                }
            }
        }
        let v = self.push(Tensor::new(vec![ho * wo, c], out)?, Op::MaxPool2 { a, argmax });
        Ok((v, ho, wo))
    }

    /// Unfolds `k x k` patches of a `[h * w, c]` grid into rows of a
    /// `[ho * wo, k * k * c]` matrix (zero padding `pad`).
    pub fn im2col(
        &mut self,
        a: Var,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, usize, usize)> {
        let (n, c) = self.mat(a, "im2col")?;
        if n != h * w || k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "im2col",
                format!("{n}x{c} as {h}x{w} grid, kernel {k}, stride {stride}, pad {pad}"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); ho * wo * k * k * c];
        im2col_visit(h, w, c, k, stride, pad, |dst, src| out[dst] = x[src]);
        let v = self.push(
            Tensor::new(vec![ho * wo, k * k * c], out)?,
            Op::Im2Col { a, h, w, c, k, stride, pad },
        );
        Ok((v, ho, wo))
    }

    /// 2D convolution of a `[h * w, c_in]` grid with `weight: [k * k * c_in, c_out]`
    /// (rows ordered `(ky, kx, c_in)`) and `bias: [c_out]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        h: usize,
        w: usize,
        weight: Var,
        bias: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, usize, usize)> {
        let (cols, ho, wo) = self.im2col(x, h, w, k, stride, pad)?;
        let y = self.matmul(cols, weight)?;
        Ok((self.add_row(y, bias)?, ho, wo))
    }

    /// Bilinearly samples a `[h * w, c]` grid at each point, returning `[p, c]`.
    pub fn bilinear_sample(&mut self, a: Var, h: usize, w: usize, points: &[(T, T)]) -> Result<Var> {
        let (n, c) = self.mat(a, "bilinear_sample")?;
        if n != h * w || n == 0 {
            return Err(Error::shape("bilinear_sample", format!("{n} rows for {h}x{w} grid")));
        }
        let taps: Vec<Taps<T>> = points.iter().map(|&(x, y)| bilinear_taps(x, y, w, h)).collect();
        let g = self.value(a).data();
        let mut out = vec![T::zero(); points.len() * c];
        for (p, t) in taps.iter().enumerate() {
            let o = &mut out[p * c..(p + 1) * c];
            for &(cell, wgt) in t {
                if wgt != T::zero() {
                    for (d, &v) in o.iter_mut().zip(&g[cell * c..(cell + 1) * c]) {
                        *d += wgt * v;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![points.len(), c], out)?,
            Op::Bilinear { a, c, taps },
        ))
    }

    /// Row `i` of `maps: [n, h * w]` is a map; samples it at `points[i]`.
    pub fn sample_rows(&mut self, maps: Var, h: usize, w: usize, points: &[(T, T)]) -> Result<Var> {
        let (n, cells) = self.mat(maps, "sample_rows")?;
        if cells != h * w || n != points.len() {
            return Err(Error::shape(
                "sample_rows",
                format!("{n}x{cells} maps for {} points on {h}x{w}", points.len()),
            ));
        }
        let taps: Vec<Taps<T>> = points.iter().map(|&(x, y)| bilinear_taps(x, y, w, h)).collect();
        let m = self.value(maps).data();
        let out = taps
            .iter()
            .enumerate()
            .map(|(r, t)| t.iter().fold(T::zero(), |acc, &(cell, wgt)| acc + wgt * m[r * cells + cell]))
            .collect();
        Ok(self.push(Tensor::new(vec![n], out)?, Op::SampleRows { a: maps, taps }))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.mat(a, "gather_rows")?;
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::new(vec![index.len(), c], out)?,
            Op::GatherRows { a, index: index.to_vec() },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.mat(a, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {c} columns")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * c + start..r * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (n, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Surrounds a `[h * w, c]` grid with `px` columns and `py` rows of the
    /// vector `lambda: [c]` on each side.
    pub fn pad2d(&mut self, a: Var, lambda: Var, h: usize, w: usize, px: usize, py: usize) -> Result<Var> {
        let (n, c) = self.mat(a, "pad2d")?;
        if n != h * w || self.value(lambda).len() != c {
            return Err(Error::shape(
                "pad2d",
                format!("{n}x{c} grid as {h}x{w}, pad vector of {}", self.value(lambda).len()),
            ));
        }
        let (hp, wp) = (h + 2 * py, w + 2 * px);
        let lam = self.value(lambda).data();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(hp * wp * c);
        for r in 0..hp {
            for col in 0..wp {
                if r >= py && r < py + h && col >= px && col < px + w {
                    let src = ((r - py) * w + col - px) * c;
                    out.extend_from_slice(&x[src..src + c]);
                } else {
                    out.extend_from_slice(lam);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![hp * wp, c], out)?,
            Op::Pad2d { a, lambda, h, w, px, py },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, c) = self.mat(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            for k in 0..c {
                out[k * n + r] = x[r * c + k];
            }
        }
        Ok(self.push(Tensor::new(vec![c, n], out)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Four-tap bilinear stencil on a `w x h` grid for continuous point
/// `(x, y)` under the cell-center convention, clamped to the center hull.
pub(crate) fn bilinear_taps<T: Real>(x: T, y: T, w: usize, h: usize) -> Taps<T> {
    let (c0, c1, fu) = hull_axis(x - T::lit(0.5), w);
    let (r0, r1, fv) = hull_axis(y - T::lit(0.5), h);
    let one = T::one();
    [
        (r0 * w + c0, (one - fu) * (one - fv)),
        (r0 * w + c1, fu * (one - fv)),
        (r1 * w + c0, (one - fu) * fv),
        (r1 * w + c1, fu * fv),
    ]
}

fn hull_axis<T: Real>(u: T, n: usize) -> (usize, usize, T) {
    if n == 1 || u <= T::zero() {
        return (0, 0, T::zero());
    }
    let last = T::from_usize_lossy(n - 1);
    if u >= last {
        return (n - 1, n - 1, T::zero());
    }
    let f = u.floor();
    let i = f.to_usize().expect("in range");
    (i, i + 1, u - f)
}
