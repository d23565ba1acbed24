//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends a node holding its output value. [`Tape::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products into
//! the nodes that require a gradient.

use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Tan,
    Exp,
    Ln,
    Recip,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::LogSigmoid => "log_sigmoid",
            Unary::Tanh => "tanh",
            Unary::Tan => "tan",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Recip => "recip",
            Unary::Square => "square",
        }
    }

    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::LogSigmoid => x.min(T::zero()) - (-x.abs()).exp().ln_1p(),
            Unary::Tanh => x.tanh(),
            Unary::Tan => x.tan(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Recip => x.recip(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn deriv<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Neg => -T::one(),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::LogSigmoid => sigmoid(-x),
            Unary::Tanh => T::one() - y * y,
            Unary::Tan => T::one() + y * y,
            Unary::Exp => y,
            Unary::Ln => x.recip(),
            Unary::Recip => -(y * y),
            Unary::Square => x + x,
        }
    }
}

/// Logistic function, evaluated without overflow for either sign of `x`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Up2(Var),
    Down2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass. Owned by a single execution
/// context; independent tapes may run concurrently.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
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

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op,
        parents: &[Var],
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_raw(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. `requires_grad` leaves receive a gradient in
    /// [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let data = t.data().iter().map(|&v| T::from_f32(v)).collect();
        self.leaf_raw(t.shape().to_vec(), data, requires_grad)
    }

    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.leaf_raw(shape.to_vec(), data.into_iter().map(T::of).collect(), false)
    }

    pub fn variable_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "variable of shape {shape:?} with {} values",
                data.len()
            )));
        }
        self.leaf_raw(shape.to_vec(), data.into_iter().map(T::of).collect(), true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.iter().map(|x| x.as_f32()).collect())
            .expect("tape nodes hold consistent shapes")
    }

    /// First element as `f64`; meant for scalar results.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0].as_f64()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = T::of(s);
        let data = self.data(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, s), &[a])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::of(c);
        let data = self.data(a).iter().map(|&x| x + k).collect();
        let shape = self.shape(a).to_vec();
        self.push("offset", shape, data, Op::Offset(a), &[a])
    }

    fn check_scalar(&self, op: &str, s: Var) -> Result<T> {
        if self.data(s).len() != 1 {
            return Err(Error::shape(format!(
                "{op}: expected a scalar, got {:?}",
                self.shape(s)
            )));
        }
        Ok(self.data(s)[0])
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.check_scalar("mul_scalar", s)?;
        let data = self.data(x).iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push("mul_scalar", shape, data, Op::MulScalar(x, s), &[x, s])
    }

    /// `x + s` for a one-element tensor `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let k = self.check_scalar("add_scalar", s)?;
        let data = self.data(x).iter().map(|&v| v + k).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(x, s), &[x, s])
    }

    /// Adds `bias[c]` along `axis` (e.g. axis 1 of `[N,C,H,W]` or `[M,C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.data(bias).len() != shape[axis] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} on axis {axis} of {shape:?}",
                self.shape(bias)
            )));
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        let b = self.data(bias);
        let xs = self.data(x);
        let mut data = Vec::with_capacity(xs.len());
        for o in 0..outer {
            for (ci, &bc) in b.iter().enumerate() {
                let base = (o * c + ci) * inner;
                data.extend(xs[base..base + inner].iter().map(|&v| v + bc));
            }
        }
        self.push(
            "add_bias",
            shape,
            data,
            Op::AddBias { x, bias, axis },
            &[x, bias],
        )
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| kind.eval(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(kind.name(), shape, data, Op::Unary(a, kind), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::LogSigmoid)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn tan(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tan)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Ln)
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    /// Elementwise `max(a, b) = b + relu(a - b)`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.add(b, r)
    }

    /// Elementwise `min(a, b) = a - relu(a - b)`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let r = self.relu(d)?;
        self.sub(a, r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.recip(b)?;
        self.mul(a, r)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.data(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::of(self.data(a).len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        self.push("mean", vec![1], vec![s / n], Op::Mean(a), &[a])
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("sum_axis: axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xs = self.data(x);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xs[(o * n + a) * inner..(o * n + a + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push("sum_axis", out_shape, data, Op::SumAxis { x, axis }, &[x])
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            Mat::new(self.data(a), m, k),
            Mat::new(self.data(b), k, n),
            &mut out,
            false,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn conv_geom(
        &self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<(usize, usize, ConvGeom)> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::shape(format!("conv2d: input {sx:?}, kernel {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::shape(format!(
                "conv2d: input has {} channels, kernel expects {}",
                sx[1], sk[1]
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: zero stride"));
        }
        let (h, w, kh, kw) = (sx[2], sx[3], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}"
            )));
        }
        let g = ConvGeom {
            c: sx[1],
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        Ok((sx[0], sk[0], g))
    }

    /// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, o, g) = self.conv_geom(x, kernel, stride, pad)?;
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let in_sz = g.c * g.h * g.w;
        let mut out = vec![T::zero(); n * o * cols_n];
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * cols_n]
        };
        let xs = self.data(x);
        let ks = self.data(kernel);
        for b in 0..n {
            let img = &xs[b * in_sz..(b + 1) * in_sz];
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            gemm(
                Mat::new(ks, o, rows),
                Mat::new(src, rows, cols_n),
                &mut out[b * o * cols_n..(b + 1) * o * cols_n],
                false,
            );
        }
        self.push(
            "conv2d",
            vec![n, o, g.ho, g.wo],
            out,
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            },
            &[x, kernel],
        )
    }

    fn spatial(&self, op: &str, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape(format!("{op}: needs spatial dims, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((numel(&s[..s.len() - 2]), h, w))
    }

    /// Nearest-neighbour 2x upsampling of the last two dims.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial("upsample2x", x)?;
        let xs = self.data(x);
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = Vec::with_capacity(planes * h2 * w2);
        for p in 0..planes {
            for i in 0..h2 {
                let row = &xs[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
                for j in 0..w2 {
                    data.push(row[j / 2]);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        self.push("upsample2x", shape, data, Op::Up2(x), &[x])
    }

    /// 2x2 stride-2 max selection over the last two dims.
    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.spatial("downsample2x", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "downsample2x: odd spatial size {h}x{w}"
            )));
        }
        let xs = self.data(x);
        let (h2, w2) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(planes * h2 * w2);
        let mut argmax = Vec::with_capacity(planes * h2 * w2);
        for p in 0..planes {
            for i in 0..h2 {
                for j in 0..w2 {
                    let mut best = (p * h + 2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (p * h + 2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    data.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        self.push("downsample2x", shape, data, Op::Down2 { x, argmax }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat: axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat: {s:?} vs {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose: rank-2 only, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xs = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(xs[i * n + j]);
            }
        }
        self.push("transpose", vec![n, m], data, Op::Transpose(x), &[x])
    }

    /// Selects entries along axis 0; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let m = s[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape(format!("gather_rows: row {bad} of {m}")));
        }
        if rows.is_empty() {
            return Err(Error::shape("gather_rows: empty selection"));
        }
        let inner = numel(&s[1..]);
        let xs = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            data.extend_from_slice(&xs[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        self.push(
            "gather_rows",
            shape,
            data,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Selects columns of a rank-2 tensor.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || cols.is_empty() || cols.iter().any(|&c| c >= s[1]) {
            return Err(Error::shape(format!("select_cols: {cols:?} of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let xs = self.data(x);
        let mut data = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &c in cols {
                data.push(xs[i * n + c]);
            }
        }
        self.push(
            "select_cols",
            vec![m, cols.len()],
            data,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        )
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "backward: root must be scalar, got {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].data.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s)
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                acc(*a, &mut |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *d = *d + s * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *d = *d + s * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let k = T::of(*s);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * k)
                });
            }
            Op::Offset(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::MulScalar(x, s) => {
                let k = self.nodes[s.0].data[0];
                let xd = &self.nodes[x.0].data;
                acc(*x, &mut |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * k)
                });
                acc(*s, &mut |gs| {
                    gs[0] = gs[0] + g.iter().zip(xd).map(|(&a, &b)| a * b).sum();
                });
            }
            Op::AddScalar(x, s) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*s, &mut |gs| gs[0] = gs[0] + g.iter().copied().sum());
            }
            Op::AddBias { x, bias, axis } => {
                acc(*x, &mut |gx| add_into(gx, g));
                let (outer, c, inner) = split_axis(&node.shape, *axis);
                acc(*bias, &mut |gb| {
                    for o in 0..outer {
                        for (ci, d) in gb.iter_mut().enumerate().take(c) {
                            let base = (o * c + ci) * inner;
                            *d = *d + g[base..base + inner].iter().copied().sum();
                        }
                    }
                });
            }
            Op::Unary(a, kind) => {
                let xd = &self.nodes[a.0].data;
                let yd = &node.data;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * kind.deriv(xd[i], yd[i]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(a) => {
                let n = T::of(self.nodes[a.0].data.len() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g[0] / n));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(&self.nodes[x.0].shape, *axis);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                acc(*a, &mut |ga| {
                    gemm(Mat::new(g, m, n), Mat::t(bd, k, n), ga, true)
                });
                acc(*b, &mut |gb| {
                    gemm(Mat::t(ad, m, k), Mat::new(g, m, n), gb, true)
                });
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (n, o, geo) = self
                    .conv_geom(*x, *kernel, *stride, *pad)
                    .expect("geometry validated in forward");
                let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
                let in_sz = geo.c * geo.h * geo.w;
                let xd = &self.nodes[x.0].data;
                let kd = &self.nodes[kernel.0].data;
                let mut cols = vec![T::zero(); rows * cols_n];
                if self.wants(*kernel) {
                    acc(*kernel, &mut |gk| {
                        for b in 0..n {
                            let img = &xd[b * in_sz..(b + 1) * in_sz];
                            let src: &[T] = if geo.is_pointwise() {
                                img
                            } else {
                                im2col(img, &geo, &mut cols);
                                &cols
                            };
                            let gout = &g[b * o * cols_n..(b + 1) * o * cols_n];
                            gemm(
                                Mat::new(gout, o, cols_n),
                                Mat::t(src, rows, cols_n),
                                gk,
                                true,
                            );
                        }
                    });
                }
                acc(*x, &mut |gx| {
                    for b in 0..n {
                        let gout = &g[b * o * cols_n..(b + 1) * o * cols_n];
                        let dst = &mut gx[b * in_sz..(b + 1) * in_sz];
                        if geo.is_pointwise() {
                            gemm(Mat::t(kd, o, rows), Mat::new(gout, o, cols_n), dst, true);
                        } else {
                            gemm(
                                Mat::t(kd, o, rows),
                                Mat::new(gout, o, cols_n),
                                &mut cols,
                                false,
                            );
                            col2im(&cols, &geo, dst);
                        }
                    }
                });
            }
            Op::Up2(x) => {
                let s = &self.nodes[x.0].shape;
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = numel(&s[..s.len() - 2]);
                acc(*x, &mut |gx| {
                    for p in 0..planes {
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                let d = (p * h + i / 2) * w + j / 2;
                                gx[d] = gx[d] + g[(p * 2 * h + i) * 2 * w + j];
                            }
                        }
                    }
                });
            }
            Op::Down2 { x, argmax } => acc(*x, &mut |gx| {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
            }),
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            add_into(&mut gp[o * len..(o + 1) * len], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Transpose(x) => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] = gx[i * n + j] + g[j * m + i];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let inner = numel(&self.nodes[x.0].shape[1..]);
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut gx[r * inner..(r + 1) * inner],
                            &g[k * inner..(k + 1) * inner],
                        );
                    }
                });
            }
            Op::SelectCols { x, cols } => {
                let n = self.nodes[x.0].shape[1];
                let m = self.nodes[x.0].shape[0];
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for (k, &c) in cols.iter().enumerate() {
                            gx[i * n + c] = gx[i * n + c] + g[i * cols.len() + k];
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients from one backward pass, one per `requires_grad` leaf reached.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an `f32` tensor shaped like `v`, or `None` if `v` was not
    /// reached.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Option<Tensor> {
        let g = self.raw(v)?;
        Tensor::new(
            tape.shape(v).to_vec(),
            g.iter().map(|x| x.as_f32()).collect(),
        )
        .ok()
    }
}
