use std::collections::BTreeMap;

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Parameter name to gradient.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of primitive operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so operands always precede their users.
/// A tape built with [`Tape::inference`] evaluates the same primitives but records no
/// backward rules.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Stored extents of a matmul operand and its logical `(rows, cols)` after the optional transpose.
struct MatView {
    batch: Option<usize>,
    stored: (usize, usize),
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl MatView {
    fn new(shape: &[usize], transposed: bool) -> Option<Self> {
        let (batch, r, c) = match *shape {
            [r, c] => (None, r, c),
            [b, r, c] => (Some(b), r, c),
            _ => return None,
        };
        let (rows, cols, rs, cs) = if transposed { (c, r, 1, c) } else { (r, c, c, 1) };
        Some(Self {
            batch,
            stored: (r, c),
            rows,
            cols,
            rs,
            cs,
        })
    }

    fn batch_stride(&self) -> usize {
        if self.batch.is_some() {
            self.stored.0 * self.stored.1
        } else {
            0
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] fails on it.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf. Names must be unique per tape.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "param",
                reason: format!("parameter `{name}` registered twice"),
            });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.recording,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.insert(name, var);
        Ok(var)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_by_name(&self, name: &str) -> Result<Var> {
        self.param_var(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, operands: &[Var]) -> Var {
        let requires_grad = self.recording && operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        let data: Vec<T> = if x.shape() == y.shape() {
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect()
        } else if y.len() == 1 {
            let q = y[0];
            x.data().iter().map(|&p| f(p, q)).collect()
        } else if x.len() == 1 {
            let p = x[0];
            y.data().iter().map(|&q| f(p, q)).collect()
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        };
        let shape = if x.len() >= y.len() { x.shape() } else { y.shape() };
        Tensor::from_vec(shape.to_vec(), data)
    }

    /// Elementwise sum; either side may be a one-element tensor broadcast over the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Matrix product of rank-2 or batched rank-3 operands, each optionally transposed.
    ///
    /// A rank-2 operand is shared across the batch of a rank-3 partner.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        };
        let va = MatView::new(self.shape(a), ta).ok_or_else(mismatch)?;
        let vb = MatView::new(self.shape(b), tb).ok_or_else(mismatch)?;
        if va.cols != vb.rows {
            return Err(mismatch());
        }
        let batch = match (va.batch, vb.batch) {
            (Some(p), Some(q)) if p != q => return Err(mismatch()),
            (Some(p), _) | (None, Some(p)) => Some(p),
            (None, None) => None,
        };
        let (m, k, n) = (va.rows, va.cols, vb.cols);
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..nb {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &xa[bi * va.batch_stride()..],
                va.rs,
                va.cs,
                &xb[bi * vb.batch_stride()..],
                vb.rs,
                vb.cs,
                T::zero(),
                &mut out[bi * m * n..],
                n,
                1,
            );
        }
        let shape = match batch {
            Some(b) => vec![b, m, n],
            None => vec![m, n],
        };
        let out = Tensor::from_vec(shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x . w^T + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, din], &[dout, win]) = (xs, ws) else {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        };
        if din != win {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        check_same("linear bias", bs, &[dout])?;
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din,
            1,
            self.value(w).data(),
            1,
            din,
            T::one(),
            &mut out,
            dout,
            1,
        );
        let out = Tensor::from_vec([n, dout], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// NCHW convolution with per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        };
        let (&[n, c, h, wd], &[o, wc, kh, kw]) = (xs, ws) else {
            return Err(mismatch());
        };
        if c != wc {
            return Err(mismatch());
        }
        check_same("conv2d bias", self.shape(b), &[o])?;
        if stride == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if ph < kh || pw < kw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "kernel {kh}x{kw} with stride {stride}, padding {pad} does not tile a {h}x{wd} input"
                ),
            });
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let out = Tensor::from_vec([n, o, geom.ho, geom.wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Non-overlapping `k x k` max pooling over the last two extents of an NCHW tensor.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::InvalidArgument {
                op: "maxpool2d",
                reason: format!("expected NCHW input, got {shape:?}"),
            });
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::InvalidArgument {
                op: "maxpool2d",
                reason: format!("{h}x{w} is not divisible by pool size {k}"),
            });
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w, k);
        let out = Tensor::from_vec([n, c, h / k, w / k], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax over the last extent.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.shape().last().copied().unwrap_or(1);
        let out = Tensor::from_vec(t.shape().to_vec(), kernels::softmax_rows(t.data(), cols))
            .expect("softmax preserves shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Ln(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::abs);
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// NaN passes through so a poisoned forward pass still surfaces as a non-finite loss.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| if v.is_nan() { v } else { v.max(lo).min(hi) });
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::from_usize(t.len()).expect("length fits"));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Gradients of a scalar `loss` with respect to every parameter it depends on.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        Ok(self.gradients(loss)?.params)
    }

    /// Like [`Tape::backward`] but also keeps the adjoint of every intermediate node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(root.shape().to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(name, v)| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .map(|g| (name.clone(), g))
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (acc, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *acc += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Gradient for a possibly scalar-broadcast operand of an elementwise op.
    fn reduce_to(&self, v: Var, g: Tensor<T>) -> Tensor<T> {
        let shape = self.shape(v);
        if shape == g.shape() {
            g
        } else {
            Tensor::full(shape.to_vec(), g.sum())
        }
    }

    fn zip_map(&self, a: &Tensor<T>, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let other = self.value(b);
        if other.len() == 1 && a.len() != 1 {
            let q = other[0];
            a.map(|p| f(p, q))
        } else if a.len() == 1 && other.len() != 1 {
            let p = a[0];
            other.map(|q| f(p, q))
        } else {
            Tensor::from_vec(
                a.shape().to_vec(),
                a.data().iter().zip(other.data()).map(|(&p, &q)| f(p, q)).collect(),
            )
            .expect("elementwise shapes agree")
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(grads, a, self.reduce_to(a, g.clone()));
                self.accumulate(grads, b, self.reduce_to(b, g.clone()));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, self.reduce_to(a, g.clone()));
                self.accumulate(grads, b, self.reduce_to(b, g.map(|v| -v)));
            }
            &Op::Mul(a, b) => {
                let ga = self.zip_map(g, b, |p, q| p * q);
                let gb = self.zip_map(g, a, |p, q| p * q);
                self.accumulate(grads, a, self.reduce_to(a, ga));
                self.accumulate(grads, b, self.reduce_to(b, gb));
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c)),
            &Op::AddConst(a) => self.accumulate(grads, a, g.clone()),
            &Op::MatMul { a, b, ta, tb } => self.matmul_backward(a, b, ta, tb, g, grads),
            &Op::Linear { x, w, b } => {
                let (n, dout) = (g.shape()[0], g.shape()[1]);
                let din = self.shape(w)[1];
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), g.data(), dout, 1, self.value(w).data(), din, 1, T::zero(), &mut dx, din, 1);
                    self.accumulate(grads, x, Tensor::from_vec([n, din], dx).expect("dx shape"));
                }
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, n, din, T::one(), g.data(), 1, dout, self.value(x).data(), din, 1, T::zero(), &mut dw, din, 1);
                self.accumulate(grads, w, Tensor::from_vec([dout, din], dw).expect("dw shape"));
                let mut db = vec![T::zero(); dout];
                for row in g.data().chunks(dout) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, b, Tensor::from_vec([dout], db).expect("db shape"));
            }
            &Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let cg = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    &geom,
                    need_dx,
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, x, Tensor::from_vec(self.shape(x).to_vec(), dx).expect("dx shape"));
                }
                self.accumulate(grads, w, Tensor::from_vec(self.shape(w).to_vec(), cg.dw).expect("dw shape"));
                self.accumulate(grads, b, Tensor::from_vec([geom.o], cg.db).expect("db shape"));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                let d = dx.data_mut();
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    d[src] += v;
                }
                self.accumulate(grads, *x, dx);
            }
            &Op::Relu(x) => {
                let gx = self.zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, x, gx);
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = Tensor::from_vec(
                    y.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect(),
                )
                .expect("sigmoid shape");
                self.accumulate(grads, x, gx);
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.shape().last().copied().unwrap_or(1);
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, x, Tensor::from_vec(y.shape().to_vec(), gx).expect("softmax shape"));
            }
            &Op::Ln(x) => {
                let gx = self.zip_map(g, x, |gv, xv| gv / xv);
                self.accumulate(grads, x, gx);
            }
            &Op::Abs(x) => {
                let gx = self.zip_map(g, x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, x, gx);
            }
            &Op::Square(x) => {
                let two = T::one() + T::one();
                let gx = self.zip_map(g, x, |gv, xv| two * xv * gv);
                self.accumulate(grads, x, gx);
            }
            &Op::Clamp { x, lo, hi } => {
                let gx = self.zip_map(g, x, |gv, xv| if xv >= lo && xv <= hi { gv } else { T::zero() });
                self.accumulate(grads, x, gx);
            }
            &Op::Sum(x) => {
                let gx = Tensor::full(self.shape(x).to_vec(), g[0]);
                self.accumulate(grads, x, gx);
            }
            &Op::Mean(x) => {
                let n = T::from_usize(self.value(x).len()).expect("length fits");
                let gx = Tensor::full(self.shape(x).to_vec(), g[0] / n);
                self.accumulate(grads, x, gx);
            }
            &Op::Reshape(x) => {
                let gx = g.reshape(self.shape(x).to_vec()).expect("reshape preserves length");
                self.accumulate(grads, x, gx);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let va = MatView::new(self.shape(a), ta).expect("validated in forward");
        let vb = MatView::new(self.shape(b), tb).expect("validated in forward");
        let (m, k, n) = (va.rows, va.cols, vb.cols);
        let nb = va.batch.or(vb.batch).unwrap_or(1);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        if self.nodes[a.0].requires_grad {
            // d op(A) (m, k) = dC (m, n) . op(B)^T (n, k), written through A's own layout.
            let mut da = vec![T::zero(); self.value(a).len()];
            let (rs, cs) = if ta { (1, va.stored.1) } else { (va.stored.1, 1) };
            for bi in 0..nb {
                T::gemm(m, n, k, T::one(), &g.data()[bi * m * n..], n, 1, &xb[bi * vb.batch_stride()..], vb.cs, vb.rs, T::one(), &mut da[bi * va.batch_stride()..], rs, cs);
            }
            self.accumulate(grads, a, Tensor::from_vec(self.shape(a).to_vec(), da).expect("da shape"));
        }
        if self.nodes[b.0].requires_grad {
            // d op(B) (k, n) = op(A)^T (k, m) . dC (m, n)
            let mut db = vec![T::zero(); self.value(b).len()];
            let (rs, cs) = if tb { (1, vb.stored.1) } else { (vb.stored.1, 1) };
            for bi in 0..nb {
                T::gemm(k, m, n, T::one(), &xa[bi * va.batch_stride()..], va.cs, va.rs, &g.data()[bi * m * n..], n, 1, T::one(), &mut db[bi * vb.batch_stride()..], rs, cs);
            }
            self.accumulate(grads, b, Tensor::from_vec(self.shape(b).to_vec(), db).expect("db shape"));
        }
    }
}

/// Adjoints from one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: GradMap<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of any node that the loss depends on.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &GradMap<T> {
        &self.params
    }

    pub fn into_params(self) -> GradMap<T> {
        self.params
    }
}
