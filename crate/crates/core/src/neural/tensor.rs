//! Dense float64 tensors and a tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a leaf created with [`Graph::variable`].
//! The first operation to produce a non-finite value is remembered and
//! reported by [`Graph::check`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect::<Vec<f64>>(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&shape, data)
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddLast(Var, Var),
    ChannelBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Square(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Reshape(Var),
    NormalizeLast(Var),
    SoftmaxLast(Var),
    BatchedDot(Var, Var),
    WeightedSum(Var, Var),
    Conv2d(Var, Var),
    Mean(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// Gradients of a scalar with respect to every differentiable node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, `op` optionally a transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Geometry of a 2-D convolution over `(N, C, H, W)` with an `(O, C, KH, KW)` kernel.
#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Column matrix `(C*KH*KW, H*W)` of one sample: zero padding along
    /// rows, circular along columns.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let hw = self.plane();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        let yy = y as isize + ki as isize - ph;
                        let out = &mut dst[y * self.w..(y + 1) * self.w];
                        if yy < 0 || yy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &x[c * hw + yy as usize * self.w..][..self.w];
                        for (xo, o) in out.iter_mut().enumerate() {
                            let xx = (xo as isize + kj as isize - pw).rem_euclid(self.w as isize);
                            *o = src[xx as usize];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let hw = self.plane();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..self.h {
                        let yy = y as isize + ki as isize - ph;
                        if yy < 0 || yy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[c * hw + yy as usize * self.w..][..self.w];
                        for xo in 0..self.w {
                            let xx = (xo as isize + kj as isize - pw).rem_euclid(self.w as isize);
                            dst[xx as usize] += src[y * self.w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Outer and inner extents around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if self.fault.is_none() && !t.is_finite() {
            self.fault = Some("leaf");
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Fails if any recorded operation produced a non-finite value.
    pub fn check(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::AddLast(a, b)
            | Op::ChannelBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BatchedDot(a, b)
            | Op::WeightedSum(a, b)
            | Op::Conv2d(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Reshape(a)
            | Op::NormalizeLast(a)
            | Op::SoftmaxLast(a)
            | Op::Mean(a)
            | Op::Sum(a) => self.rg(*a),
            Op::Slice { src, .. } => self.rg(*src),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.rg(*p)),
        };
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var {
        let src = self.value(a);
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(out, op, name)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            0.0,
        );
        self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            "matmul",
        )
    }

    /// Adds a vector along the last axis.
    pub fn add_last(&mut self, a: Var, bias: Var) -> Var {
        let n = *self.shape(a).last().expect("non-scalar");
        assert_eq!(self.shape(bias), [n], "bias length");
        let b = self.value(bias).data.clone();
        let src = self.value(a);
        let data = src
            .data
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&b).map(|(x, y)| x + y))
            .collect();
        let shape = src.shape.clone();
        self.push(Tensor { shape, data }, Op::AddLast(a, bias), "add_last")
    }

    /// Adds a per-channel vector to `(N, C, H, W)`.
    pub fn channel_bias(&mut self, a: Var, bias: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(
            s.len() == 4 && self.shape(bias) == [s[1]],
            "channel bias {s:?}"
        );
        let plane = s[2] * s[3];
        let b = self.value(bias).data.clone();
        let mut data = self.value(a).data.clone();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let bv = b[i % s[1]];
            chunk.iter_mut().for_each(|x| *x += bv);
        }
        self.push(
            Tensor { shape: s, data },
            Op::ChannelBias(a, bias),
            "channel_bias",
        )
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Var {
        self.same_shape(a, b, name);
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect(),
        };
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |x| x * k, Op::Scale(a, k), "scale")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a), "softplus")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a), "square")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut shape = first.clone();
        shape[axis] = 0;
        for p in parts {
            let s = self.shape(*p);
            assert!(
                s.len() == first.len()
                    && s.iter()
                        .enumerate()
                        .all(|(i, d)| i == axis || *d == first[i]),
                "concat {s:?} with {first:?} on axis {axis}"
            );
            shape[axis] += s[axis];
        }
        let (outer, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor { shape, data },
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(src).to_vec();
        assert!(
            start + len <= s[axis],
            "slice {start}+{len} beyond {s:?}[{axis}]"
        );
        let (outer, inner) = split_axis(&s, axis);
        let mut shape = s.clone();
        shape[axis] = len;
        let t = self.value(src);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        self.push(
            Tensor { shape, data },
            Op::Slice { src, axis, start },
            "slice",
        )
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let t = self
            .value(src)
            .clone()
            .reshape(shape)
            .expect("reshape size");
        self.push(t, Op::Reshape(src), "reshape")
    }

    /// Scales every vector along the last axis to unit length.
    pub fn normalize_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape.last().expect("non-scalar");
        let mut data = t.data.clone();
        for row in data.chunks_exact_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::NormalizeLast(a), "normalize")
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape.last().expect("non-scalar");
        let mut data = t.data.clone();
        for row in data.chunks_exact_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::SoftmaxLast(a), "softmax")
    }

    /// `(B, D) . (B, N, D) -> (B, N)`.
    pub fn batched_dot(&mut self, q: Var, keys: Var) -> Var {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(keys).to_vec());
        assert!(
            sq.len() == 2 && sk.len() == 3 && sq[0] == sk[0] && sq[1] == sk[2],
            "batched_dot {sq:?} {sk:?}"
        );
        let (b, n, d) = (sk[0], sk[1], sk[2]);
        let (qv, kv) = (&self.value(q).data, &self.value(keys).data);
        let mut data = vec![0.0; b * n];
        for i in 0..b {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..n {
                let kj = &kv[(i * n + j) * d..][..d];
                data[i * n + j] = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
            }
        }
        self.push(
            Tensor {
                shape: vec![b, n],
                data,
            },
            Op::BatchedDot(q, keys),
            "batched_dot",
        )
    }

    /// `(B, N) weights over (B, N, F) values -> (B, F)`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Var {
        let (sw, sx) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        assert!(
            sw.len() == 2 && sx.len() == 3 && sw[0] == sx[0] && sw[1] == sx[1],
            "weighted_sum {sw:?} {sx:?}"
        );
        let (b, n, f) = (sx[0], sx[1], sx[2]);
        let (wv, xv) = (&self.value(w).data, &self.value(x).data);
        let mut data = vec![0.0; b * f];
        for i in 0..b {
            let out = &mut data[i * f..(i + 1) * f];
            for j in 0..n {
                let wij = wv[i * n + j];
                let row = &xv[(i * n + j) * f..][..f];
                out.iter_mut().zip(row).for_each(|(o, r)| *o += wij * r);
            }
        }
        self.push(
            Tensor {
                shape: vec![b, f],
                data,
            },
            Op::WeightedSum(w, x),
            "weighted_sum",
        )
    }

    fn conv_dims(&self, x: Var, k: Var) -> ConvDims {
        let (sx, sk) = (self.shape(x), self.shape(k));
        assert!(
            sx.len() == 4 && sk.len() == 4 && sx[1] == sk[1],
            "conv2d {sx:?} with kernel {sk:?}"
        );
        assert!(sk[2] % 2 == 1 && sk[3] % 2 == 1, "odd kernels only");
        ConvDims {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
        }
    }

    /// Same-size convolution of `(N, C, H, W)` with `(O, C, KH, KW)`,
    /// circular along the last axis and zero-padded along the third.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Var {
        let d = self.conv_dims(x, kernel);
        let (patch, hw) = (d.patch(), d.plane());
        let mut cols = vec![0.0; patch * hw];
        let mut out = vec![0.0; d.n * d.o * hw];
        let (xv, kv) = (&self.value(x).data, &self.value(kernel).data);
        for i in 0..d.n {
            d.im2col(&xv[i * d.c * hw..(i + 1) * d.c * hw], &mut cols);
            gemm(
                d.o,
                patch,
                hw,
                kv,
                false,
                &cols,
                false,
                &mut out[i * d.o * hw..(i + 1) * d.o * hw],
                0.0,
            );
        }
        self.push(
            Tensor {
                shape: vec![d.n, d.o, d.h, d.w],
                data: out,
            },
            Op::Conv2d(x, kernel),
            "conv2d",
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean squared difference between `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let d = self.sub(pred, target);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = nodes[v.0].value.data.len();
                grads[v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        let y = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(*a) {
                    let bd = &val(*b).data;
                    gemm(m, n, k, g, false, bd, true, acc!(*a), 1.0);
                }
                if want(*b) {
                    let ad = &val(*a).data;
                    gemm(k, m, n, ad, true, g, false, acc!(*b), 1.0);
                }
            }
            Op::AddLast(a, b) => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if want(*b) {
                    let db = acc!(*b);
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ChannelBias(a, b) => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if want(*b) {
                    let s = &node.value.shape;
                    let plane = s[2] * s[3];
                    let c = s[1];
                    let db = acc!(*b);
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if want(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if want(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let bd = &val(*b).data;
                    acc!(*a)
                        .iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(d, (s, o))| *d += s * o);
                }
                if want(*b) {
                    let ad = &val(*a).data;
                    acc!(*b)
                        .iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (s, o))| *d += s * o);
                }
            }
            Op::Scale(a, k) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s * k);
            }
            Op::Sigmoid(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(d, (s, y))| *d += s * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(d, (s, y))| *d += s * (1.0 - y * y));
            }
            Op::Softplus(a) => {
                let x = &val(*a).data;
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(d, (s, x))| *d += s * sigmoid(*x));
            }
            Op::Relu(a) => {
                let x = &val(*a).data;
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(d, (s, x))| {
                        if *x > 0.0 {
                            *d += s
                        }
                    });
            }
            Op::Square(a) => {
                let x = &val(*a).data;
                acc!(*a)
                    .iter_mut()
                    .zip(g.iter().zip(x))
                    .for_each(|(d, (s, x))| *d += 2.0 * s * x);
            }
            Op::Concat { parts, axis } => {
                let shape = &node.value.shape;
                let (outer, inner) = split_axis(shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = val(*p).shape[*axis] * inner;
                    if want(*p) {
                        let dp = acc!(*p);
                        for o in 0..outer {
                            let src = &g[o * total + offset..][..chunk];
                            dp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let s = &val(*src).shape;
                let (outer, inner) = split_axis(s, *axis);
                let len = node.value.shape[*axis];
                let ds = acc!(*src);
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    ds[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::NormalizeLast(a) => {
                let x = &val(*a).data;
                let n = *node.value.shape.last().expect("non-scalar");
                let da = acc!(*a);
                for ((dr, gr), (xr, yr)) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(x.chunks_exact(n).zip(y.chunks_exact(n)))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] += (gr[j] - yr[j] * proj) / norm;
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                let n = *node.value.shape.last().expect("non-scalar");
                let da = acc!(*a);
                for ((dr, gr), yr) in da
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::BatchedDot(q, keys) => {
                let sk = &val(*keys).shape;
                let (b, n, d) = (sk[0], sk[1], sk[2]);
                if want(*q) {
                    let kv = &val(*keys).data;
                    let dq = acc!(*q);
                    for i in 0..b {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let kj = &kv[(i * n + j) * d..][..d];
                            dq[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(kj)
                                .for_each(|(o, k)| *o += gij * k);
                        }
                    }
                }
                if want(*keys) {
                    let qv = &val(*q).data;
                    let dk = acc!(*keys);
                    for i in 0..b {
                        let qi = &qv[i * d..(i + 1) * d];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            dk[(i * n + j) * d..][..d]
                                .iter_mut()
                                .zip(qi)
                                .for_each(|(o, q)| *o += gij * q);
                        }
                    }
                }
            }
            Op::WeightedSum(w, x) => {
                let sx = &val(*x).shape;
                let (b, n, f) = (sx[0], sx[1], sx[2]);
                if want(*w) {
                    let xv = &val(*x).data;
                    let dw = acc!(*w);
                    for i in 0..b {
                        let gi = &g[i * f..(i + 1) * f];
                        for j in 0..n {
                            let row = &xv[(i * n + j) * f..][..f];
                            dw[i * n + j] += row.iter().zip(gi).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                }
                if want(*x) {
                    let wv = &val(*w).data;
                    let dx = acc!(*x);
                    for i in 0..b {
                        let gi = &g[i * f..(i + 1) * f];
                        for j in 0..n {
                            let wij = wv[i * n + j];
                            dx[(i * n + j) * f..][..f]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(o, q)| *o += wij * q);
                        }
                    }
                }
            }
            Op::Conv2d(x, k) => {
                let d = self.conv_dims(*x, *k);
                let (patch, hw) = (d.patch(), d.plane());
                let xv = &val(*x).data;
                let kv = &val(*k).data;
                let mut cols = vec![0.0; patch * hw];
                if want(*k) {
                    let dk = acc!(*k);
                    for i in 0..d.n {
                        d.im2col(&xv[i * d.c * hw..(i + 1) * d.c * hw], &mut cols);
                        gemm(
                            d.o,
                            hw,
                            patch,
                            &g[i * d.o * hw..(i + 1) * d.o * hw],
                            false,
                            &cols,
                            true,
                            dk,
                            1.0,
                        );
                    }
                }
                if want(*x) {
                    let dx = acc!(*x);
                    for i in 0..d.n {
                        gemm(
                            patch,
                            d.o,
                            hw,
                            kv,
                            true,
                            &g[i * d.o * hw..(i + 1) * d.o * hw],
                            false,
                            &mut cols,
                            0.0,
                        );
                        d.col2im_add(&cols, &mut dx[i * d.c * hw..(i + 1) * d.c * hw]);
                    }
                }
            }
            Op::Mean(a) => {
                let da = acc!(*a);
                let k = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += k);
            }
            Op::Sum(a) => {
                let da = acc!(*a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
