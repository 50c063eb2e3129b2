//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a plain value: shape plus row-major data. Differentiable
//! computation happens on a [`Tape`]: operations execute eagerly and are
//! recorded as a Wengert list; [`Tape::backward`] replays the list in reverse,
//! accumulating gradients. The tape is rebuilt every training step — there is
//! no static graph.
//!
//! Broadcasting is deliberately limited to scalar-with-tensor so that shape
//! errors surface loudly at the call site. All arithmetic is 64-bit.

use crate::error::{Error, Result};
use crate::prng::Prng;

/// Dense n-dimensional array of 64-bit reals, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut Prng) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform_in(-limit, limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor living on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Exp,
    Log,
    Square,
    Abs,
    Sigmoid,
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
struct ConvMeta {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k_f: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Debug)]
enum Node {
    Unary {
        kind: UnaryKind,
        x: Var,
        y: Var,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        y: Var,
    },
    Concat {
        a: Var,
        b: Var,
        y: Var,
    },
    Slice {
        x: Var,
        y: Var,
        offset: usize,
    },
    Reshape {
        x: Var,
        y: Var,
    },
    Sum {
        x: Var,
        y: Var,
    },
    Mean {
        x: Var,
        y: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        y: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        y: Var,
        meta: ConvMeta,
    },
    AvgPoolAll {
        x: Var,
        y: Var,
    },
    Upsample2x {
        x: Var,
        y: Var,
    },
    Softmax {
        x: Var,
        y: Var,
    },
}

struct Buf {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Wengert tape: arena of tensor buffers plus the ordered operation record.
#[derive(Default)]
pub struct Tape {
    bufs: Vec<Buf>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_buf(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        self.bufs.push(Buf {
            data,
            shape,
            needs_grad,
        });
        Var(self.bufs.len() - 1)
    }

    /// Register a differentiable leaf (a trainable parameter).
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_buf(t.shape.clone(), t.data.clone(), true)
    }

    /// Register a non-differentiable leaf. Gradients never flow into it and
    /// kernels skip its gradient work entirely.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_buf(t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_vec(&mut self, shape: &[usize], data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_buf(shape.to_vec(), data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push_buf(vec![1], vec![v], false)
    }

    pub fn val(&self, v: Var) -> &[f64] {
        &self.bufs[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.bufs[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.bufs[v.0].data.len()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar_val(&self, v: Var) -> f64 {
        debug_assert_eq!(self.numel(v), 1);
        self.bufs[v.0].data[0]
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.bufs[v.0].shape.clone(),
            data: self.bufs[v.0].data.clone(),
        }
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn out_like(&mut self, v: Var, data: Vec<f64>) -> Var {
        let shape = self.bufs[v.0].shape.clone();
        let ng = self.bufs[v.0].needs_grad;
        self.push_buf(shape, data, ng)
    }

    // ----- elementwise ------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let data: Vec<f64> = self.bufs[x.0]
            .data
            .iter()
            .map(|&v| unary_eval(kind, v))
            .collect();
        let y = self.out_like(x, data);
        self.nodes.push(Node::Unary { kind, x, y });
        y
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(slope), x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryKind::Clamp(lo, hi), x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = &self.bufs[a.0].shape;
        let sb = &self.bufs[b.0].shape;
        if sa == sb {
            Ok(sa.clone())
        } else if self.numel(a) == 1 {
            Ok(sb.clone())
        } else if self.numel(b) == 1 {
            Ok(sa.clone())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    pub fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let shape = self.binary_shape(name, a, b)?;
        let n: usize = shape.iter().product();
        let (xa, xb) = (&self.bufs[a.0].data, &self.bufs[b.0].data);
        let mut data = Vec::with_capacity(n);
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        if xa.len() == xb.len() {
            data.extend(xa.iter().zip(xb).map(|(&x, &y)| f(x, y)));
        } else if xa.len() == 1 {
            data.extend(xb.iter().map(|&y| f(xa[0], y)));
        } else {
            data.extend(xa.iter().map(|&x| f(x, xb[0])));
        }
        let ng = self.bufs[a.0].needs_grad || self.bufs[b.0].needs_grad;
        let y = self.push_buf(shape, data, ng);
        self.nodes.push(Node::Binary { kind, a, b, y });
        Ok(y)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    // ----- structure ---------------------------------------------------

    /// Concatenate two rank-1 tensors, or two C×H×W tensors along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.bufs[a.0].shape.clone();
        let sb = self.bufs[b.0].shape.clone();
        let shape = if sa.len() == 1 && sb.len() == 1 {
            vec![sa[0] + sb[0]]
        } else if sa.len() == 3 && sb.len() == 3 && sa[1..] == sb[1..] {
            vec![sa[0] + sb[0], sa[1], sa[2]]
        } else {
            return Err(Error::Shape {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        };
        let mut data = self.bufs[a.0].data.clone();
        data.extend_from_slice(&self.bufs[b.0].data);
        let ng = self.bufs[a.0].needs_grad || self.bufs[b.0].needs_grad;
        let y = self.push_buf(shape, data, ng);
        self.nodes.push(Node::Concat { a, b, y });
        Ok(y)
    }

    /// Contiguous sub-range of a rank-1 tensor.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        if self.bufs[x.0].shape.len() != 1 || offset + len > self.numel(x) {
            return Err(Error::Shape {
                op: "slice",
                lhs: self.bufs[x.0].shape.clone(),
                rhs: vec![offset, len],
            });
        }
        let data = self.bufs[x.0].data[offset..offset + len].to_vec();
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![len], data, ng);
        self.nodes.push(Node::Slice { x, y, offset });
        Ok(y)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.bufs[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.bufs[x.0].data.clone();
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(shape.to_vec(), data, ng);
        self.nodes.push(Node::Reshape { x, y });
        Ok(y)
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![1], vec![s], ng);
        self.nodes.push(Node::Sum { x, y });
        y
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![1], vec![s / n], ng);
        self.nodes.push(Node::Mean { x, y });
        y
    }

    // ----- linear algebra ----------------------------------------------

    /// `a` is m×k; `b` is k×n, or a length-k vector treated as k×1 (the
    /// result is then a length-m vector).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.bufs[a.0].shape.clone();
        let sb = self.bufs[b.0].shape.clone();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 {
            return Err(err());
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, out_shape) = match sb.len() {
            1 => {
                if sb[0] != k {
                    return Err(err());
                }
                (1, vec![m])
            }
            2 => {
                if sb[0] != k {
                    return Err(err());
                }
                (sb[1], vec![m, sb[1]])
            }
            _ => return Err(err()),
        };
        let mut data = vec![0.0; m * n];
        matmul_kernel(
            &self.bufs[a.0].data,
            &self.bufs[b.0].data,
            &mut data,
            m,
            k,
            n,
        );
        let ng = self.bufs[a.0].needs_grad || self.bufs[b.0].needs_grad;
        let y = self.push_buf(out_shape, data, ng);
        self.nodes.push(Node::Matmul { a, b, y, m, k, n });
        Ok(y)
    }

    // ----- neural-net ops ----------------------------------------------

    /// 2-d convolution: input C×H×W, kernels F×C×kh×kw, optional bias [F].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.bufs[x.0].shape.clone();
        let sw = self.bufs[w.0].shape.clone();
        let err = || Error::Shape {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride == 0 {
            return Err(err());
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(err());
        }
        if let Some(b) = bias {
            if self.bufs[b.0].shape != [f] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: self.bufs[b.0].shape.clone(),
                    rhs: vec![f],
                });
            }
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (wd + 2 * pad - kw) / stride + 1;
        let meta = ConvMeta {
            in_c: c,
            in_h: h,
            in_w: wd,
            k_f: f,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
            out_h,
            out_w,
        };
        let mut data = vec![0.0; f * out_h * out_w];
        conv2d_forward(&self.bufs[x.0].data, &self.bufs[w.0].data, &mut data, meta);
        if let Some(b) = bias {
            let bv = &self.bufs[b.0].data;
            for fi in 0..f {
                let base = fi * out_h * out_w;
                for v in &mut data[base..base + out_h * out_w] {
                    *v += bv[fi];
                }
            }
        }
        let ng = self.bufs[x.0].needs_grad
            || self.bufs[w.0].needs_grad
            || bias.map(|b| self.bufs[b.0].needs_grad).unwrap_or(false);
        let y = self.push_buf(vec![f, out_h, out_w], data, ng);
        self.nodes.push(Node::Conv2d { x, w, bias, y, meta });
        Ok(y)
    }

    /// Global average pooling: C×H×W -> [C].
    pub fn avg_pool_all(&mut self, x: Var) -> Result<Var> {
        let sx = self.bufs[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::Shape {
                op: "avg_pool_all",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let mut data = vec![0.0; c];
        for ci in 0..c {
            let base = ci * hw;
            data[ci] = self.bufs[x.0].data[base..base + hw].iter().sum::<f64>() / hw as f64;
        }
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![c], data, ng);
        self.nodes.push(Node::AvgPoolAll { x, y });
        Ok(y)
    }

    /// Nearest-neighbour 2x upsampling: C×H×W -> C×2H×2W.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.bufs[x.0].shape.clone();
        if sx.len() != 3 {
            return Err(Error::Shape {
                op: "upsample2x",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (h2, w2) = (2 * h, 2 * w);
        let src = &self.bufs[x.0].data;
        let mut data = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for sy in 0..h {
                let srow = &src[ci * h * w + sy * w..][..w];
                let dbase = ci * h2 * w2 + 2 * sy * w2;
                {
                    let drow = &mut data[dbase..dbase + w2];
                    for (i, &v) in srow.iter().enumerate() {
                        drow[2 * i] = v;
                        drow[2 * i + 1] = v;
                    }
                }
                // second doubled row is a copy of the first
                data.copy_within(dbase..dbase + w2, dbase + w2);
            }
        }
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![c, h2, w2], data, ng);
        self.nodes.push(Node::Upsample2x { x, y });
        Ok(y)
    }

    /// Numerically stable softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.bufs[x.0].shape.len() != 1 || self.numel(x) == 0 {
            return Err(Error::Shape {
                op: "softmax",
                lhs: self.bufs[x.0].shape.clone(),
                rhs: vec![],
            });
        }
        if !self.bufs[x.0].data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("softmax input"));
        }
        let xs = &self.bufs[x.0].data;
        let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = xs.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        let data: Vec<f64> = ex.iter().map(|v| v / z).collect();
        let ng = self.bufs[x.0].needs_grad;
        let y = self.push_buf(vec![xs.len()], data, ng);
        self.nodes.push(Node::Softmax { x, y });
        Ok(y)
    }

    // ----- backward ------------------------------------------------------

    /// Reverse pass from a scalar loss. Gradient buffers are freshly zeroed
    /// on every call, so repeated calls from the same tape are bit-identical.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.bufs[loss.0].shape
            )));
        }
        self.grads = Vec::with_capacity(self.bufs.len());
        self.grads.resize_with(self.bufs.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            // split borrows: take the node out by index via raw match
            let node = &self.nodes[idx];
            match *node {
                Node::Unary { kind, x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let n = self.bufs[x.0].data.len();
                            let xv = &self.bufs[x.0].data;
                            let yv = &self.bufs[y.0].data;
                            let gx = grad_slot(&mut self.grads, x, n);
                            for i in 0..gy.len() {
                                gx[i] += gy[i] * unary_grad(kind, xv[i], yv[i]);
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Binary { kind, a, b, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        let (na, nb) = (self.numel(a), self.numel(b));
                        if self.bufs[a.0].needs_grad {
                            let bv: Vec<f64> = match kind {
                                BinKind::Mul => self.bufs[b.0].data.clone(),
                                _ => vec![],
                            };
                            let ga = self.grad_buf(a);
                            accumulate_binary_grad(ga, &gy, kind, true, na, nb, &bv);
                        }
                        if self.bufs[b.0].needs_grad {
                            let av: Vec<f64> = match kind {
                                BinKind::Mul => self.bufs[a.0].data.clone(),
                                _ => vec![],
                            };
                            let gb = self.grad_buf(b);
                            accumulate_binary_grad(gb, &gy, kind, false, nb, na, &av);
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Concat { a, b, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        let na = self.numel(a);
                        if self.bufs[a.0].needs_grad {
                            let ga = self.grad_buf(a);
                            for i in 0..na {
                                ga[i] += gy[i];
                            }
                        }
                        if self.bufs[b.0].needs_grad {
                            let gb = self.grad_buf(b);
                            for i in 0..gb.len() {
                                gb[i] += gy[na + i];
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Slice { x, y, offset } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let gx = self.grad_buf(x);
                            for i in 0..gy.len() {
                                gx[offset + i] += gy[i];
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Reshape { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let gx = self.grad_buf(x);
                            for i in 0..gy.len() {
                                gx[i] += gy[i];
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Sum { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let g = gy[0];
                            let gx = self.grad_buf(x);
                            for v in gx.iter_mut() {
                                *v += g;
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Mean { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let n = self.numel(x) as f64;
                            let g = gy[0] / n;
                            let gx = self.grad_buf(x);
                            for v in gx.iter_mut() {
                                *v += g;
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Matmul { a, b, y, m, k, n } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[a.0].needs_grad {
                            let bv = self.bufs[b.0].data.clone();
                            let ga = self.grad_buf(a);
                            matmul_grad_a(&gy, &bv, ga, m, k, n);
                        }
                        if self.bufs[b.0].needs_grad {
                            let av = self.bufs[a.0].data.clone();
                            let gb = self.grad_buf(b);
                            matmul_grad_b(&av, &gy, gb, m, k, n);
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Conv2d { x, w, bias, y, meta } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let wv = self.bufs[w.0].data.clone();
                            let gx = self.grad_buf(x);
                            conv2d_backward_input(&gy, &wv, gx, meta);
                        }
                        if self.bufs[w.0].needs_grad {
                            let xv = self.bufs[x.0].data.clone();
                            let gw = self.grad_buf(w);
                            conv2d_backward_kernel(&gy, &xv, gw, meta);
                        }
                        if let Some(b) = bias {
                            if self.bufs[b.0].needs_grad {
                                let hw = meta.out_h * meta.out_w;
                                let gb = self.grad_buf(b);
                                for fi in 0..meta.k_f {
                                    gb[fi] += gy[fi * hw..(fi + 1) * hw].iter().sum::<f64>();
                                }
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::AvgPoolAll { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let sx = self.bufs[x.0].shape.clone();
                            let hw = sx[1] * sx[2];
                            let gx = self.grad_buf(x);
                            for ci in 0..sx[0] {
                                let g = gy[ci] / hw as f64;
                                for v in &mut gx[ci * hw..(ci + 1) * hw] {
                                    *v += g;
                                }
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Upsample2x { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let sx = self.bufs[x.0].shape.clone();
                            let (c, h, w) = (sx[0], sx[1], sx[2]);
                            let (h2, w2) = (2 * h, 2 * w);
                            let gx = self.grad_buf(x);
                            for ci in 0..c {
                                for sy in 0..h {
                                    let gxrow = &mut gx[ci * h * w + sy * w..][..w];
                                    let gbase = ci * h2 * w2 + 2 * sy * w2;
                                    let (g0, g1) =
                                        (&gy[gbase..gbase + w2], &gy[gbase + w2..gbase + 2 * w2]);
                                    for i in 0..w {
                                        gxrow[i] +=
                                            g0[2 * i] + g0[2 * i + 1] + g1[2 * i] + g1[2 * i + 1];
                                    }
                                }
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
                Node::Softmax { x, y } => {
                    if let Some(gy) = self.take_out_grad(y) {
                        if self.bufs[x.0].needs_grad {
                            let yv = self.bufs[y.0].data.clone();
                            let dot: f64 = gy.iter().zip(&yv).map(|(g, v)| g * v).sum();
                            let gx = self.grad_buf(x);
                            for i in 0..yv.len() {
                                gx[i] += yv[i] * (gy[i] - dot);
                            }
                        }
                        self.grads[y.0] = Some(gy);
                    }
                }
            }
        }
        Ok(())
    }

    /// Temporarily removes the output gradient so input grads can be borrowed
    /// mutably; callers put it back. Returns None when no gradient reached
    /// this output (the subgraph is constant w.r.t. the loss).
    fn take_out_grad(&mut self, y: Var) -> Option<Vec<f64>> {
        if !self.bufs[y.0].needs_grad {
            return None;
        }
        self.grads[y.0].take()
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.bufs[v.0].data.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn unary_eval(kind: UnaryKind, v: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if v > 0.0 {
                v
            } else {
                s * v
            }
        }
        UnaryKind::Exp => v.exp(),
        UnaryKind::Log => v.ln(),
        UnaryKind::Square => v * v,
        UnaryKind::Abs => v.abs(),
        UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        UnaryKind::Clamp(lo, hi) => v.clamp(lo, hi),
        UnaryKind::Scale(c) => c * v,
        UnaryKind::AddScalar(c) => v + c,
    }
}

/// d(out)/d(in) for a unary op; `x` is the input value, `y` the output.
/// Subgradient conventions: relu'(0) = 0, leaky'(0) = slope, abs'(0) = 0,
/// clamp' = 1 on the closed interval.
fn unary_grad(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Clamp(lo, hi) => {
            if (lo..=hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => 1.0,
    }
}

/// Accumulate a binary op's gradient into `gt` (the `this` side), handling
/// the scalar-broadcast case. `other_vals` carries the opposite operand's
/// values when the op is Mul (empty otherwise).
fn accumulate_binary_grad(
    gt: &mut [f64],
    gy: &[f64],
    kind: BinKind,
    is_lhs: bool,
    n_this: usize,
    n_other: usize,
    other_vals: &[f64],
) {
    let sign = match (kind, is_lhs) {
        (BinKind::Sub, false) => -1.0,
        _ => 1.0,
    };
    match kind {
        BinKind::Add | BinKind::Sub => {
            if n_this == gy.len() {
                for i in 0..gy.len() {
                    gt[i] += sign * gy[i];
                }
            } else {
                // scalar side: reduce
                gt[0] += sign * gy.iter().sum::<f64>();
            }
        }
        BinKind::Mul => {
            if n_this == gy.len() {
                if n_other == gy.len() {
                    for i in 0..gy.len() {
                        gt[i] += gy[i] * other_vals[i];
                    }
                } else {
                    let o = other_vals[0];
                    for i in 0..gy.len() {
                        gt[i] += gy[i] * o;
                    }
                }
            } else {
                gt[0] += gy
                    .iter()
                    .zip(other_vals)
                    .map(|(g, o)| g * o)
                    .sum::<f64>();
            }
        }
    }
}

// ----- compute kernels ----------------------------------------------------

/// Dot product with eight independent accumulators; the fixed summation
/// order keeps results deterministic while breaking the FMA latency chain.
#[inline]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for lane in 0..8 {
            acc[lane] += xa[lane] * xb[lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// axpy: y += c·x over contiguous slices.
#[inline]
fn axpy(c: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += c * xv;
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], y: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        // matrix · vector: contiguous dot per output element
        for i in 0..m {
            y[i] += dot8(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let yrow = &mut y[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            axpy(av, &b[l * n..(l + 1) * n], yrow);
        }
    }
}

/// da = gy · bᵀ
fn matmul_grad_a(gy: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for i in 0..m {
            axpy(gy[i], &b[..k], &mut da[i * k..(i + 1) * k]);
        }
        return;
    }
    for i in 0..m {
        let grow = &gy[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            darow[l] += dot8(grow, &b[l * n..(l + 1) * n]);
        }
    }
}

/// db = aᵀ · gy
fn matmul_grad_b(a: &[f64], gy: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for i in 0..m {
            axpy(gy[i], &a[i * k..(i + 1) * k], &mut db[..k]);
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &gy[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            axpy(av, grow, &mut db[l * n..(l + 1) * n]);
        }
    }
}

// Convolutions run as im2col + matmul: the patch matrix has one row per
// (channel, ky, kx) and one column per output position, so every inner loop
// runs over the whole output plane instead of a single short row. The same
// column matrix serves the forward pass and both backward passes.

std::thread_local! {
    static COL_SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Fill `col` ([c·kh·kw, out_h·out_w], row-major) with input patches;
/// out-of-bounds taps are zero.
fn im2col(x: &[f64], m: ConvMeta, col: &mut [f64]) {
    let n = m.out_h * m.out_w;
    for ci in 0..m.in_c {
        let xbase = ci * m.in_h * m.in_w;
        for ky in 0..m.k_h {
            for kx in 0..m.k_w {
                let row = &mut col[((ci * m.k_h + ky) * m.k_w + kx) * n..][..n];
                for oy in 0..m.out_h {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    let seg = &mut row[oy * m.out_w..(oy + 1) * m.out_w];
                    if iy < 0 || iy >= m.in_h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let xrow = &x[xbase + iy as usize * m.in_w..][..m.in_w];
                    let shift = kx as isize - m.pad as isize;
                    if m.stride == 1 {
                        // valid ox where 0 <= ox + shift < in_w
                        let lo = ((-shift).max(0) as usize).min(m.out_w);
                        let hi = (m.in_w as isize - shift).clamp(0, m.out_w as isize) as usize;
                        seg[..lo].fill(0.0);
                        if lo < hi {
                            let src = (lo as isize + shift) as usize;
                            seg[lo..hi].copy_from_slice(&xrow[src..src + (hi - lo)]);
                        }
                        if hi < m.out_w {
                            seg[hi.max(lo)..].fill(0.0);
                        }
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * m.stride) as isize + shift;
                            *v = if ix >= 0 && ix < m.in_w as isize {
                                xrow[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient.
fn col2im_add(dcol: &[f64], m: ConvMeta, gx: &mut [f64]) {
    let n = m.out_h * m.out_w;
    for ci in 0..m.in_c {
        let xbase = ci * m.in_h * m.in_w;
        for ky in 0..m.k_h {
            for kx in 0..m.k_w {
                let row = &dcol[((ci * m.k_h + ky) * m.k_w + kx) * n..][..n];
                for oy in 0..m.out_h {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= m.in_h as isize {
                        continue;
                    }
                    let seg = &row[oy * m.out_w..(oy + 1) * m.out_w];
                    let gxrow = &mut gx[xbase + iy as usize * m.in_w..][..m.in_w];
                    let shift = kx as isize - m.pad as isize;
                    if m.stride == 1 {
                        let lo = (-shift).max(0) as usize;
                        let hi = (m.in_w as isize - shift).clamp(0, m.out_w as isize) as usize;
                        if lo < hi {
                            let dst = (lo as isize + shift) as usize;
                            let target = &mut gxrow[dst..dst + (hi - lo)];
                            for (t, s) in target.iter_mut().zip(&seg[lo..hi]) {
                                *t += s;
                            }
                        }
                    } else {
                        for (ox, s) in seg.iter().enumerate() {
                            let ix = (ox * m.stride) as isize + shift;
                            if ix >= 0 && ix < m.in_w as isize {
                                gxrow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn with_col<R>(m: ConvMeta, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let len = m.in_c * m.k_h * m.k_w * m.out_h * m.out_w;
    COL_SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn conv2d_forward(x: &[f64], w: &[f64], y: &mut [f64], m: ConvMeta) {
    let ckk = m.in_c * m.k_h * m.k_w;
    let n = m.out_h * m.out_w;
    with_col(m, |col| {
        im2col(x, m, col);
        matmul_kernel(w, col, y, m.k_f, ckk, n);
    });
}

fn conv2d_backward_input(gy: &[f64], w: &[f64], gx: &mut [f64], m: ConvMeta) {
    let ckk = m.in_c * m.k_h * m.k_w;
    let n = m.out_h * m.out_w;
    with_col(m, |dcol| {
        dcol.fill(0.0);
        // dcol = wᵀ · gy, same accumulation pattern as the matmul b-gradient
        matmul_grad_b(w, gy, dcol, m.k_f, ckk, n);
        col2im_add(dcol, m, gx);
    });
}

fn conv2d_backward_kernel(gy: &[f64], x: &[f64], gw: &mut [f64], m: ConvMeta) {
    let ckk = m.in_c * m.k_h * m.k_w;
    let n = m.out_h * m.out_w;
    with_col(m, |col| {
        im2col(x, m, col);
        // gw = gy · colᵀ, same pattern as the matmul a-gradient
        matmul_grad_a(gy, col, gw, m.k_f, ckk, n);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of d(loss)/d(inputs[which]) for a loss
    /// rebuilt from scratch at each evaluation point.
    fn fd_check<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |tensors: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t)).collect();
            let loss = build(&mut tape, &vars);
            tape.scalar_val(loss)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();

        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            let g = tape.grad(vars[ti]).expect("missing grad").to_vec();
            for i in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data[i] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let scale = 1.0_f64.max(fd.abs()).max(g[i].abs());
                assert!(
                    (fd - g[i]).abs() / scale <= tol,
                    "input {ti} elem {i}: fd {fd} vs ad {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = tape.constant(&Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.val(y), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates_value_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let z = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.val(y), &[0.0, 0.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn log_exp_inverse_pair() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[1], vec![0.5]));
        let e = tape.exp(x);
        let y = tape.log(e);
        assert!((tape.val(y)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binary_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2]));
        let b = tape.constant(&Tensor::zeros(&[3]));
        match tape.add(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let s = tape.scalar_const(10.0);
        let y = tape.mul(a, s).unwrap();
        assert_eq!(tape.val(y), &[10.0, 20.0, 30.0]);
        let z = tape.sub(s, a).unwrap();
        assert_eq!(tape.val(z), &[9.0, 8.0, 7.0]);
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&Tensor::from_vec(&[2, 2], vec![5.0, -1.0, 2.0, 7.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.val(y), tape.val(m));

        let a = tape.constant(&Tensor::from_vec(&[1, 2], vec![1.0, 2.0]));
        let b = tape.constant(&Tensor::from_vec(&[2, 1], vec![3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.val(c), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = Prng::seed(101);
        let a = Tensor::he_uniform(&[3, 4], 4, &mut rng);
        let b = Tensor::he_uniform(&[4, 2], 4, &mut rng);
        // weights make the scalarization non-degenerate
        let wdata: Vec<f64> = (0..6).map(|i| 0.3 + 0.1 * i as f64).collect();
        fd_check(
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]).unwrap();
                let w = tape.constant_vec(&[3, 2], wdata.clone());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|i| i as f64 / 15.0).collect(),
        ));
        let k = tape.constant(&Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.val(y), tape.val(x));
        assert_eq!(tape.shape(y), &[1, 4, 4]);
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.val(y), &[9.0]);
    }

    #[test]
    fn conv2d_kernel_too_large_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(&Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, k, None, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv2d_gradcheck() {
        let mut rng = Prng::seed(77);
        let x = Tensor::he_uniform(&[2, 8, 8], 16, &mut rng);
        let k = Tensor::he_uniform(&[3, 2, 3, 3], 18, &mut rng);
        let b = Tensor::he_uniform(&[3], 3, &mut rng);
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0)] {
            fd_check(
                |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, pad).unwrap();
                    let sq = tape.square(y);
                    tape.mean(sq)
                },
                &[x.clone(), k.clone(), b.clone()],
                1e-5,
            );
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for v in tape.val(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(&Tensor::from_vec(&[2], vec![1000.0, 0.0]));
        let s = tape.softmax(big).unwrap();
        let sv = tape.val(s);
        assert!(sv[0] > 0.999_999 && sv[1] < 1e-6);
        assert!(sv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[2], vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_sums_to_one_and_gradcheck() {
        let mut rng = Prng::seed(5);
        let x = Tensor::from_vec(&[5], rng.normal_vec(5));
        {
            let mut tape = Tape::new();
            let v = tape.constant(&x);
            let y = tape.softmax(v).unwrap();
            let s: f64 = tape.val(y).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let wdata: Vec<f64> = (0..5).map(|i| (i as f64 + 1.0) * 0.17).collect();
        fd_check(
            |tape, vars| {
                let y = tape.softmax(vars[0]).unwrap();
                let w = tape.constant_vec(&[5], wdata.clone());
                let p = tape.mul(y, w).unwrap();
                tape.sum(p)
            },
            &[x],
            1e-6,
        );
    }

    #[test]
    fn backward_seed_is_one() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.5));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_hand_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_bit_identical() {
        let mut rng = Prng::seed(9);
        let x = Tensor::from_vec(&[4, 4], rng.normal_vec(16));
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let e = tape.exp(v);
        let sg = tape.sigmoid(e);
        let loss = tape.mean(sg);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(v).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(v).unwrap().to_vec();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let c = tape.constant(&Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn composite_ops_gradcheck() {
        let mut rng = Prng::seed(31);
        let x = Tensor::from_vec(&[6], rng.normal_vec(6));
        fd_check(
            |tape, vars| {
                let a = tape.leaky_relu(vars[0], 0.2);
                let b = tape.sigmoid(a);
                let c = tape.abs(b);
                let d = tape.scale(c, 1.7);
                let e = tape.add_scalar(d, 0.3);
                let f = tape.square(e);
                tape.mean(f)
            },
            &[x.clone()],
            1e-5,
        );
        fd_check(
            |tape, vars| {
                let s = tape.slice(vars[0], 1, 3).unwrap();
                let t = tape.slice(vars[0], 3, 3).unwrap();
                let c = tape.concat(s, t).unwrap();
                let sq = tape.square(c);
                tape.sum(sq)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn upsample_and_pool_gradcheck() {
        let mut rng = Prng::seed(13);
        let x = Tensor::from_vec(&[2, 3, 3], rng.normal_vec(18));
        fd_check(
            |tape, vars| {
                let u = tape.upsample2x(vars[0]).unwrap();
                let sq = tape.square(u);
                tape.mean(sq)
            },
            &[x.clone()],
            1e-5,
        );
        fd_check(
            |tape, vars| {
                let p = tape.avg_pool_all(vars[0]).unwrap();
                let sq = tape.square(p);
                tape.sum(sq)
            },
            &[x],
            1e-5,
        );
    }

    #[test]
    fn upsample_values() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4]);
        assert_eq!(
            tape.val(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
