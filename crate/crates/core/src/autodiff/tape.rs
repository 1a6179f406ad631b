use std::cell::RefCell;
use std::fmt;

use super::kernels::{self, ConvGeom, Layout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Records every operation of a forward pass so gradients can be replayed.
///
/// Nodes are appended in creation order, which is a topological order of the
/// graph; [`Tape::backward`] walks it in reverse and visits each node once.
///
/// Gradients are not accumulated across passes: a second `backward` on the
/// same tape is rejected with [`Error::BackwardTwice`] until
/// [`Tape::zero_grad`] clears the populated gradients.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    backward_done: bool,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    DivScalar(usize, f64),
    Abs(usize),
    Sqrt(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        batch: usize,
    },
    GroupNorm {
        x: usize,
        per_group: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    AddChannel(usize, usize),
    MulChannel(usize, usize),
    Upsample2x(usize),
    AvgPool2x(usize),
    GlobalAvgPool(usize),
    ConcatChannels(usize, usize),
    ConcatBatch(Vec<usize>),
    Select(usize, usize),
    Reshape(usize),
    Stack(Vec<usize>),
    SeparableProduct(usize, usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires grad and was reachable from the loss.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.inner.borrow().nodes[v.id].grad.clone()
    }

    /// Clears all populated gradients and re-enables [`Tape::backward`].
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        for n in &mut inner.nodes {
            n.grad = None;
        }
        inner.backward_done = false;
    }

    /// Stack one-element tensors into a vector.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let inner = self.inner.borrow();
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &inner.nodes[p.id].value;
            if v.numel() != 1 {
                return Err(Error::InvalidShape {
                    op: "stack",
                    shape: v.shape().to_vec(),
                    reason: "only one-element tensors can be stacked".into(),
                });
            }
            data.push(v.item());
        }
        let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
        drop(inner);
        Ok(self.push(
            Tensor::from_vec(data),
            Op::Stack(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Concatenate along the leading (batch) dimension.
    pub fn concat_batch<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let inner = self.inner.borrow();
        let values: Vec<Tensor> = parts
            .iter()
            .map(|p| inner.nodes[p.id].value.clone())
            .collect();
        let out = Tensor::concat_batch(&values)?;
        let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
        drop(inner);
        Ok(self.push(
            out,
            Op::ConcatBatch(parts.iter().map(|p| p.id).collect()),
            rg,
        ))
    }

    /// Populates gradients for every `requires_grad` node reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if inner.backward_done {
            return Err(Error::BackwardTwice);
        }
        inner.backward_done = true;
        if !inner.nodes[loss.id].requires_grad {
            return Ok(());
        }
        let nodes = &mut inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(&shape, 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                nodes[id].grad = Some(g);
                continue;
            }
            for (input, gin) in backward_op(nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gin.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        Ok(())
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }
}

fn value(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel output sized by construction")
}

/// Reduce an elementwise gradient to the shape of a possibly-broadcast operand.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Tensor {
    if target.numel() == grad.len() {
        with_shape(target.shape(), grad)
    } else {
        with_shape(target.shape(), vec![grad.iter().sum()])
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let out = &nodes[id].value;
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => vec![],
        &Op::Add(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            vec![
                (a, unbroadcast(gd.to_vec(), va)),
                (b, unbroadcast(gd.to_vec(), vb)),
            ]
        }
        &Op::Sub(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            vec![
                (a, unbroadcast(gd.to_vec(), va)),
                (b, unbroadcast(gd.iter().map(|x| -x).collect(), vb)),
            ]
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            let n = gd.len();
            let ga: Vec<f64> = (0..n).map(|i| gd[i] * bcast(vb, i)).collect();
            let gb: Vec<f64> = (0..n).map(|i| gd[i] * bcast(va, i)).collect();
            vec![
                (a, unbroadcast(ga, va)),
                (b, unbroadcast(gb, vb)),
            ]
        }
        &Op::Div(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            let n = gd.len();
            let ga: Vec<f64> = (0..n).map(|i| gd[i] / bcast(vb, i)).collect();
            let gb: Vec<f64> = (0..n)
                .map(|i| {
                    let d = bcast(vb, i);
                    -gd[i] * bcast(va, i) / (d * d)
                })
                .collect();
            vec![
                (a, unbroadcast(ga, va)),
                (b, unbroadcast(gb, vb)),
            ]
        }
        &Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
        &Op::AddScalar(a) => vec![(a, g.clone())],
        &Op::DivScalar(a, c) => vec![(a, g.map(|x| x / c))],
        &Op::Abs(a) => {
            let va = value(nodes, a);
            let d = gd
                .iter()
                .zip(va.data())
                .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                .collect();
            vec![(a, with_shape(va.shape(), d))]
        }
        &Op::Sqrt(a) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(g, y)| g / (2.0 * y))
                .collect();
            vec![(a, with_shape(out.shape(), d))]
        }
        &Op::Silu(a) => {
            let va = value(nodes, a);
            let d = gd
                .iter()
                .zip(va.data())
                .map(|(g, &x)| {
                    let s = kernels::sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                })
                .collect();
            vec![(a, with_shape(va.shape(), d))]
        }
        &Op::Sum(a) => {
            let va = value(nodes, a);
            vec![(a, Tensor::full(va.shape(), gd[0]))]
        }
        &Op::Mean(a) => {
            let va = value(nodes, a);
            vec![(a, Tensor::full(va.shape(), gd[0] / va.numel() as f64))]
        }
        &Op::Matmul(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let mut ga = vec![0.0; m * k];
            kernels::gemm(
                m,
                n,
                k,
                gd,
                Layout::row_major(n),
                vb.data(),
                Layout::transposed(n),
                0.0,
                &mut ga,
            );
            let mut gb = vec![0.0; k * n];
            kernels::gemm(
                k,
                m,
                n,
                va.data(),
                Layout::transposed(k),
                gd,
                Layout::row_major(n),
                0.0,
                &mut gb,
            );
            vec![
                (a, with_shape(va.shape(), ga)),
                (b, with_shape(vb.shape(), gb)),
            ]
        }
        &Op::Conv2d { x, w, geom, batch } => {
            let (vx, vw) = (value(nodes, x), value(nodes, w));
            let (dx, dw) = kernels::conv2d_backward(
                vx.data(),
                vw.data(),
                gd,
                batch,
                &geom,
                nodes[x].requires_grad,
                nodes[w].requires_grad,
            );
            let mut res = Vec::new();
            if let Some(dx) = dx {
                res.push((x, with_shape(vx.shape(), dx)));
            }
            if let Some(dw) = dw {
                res.push((w, with_shape(vw.shape(), dw)));
            }
            res
        }
        Op::GroupNorm {
            x,
            per_group,
            means,
            rstds,
        } => {
            let vx = value(nodes, *x);
            let dx = kernels::group_norm_backward(vx.data(), gd, means, rstds, *per_group);
            vec![(*x, with_shape(vx.shape(), dx))]
        }
        &Op::AddChannel(x, b) => {
            let (vx, vb) = (value(nodes, x), value(nodes, b));
            let (batch, c, spatial) = channel_dims(vx.shape());
            let per_sample = vb.shape().len() == 2;
            let mut gb = vec![0.0; vb.numel()];
            for bi in 0..batch {
                for ci in 0..c {
                    let s: f64 = gd[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial]
                        .iter()
                        .sum();
                    gb[if per_sample { bi * c + ci } else { ci }] += s;
                }
            }
            vec![(x, g.clone()), (b, with_shape(vb.shape(), gb))]
        }
        &Op::MulChannel(x, s) => {
            let (vx, vs) = (value(nodes, x), value(nodes, s));
            let (batch, c, spatial) = channel_dims(vx.shape());
            let mut gx = vec![0.0; vx.numel()];
            let mut gs = vec![0.0; c];
            for bi in 0..batch {
                for ci in 0..c {
                    let range = (bi * c + ci) * spatial..(bi * c + ci + 1) * spatial;
                    let scale = vs.data()[ci];
                    for i in range {
                        gx[i] = gd[i] * scale;
                        gs[ci] += gd[i] * vx.data()[i];
                    }
                }
            }
            vec![
                (x, with_shape(vx.shape(), gx)),
                (s, with_shape(vs.shape(), gs)),
            ]
        }
        &Op::Upsample2x(x) => {
            let vx = value(nodes, x);
            let (bc, h, w) = (vx.shape()[0] * vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let mut gx = vec![0.0; vx.numel()];
            for p in 0..bc {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        gx[p * h * w + (oy / 2) * w + ox / 2] +=
                            gd[p * 4 * h * w + oy * 2 * w + ox];
                    }
                }
            }
            vec![(x, with_shape(vx.shape(), gx))]
        }
        &Op::AvgPool2x(x) => {
            let vx = value(nodes, x);
            let (bc, h, w) = (vx.shape()[0] * vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut gx = vec![0.0; vx.numel()];
            for p in 0..bc {
                for iy in 0..h {
                    for ix in 0..w {
                        gx[p * h * w + iy * w + ix] =
                            0.25 * gd[p * ho * wo + (iy / 2) * wo + ix / 2];
                    }
                }
            }
            vec![(x, with_shape(vx.shape(), gx))]
        }
        &Op::GlobalAvgPool(x) => {
            let vx = value(nodes, x);
            let spatial = vx.shape()[2] * vx.shape()[3];
            let gx = (0..vx.numel())
                .map(|i| gd[i / spatial] / spatial as f64)
                .collect();
            vec![(x, with_shape(vx.shape(), gx))]
        }
        &Op::ConcatChannels(a, b) => {
            let (va, vb) = (value(nodes, a), value(nodes, b));
            let batch = va.shape()[0];
            let la = va.numel() / batch;
            let lb = vb.numel() / batch;
            let mut ga = Vec::with_capacity(va.numel());
            let mut gb = Vec::with_capacity(vb.numel());
            for bi in 0..batch {
                let base = bi * (la + lb);
                ga.extend_from_slice(&gd[base..base + la]);
                gb.extend_from_slice(&gd[base + la..base + la + lb]);
            }
            vec![
                (a, with_shape(va.shape(), ga)),
                (b, with_shape(vb.shape(), gb)),
            ]
        }
        Op::ConcatBatch(parts) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let vp = value(nodes, p);
                    let n = vp.numel();
                    let gp = with_shape(vp.shape(), gd[offset..offset + n].to_vec());
                    offset += n;
                    (p, gp)
                })
                .collect()
        }
        &Op::Select(x, i) => {
            let vx = value(nodes, x);
            let inner = vx.numel() / vx.shape()[0];
            let mut gx = vec![0.0; vx.numel()];
            gx[i * inner..(i + 1) * inner].copy_from_slice(gd);
            vec![(x, with_shape(vx.shape(), gx))]
        }
        &Op::Reshape(x) => {
            let vx = value(nodes, x);
            vec![(x, with_shape(vx.shape(), gd.to_vec()))]
        }
        Op::Stack(parts) => parts
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, with_shape(value(nodes, p).shape(), vec![gd[i]])))
            .collect(),
        &Op::SeparableProduct(fin, fout) => {
            let (vi, vo) = (value(nodes, fin), value(nodes, fout));
            let (kh, kw, cin) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
            let cout = vo.shape()[3];
            let taps = kh * kw;
            let mut gi = vec![0.0; vi.numel()];
            let mut go = vec![0.0; vo.numel()];
            for co in 0..cout {
                for ci in 0..cin {
                    for tap in 0..taps {
                        let d = gd[(co * cin + ci) * taps + tap];
                        gi[tap * cin + ci] += d * vo.data()[tap * cout + co];
                        go[tap * cout + co] += d * vi.data()[tap * cin + ci];
                    }
                }
            }
            vec![
                (fin, with_shape(vi.shape(), gi)),
                (fout, with_shape(vo.shape(), go)),
            ]
        }
    }
}

#[inline]
fn bcast(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

/// `(batch, channels, spatial)` for rank-2 `[B, C]` or rank-4 `[B, C, H, W]` tensors.
fn channel_dims(shape: &[usize]) -> (usize, usize, usize) {
    let spatial = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// A constant copy: gradients stop here.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        let out = f(&node.value)?;
        let rg = node.requires_grad;
        drop(inner);
        Ok(self.tape.push(out, op, rg))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars must share a tape"
        );
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        let out = f(&na.value, &nb.value)?;
        let rg = na.requires_grad || nb.requires_grad;
        drop(inner);
        Ok(self.tape.push(out, op, rg))
    }

    fn elementwise(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.binary(other, op, |a, b| {
            if a.shape() == b.shape() {
                a.zip_map(b, &f)
            } else if b.numel() == 1 {
                let s = b.data()[0];
                Ok(a.map(|x| f(x, s)))
            } else if a.numel() == 1 {
                let s = a.data()[0];
                Ok(b.map(|y| f(s, y)))
            } else {
                Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        })
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| Ok(a.map(|x| x * c)))
            .expect("infallible")
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| Ok(a.map(|x| x + c)))
            .expect("infallible")
    }

    pub fn div_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::DivScalar(self.id, c), |a| Ok(a.map(|x| x / c)))
            .expect("infallible")
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.mul(*self).expect("same shape")
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |a| Ok(a.map(f64::abs)))
            .expect("infallible")
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| Ok(a.map(f64::sqrt)))
            .expect("infallible")
    }

    /// Sigmoid-weighted linear unit `x·σ(x)`.
    pub fn silu(&self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |a| {
            Ok(a.map(|x| x * kernels::sigmoid(x)))
        })
        .expect("infallible")
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.sum())))
            .expect("infallible")
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| Ok(Tensor::scalar(a.mean())))
            .expect("infallible")
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Matmul(self.id, other.id), |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm(
                m,
                k,
                n,
                a.data(),
                Layout::row_major(k),
                b.data(),
                Layout::row_major(n),
                0.0,
                &mut c,
            );
            Tensor::new(vec![m, n], c)
        })
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: ws,
                reason: "kernel extents must be odd and stride positive".into(),
            });
        }
        let (h, w) = (xs[2], xs[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: "kernel larger than padded input".into(),
            });
        }
        let geom = ConvGeom {
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let batch = xs[0];
        self.binary(
            weight,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                batch,
            },
            |x, w| {
                let out = kernels::conv2d_forward(x.data(), w.data(), batch, &geom);
                Tensor::new(vec![batch, geom.cout, geom.ho, geom.wo], out)
            },
        )
    }

    /// Group normalization without affine parameters.
    pub fn group_norm(&self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 4 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::InvalidShape {
                op: "group_norm",
                shape,
                reason: format!("channels not divisible into {groups} groups"),
            });
        }
        let (batch, c, spatial) = channel_dims(&shape);
        let inner = self.tape.inner.borrow();
        let (y, means, rstds) =
            kernels::group_norm_forward(inner.nodes[self.id].value.data(), batch, c, spatial, groups, eps);
        let rg = inner.nodes[self.id].requires_grad;
        drop(inner);
        let out = Tensor::new(shape, y)?;
        Ok(self.tape.push(
            out,
            Op::GroupNorm {
                x: self.id,
                per_group: c / groups * spatial,
                means,
                rstds,
            },
            rg,
        ))
    }

    /// Adds `bias` along the channel dimension. `bias` is `[C]` (shared) or
    /// `[B, C]` (per sample); `self` is `[B, C]` or `[B, C, H, W]`.
    pub fn add_channel(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddChannel(self.id, bias.id), |x, b| {
            let xs = x.shape();
            let ok_rank = xs.len() == 2 || xs.len() == 4;
            let ok_bias = (b.shape() == [xs[1]]) || (b.shape() == [xs[0], xs[1]]);
            if !ok_rank || !ok_bias {
                return Err(Error::ShapeMismatch {
                    op: "add_channel",
                    lhs: xs.to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (batch, c, spatial) = channel_dims(xs);
            let per_sample = b.shape().len() == 2;
            let mut out = x.data().to_vec();
            for bi in 0..batch {
                for ci in 0..c {
                    let v = b.data()[if per_sample { bi * c + ci } else { ci }];
                    for o in &mut out[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial] {
                        *o += v;
                    }
                }
            }
            Tensor::new(xs.to_vec(), out)
        })
    }

    /// Multiplies each channel by a `[C]` scale.
    pub fn mul_channel(&self, scale: Var<'t>) -> Result<Var<'t>> {
        self.binary(scale, Op::MulChannel(self.id, scale.id), |x, s| {
            let xs = x.shape();
            if !(xs.len() == 2 || xs.len() == 4) || s.shape() != [xs[1]] {
                return Err(Error::ShapeMismatch {
                    op: "mul_channel",
                    lhs: xs.to_vec(),
                    rhs: s.shape().to_vec(),
                });
            }
            let (batch, c, spatial) = channel_dims(xs);
            let mut out = x.data().to_vec();
            for bi in 0..batch {
                for ci in 0..c {
                    for o in &mut out[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial] {
                        *o *= s.data()[ci];
                    }
                }
            }
            Tensor::new(xs.to_vec(), out)
        })
    }

    /// Nearest-neighbour 2× upsampling of `[B,C,H,W]`.
    pub fn upsample_nearest2x(&self) -> Result<Var<'t>> {
        self.unary(Op::Upsample2x(self.id), |x| {
            let s = rank4(x, "upsample_nearest")?;
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut out = vec![0.0; bc * 4 * h * w];
            for p in 0..bc {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        out[p * 4 * h * w + oy * 2 * w + ox] =
                            x.data()[p * h * w + (oy / 2) * w + ox / 2];
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)
        })
    }

    /// 2×2 average pooling of `[B,C,H,W]` with even `H`, `W`.
    pub fn downsample_avg2x(&self) -> Result<Var<'t>> {
        self.unary(Op::AvgPool2x(self.id), |x| {
            let s = rank4(x, "downsample_avg")?;
            if s[2] % 2 != 0 || s[3] % 2 != 0 {
                return Err(Error::InvalidShape {
                    op: "downsample_avg",
                    shape: s.to_vec(),
                    reason: "spatial extents must be even".into(),
                });
            }
            let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let d = x.data();
            let mut out = vec![0.0; bc * ho * wo];
            for p in 0..bc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let base = p * h * w + 2 * oy * w + 2 * ox;
                        out[p * ho * wo + oy * wo + ox] =
                            0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], ho, wo], out)
        })
    }

    /// `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        self.unary(Op::GlobalAvgPool(self.id), |x| {
            let s = rank4(x, "global_avg_pool")?;
            let spatial = s[2] * s[3];
            let out = x
                .data()
                .chunks(spatial)
                .map(|c| c.iter().sum::<f64>() / spatial as f64)
                .collect();
            Tensor::new(vec![s[0], s[1]], out)
        })
    }

    /// `[B,C1,H,W]` ++ `[B,C2,H,W]` → `[B,C1+C2,H,W]`.
    pub fn concat_channels(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::ConcatChannels(self.id, other.id), |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let batch = sa[0];
            let (la, lb) = (a.numel() / batch, b.numel() / batch);
            let mut out = Vec::with_capacity(a.numel() + b.numel());
            for bi in 0..batch {
                out.extend_from_slice(&a.data()[bi * la..(bi + 1) * la]);
                out.extend_from_slice(&b.data()[bi * lb..(bi + 1) * lb]);
            }
            Tensor::new(vec![batch, sa[1] + sb[1], sa[2], sa[3]], out)
        })
    }

    /// Entry `i` of the leading dimension (kept with extent 1).
    pub fn select(&self, i: usize) -> Result<Var<'t>> {
        self.unary(Op::Select(self.id, i), |x| {
            if x.shape().is_empty() || i >= x.shape()[0] {
                return Err(Error::InvalidShape {
                    op: "select",
                    shape: x.shape().to_vec(),
                    reason: format!("index {i} out of range"),
                });
            }
            Ok(x.select(i))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.id), |x| x.clone().reshape(shape))
    }

    /// Rank-1-per-tap product of `factor_in[kh,kw,Cin,1]` and
    /// `factor_out[kh,kw,1,Cout]`, laid out as a `[Cout,Cin,kh,kw]` kernel.
    pub fn separable_product(&self, factor_out: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            factor_out,
            Op::SeparableProduct(self.id, factor_out.id),
            |fi, fo| separable_product(fi, fo),
        )
    }
}

fn rank4<'a>(x: &'a Tensor, op: &'static str) -> Result<&'a [usize]> {
    if x.shape().len() != 4 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected [B,C,H,W]".into(),
        });
    }
    Ok(x.shape())
}

/// Plain-tensor form of [`Var::separable_product`].
pub fn separable_product(fi: &Tensor, fo: &Tensor) -> Result<Tensor> {
    let (si, so) = (fi.shape(), fo.shape());
    if si.len() != 4 || so.len() != 4 || si[3] != 1 || so[2] != 1 || si[..2] != so[..2] {
        return Err(Error::ShapeMismatch {
            op: "separable_product",
            lhs: si.to_vec(),
            rhs: so.to_vec(),
        });
    }
    let (kh, kw, cin, cout) = (si[0], si[1], si[2], so[3]);
    let taps = kh * kw;
    let mut out = vec![0.0; cout * cin * taps];
    for co in 0..cout {
        for ci in 0..cin {
            for tap in 0..taps {
                out[(co * cin + ci) * taps + tap] = fi.data()[tap * cin + ci] * fo.data()[tap * cout + co];
            }
        }
    }
    Tensor::new(vec![cout, cin, kh, kw], out)
}
