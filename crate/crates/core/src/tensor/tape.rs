use std::collections::HashMap;

use super::{gemm, Param, ParamId, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.channels
    }
}

enum Op<R> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    AddRow { x: usize, bias: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    MulScalar { x: usize, s: usize },
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<R>, rstd: Vec<R> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Sum(usize),
    Mean(usize),
    SumCols(usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize, end: usize },
    ConcatCols { a: usize, b: usize },
    Minimum(usize, usize),
    Pick { x: usize, idx: Vec<usize> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Records operations in execution order so that a reverse sweep visits
/// every node after all of its consumers.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    params: HashMap<(ParamId, bool), Var>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(op, format!("{a:?} vs {b:?}"))
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The single element of a one-element value.
    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.data()[0]
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Binding the same parameter twice with
    /// the same `requires_grad` returns the same handle so gradients from
    /// every use are summed into one leaf.
    pub fn bind(&mut self, param: &Param<R>, requires_grad: bool) -> Var {
        let key = (param.id(), requires_grad);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(param.value.clone(), requires_grad);
        self.params.insert(key, v);
        v
    }

    /// A copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x.0);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, op, rg))
    }

    /// `op(a) · op(b)` for 2-D operands, with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![R::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        let op = Op::MatMul {
            a: a.0,
            b: b.0,
            ta,
            tb,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&[m, n], out)?, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Adds a vector along the last dimension of every leading-batch row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vb.numel();
        if vx.shape().last() != Some(&n) {
            return Err(shape_err("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(vb.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(value, Op::AddRow { x: x.0, bias: bias.0 }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise minimum; the gradient flows to the smaller input (ties to `a`).
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a.0, b.0),
        )
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: R) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -R::one())
    }

    /// Multiplies every element of `x` by the one-element value `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err("mul_scalar", self.value(x).shape(), self.value(s).shape()));
        }
        let c = self.scalar(s);
        let src = self.value(x);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(x.0) || self.rg(s.0);
        Ok(self.push(value, Op::MulScalar { x: x.0, s: s.0 }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > R::zero() { v } else { R::zero() }, Op::Relu(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    fn last_dim(&self, x: Var, op: &'static str) -> Result<usize> {
        self.value(x)
            .shape()
            .last()
            .copied()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::shape(op, format!("{:?}", self.value(x).shape())))
    }

    /// Softmax over the last dimension, max-shifted per row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x, "softmax")?;
        let src = self.value(x);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Softmax(x.0), rg))
    }

    /// Log-softmax over the last dimension, max-shifted per row.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x, "log_softmax")?;
        let src = self.value(x);
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::LogSoftmax(x.0), rg))
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let n = self.last_dim(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(shape_err("layer_norm", self.value(x).shape(), self.value(gamma).shape()));
        }
        let src = self.value(x);
        let rows = src.numel() / n;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let nr = R::lit(n as f64);
        for row in src.data().chunks(n) {
            let mean = row.iter().copied().sum::<R>() / nr;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / nr;
            let r = R::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat
            .chunks(n)
            .flat_map(|row| row.iter().enumerate().map(move |(j, &h)| h * g[j] + b[j]))
            .collect();
        let value = Tensor::new(src.shape(), data)?;
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, rg))
    }

    /// Valid (unpadded) 2-D convolution on NHWC input with `[filters, kh, kw, channels]`
    /// weights, lowered to a single matrix product over im2col patches.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[3] || stride == 0 {
            return Err(shape_err("conv2d", sx, sw));
        }
        let (kh, kw) = (sw[1], sw[2]);
        if sx[1] < kh || sx[2] < kw {
            return Err(shape_err("conv2d", sx, sw));
        }
        if self.value(b).numel() != sw[0] {
            return Err(shape_err("conv2d bias", sw, self.value(b).shape()));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            channels: sx[3],
            filters: sw[0],
            kh,
            kw,
            stride,
            out_h: (sx[1] - kh) / stride + 1,
            out_w: (sx[2] - kw) / stride + 1,
        };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.filters], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            geom,
        };
        Ok(self.push(value, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<R>() / R::lit(v.numel() as f64);
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Sums a `[rows, n]` value over its last dimension into `[rows]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim(x, "sum_cols")?;
        let src = self.value(x);
        let data: Vec<R> = src.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let len = data.len();
        let value = Tensor::new(&[len], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::SumCols(x.0), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Columns `start..end` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("{s:?} cols {start}..{end}"),
            ));
        }
        let data = src
            .data()
            .chunks(s[1])
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = Tensor::new(&[s[0], end - start], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::SliceCols { x: x.0, start, end }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err("concat_cols", sa, sb));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for (ra, rb) in va.data().chunks(sa[1]).zip(vb.data().chunks(sb[1])) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(&[sa[0], sa[1] + sb[1]], data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::ConcatCols { a: a.0, b: b.0 }, rg))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let s = src.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("pick", format!("{s:?} with {} indices", idx.len())));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| src.data()[r * s[1] + i])
            .collect();
        let value = Tensor::new(&[idx.len()], data)?;
        let rg = self.rg(x.0);
        Ok(self.push(value, Op::Pick { x: x.0, idx: idx.to_vec() }, rg))
    }

    /// `q W kᵀ`: entry `(b, l)` is `q_bᵀ W k_l`.
    pub fn bilinear(&mut self, q: Var, w: Var, k: Var) -> Result<Var> {
        let qw = self.matmul(q, w)?;
        self.matmul_t(qw, k, false, true)
    }

    /// Reparameterised Gaussian draw `mu + exp(log_std) * noise`; the noise is
    /// recorded as a constant so gradients flow through the mean and scale.
    pub fn gaussian_rsample(&mut self, mu: Var, log_std: Var, noise: Tensor<R>) -> Result<Var> {
        let eps = self.constant(noise);
        let std = self.exp(log_std);
        let scaled = self.mul(std, eps)?;
        self.add(mu, scaled)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.0] = Some(vec![R::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .filter(|((_, rg), _)| *rg)
            .map(|((id, _), v)| (*id, v.0))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<R>>], i: usize) -> Option<&'g mut Vec<R>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.numel();
        Some(grads[i].get_or_insert_with(|| vec![R::zero(); n]))
    }

    fn val(&self, i: usize) -> &[R] {
        self.nodes[i].value.data()
    }

    fn backprop_node(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if let Some(da) = self.slot(grads, a) {
                    if ta {
                        gemm(k, n, m, self.val(b), tb, g, true, da, true);
                    } else {
                        gemm(m, n, k, g, false, self.val(b), !tb, da, true);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    if tb {
                        gemm(n, m, k, g, true, self.val(a), ta, db, true);
                    } else {
                        gemm(k, m, n, self.val(a), !ta, g, false, db, true);
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, b) {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(self.val(b)) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(self.val(a)) {
                        *d += gi * x;
                    }
                }
            }
            &Op::Minimum(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                if let Some(da) = self.slot(grads, a) {
                    for i in 0..g.len() {
                        if va[i] <= vb[i] {
                            da[i] += g[i];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for i in 0..g.len() {
                        if va[i] > vb[i] {
                            db[i] += g[i];
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    add_into(dx, g);
                }
            }
            &Op::MulScalar { x, s } => {
                let c = self.val(s)[0];
                if let Some(dx) = self.slot(grads, x) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
                if let Some(ds) = self.slot(grads, s) {
                    ds[0] += g.iter().zip(self.val(x)).map(|(&gi, &v)| gi * v).sum::<R>();
                }
            }
            &Op::Relu(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(self.val(x)) {
                        if v > R::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gi * (R::one() - y * y);
                    }
                }
            }
            &Op::Exp(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gi * y;
                    }
                }
            }
            &Op::Log(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(self.val(x)) {
                        *d += gi / v;
                    }
                }
            }
            &Op::Square(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let two = R::lit(2.0);
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(self.val(x)) {
                        *d += gi * two * v;
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, gr), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: R = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = self.slot(grads, x) {
                    for ((d, gr), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: R = gr.iter().copied().sum();
                        for j in 0..n {
                            d[j] += gr[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.nodes[*gamma].value.numel();
                let gm = self.val(*gamma);
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * h[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nr = R::lit(n as f64);
                    for (r, ((d, gr), h)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_dh = R::zero();
                        let mut mean_dh_h = R::zero();
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh /= nr;
                        mean_dh_h /= nr;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            d[j] += rstd[r] * (dh - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if let Some(dw) = self.slot(grads, *w) {
                    conv_backward_weight(self.val(*x), g, geom, dw);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(geom.filters) {
                        add_into(db, row);
                    }
                }
                if self.nodes[*x].requires_grad {
                    let w = self.val(*w).to_vec();
                    let dx = self.slot(grads, *x).expect("requires grad");
                    conv_backward_input(g, &w, geom, dx);
                }
            }
            &Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let s = g[0] / R::lit(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += s;
                    }
                }
            }
            &Op::SumCols(x) => {
                if let Some(dx) = self.slot(grads, x) {
                    let n = dx.len() / g.len();
                    for (row, &gi) in dx.chunks_mut(n).zip(g) {
                        for d in row {
                            *d += gi;
                        }
                    }
                }
            }
            &Op::SliceCols { x, start, end } => {
                let n = self.nodes[x].value.shape()[1];
                let w = end - start;
                if let Some(dx) = self.slot(grads, x) {
                    for (row, gr) in dx.chunks_mut(n).zip(g.chunks(w)) {
                        add_into(&mut row[start..end], gr);
                    }
                }
            }
            &Op::ConcatCols { a, b } => {
                let na = self.nodes[a].value.shape()[1];
                let nb = self.nodes[b].value.shape()[1];
                if let Some(da) = self.slot(grads, a) {
                    for (row, gr) in da.chunks_mut(na).zip(g.chunks(na + nb)) {
                        add_into(row, &gr[..na]);
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    for (row, gr) in db.chunks_mut(nb).zip(g.chunks(na + nb)) {
                        add_into(row, &gr[na..]);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let n = self.nodes[*x].value.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (&i, &gi)) in idx.iter().zip(g).enumerate() {
                        dx[r * n + i] += gi;
                    }
                }
            }
        }
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut total = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<R>().ln() + max;
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// `a += v · x`, elementwise.
#[inline(always)]
fn axpy<R: Real>(acc: &mut [R], v: R, x: &[R]) {
    let mut ac = acc.chunks_exact_mut(8);
    let mut xc = x.chunks_exact(8);
    for (a, b) in (&mut ac).zip(&mut xc) {
        let a: &mut [R; 8] = a.try_into().expect("block of 8");
        let b: &[R; 8] = b.try_into().expect("block of 8");
        for i in 0..8 {
            a[i] += v * b[i];
        }
    }
    for (a, &b) in ac.into_remainder().iter_mut().zip(xc.remainder()) {
        *a += v * b;
    }
}

/// `[F, kh, kw, C]` weights reordered to `[kh·kw·C, F]` so the filter axis is
/// contiguous.
fn filters_last<R: Real>(w: &[R], filters: usize) -> Vec<R> {
    let patch = w.len() / filters;
    let mut out = vec![R::zero(); w.len()];
    for f in 0..filters {
        for p in 0..patch {
            out[p * filters + f] = w[f * patch + p];
        }
    }
    out
}

/// Start of the input window row `ky` for output pixel `(oy, ox)` of image `b`.
#[inline(always)]
fn window_row(g: &ConvGeom, b: usize, oy: usize, ox: usize, ky: usize) -> usize {
    ((b * g.height + oy * g.stride + ky) * g.width + ox * g.stride) * g.channels
}

fn conv_forward<R: Real>(x: &[R], w: &[R], bias: &[R], g: &ConvGeom) -> Vec<R> {
    match g.filters {
        8 => conv_forward_fixed::<R, 8>(x, w, bias, g),
        16 => conv_forward_fixed::<R, 16>(x, w, bias, g),
        32 => conv_forward_fixed::<R, 32>(x, w, bias, g),
        _ => conv_forward_any(x, w, bias, g),
    }
}

/// Filter count known at compile time, so the accumulator stays in registers.
fn conv_forward_fixed<R: Real, const F: usize>(x: &[R], w: &[R], bias: &[R], g: &ConvGeom) -> Vec<R> {
    let wt = filters_last(w, F);
    let wt: Vec<[R; F]> = wt.chunks_exact(F).map(|c| c.try_into().expect("filter block")).collect();
    let span = g.kw * g.channels;
    let mut out = vec![R::zero(); g.rows() * F];
    let mut rows = out.chunks_exact_mut(F);
    let bias: [R; F] = bias.try_into().expect("bias length");
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias;
                for ky in 0..g.kh {
                    let start = window_row(g, b, oy, ox, ky);
                    let wrows = &wt[ky * span..(ky + 1) * span];
                    for (&v, wr) in x[start..start + span].iter().zip(wrows) {
                        for i in 0..F {
                            acc[i] += v * wr[i];
                        }
                    }
                }
                rows.next().expect("output row").copy_from_slice(&acc);
            }
        }
    }
    out
}

fn conv_forward_any<R: Real>(x: &[R], w: &[R], bias: &[R], g: &ConvGeom) -> Vec<R> {
    let f = g.filters;
    let wt = filters_last(w, f);
    let span = g.kw * g.channels;
    let mut out = vec![R::zero(); g.rows() * f];
    let mut rows = out.chunks_mut(f);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let acc = rows.next().expect("output row");
                acc.copy_from_slice(bias);
                for ky in 0..g.kh {
                    let start = window_row(g, b, oy, ox, ky);
                    let wrows = &wt[ky * span * f..(ky + 1) * span * f];
                    for (&v, wr) in x[start..start + span].iter().zip(wrows.chunks_exact(f)) {
                        axpy(acc, v, wr);
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_weight<R: Real>(x: &[R], dout: &[R], g: &ConvGeom, dw: &mut [R]) {
    match g.filters {
        8 => conv_backward_weight_fixed::<R, 8>(x, dout, g, dw),
        16 => conv_backward_weight_fixed::<R, 16>(x, dout, g, dw),
        32 => conv_backward_weight_fixed::<R, 32>(x, dout, g, dw),
        _ => conv_backward_weight_any(x, dout, g, dw),
    }
}

fn conv_backward_weight_fixed<R: Real, const F: usize>(x: &[R], dout: &[R], g: &ConvGeom, dw: &mut [R]) {
    let span = g.kw * g.channels;
    let patch = g.patch();
    let mut dwt = vec![[R::zero(); F]; patch];
    let mut rows = dout.chunks_exact(F);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d: &[R; F] = rows.next().expect("output row").try_into().expect("filter block");
                for ky in 0..g.kh {
                    let start = window_row(g, b, oy, ox, ky);
                    let drows = &mut dwt[ky * span..(ky + 1) * span];
                    for (&v, dr) in x[start..start + span].iter().zip(drows) {
                        for i in 0..F {
                            dr[i] += v * d[i];
                        }
                    }
                }
            }
        }
    }
    for (p, row) in dwt.iter().enumerate() {
        for (fi, &v) in row.iter().enumerate() {
            dw[fi * patch + p] += v;
        }
    }
}

fn conv_backward_weight_any<R: Real>(x: &[R], dout: &[R], g: &ConvGeom, dw: &mut [R]) {
    let f = g.filters;
    let span = g.kw * g.channels;
    let mut dwt = vec![R::zero(); dw.len()];
    let mut rows = dout.chunks_exact(f);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = rows.next().expect("output row");
                for ky in 0..g.kh {
                    let start = window_row(g, b, oy, ox, ky);
                    let drows = &mut dwt[ky * span * f..(ky + 1) * span * f];
                    for (&v, dr) in x[start..start + span].iter().zip(drows.chunks_exact_mut(f)) {
                        axpy(dr, v, d);
                    }
                }
            }
        }
    }
    let patch = g.patch();
    for fi in 0..f {
        for p in 0..patch {
            dw[fi * patch + p] += dwt[p * f + fi];
        }
    }
}

/// Input gradient: one matrix product into patch space, then scattered back
/// onto the overlapping windows.
fn conv_backward_input<R: Real>(dout: &[R], w: &[R], g: &ConvGeom, dx: &mut [R]) {
    let (rows, patch, filters) = (g.rows(), g.patch(), g.filters);
    let mut dcol = vec![R::zero(); rows * patch];
    gemm(rows, filters, patch, dout, false, w, false, &mut dcol, false);
    let span = g.kw * g.channels;
    let mut src = dcol.chunks_exact(patch);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let d = src.next().expect("patch row");
                for ky in 0..g.kh {
                    let start = window_row(g, b, oy, ox, ky);
                    add_into(&mut dx[start..start + span], &d[ky * span..(ky + 1) * span]);
                }
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    params: HashMap<ParamId, usize>,
}

impl<R: Real> Gradients<R> {
    /// Gradient with respect to a recorded leaf, if one reached it.
    pub fn get(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn of_param(&self, p: &Param<R>) -> Option<&[R]> {
        self.params.get(&p.id()).and_then(|&i| self.grads[i].as_deref())
    }

    /// Adds the gradient of each trainable-bound parameter into `param.grad`.
    pub fn accumulate(&self, params: &mut [&mut Param<R>]) {
        for p in params.iter_mut() {
            let Some(&i) = self.params.get(&p.id()) else { continue };
            let n = p.value.numel();
            let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            match &self.grads[i] {
                Some(g) => add_into(grad.data_mut(), g),
                None => debug_assert_eq!(grad.numel(), n),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(3));
        let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_output_size_84_stride_2() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 84, 84, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 41, 41, 1]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 image 4x4x2, 2 filters 2x2, stride 2
        let xs: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..16).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4, 4, 2], &xs));
        let w = tape.constant(t(&[2, 2, 2, 2], &ws));
        let b = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = tape.conv2d(x, w, b, 2).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        for oy in 0..2 {
            for ox in 0..2 {
                for f in 0..2 {
                    let mut s = [0.5, -0.5][f];
                    for ky in 0..2 {
                        for kx in 0..2 {
                            for c in 0..2 {
                                let xi = ((oy * 2 + ky) * 4 + ox * 2 + kx) * 2 + c;
                                let wi = ((f * 2 + ky) * 2 + kx) * 2 + c;
                                s += xs[xi] * ws[wi];
                            }
                        }
                    }
                    let got = out.data()[(oy * 2 + ox) * 2 + f];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 5.0, 7.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn shared_parameter_bound_once() {
        let p = Param::<f64>::new("p", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let a = tape.bind(&p, true);
        let b = tape.bind(&p, true);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.of_param(&p).unwrap(), &[4.0]);
    }

    #[test]
    fn repeated_accumulation_sums() {
        let mut p = Param::<f64>::new("p", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.bind(&p, true);
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        g.accumulate(&mut [&mut p]);
        let g2 = tape.backward(y).unwrap();
        g2.accumulate(&mut [&mut p]);
        assert_eq!(p.grad.as_ref().unwrap().data(), &[12.0]);
    }

    #[test]
    fn frozen_binding_receives_no_gradient() {
        let p = Param::<f64>::new("p", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.bind(&p, false);
        let y = tape.square(x);
        assert!(!tape.requires_grad(y));
        let g = tape.backward(y).unwrap();
        assert!(g.of_param(&p).is_none());
    }
}
