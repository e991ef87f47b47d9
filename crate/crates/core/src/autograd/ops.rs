//! Differentiable operations and their vector-Jacobian products.

use super::conv::{self, ConvGeom, UpGeom};
use super::gemm::{gemm, Mat, Precision};
use super::{Node, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sum(usize),
    Mean(usize),
    Broadcast(usize),
    Reshape(usize),
    ScaleAxis { x: usize, v: usize, axis: usize },
    GatherRows { v: usize, idx: Vec<usize> },
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeom, cols: Vec<f64> },
    UpConv2x { input: usize, kernel: usize, bias: usize, geom: UpGeom },
    BatchNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Prelu { x: usize, alpha: usize },
    Concat { a: usize, b: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Matmul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::ScaleAxis { .. } => "scale_axis",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::UpConv2x { .. } => "up_conv2x",
            Op::BatchNorm { train: true, .. } => "batch_norm_train",
            Op::BatchNorm { train: false, .. } => "batch_norm_eval",
            Op::Prelu { .. } => "prelu",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Matmul(..) => "matmul",
            Op::Linear { .. } => "linear",
        }
    }

    /// Elements saved for backward beyond the node's own output.
    pub fn saved_len(&self) -> usize {
        match self {
            Op::Conv2d { cols, .. } => cols.len(),
            Op::BatchNorm { xhat, inv_std, .. } => xhat.len() + inv_std.len(),
            _ => 0,
        }
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// `(outer, channels, inner)` for a reduction over axis 1 of `[N, C, ...]`.
fn channel_layout(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.ndim() < 2 {
        return Err(Error::shape(op, format!("expected [N, C, ...], got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1], t.spatial_len()))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn emit(&self, value: Tensor, op: Op, parents: &[Var<'t>]) -> Var<'t> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.tape.push(value, op, requires_grad)
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, make: fn(usize, usize) -> Op) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        check_same(op, &a, &b)?;
        let out = zip(&a, &b, f);
        Ok(self.emit(out, make(self.id, other.id), &[self, other]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.binary(other, "div", |x, y| x / y, Op::Div)?;
        out.value().ensure_finite("div")?;
        Ok(out)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x * c);
        Ok(self.emit(out, Op::Scale(self.id, c), &[self]))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x + c);
        Ok(self.emit(out, Op::AddConst(self.id), &[self]))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::exp);
        out.ensure_finite("exp")?;
        Ok(self.emit(out, Op::Exp(self.id), &[self]))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        Ok(self.emit(v.map(f64::ln), Op::Log(self.id), &[self]))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let out = self.value().map(sigmoid);
        Ok(self.emit(out, Op::Sigmoid(self.id), &[self]))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let out = self.value().map(f64::tanh);
        Ok(self.emit(out, Op::Tanh(self.id), &[self]))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value().sum());
        Ok(self.emit(out, Op::Sum(self.id), &[self]))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        Ok(self.emit(out, Op::Mean(self.id), &[self]))
    }

    /// Expands a single-element tensor to `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let x = v.item().map_err(|_| Error::shape("broadcast", format!("source must be one element, is {:?}", v.shape())))?;
        Ok(self.emit(Tensor::full(shape, x), Op::Broadcast(self.id), &[self]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.emit(out, Op::Reshape(self.id), &[self]))
    }

    /// Multiplies every slice along `axis` by the matching entry of `v`.
    pub fn scale_axis(self, v: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (x, s) = (self.value(), v.value());
        if axis >= x.ndim() || s.shape() != [x.shape()[axis]] {
            return Err(Error::shape("scale_axis", format!("vector {:?} does not match axis {axis} of {:?}", s.shape(), x.shape())));
        }
        let dim = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product::<usize>().max(1);
        let mut out = x.data().to_vec();
        for (k, chunk) in out.chunks_mut(inner).enumerate() {
            let f = s.data()[k % dim];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.emit(out, Op::ScaleAxis { x: self.id, v: v.id, axis }, &[self, v]))
    }

    /// Per-sample channel scaling: `x[n, c, ...] · v[n, c]`.
    pub fn scale_channels(self, v: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 || v.shape() != shape[..2] {
            return Err(Error::shape("scale_channels", format!("scales {:?} for input {shape:?}", v.shape())));
        }
        let rows = shape[0] * shape[1];
        let y = self.reshape(&[rows, shape[2..].iter().product()])?.scale_axis(v.reshape(&[rows])?, 0)?;
        y.reshape(&shape)
    }

    /// Rows `idx[0], idx[1], …` of a `[M, C]` matrix, as `[idx.len(), C]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.ndim() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", format!("need a matrix and indices, got {:?}", v.shape())));
        }
        let (m, c) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("gather_rows: row {bad} out of range for {m} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.emit(out, Op::GatherRows { v: self.id, idx: idx.to_vec() }, &[self]))
    }

    /// 2-D convolution of `[N, Cin, H, W]` with `[Cout, Cin, kH, kW]`.
    pub fn conv2d(self, kernel: Var<'t>, bias: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let geom = ConvGeom::new(x.shape(), k.shape(), b.shape(), stride, pad)?;
        x.ensure_finite("conv2d")?;
        let (out, cols) = conv::conv2d_forward(self.tape.precision(), &geom, &x, &k, &b);
        let op = Op::Conv2d { input: self.id, kernel: kernel.id, bias: bias.id, geom, cols };
        Ok(self.emit(out, op, &[self, kernel, bias]))
    }

    /// 2× upsampling transposed convolution, kernel `[Cin, Cout, 2, 2]`.
    pub fn up_conv2x(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let geom = UpGeom::new(x.shape(), k.shape(), b.shape())?;
        let out = conv::up_conv2x_forward(self.tape.precision(), &geom, &x, &k, &b);
        let op = Op::UpConv2x { input: self.id, kernel: kernel.id, bias: bias.id, geom };
        Ok(self.emit(out, op, &[self, kernel, bias]))
    }

    /// Batch normalization with batch statistics over every axis but 1.
    ///
    /// Returns the output, the batch means and the unbiased batch variances
    /// (for running-statistic updates).
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        let (n, c, s) = channel_layout("batch_norm", &x)?;
        check_channel_params("batch_norm", c, &gamma.value(), &beta.value())?;
        let m = n * s;
        if m < 2 {
            return Err(Error::invalid("batch_norm: training mode needs more than one value per channel"));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let slice = &x.data()[(b * c + ch) * s..(b * c + ch + 1) * s];
                mean[ch] += slice.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for b in 0..n {
            for ch in 0..c {
                let slice = &x.data()[(b * c + ch) * s..(b * c + ch + 1) * s];
                var[ch] += slice.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| v / (m - 1) as f64).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(gamma, beta, &mean, inv_std, true)?;
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], var: &[f64], eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (_, c, _) = channel_layout("batch_norm", &x)?;
        check_channel_params("batch_norm", c, &gamma.value(), &beta.value())?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats length {} for {c} channels", mean.len())));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(gamma, beta, mean, inv_std, false)
    }

    fn normalize(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var<'t>> {
        let x = self.value();
        let (g, bt) = (gamma.value(), beta.value());
        let (n, c, s) = channel_layout("batch_norm", &x)?;
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * s..(b * c + ch + 1) * s;
                for i in range {
                    let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g.data()[ch] * h + bt.data()[ch];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::BatchNorm { input: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std, train };
        Ok(self.emit(out, op, &[self, gamma, beta]))
    }

    /// `x` where positive, `alpha·x` elsewhere; `alpha` is per channel or a
    /// single shared slope.
    pub fn prelu(self, alpha: Var<'t>) -> Result<Var<'t>> {
        let (x, a) = (self.value(), alpha.value());
        let (c, s) = prelu_layout(&x, &a)?;
        let mut out = x.data().to_vec();
        for (i, plane) in out.chunks_mut(s).enumerate() {
            let av = a.data()[i % c];
            plane.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { av * *v });
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.emit(out, Op::Prelu { x: self.id, alpha: alpha.id }, &[self, alpha]))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (na, ca, sa) = channel_layout("concat", &a)?;
        let (nb, cb, sb) = channel_layout("concat", &b)?;
        if na != nb || a.shape()[2..] != b.shape()[2..] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        debug_assert_eq!(sa, sb);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..na {
            data.extend_from_slice(&a.data()[n * ca * sa..(n + 1) * ca * sa]);
            data.extend_from_slice(&b.data()[n * cb * sb..(n + 1) * cb * sb]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] = ca + cb;
        Ok(self.emit(Tensor::from_parts(shape, data), Op::Concat { a: self.id, b: other.id }, &[self, other]))
    }

    /// Softmax over axis 1, stabilized by subtracting the per-voxel maximum.
    pub fn softmax_channel(self) -> Result<Var<'t>> {
        let out = softmax_like(&self.value(), false)?;
        Ok(self.emit(out, Op::Softmax(self.id), &[self]))
    }

    pub fn log_softmax_channel(self) -> Result<Var<'t>> {
        let out = softmax_like(&self.value(), true)?;
        Ok(self.emit(out, Op::LogSoftmax(self.id), &[self]))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.tape.precision(), m, k, n, Mat::n(a.data()), Mat::n(b.data()), &mut out, false);
        Ok(self.emit(Tensor::from_parts(vec![m, n], out), Op::Matmul(self.id, other.id), &[self, other]))
    }

    /// Affine map `x·wᵀ + b` with `x: [m, k]`, `w: [n, k]`, `b: [n]`.
    pub fn linear(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        if x.ndim() != 2 || wv.ndim() != 2 || x.shape()[1] != wv.shape()[1] || bv.shape() != [wv.shape()[0]] {
            return Err(Error::shape("linear", format!("x {:?}, w {:?}, b {:?}", x.shape(), wv.shape(), bv.shape())));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], wv.shape()[0]);
        let mut out: Vec<f64> = (0..m).flat_map(|_| bv.data().iter().copied()).collect();
        gemm(self.tape.precision(), m, k, n, Mat::n(x.data()), Mat::t(wv.data()), &mut out, true);
        Ok(self.emit(Tensor::from_parts(vec![m, n], out), Op::Linear { x: self.id, w: w.id, b: b.id }, &[self, w, b]))
    }
}

fn check_channel_params(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(op, format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape())));
    }
    Ok(())
}

/// `(channels, inner)` used to index `alpha` for a PReLU input.
fn prelu_layout(x: &Tensor, alpha: &Tensor) -> Result<(usize, usize)> {
    match alpha.shape() {
        [1] => Ok((1, x.len().max(1))),
        [c] if x.ndim() >= 2 && x.shape()[1] == *c => Ok((*c, x.spatial_len())),
        _ => Err(Error::shape("prelu", format!("alpha {:?} not broadcastable to {:?}", alpha.shape(), x.shape()))),
    }
}

fn softmax_like(x: &Tensor, log: bool) -> Result<Tensor> {
    let (n, c, s) = channel_layout("softmax", x)?;
    if c < 2 {
        return Err(Error::shape("softmax", "need at least two channels"));
    }
    let mut out = vec![0.0; x.len()];
    let d = x.data();
    for b in 0..n {
        let base = b * c * s;
        for v in 0..s {
            let max = (0..c).map(|ch| d[base + ch * s + v]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (d[base + ch * s + v] - max).exp()).sum();
            let lz = z.ln();
            for ch in 0..c {
                let i = base + ch * s + v;
                out[i] = if log { d[i] - max - lz } else { (d[i] - max).exp() / z };
            }
        }
    }
    let out = Tensor::from_parts(x.shape().to_vec(), out);
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Vector-Jacobian products of `op` given the upstream gradient `g`.
pub(crate) fn backward(
    op: &Op,
    nodes: &[Node],
    prec: Precision,
    out: &Tensor,
    g: &Tensor,
    needs: &dyn Fn(usize) -> bool,
) -> Vec<(usize, Tensor)> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let mut res = Vec::new();
    let mut push = |id: usize, t: Tensor| {
        if needs(id) {
            res.push((id, t));
        }
    };
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            push(a, g.clone());
            push(b, g.clone());
        }
        Op::Sub(a, b) => {
            push(a, g.clone());
            push(b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(a) {
                push(a, zip(g, val(b), |gv, bv| gv * bv));
            }
            if needs(b) {
                push(b, zip(g, val(a), |gv, av| gv * av));
            }
        }
        Op::Div(a, b) => {
            if needs(a) {
                push(a, zip(g, val(b), |gv, bv| gv / bv));
            }
            if needs(b) {
                // d(a/b)/db = -out / b
                let t = zip(out, val(b), |o, bv| -o / bv);
                push(b, zip(g, &t, |gv, tv| gv * tv));
            }
        }
        Op::Scale(a, c) => push(a, g.map(|v| v * c)),
        Op::AddConst(a) => push(a, g.clone()),
        Op::Exp(a) => push(a, zip(g, out, |gv, o| gv * o)),
        Op::Log(a) => push(a, zip(g, val(a), |gv, x| gv / x)),
        Op::Sigmoid(a) => push(a, zip(g, out, |gv, o| gv * o * (1.0 - o))),
        Op::Tanh(a) => push(a, zip(g, out, |gv, o| gv * (1.0 - o * o))),
        Op::Sum(a) => push(a, Tensor::full(val(a).shape(), g.data()[0])),
        Op::Mean(a) => {
            let x = val(a);
            push(a, Tensor::full(x.shape(), g.data()[0] / x.len() as f64));
        }
        Op::Broadcast(a) => push(a, Tensor::full(val(a).shape(), g.sum())),
        Op::Reshape(a) => push(a, Tensor::from_parts(val(a).shape().to_vec(), g.data().to_vec())),
        Op::ScaleAxis { x, v, axis } => {
            let (xv, vv) = (val(x), val(v));
            let dim = xv.shape()[axis];
            let inner: usize = xv.shape()[axis + 1..].iter().product();
            let inner = inner.max(1);
            if needs(x) {
                let mut d = g.data().to_vec();
                for (k, chunk) in d.chunks_mut(inner).enumerate() {
                    let f = vv.data()[k % dim];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                push(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            if needs(v) {
                let mut d = vec![0.0; dim];
                for (k, (gc, xc)) in g.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                    d[k % dim] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                push(v, Tensor::from_parts(vec![dim], d));
            }
        }
        Op::GatherRows { v, ref idx } => {
            let c = val(v).shape()[1];
            let mut d = vec![0.0; val(v).len()];
            for (r, &i) in idx.iter().enumerate() {
                for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *a += b;
                }
            }
            push(v, Tensor::from_parts(val(v).shape().to_vec(), d));
        }
        Op::Conv2d { input, kernel, bias, ref geom, ref cols } => {
            let need = [needs(input), needs(kernel), needs(bias)];
            let grads = conv::conv2d_backward(prec, geom, val(kernel), cols, g, need);
            push_grads(&mut push, [input, kernel, bias], grads);
        }
        Op::UpConv2x { input, kernel, bias, ref geom } => {
            let need = [needs(input), needs(kernel), needs(bias)];
            let grads = conv::up_conv2x_backward(prec, geom, val(input), val(kernel), g, need);
            push_grads(&mut push, [input, kernel, bias], grads);
        }
        Op::BatchNorm { input, gamma, beta, ref xhat, ref inv_std, train } => {
            let x = val(input);
            let (n, c, s) = (x.shape()[0], x.shape()[1], x.spatial_len());
            let gam = val(gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                        dgamma[ch] += g.data()[i] * xhat[i];
                        dbeta[ch] += g.data()[i];
                    }
                }
            }
            if needs(input) {
                let mut dx = vec![0.0; x.len()];
                let m = (n * s) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                            let dxhat = g.data()[i] * gam[ch];
                            dx[i] = if train {
                                // sum(dxhat) = gamma·dbeta, sum(dxhat·xhat) = gamma·dgamma
                                inv_std[ch] / m * (m * dxhat - gam[ch] * dbeta[ch] - xhat[i] * gam[ch] * dgamma[ch])
                            } else {
                                dxhat * inv_std[ch]
                            };
                        }
                    }
                }
                push(input, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            push(gamma, Tensor::from_parts(vec![c], dgamma));
            push(beta, Tensor::from_parts(vec![c], dbeta));
        }
        Op::Prelu { x, alpha } => {
            let (xv, av) = (val(x), val(alpha));
            let (c, s) = prelu_layout(xv, av).expect("validated in forward");
            if needs(x) {
                let mut d = g.data().to_vec();
                for (i, (dp, xp)) in d.chunks_mut(s).zip(xv.data().chunks(s)).enumerate() {
                    let a = av.data()[i % c];
                    for (dv, &v) in dp.iter_mut().zip(xp) {
                        if v <= 0.0 {
                            *dv *= a;
                        }
                    }
                }
                push(x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            if needs(alpha) {
                let mut d = vec![0.0; av.len()];
                for (i, (gp, xp)) in g.data().chunks(s).zip(xv.data().chunks(s)).enumerate() {
                    d[i % c] += xp.iter().zip(gp).map(|(&v, &gv)| if v <= 0.0 { gv * v } else { 0.0 }).sum::<f64>();
                }
                push(alpha, Tensor::from_parts(av.shape().to_vec(), d));
            }
        }
        Op::Concat { a, b } => {
            let (av, bv) = (val(a), val(b));
            let n = av.shape()[0];
            let (sa, sb) = (av.len() / n, bv.len() / n);
            let mut da = Vec::with_capacity(av.len());
            let mut db = Vec::with_capacity(bv.len());
            for i in 0..n {
                let row = &g.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
                da.extend_from_slice(&row[..sa]);
                db.extend_from_slice(&row[sa..]);
            }
            push(a, Tensor::from_parts(av.shape().to_vec(), da));
            push(b, Tensor::from_parts(bv.shape().to_vec(), db));
        }
        Op::Softmax(a) | Op::LogSoftmax(a) => {
            let log = matches!(op, Op::LogSoftmax(_));
            let (n, c, s) = (out.shape()[0], out.shape()[1], out.spatial_len());
            let mut dx = vec![0.0; out.len()];
            for b in 0..n {
                let base = b * c * s;
                for v in 0..s {
                    let idx = |ch: usize| base + ch * s + v;
                    if log {
                        let gsum: f64 = (0..c).map(|ch| g.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = g.data()[idx(ch)] - out.data()[idx(ch)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..c).map(|ch| g.data()[idx(ch)] * out.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = out.data()[idx(ch)] * (g.data()[idx(ch)] - dot);
                        }
                    }
                }
            }
            push(a, Tensor::from_parts(out.shape().to_vec(), dx));
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(a) {
                let mut d = vec![0.0; m * k];
                gemm(prec, m, n, k, Mat::n(g.data()), Mat::t(bv.data()), &mut d, false);
                push(a, Tensor::from_parts(vec![m, k], d));
            }
            if needs(b) {
                let mut d = vec![0.0; k * n];
                gemm(prec, k, m, n, Mat::t(av.data()), Mat::n(g.data()), &mut d, false);
                push(b, Tensor::from_parts(vec![k, n], d));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
            if needs(x) {
                let mut d = vec![0.0; m * k];
                gemm(prec, m, n, k, Mat::n(g.data()), Mat::n(wv.data()), &mut d, false);
                push(x, Tensor::from_parts(vec![m, k], d));
            }
            if needs(w) {
                let mut d = vec![0.0; n * k];
                gemm(prec, n, m, k, Mat::t(g.data()), Mat::n(xv.data()), &mut d, false);
                push(w, Tensor::from_parts(vec![n, k], d));
            }
            if needs(b) {
                let mut d = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                push(b, Tensor::from_parts(vec![n], d));
            }
        }
    }
    res
}

fn push_grads(push: &mut impl FnMut(usize, Tensor), ids: [usize; 3], grads: conv::ConvGrads) {
    if let Some(t) = grads.input {
        push(ids[0], t);
    }
    if let Some(t) = grads.kernel {
        push(ids[1], t);
    }
    if let Some(t) = grads.bias {
        push(ids[2], t);
    }
}
