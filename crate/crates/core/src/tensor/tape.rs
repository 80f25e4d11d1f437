use super::Tensor;
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
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Swish,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    GlobalAvg,
    Max2x2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    depthwise: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Elementwise(ElementwiseOp, Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    Activation(Activation, Var),
    GlobalAvg(Var),
    MaxPool(Var, Vec<usize>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    CrossEntropy(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn output(&mut self, shape: &[usize], data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = self.rg(inputs);
        Ok(self.push(t, op))
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let period = broadcast_period(ta.shape(), tb.shape())?;
        let bd = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % period];
                match kind {
                    ElementwiseOp::Add => x + y,
                    ElementwiseOp::Sub => x - y,
                    ElementwiseOp::Mul => x * y,
                }
            })
            .collect();
        let shape = ta.shape().to_vec();
        self.output(&shape, data, &[a, b], Op::Elementwise(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * s).collect();
        let shape = t.shape().to_vec();
        self.output(&shape, data, &[a], Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.output(&[m, n], out, &[a, b], Op::MatMul(a, b))
    }

    /// 2-D cross-correlation. `kernel` is `[F, C, kh, kw]`, or `[C, 1, kh, kw]`
    /// when `depthwise` is set.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidStride(stride));
        }
        let (ti, tk) = (self.value(input), self.value(kernel));
        let geom = conv_geometry(ti.shape(), tk.shape(), stride, padding, depthwise)?;
        let out = conv2d_forward(ti.data(), tk.data(), &geom);
        self.output(
            &[geom.n, geom.f, geom.oh, geom.ow],
            out,
            &[input, kernel],
            Op::Conv2d(input, kernel, geom),
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(0.0),
                Activation::Sigmoid => sigmoid(v),
                Activation::Swish => v * sigmoid(v),
            })
            .collect();
        let shape = t.shape().to_vec();
        self.output(&shape, data, &[x], Op::Activation(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Swish, x)
    }

    pub fn pool(&mut self, kind: Pool, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = nchw(t.shape())?;
        match kind {
            Pool::GlobalAvg => {
                let area = (h * w) as f64;
                let data = t
                    .data()
                    .chunks_exact(h * w)
                    .map(|plane| plane.iter().sum::<f64>() / area)
                    .collect();
                self.output(&[n, c, 1, 1], data, &[x], Op::GlobalAvg(x))
            }
            Pool::Max2x2 => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(format!("max2x2 needs even dims, got {h}x{w}")));
                }
                let (oh, ow) = (h / 2, w / 2);
                let src = t.data();
                let mut data = Vec::with_capacity(n * c * oh * ow);
                let mut argmax = Vec::with_capacity(n * c * oh * ow);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = base + 2 * i * w + 2 * j;
                            for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * i + di) * w + 2 * j + dj;
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            data.push(src[best]);
                            argmax.push(best);
                        }
                    }
                }
                self.output(&[n, c, oh, ow], data, &[x], Op::MaxPool(x, argmax))
            }
        }
    }

    /// Row-wise softmax over an `[N, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = matrix(t.shape())?;
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.output(&shape, data, &[x], Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.output(&[1], vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.output(&[1], vec![s], &[x], Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        self.output(shape, data, &[x], Op::Reshape(x))
    }

    /// Adds a per-channel bias `[C]` to an `[N, C, H, W]` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c, h, w) = nchw(tx.shape())?;
        if tb.shape() != [c] {
            return Err(Error::shape(format!("channel bias {:?} for {c} channels", tb.shape())));
        }
        let plane = h * w;
        let bd = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[(i / plane) % c])
            .collect();
        let shape = tx.shape().to_vec();
        self.output(&shape, data, &[x, bias], Op::ChannelBias(x, bias))
    }

    /// Scales each `(n, c)` plane of `x` by `gates[n, c]`; gates may be
    /// `[N, C]` or `[N, C, 1, 1]`.
    pub fn channel_scale(&mut self, x: Var, gates: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gates));
        let (n, c, h, w) = nchw(tx.shape())?;
        if tg.len() != n * c || tg.shape()[0] != n || tg.shape()[1] != c {
            return Err(Error::shape(format!(
                "gates {:?} for input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let plane = h * w;
        let gd = tg.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gd[i / plane])
            .collect();
        let shape = tx.shape().to_vec();
        self.output(&shape, data, &[x, gates], Op::ChannelScale(x, gates))
    }

    /// Mean over rows of `-sum_i p_i ln(y_i)`, with `y` clamped below at 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let tp = self.value(probs);
        let (n, c) = matrix(tp.shape())?;
        if targets.shape() != tp.shape() {
            return Err(Error::shape(format!(
                "targets {:?} vs predictions {:?}",
                targets.shape(),
                tp.shape()
            )));
        }
        let total: f64 = tp
            .data()
            .chunks_exact(c)
            .zip(targets.data().chunks_exact(c))
            .map(|(y, p)| row_cross_entropy(p, y))
            .sum();
        let loss = total / n as f64;
        let t = targets.data().to_vec();
        self.output(&[1], vec![loss], &[probs], Op::CrossEntropy(probs, t))
    }

    /// Populates gradients on every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.len()));
        }
        if !lt.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            self.nodes[id].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Elementwise(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let period = tb.len();
                if wants(*a) {
                    let ga = accum(grads, *a, ta.len());
                    match kind {
                        ElementwiseOp::Add | ElementwiseOp::Sub => {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                        }
                        ElementwiseOp::Mul => {
                            let bd = tb.data();
                            for (i, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                                *x += y * bd[i % period];
                            }
                        }
                    }
                }
                if wants(*b) {
                    let ad = ta.data();
                    let gb = accum(grads, *b, period);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % period] += match kind {
                            ElementwiseOp::Add => *y,
                            ElementwiseOp::Sub => -*y,
                            ElementwiseOp::Mul => y * ad[i],
                        };
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = accum(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    // dA = dC * B^T
                    let ga = accum(grads, *a, m * k);
                    let bd = tb.data();
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if wants(*b) {
                    // dB = A^T * dC
                    let gb = accum(grads, *b, k * n);
                    let ad = ta.data();
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (dst, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *dst += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d(input, kernel, geom) => {
                let (ti, tk) = (val(*input), val(*kernel));
                if wants(*input) {
                    let gi = accum(grads, *input, ti.len());
                    conv2d_backward_input(g, tk.data(), gi, geom);
                }
                if wants(*kernel) {
                    let gk = accum(grads, *kernel, tk.len());
                    conv2d_backward_kernel(g, ti.data(), gk, geom);
                }
            }
            Op::Activation(kind, x) => {
                let tx = val(*x);
                let out = node.value.data();
                let gx = accum(grads, *x, tx.len());
                for (i, (dst, gv)) in gx.iter_mut().zip(g).enumerate() {
                    let v = tx.data()[i];
                    let d = match kind {
                        Activation::Relu => {
                            if v > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Sigmoid => out[i] * (1.0 - out[i]),
                        Activation::Swish => {
                            let s = sigmoid(v);
                            s + v * s * (1.0 - s)
                        }
                    };
                    *dst += gv * d;
                }
            }
            Op::GlobalAvg(x) => {
                let tx = val(*x);
                let plane = tx.len() / g.len();
                let inv = 1.0 / plane as f64;
                let gx = accum(grads, *x, tx.len());
                for (i, dst) in gx.iter_mut().enumerate() {
                    *dst += g[i / plane] * inv;
                }
            }
            Op::MaxPool(x, argmax) => {
                let n = val(*x).len();
                let gx = accum(grads, *x, n);
                for (&src, gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let gx = accum(grads, *x, y.len());
                for ((yr, gr), dr) in y
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(gx.chunks_exact_mut(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accum(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = g[0] / n as f64;
                accum(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::Reshape(x) => {
                accum(grads, *x, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::ChannelBias(x, bias) => {
                let tx = val(*x);
                let c = tx.shape()[1];
                let plane = tx.shape()[2] * tx.shape()[3];
                if wants(*x) {
                    accum(grads, *x, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
                if wants(*bias) {
                    let gb = accum(grads, *bias, c);
                    for (pi, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[pi % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::ChannelScale(x, gates) => {
                let (tx, tg) = (val(*x), val(*gates));
                let plane = tx.shape()[2] * tx.shape()[3];
                if wants(*x) {
                    let gd = tg.data();
                    let gx = accum(grads, *x, tx.len());
                    for (i, (d, v)) in gx.iter_mut().zip(g).enumerate() {
                        *d += v * gd[i / plane];
                    }
                }
                if wants(*gates) {
                    let xd = tx.data();
                    let gg = accum(grads, *gates, tg.len());
                    for (pi, (gc, xc)) in g.chunks_exact(plane).zip(xd.chunks_exact(plane)).enumerate() {
                        gg[pi] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::CrossEntropy(probs, targets) => {
                let tp = val(*probs);
                let n = tp.shape()[0] as f64;
                let gp = accum(grads, *probs, tp.len());
                for (i, d) in gp.iter_mut().enumerate() {
                    let y = tp.data()[i];
                    if y > PROB_FLOOR {
                        *d -= g[0] * targets[i] / (y * n);
                    }
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Number of elements of `b` repeated along `a`, or an error when `b` does
/// not broadcast.
fn broadcast_period(a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b || b == [1] {
        return Ok(b.iter().product());
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(b.iter().product());
    }
    Err(Error::shape(format!("cannot broadcast {b:?} onto {a:?}")))
}

fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("expected NxCxHxW, got {shape:?}"))),
    }
}

fn matrix(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c)),
        _ => Err(Error::shape(format!("expected NxC, got {shape:?}"))),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn row_cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    -p.iter()
        .zip(y)
        .map(|(pi, yi)| pi * yi.clamp(PROB_FLOOR, 1.0).ln())
        .sum::<f64>()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (dst, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *dst += a_ip * bv;
            }
        }
    }
}

fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<ConvGeom> {
    let (n, c, h, w) = nchw(input)?;
    let (f, kc, kh, kw) = nchw(kernel)?;
    if depthwise {
        if f != c || kc != 1 {
            return Err(Error::shape(format!(
                "depthwise kernel {kernel:?} for {c} channels"
            )));
        }
    } else if kc != c {
        return Err(Error::shape(format!("kernel {kernel:?} for {c} input channels")));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (w + 2 * padding - kw) / stride + 1,
        stride,
        padding,
        depthwise,
    })
}

/// Output positions `o` with `0 <= o*stride + k - padding < size`.
fn valid_range(k: usize, size: usize, out: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let limit = (size + padding).saturating_sub(k); // o*stride < limit
    let hi = if limit == 0 { 0 } else { (limit - 1) / stride + 1 };
    (lo.min(out), hi.min(out))
}

/// Iterates every (output plane, input plane, kernel plane) triple the
/// convolution touches.
fn for_each_plane(g: &ConvGeom, mut body: impl FnMut(usize, usize, usize)) {
    for n in 0..g.n {
        for f in 0..g.f {
            let out_plane = (n * g.f + f) * g.oh * g.ow;
            if g.depthwise {
                let in_plane = (n * g.c + f) * g.h * g.w;
                body(out_plane, in_plane, f * g.kh * g.kw);
            } else {
                for c in 0..g.c {
                    let in_plane = (n * g.c + c) * g.h * g.w;
                    body(out_plane, in_plane, (f * g.c + c) * g.kh * g.kw);
                }
            }
        }
    }
}

fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.f * g.oh * g.ow];
    for_each_plane(g, |op, ip, kp| {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(ki, g.h, g.oh, g.stride, g.padding);
            for kj in 0..g.kw {
                let wv = kernel[kp + ki * g.kw + kj];
                let (ow_lo, ow_hi) = valid_range(kj, g.w, g.ow, g.stride, g.padding);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let orow = op + oh * g.ow;
                    let irow = ip + ih * g.w;
                    for ow in ow_lo..ow_hi {
                        let iw = ow * g.stride + kj - g.padding;
                        out[orow + ow] += wv * input[irow + iw];
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_input(gout: &[f64], kernel: &[f64], gin: &mut [f64], g: &ConvGeom) {
    for_each_plane(g, |op, ip, kp| {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(ki, g.h, g.oh, g.stride, g.padding);
            for kj in 0..g.kw {
                let wv = kernel[kp + ki * g.kw + kj];
                let (ow_lo, ow_hi) = valid_range(kj, g.w, g.ow, g.stride, g.padding);
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let orow = op + oh * g.ow;
                    let irow = ip + ih * g.w;
                    for ow in ow_lo..ow_hi {
                        let iw = ow * g.stride + kj - g.padding;
                        gin[irow + iw] += wv * gout[orow + ow];
                    }
                }
            }
        }
    });
}

fn conv2d_backward_kernel(gout: &[f64], input: &[f64], gk: &mut [f64], g: &ConvGeom) {
    for_each_plane(g, |op, ip, kp| {
        for ki in 0..g.kh {
            let (oh_lo, oh_hi) = valid_range(ki, g.h, g.oh, g.stride, g.padding);
            for kj in 0..g.kw {
                let (ow_lo, ow_hi) = valid_range(kj, g.w, g.ow, g.stride, g.padding);
                let mut s = 0.0;
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki - g.padding;
                    let orow = op + oh * g.ow;
                    let irow = ip + ih * g.w;
                    for ow in ow_lo..ow_hi {
                        let iw = ow * g.stride + kj - g.padding;
                        s += gout[orow + ow] * input[irow + iw];
                    }
                }
                gk[kp + ki * g.kw + kj] += s;
            }
        }
    });
}
