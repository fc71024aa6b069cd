use super::tensor::{matmul, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        stride: usize,
    },
    InstanceNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    AvgPool {
        input: Var,
        k: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    SpatialMean(Var),
    SpatialVar(Var),
    Gram(Var),
    FlipW(Var),
    Translate {
        input: Var,
        dx: isize,
        dy: isize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of primitive applications, swept in reverse by
/// [`Graph::backward`].
///
/// Nodes are stored in execution order, so every input of node `i` has an
/// index below `i`. Nodes that depend on no gradient-requiring leaf are
/// evaluated but skipped by the reverse sweep.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient accumulated into `v`; `None` when `v` does not require
    /// gradients or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W], got {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("conv2d", self.shape(input))?;
        let (o, ci, kh, kw) = nchw("conv2d", self.shape(weight))?;
        if ci != c {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {ci} input channels, input has {c}"),
            ));
        }
        if self.shape(bias) != [o] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{o}]", self.shape(bias))));
        }
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", "kernel larger than padded input or zero stride"));
        }
        let geo = ConvGeometry::new(c, h, w, kh, kw, pad, stride);
        let (ho, wo) = (geo.ho, geo.wo);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let p = ho * wo;
        let mut out = vec![T::zero(); n * o * p];
        let mut col = vec![T::zero(); geo.k() * p];
        for s in 0..n {
            geo.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut col);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            matmul(wt, false, &col, false, dst, o, geo.k(), p, false);
            for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                for v in chunk {
                    *v += b[oc];
                }
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        let value = Tensor::new([n, o, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                stride,
            },
            rg,
        ))
    }

    /// Per-plane normalization to zero mean and unit (biased) variance,
    /// without affine parameters.
    pub fn instance_norm2d(&mut self, input: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = nchw("instance_norm2d", self.shape(input))?;
        let p = h * w;
        let inv_p = T::one() / T::of(p as f64);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in x.chunks(p).zip(out.chunks_mut(p)) {
            let mean = src.iter().copied().sum::<T>() * inv_p;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_p;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { input, inv_std }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|x| if x < T::zero() { T::zero() } else { x });
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// Non-overlapping `k x k` mean pooling.
    pub fn avg_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = nchw("avg_pool2d", self.shape(input))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("spatial dims {h}x{w} not divisible by {k}"),
            ));
        }
        let (ho, wo) = (h / k, w / k);
        let scale = T::one() / T::of((k * k) as f64);
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * wo + xx / k] += src[y * w + xx];
                }
            }
            for v in dst.iter_mut() {
                *v *= scale;
            }
        }
        let rg = self.rg(&[input]);
        let value = Tensor::new([n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool { input, k }, rg))
    }

    /// `input * weight^T + bias` for `input: [N,D]`, `weight: [K,D]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = match *self.shape(input) {
            [n, d] => (n, d),
            ref s => return Err(Error::shape("linear", format!("input must be [N,D], got {s:?}"))),
        };
        let (k, dw) = match *self.shape(weight) {
            [k, dw] => (k, dw),
            ref s => return Err(Error::shape("linear", format!("weight must be [K,D], got {s:?}"))),
        };
        if d != dw || self.shape(bias) != [k] {
            return Err(Error::shape(
                "linear",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.shape(input),
                    self.shape(weight),
                    self.shape(bias)
                ),
            ));
        }
        let mut out = vec![T::zero(); n * k];
        matmul(self.value(input).data(), false, self.value(weight).data(), true, &mut out, n, d, k, false);
        let b = self.value(bias).data();
        for row in out.chunks_mut(k) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        let value = Tensor::new([n, k], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let value = softmax_last(self.value(input), false);
        let rg = self.rg(&[input]);
        self.push(value, Op::Softmax(input), rg)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, input: Var) -> Var {
        let value = softmax_last(self.value(input), true);
        let rg = self.rg(&[input]);
        self.push(value, Op::LogSoftmax(input), rg)
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over the leading axis: `[N, ...] -> [...]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows();
        let mut acc = vec![T::zero(); t.row_len()];
        for i in 0..n {
            for (s, &v) in acc.iter_mut().zip(t.row(i)) {
                *s += v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        for s in &mut acc {
            *s *= inv;
        }
        let shape = if t.shape().len() > 1 { t.shape()[1..].to_vec() } else { vec![1] };
        let value = Tensor::new(shape, acc).expect("row length matches trailing shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Keeps the leading axis and flattens the rest.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = [t.rows(), t.row_len()];
        self.reshape(a, &shape)
    }

    /// Per-(sample, channel) spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("spatial_mean", self.shape(a))?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SpatialMean(a), rg))
    }

    /// Per-(sample, channel) biased spatial variance: `[N,C,H,W] -> [N,C]`.
    pub fn spatial_var(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("spatial_var", self.shape(a))?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| {
                let m = p.iter().copied().sum::<T>() * inv;
                p.iter().map(|&x| (x - m) * (x - m)).sum::<T>() * inv
            })
            .collect();
        let value = Tensor::new([n, c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SpatialVar(a), rg))
    }

    /// Per-sample Gram matrix of channel maps: `[N,C,H,W] -> [N,C,C]`.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = nchw("gram", self.shape(a))?;
        let p = h * w;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * c * c];
        for s in 0..n {
            let phi = &x[s * c * p..(s + 1) * c * p];
            matmul(phi, false, phi, true, &mut out[s * c * c..(s + 1) * c * c], c, p, c, false);
        }
        let value = Tensor::new([n, c, c], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gram(a), rg))
    }

    /// Reverses the last (width) axis.
    pub fn flip_w(&mut self, a: Var) -> Result<Var> {
        let (_, _, _, w) = nchw("flip_w", self.shape(a))?;
        let value = flip_rows(self.value(a), w);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::FlipW(a), rg))
    }

    /// Shifts every plane by `dx` columns and `dy` rows with zero fill:
    /// `out[y][x] = in[y - dy][x - dx]`.
    pub fn translate(&mut self, a: Var, dx: isize, dy: isize) -> Result<Var> {
        let (_, _, h, w) = nchw("translate", self.shape(a))?;
        let src = self.value(a);
        let mut out = Tensor::zeros(src.shape().to_vec());
        shift_planes(src.data(), out.data_mut(), h, w, dx, dy);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Translate { input: a, dx, dy }, rg))
    }

    /// Reverse sweep from a scalar `root`. Gradients from multiple consumers
    /// of a value are summed.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_node = &self.nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root_node.requires_grad {
            grads[root.0] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign_slice(g.data()),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
                stride,
            } => {
                let xv = self.value(input);
                let wv = self.value(weight);
                let (n, c, h, w) = nchw("conv2d", xv.shape())?;
                let (o, _, kh, kw) = nchw("conv2d", wv.shape())?;
                let geo = ConvGeometry::new(c, h, w, kh, kw, pad, stride);
                let p = geo.ho * geo.wo;
                let k = geo.k();
                let gd = g.data();
                if self.wants(bias) {
                    let mut db = vec![T::zero(); o];
                    for s in 0..n {
                        for (oc, chunk) in gd[s * o * p..(s + 1) * o * p].chunks(p).enumerate() {
                            db[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, bias, Tensor::new([o], db)?);
                }
                let want_w = self.wants(weight);
                let want_x = self.wants(input);
                if want_w || want_x {
                    let mut dw = if want_w { vec![T::zero(); o * k] } else { Vec::new() };
                    let mut dx = if want_x { vec![T::zero(); xv.numel()] } else { Vec::new() };
                    let mut col = vec![T::zero(); k * p];
                    let xd = xv.data();
                    for s in 0..n {
                        let gs = &gd[s * o * p..(s + 1) * o * p];
                        if want_w {
                            geo.im2col(&xd[s * c * h * w..(s + 1) * c * h * w], &mut col);
                            matmul(gs, false, &col, true, &mut dw, o, p, k, true);
                        }
                        if want_x {
                            matmul(wv.data(), true, gs, false, &mut col, k, o, p, false);
                            geo.col2im(&col, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                        }
                    }
                    if want_w {
                        self.accumulate(grads, weight, Tensor::new(wv.shape().to_vec(), dw)?);
                    }
                    if want_x {
                        self.accumulate(grads, input, Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                }
            }
            Op::InstanceNorm { input, ref inv_std } => {
                let (_, _, h, w) = nchw("instance_norm2d", y.shape())?;
                let p = h * w;
                let inv_p = T::one() / T::of(p as f64);
                let mut dx = vec![T::zero(); y.numel()];
                for (((dst, gp), yp), &r) in dx
                    .chunks_mut(p)
                    .zip(g.data().chunks(p))
                    .zip(y.data().chunks(p))
                    .zip(inv_std)
                {
                    let mg = gp.iter().copied().sum::<T>() * inv_p;
                    let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_p;
                    for ((d, &gg), &yy) in dst.iter_mut().zip(gp).zip(yp) {
                        *d = r * (gg - mg - yy * mgy);
                    }
                }
                self.accumulate(grads, input, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Relu(input) => {
                let mut dx = g;
                for (d, &yy) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yy <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, input, dx);
            }
            Op::AvgPool { input, k } => {
                let xs = self.shape(input).to_vec();
                let (_, _, h, w) = nchw("avg_pool2d", &xs)?;
                let wo = w / k;
                let scale = T::one() / T::of((k * k) as f64);
                let mut dx = vec![T::zero(); xs.iter().product()];
                for (dst, gp) in dx.chunks_mut(h * w).zip(g.data().chunks((h / k) * wo)) {
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[yy * w + xx] = gp[(yy / k) * wo + xx / k] * scale;
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new(xs, dx)?);
            }
            Op::Linear { input, weight, bias } => {
                let xv = self.value(input);
                let wv = self.value(weight);
                let (n, d) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                if self.wants(input) {
                    let mut dx = vec![T::zero(); n * d];
                    matmul(g.data(), false, wv.data(), false, &mut dx, n, k, d, false);
                    self.accumulate(grads, input, Tensor::new([n, d], dx)?);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); k * d];
                    matmul(g.data(), true, xv.data(), false, &mut dw, k, n, d, false);
                    self.accumulate(grads, weight, Tensor::new([k, d], dw)?);
                }
                if self.wants(bias) {
                    let mut db = vec![T::zero(); k];
                    for row in g.data().chunks(k) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::new([k], db)?);
                }
            }
            Op::Softmax(input) => {
                let d = *y.shape().last().expect("non-empty shape");
                let mut dx = vec![T::zero(); y.numel()];
                for ((dst, gp), yp) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)) {
                    let dot = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>();
                    for ((o, &gg), &yy) in dst.iter_mut().zip(gp).zip(yp) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, input, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax(input) => {
                let d = *y.shape().last().expect("non-empty shape");
                let mut dx = vec![T::zero(); y.numel()];
                for ((dst, gp), yp) in dx.chunks_mut(d).zip(g.data().chunks(d)).zip(y.data().chunks(d)) {
                    let total = gp.iter().copied().sum::<T>();
                    for ((o, &gg), &yy) in dst.iter_mut().zip(gp).zip(yp) {
                        *o = gg - yy.exp() * total;
                    }
                }
                self.accumulate(grads, input, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.clone());
                }
                self.accumulate(grads, b, g);
            }
            Op::Sub(a, b) => {
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|x| -x));
                }
                self.accumulate(grads, a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let mut da = g.clone();
                    for (d, &bv) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *d *= bv;
                    }
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = g;
                    for (d, &av) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *d *= av;
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, a, g),
            Op::Square(a) => {
                let mut da = g;
                for (d, &x) in da.data_mut().iter_mut().zip(self.value(a).data()) {
                    *d *= x + x;
                }
                self.accumulate(grads, a, da);
            }
            Op::Sum(a) => {
                let s = self.shape(a).to_vec();
                self.accumulate(grads, a, Tensor::full(s, g.item()));
            }
            Op::MeanRows(a) => {
                let xs = self.value(a);
                let n = xs.rows();
                let inv = T::one() / T::of(n as f64);
                let row: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
                let mut data = Vec::with_capacity(xs.numel());
                for _ in 0..n {
                    data.extend_from_slice(&row);
                }
                self.accumulate(grads, a, Tensor::new(xs.shape().to_vec(), data)?);
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                self.accumulate(grads, a, g.reshape(s)?);
            }
            Op::SpatialMean(a) => {
                let xs = self.shape(a).to_vec();
                let (_, _, h, w) = nchw("spatial_mean", &xs)?;
                let p = h * w;
                let inv = T::one() / T::of(p as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, p));
                }
                self.accumulate(grads, a, Tensor::new(xs, dx)?);
            }
            Op::SpatialVar(a) => {
                let xv = self.value(a);
                let (_, _, h, w) = nchw("spatial_var", xv.shape())?;
                let p = h * w;
                let inv = T::one() / T::of(p as f64);
                let two = T::of(2.0);
                let mut dx = Vec::with_capacity(xv.numel());
                for (plane, &gv) in xv.data().chunks(p).zip(g.data()) {
                    let m = plane.iter().copied().sum::<T>() * inv;
                    dx.extend(plane.iter().map(|&x| gv * two * (x - m) * inv));
                }
                self.accumulate(grads, a, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Gram(a) => {
                let xv = self.value(a);
                let (n, c, h, w) = nchw("gram", xv.shape())?;
                let p = h * w;
                let mut dx = vec![T::zero(); xv.numel()];
                let mut sym = vec![T::zero(); c * c];
                for s in 0..n {
                    let gs = &g.data()[s * c * c..(s + 1) * c * c];
                    for i in 0..c {
                        for j in 0..c {
                            sym[i * c + j] = gs[i * c + j] + gs[j * c + i];
                        }
                    }
                    let phi = &xv.data()[s * c * p..(s + 1) * c * p];
                    matmul(&sym, false, phi, false, &mut dx[s * c * p..(s + 1) * c * p], c, c, p, false);
                }
                self.accumulate(grads, a, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::FlipW(a) => {
                let w = *y.shape().last().expect("non-empty shape");
                self.accumulate(grads, a, flip_rows(&g, w));
            }
            Op::Translate { input, dx, dy } => {
                let (_, _, h, w) = nchw("translate", y.shape())?;
                let mut d = Tensor::zeros(y.shape().to_vec());
                shift_planes(g.data(), d.data_mut(), h, w, -dx, -dy);
                self.accumulate(grads, input, d);
            }
        }
        Ok(())
    }
}

fn softmax_last<T: Real>(t: &Tensor<T>, log: bool) -> Tensor<T> {
    let d = *t.shape().last().expect("non-empty shape");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total = row.iter().map(|&v| (v - max).exp()).sum::<T>();
        if log {
            let shift = max + total.ln();
            for v in row.iter_mut() {
                *v = *v - shift;
            }
        } else {
            for v in row.iter_mut() {
                *v = (*v - max).exp() / total;
            }
        }
    }
    out
}

pub(crate) fn flip_rows<T: Real>(t: &Tensor<T>, w: usize) -> Tensor<T> {
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

pub(crate) fn shift_planes<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, dx: isize, dy: isize) {
    let (hi, wi) = (h as isize, w as isize);
    for (sp, dp) in src.chunks(h * w).zip(dst.chunks_mut(h * w)) {
        for y in 0..hi {
            let sy = y - dy;
            if sy < 0 || sy >= hi {
                continue;
            }
            for x in 0..wi {
                let sx = x - dx;
                if sx < 0 || sx >= wi {
                    continue;
                }
                dp[(y * wi + x) as usize] = sp[(sy * wi + sx) as usize];
            }
        }
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, pad: usize, stride: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeometry {
            c,
            h,
            w,
            kh,
            kw,
            pad,
            stride,
            ho,
            wo,
        }
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Column `p` of row `(ch, i, j)` holds the input pixel under kernel tap
    /// `(i, j)` for output position `p`.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.ho * self.wo;
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut col[((ch * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let p = self.ho * self.wo;
        for ch in 0..self.c {
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &col[((ch * self.kh + i) * self.kw + j) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, &v) in row[oy * self.wo..(oy + 1) * self.wo].iter().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
