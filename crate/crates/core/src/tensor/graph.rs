use super::conv;
use super::{pairwise_sum, Float, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// `ln(1 + e^x)`, evaluated as `max(x, 0) + ln(1 + e^-|x|)`.
    Softplus,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Act(Var, Activation),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, stride: usize, pad: usize },
    AddChannelBias(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Concat(Var, Var),
    GlobalAvgPool(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only computation tape.
///
/// Nodes are created in topological order, so the graph is acyclic by
/// construction and `backward` is a single reverse sweep.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("operands share a shape")
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    fn apply<T: Float>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f(slope)
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Float>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f(slope)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Softplus => sigmoid(x),
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Adds a leaf that never receives gradients (inputs, frozen weights,
    /// detached values).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Copies a node's value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f(c);
        let v = self.value(a).map(|x| x * k);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = T::from_f(c);
        let v = self.value(a).map(|x| x + k);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let v = self.value(a).map(|x| kind.apply(x));
        self.push("activation", v, Op::Act(a, kind), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.activation(a, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    /// 2-D convolution, input `(N, C, H, W)`, kernel `(O, C, kH, kW)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = conv::conv2d_forward(self.value(x), self.value(w), stride, pad)?;
        self.push("conv2d", v, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    /// Transposed convolution, input `(N, C_in, H, W)`, kernel `(C_in, C_out, kH, kW)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = conv::conv_t2d_forward(self.value(x), self.value(w), stride, pad)?;
        self.push("conv_transpose2d", v, Op::ConvT2d { x, w, stride, pad }, &[x, w])
    }

    /// Adds a per-channel bias `(C)` to an `(N, C, H, W)` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(TensorError::Dim {
                op: "add_channel_bias",
                msg: format!("bias {bs:?} does not match channels of {xs:?}"),
            });
        }
        let plane = xs[2] * xs[3];
        let c = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            let bb = bias[i % c];
            chunk.iter_mut().for_each(|e| *e = *e + bb);
        }
        self.push("add_channel_bias", v, Op::AddChannelBias(x, b), &[x, b])
    }

    fn row_operands(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let (xs, rs) = (self.shape(x), self.shape(r));
        if xs.len() != 2 || rs != [xs[1]] {
            return Err(TensorError::Dim {
                op,
                msg: format!("row vector {rs:?} does not match matrix {xs:?}"),
            });
        }
        Ok(xs[1])
    }

    /// `(N, M) + (M)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let m = self.row_operands("add_row", x, r)?;
        let row = self.value(r).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(m) {
            chunk.iter_mut().zip(&row).for_each(|(e, &b)| *e = *e + b);
        }
        self.push("add_row", v, Op::AddRow(x, r), &[x, r])
    }

    /// `(N, M) * (M)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let m = self.row_operands("mul_row", x, r)?;
        let row = self.value(r).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(m) {
            chunk.iter_mut().zip(&row).for_each(|(e, &b)| *e = *e * b);
        }
        self.push("mul_row", v, Op::MulRow(x, r), &[x, r])
    }

    /// Per-sample, per-channel normalization over the spatial axes, no affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Dim {
                op: "instance_norm",
                msg: format!("expected (N, C, H, W), got {xs:?}"),
            });
        }
        let plane = xs[2] * xs[3];
        let count = T::from_f(plane as f64);
        let eps = T::from_f(eps);
        let mut v = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xs[0] * xs[1]);
        for chunk in v.data_mut().chunks_mut(plane) {
            let mean = pairwise_sum(chunk) / count;
            chunk.iter_mut().for_each(|e| *e = *e - mean);
            let sq: Vec<T> = chunk.iter().map(|&e| e * e).collect();
            let inv = T::one() / (pairwise_sum(&sq) / count + eps).sqrt();
            chunk.iter_mut().for_each(|e| *e = *e * inv);
            inv_std.push(inv);
        }
        self.push("instance_norm", v, Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// Concatenates two `(N, C, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat_channels", &sa, &sb));
        }
        let plane = sa[2] * sa[3];
        let (ca, cb) = (sa[1] * plane, sb[1] * plane);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&va[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&vb[n * cb..(n + 1) * cb]);
        }
        let v = Tensor::new(&[sa[0], sa[1] + sb[1], sa[2], sa[3]], data)?;
        self.push("concat_channels", v, Op::Concat(a, b), &[a, b])
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::Dim {
                op: "global_avg_pool",
                msg: format!("expected (N, C, H, W), got {xs:?}"),
            });
        }
        let plane = xs[2] * xs[3];
        let count = T::from_f(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| pairwise_sum(c) / count)
            .collect();
        let v = Tensor::new(&[xs[0], xs[1]], data)?;
        self.push("global_avg_pool", v, Op::GlobalAvgPool(x), &[x])
    }

    /// `(N, K) x (K, M) -> (N, M)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); sa[0] * sb[1]];
        T::gemm(sa[0], sa[1], sb[1], self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let v = Tensor::new(&[sa[0], sb[1]], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Sum of all elements (pairwise summation).
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(pairwise_sum(self.value(a).data()));
        self.push("sum", v, Op::Sum(a), &[a])
    }

    /// Mean of all elements (pairwise summation).
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(TensorError::Dim {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let v = Tensor::scalar(pairwise_sum(self.value(a).data()) / T::from_f(n as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let Some((&last, lead)) = sa.split_last() else {
            return Err(TensorError::Dim {
                op: "sum_last",
                msg: "scalar has no last axis".into(),
            });
        };
        if last == 0 {
            return Err(TensorError::Dim {
                op: "sum_last",
                msg: "last axis is empty".into(),
            });
        }
        let data = self.value(a).data().chunks(last).map(pairwise_sum).collect();
        let v = Tensor::new(lead, data)?;
        self.push("sum_last", v, Op::SumLast(a), &[a])
    }

    /// Reverse sweep from a scalar root. Gradients are added to the leaves'
    /// accumulators, so repeated calls accumulate until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rs, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                node.grad = Some(match node.grad.take() {
                    Some(acc) => zip_map(&acc, &g, |a, b| a + b),
                    None => g,
                });
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[parent.0];
                *slot = Some(match slot.take() {
                    Some(acc) => zip_map(&acc, &pg, |a, b| a + b),
                    None => pg,
                });
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each parent.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    res.push((*a, zip_map(g, self.value(*b), |x, y| x * y)));
                }
                if self.needs(*b) {
                    res.push((*b, zip_map(g, self.value(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => {
                let k = T::from_f(*c);
                res.push((*a, g.map(|x| x * k)));
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Square(a) => {
                let two = T::from_f(2.0);
                res.push((*a, zip_map(g, self.value(*a), |x, y| x * two * y)));
            }
            Op::Abs(a) => res.push((*a, zip_map(g, self.value(*a), |x, y| x * y.signum()))),
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(out.data()))
                    .map(|(&gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                res.push((*a, Tensor::new(x.shape(), data)?));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (dx, dw) = conv::conv_t2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *stride,
                    *pad,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                res.extend(dx.map(|d| (*x, d)));
                res.extend(dw.map(|d| (*w, d)));
            }
            Op::AddChannelBias(x, b) => {
                res.push((*x, g.clone()));
                if self.needs(*b) {
                    let s = g.shape();
                    let plane = s[2] * s[3];
                    let mut db = vec![T::zero(); s[1]];
                    for (k, chunk) in g.data().chunks(plane).enumerate() {
                        db[k % s[1]] = db[k % s[1]] + pairwise_sum(chunk);
                    }
                    res.push((*b, Tensor::new(&[s[1]], db)?));
                }
            }
            Op::AddRow(x, r) => {
                res.push((*x, g.clone()));
                if self.needs(*r) {
                    let m = g.shape()[1];
                    let mut dr = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        dr.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    res.push((*r, Tensor::new(&[m], dr)?));
                }
            }
            Op::MulRow(x, r) => {
                let m = g.shape()[1];
                let (xv, rv) = (self.value(*x), self.value(*r));
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(m) {
                        row.iter_mut().zip(rv.data()).for_each(|(d, &b)| *d = *d * b);
                    }
                    res.push((*x, dx));
                }
                if self.needs(*r) {
                    let mut dr = vec![T::zero(); m];
                    for (grow, xrow) in g.data().chunks(m).zip(xv.data().chunks(m)) {
                        for j in 0..m {
                            dr[j] = dr[j] + grow[j] * xrow[j];
                        }
                    }
                    res.push((*r, Tensor::new(&[m], dr)?));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = out.shape();
                let plane = s[2] * s[3];
                let count = T::from_f(plane as f64);
                let mut dx = Vec::with_capacity(out.numel());
                for ((gy, y), &inv) in g.data().chunks(plane).zip(out.data().chunks(plane)).zip(inv_std) {
                    let mean_g = pairwise_sum(gy) / count;
                    let gyy: Vec<T> = gy.iter().zip(y).map(|(&a, &b)| a * b).collect();
                    let mean_gy = pairwise_sum(&gyy) / count;
                    dx.extend(gy.iter().zip(y).map(|(&a, &b)| inv * (a - mean_g - b * mean_gy)));
                }
                res.push((*x, Tensor::new(s, dx)?));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa[2] * sa[3];
                let (ca, cb) = (sa[1] * plane, sb[1] * plane);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for chunk in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                res.push((*a, Tensor::new(sa, da)?));
                res.push((*b, Tensor::new(sb, db)?));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = T::one() / T::from_f(plane as f64);
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, plane))
                    .collect();
                res.push((*x, Tensor::new(s, data)?));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    res.push((*a, Tensor::new(sa, da)?));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    res.push((*b, Tensor::new(sb, db)?));
                }
            }
            Op::Reshape(a) => res.push((*a, g.clone().reshape(self.shape(*a))?)),
            Op::Sum(a) => {
                let gv = g.item();
                res.push((*a, Tensor::full(self.shape(*a), gv)));
            }
            Op::Mean(a) => {
                let n = T::from_f(self.value(*a).numel() as f64);
                res.push((*a, Tensor::full(self.shape(*a), g.item() / n)));
            }
            Op::SumLast(a) => {
                let s = self.shape(*a);
                let last = s[s.len() - 1];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, last))
                    .collect();
                res.push((*a, Tensor::new(s, data)?));
            }
        }
        Ok(res)
    }
}
