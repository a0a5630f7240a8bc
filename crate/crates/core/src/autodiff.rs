//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the tape: ops append nodes in execution order, which is a
//! topological order by construction, and [`Graph::backward`] walks it once
//! in reverse. Graphs are single-threaded and rebuilt per training step;
//! independent graphs may run concurrently. Op kernels parallelize over
//! output rows, so results are bit-identical regardless of worker count.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize, b_strides: Vec<usize> },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, b_strides: Vec<usize> },
    MulScalar { a: usize, c: T },
    Relu { a: usize },
    Abs { a: usize },
    Square { a: usize },
    SumAll { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, normed: Vec<T>, inv_std: Vec<T> },
    Dropout { a: usize, mask: Vec<T> },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// The tape. All tensor math during a forward/backward pass flows through
/// one of these.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Registers a constant (mask biases, positional encodings, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a tracked node (zeros before `backward`).
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(Tensor::new(node.value.shape().to_vec(), node.grad.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let grad = if requires_grad {
            vec![T::zero(); value.numel()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_finite(&self, v: Var, op: &str) -> Result<Var> {
        if self.nodes[v.0].value.is_finite() {
            Ok(v)
        } else {
            Err(Error::non_finite(op))
        }
    }

    /// Batched matrix product over the last two dims. `a` is `(..., m, k)`;
    /// `b` is either `(k, n)`, shared across the batch, or `(..., k, n)`
    /// with leading dims equal to `a`'s.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::shape("matmul", format!("ranks {:?} x {:?}", ashape, bshape)));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let b_batched = bshape.len() > 2;
        if bk != k || (b_batched && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2]) {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ashape, bshape)));
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.extend([m, n]);

        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        mm_nn(av, bv, batch, m, k, n, b_batched, &mut out);

        let req = self.requires(a) || self.requires(b);
        let v = self.push(Tensor::new(out_shape, out)?, req, Op::Matmul { a: a.0, b: b.0 });
        self.check_finite(v, "matmul")
    }

    /// Elementwise sum. `b` must have the same shape or broadcast into `a`
    /// (right-aligned, each dim 1 or equal) — this covers residuals,
    /// bias-add, and additive attention masks, and nothing fancier.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast(a, b, "add", |x, y| x + y)
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x - *y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let v = self.push(t, req, Op::Sub { a: a.0, b: b.0 });
        self.check_finite(v, "sub")
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast(a, b, "mul", |x, y| x * y)
    }

    fn zip_broadcast(&mut self, a: Var, b: Var, opname: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let b_strides = broadcast_strides(&ashape, &bshape).ok_or_else(|| {
            Error::shape(opname, format!("{:?} vs {:?}", ashape, bshape))
        })?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); av.len()];
        for_each_broadcast(&ashape, &b_strides, |i, j| out[i] = f(av[i], bv[j]));
        let req = self.requires(a) || self.requires(b);
        let t = Tensor::new(ashape, out)?;
        let op = match opname {
            "add" => Op::Add { a: a.0, b: b.0, b_strides },
            _ => Op::Mul { a: a.0, b: b.0, b_strides },
        };
        let v = self.push(t, req, op);
        self.check_finite(v, opname)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|x| *x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a);
        let v = self.push(t, req, Op::MulScalar { a: a.0, c });
        self.check_finite(v, "mul_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(T::zero()), Op::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "abs", |x| x.abs(), Op::Abs { a: a.0 })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "square", |x| x * x, Op::Square { a: a.0 })
    }

    fn unary(&mut self, a: Var, name: &str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.nodes[a.0].value.data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a);
        let v = self.push(t, req, op);
        self.check_finite(v, name)
    }

    /// Reduces to a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let t = Tensor::new(Vec::new(), vec![s])?;
        let req = self.requires(a);
        let v = self.push(t, req, Op::SumAll { a: a.0 });
        self.check_finite(v, "sum_all")
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = shape.last().copied().unwrap_or(1);
        if d == 0 {
            return Err(Error::shape("softmax_lastdim", "empty last dim"));
        }
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); x.len()];
        for (row_in, row_out) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (*v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let req = self.requires(a);
        let v = self.push(Tensor::new(shape, out)?, req, Op::Softmax { a: a.0 });
        self.check_finite(v, "softmax_lastdim")
    }

    /// Layer normalization over the last dimension with learnable gain and
    /// bias (both shaped `(D,)`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    shape,
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data().to_vec();
        let bv = self.nodes[bias.0].value.data().to_vec();
        let rows = xv.len() / d;
        let mut out = vec![T::zero(); xv.len()];
        let mut normed = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::from_f64_c(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let r_inv = (var + eps).sqrt().recip();
            inv_std[r] = r_inv;
            for i in 0..d {
                let nh = (row[i] - mean) * r_inv;
                normed[r * d + i] = nh;
                out[r * d + i] = nh * gv[i] + bv[i];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        let v = self.push(
            Tensor::new(shape, out)?,
            req,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                normed,
                inv_std,
            },
        );
        self.check_finite(v, "layer_norm")
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)` so inference
    /// needs no rescale. Identity when not training or `rate == 0`.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if !training || rate == 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config {
                key: "dropout".into(),
                detail: format!("rate {} outside [0, 1)", rate),
            });
        }
        let keep_scale = T::from_f64_c(1.0 / (1.0 - rate));
        let x = self.nodes[a.0].value.data();
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = x.iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a);
        let v = self.push(t, req, Op::Dropout { a: a.0, mask });
        self.check_finite(v, "dropout")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let t = Tensor::new(shape, self.nodes[a.0].value.data().to_vec())?;
        let req = self.requires(a);
        Ok(self.push(t, req, Op::Reshape { a: a.0 }))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if !is_permutation(axes, shape.len()) {
            return Err(Error::shape(
                "permute",
                format!("axes {:?} for rank {}", axes, shape.len()),
            ));
        }
        let (out_shape, out) = permute_data(self.nodes[a.0].value.data(), &shape, axes);
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            req,
            Op::Permute { a: a.0, axes: axes.to_vec() },
        ))
    }

    /// Reverse pass from a scalar node. Gradients accumulate into every
    /// tracked node; each tape entry is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] += T::one();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.step_back(id)?;
        }
        Ok(())
    }

    fn step_back(&mut self, id: usize) -> Result<()> {
        // Split borrows: take the op out, write into parents, put it back.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => self.back_matmul(id, *a, *b),
            Op::Add { a, b, b_strides } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    for (g, v) in self.nodes[*a].grad.iter_mut().zip(&go) {
                        *g += *v;
                    }
                }
                if self.nodes[*b].requires_grad {
                    let shape = self.nodes[id].value.shape().to_vec();
                    let go = self.nodes[id].grad.clone();
                    let gb = &mut self.nodes[*b].grad;
                    for_each_broadcast(&shape, b_strides, |i, j| gb[j] += go[i]);
                }
            }
            Op::Sub { a, b } => {
                let go = self.nodes[id].grad.clone();
                if self.nodes[*a].requires_grad {
                    for (g, v) in self.nodes[*a].grad.iter_mut().zip(&go) {
                        *g += *v;
                    }
                }
                if self.nodes[*b].requires_grad {
                    for (g, v) in self.nodes[*b].grad.iter_mut().zip(&go) {
                        *g -= *v;
                    }
                }
            }
            Op::Mul { a, b, b_strides } => {
                let shape = self.nodes[id].value.shape().to_vec();
                let go = self.nodes[id].grad.clone();
                if self.nodes[*a].requires_grad {
                    let bv = self.nodes[*b].value.data().to_vec();
                    let ga = &mut self.nodes[*a].grad;
                    for_each_broadcast(&shape, b_strides, |i, j| ga[i] += go[i] * bv[j]);
                }
                if self.nodes[*b].requires_grad {
                    let av = self.nodes[*a].value.data().to_vec();
                    let gb = &mut self.nodes[*b].grad;
                    for_each_broadcast(&shape, b_strides, |i, j| gb[j] += go[i] * av[i]);
                }
            }
            Op::MulScalar { a, c } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    let c = *c;
                    for (g, v) in self.nodes[*a].grad.iter_mut().zip(&go) {
                        *g += *v * c;
                    }
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    let xv = self.nodes[*a].value.data().to_vec();
                    for ((g, v), x) in self.nodes[*a].grad.iter_mut().zip(&go).zip(&xv) {
                        if *x > T::zero() {
                            *g += *v;
                        }
                    }
                }
            }
            Op::Abs { a } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    let xv = self.nodes[*a].value.data().to_vec();
                    for ((g, v), x) in self.nodes[*a].grad.iter_mut().zip(&go).zip(&xv) {
                        // subgradient 0 at the kink
                        if *x > T::zero() {
                            *g += *v;
                        } else if *x < T::zero() {
                            *g -= *v;
                        }
                    }
                }
            }
            Op::Square { a } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    let xv = self.nodes[*a].value.data().to_vec();
                    let two = T::from_f64_c(2.0);
                    for ((g, v), x) in self.nodes[*a].grad.iter_mut().zip(&go).zip(&xv) {
                        *g += *v * two * *x;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad[0];
                    for g in self.nodes[*a].grad.iter_mut() {
                        *g += go;
                    }
                }
            }
            Op::Softmax { a } => {
                if self.nodes[*a].requires_grad {
                    let d = self.nodes[id].value.last_dim();
                    let y = self.nodes[id].value.data().to_vec();
                    let go = self.nodes[id].grad.clone();
                    let ga = &mut self.nodes[*a].grad;
                    for r in 0..y.len() / d {
                        let ys = &y[r * d..(r + 1) * d];
                        let gs = &go[r * d..(r + 1) * d];
                        let dot: T = ys.iter().zip(gs).map(|(yv, gv)| *yv * *gv).sum();
                        for i in 0..d {
                            ga[r * d + i] += ys[i] * (gs[i] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let d = self.nodes[id].value.last_dim();
                let rows = normed.len() / d;
                let go = self.nodes[id].grad.clone();
                let gv = self.nodes[*gain].value.data().to_vec();
                let dn = T::from_f64_c(d as f64);
                if self.nodes[*x].requires_grad {
                    let gx = &mut self.nodes[*x].grad;
                    for (r, &r_inv) in inv_std.iter().enumerate().take(rows) {
                        let base = r * d;
                        let mut mean_g = T::zero();
                        let mut mean_gn = T::zero();
                        for i in 0..d {
                            let g = go[base + i] * gv[i];
                            mean_g += g;
                            mean_gn += g * normed[base + i];
                        }
                        mean_g /= dn;
                        mean_gn /= dn;
                        for i in 0..d {
                            let g = go[base + i] * gv[i];
                            gx[base + i] += r_inv * (g - mean_g - normed[base + i] * mean_gn);
                        }
                    }
                }
                if self.nodes[*gain].requires_grad {
                    let gg = &mut self.nodes[*gain].grad;
                    for r in 0..rows {
                        for i in 0..d {
                            gg[i] += go[r * d + i] * normed[r * d + i];
                        }
                    }
                }
                if self.nodes[*bias].requires_grad {
                    let gb = &mut self.nodes[*bias].grad;
                    for r in 0..rows {
                        for i in 0..d {
                            gb[i] += go[r * d + i];
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    let ga = &mut self.nodes[*a].grad;
                    for i in 0..go.len() {
                        ga[i] += go[i] * mask[i];
                    }
                }
            }
            Op::Reshape { a } => {
                if self.nodes[*a].requires_grad {
                    let go = self.nodes[id].grad.clone();
                    for (g, v) in self.nodes[*a].grad.iter_mut().zip(&go) {
                        *g += *v;
                    }
                }
            }
            Op::Permute { a, axes } => {
                if self.nodes[*a].requires_grad {
                    let inv = invert_permutation(axes);
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let (_, gperm) = permute_data(&self.nodes[id].grad, &out_shape, &inv);
                    for (g, v) in self.nodes[*a].grad.iter_mut().zip(&gperm) {
                        *g += *v;
                    }
                }
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }

    fn back_matmul(&mut self, id: usize, a: usize, b: usize) {
        let ashape = self.nodes[a].value.shape().to_vec();
        let bshape = self.nodes[b].value.shape().to_vec();
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = *bshape.last().unwrap();
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let b_batched = bshape.len() > 2;

        let go = self.nodes[id].grad.clone();
        if self.nodes[a].requires_grad {
            let bv = self.nodes[b].value.data().to_vec();
            mm_nt(&go, &bv, batch, m, k, n, b_batched, &mut self.nodes[a].grad);
        }
        if self.nodes[b].requires_grad {
            let av = self.nodes[a].value.data().to_vec();
            mm_tn(&av, &go, batch, m, k, n, b_batched, &mut self.nodes[b].grad);
        }
    }
}

/// C += A·B, row-parallel. `b_shared = !b_batched` reuses one `(k, n)` rhs
/// across the batch.
#[allow(clippy::too_many_arguments)]
fn mm_nn<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize, b_batched: bool, out: &mut [T]) {
    let work = batch * m * n * k;
    let body = |row: usize, orow: &mut [T]| {
        let bi = row / m;
        let i = row % m;
        let arow = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let bbase = if b_batched { bi * k * n } else { 0 };
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[bbase + kk * n..bbase + (kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if work < (1 << 16) {
        for (row, orow) in out.chunks_exact_mut(n).enumerate() {
            body(row, orow);
        }
    } else {
        out.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(row, orow)| body(row, orow));
    }
}

/// gA += gC·Bᵀ, row-parallel over gA rows.
#[allow(clippy::too_many_arguments)]
fn mm_nt<T: Real>(gc: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize, b_batched: bool, ga: &mut [T]) {
    let work = batch * m * n * k;
    let body = |row: usize, garow: &mut [T]| {
        let bi = row / m;
        let i = row % m;
        let gcrow = &gc[(bi * m + i) * n..(bi * m + i + 1) * n];
        let bbase = if b_batched { bi * k * n } else { 0 };
        for (kk, g) in garow.iter_mut().enumerate() {
            let brow = &b[bbase + kk * n..bbase + (kk + 1) * n];
            let mut s = T::zero();
            for (gv, bv) in gcrow.iter().zip(brow) {
                s += *gv * *bv;
            }
            *g += s;
        }
    };
    if work < (1 << 16) {
        for (row, garow) in ga.chunks_exact_mut(k).enumerate() {
            body(row, garow);
        }
    } else {
        ga.par_chunks_exact_mut(k)
            .enumerate()
            .for_each(|(row, garow)| body(row, garow));
    }
}

/// gB += Aᵀ·gC. When the rhs was shared, gradients from every batch member
/// accumulate into the one `(k, n)` matrix in fixed batch order.
#[allow(clippy::too_many_arguments)]
fn mm_tn<T: Real>(a: &[T], gc: &[T], batch: usize, m: usize, k: usize, n: usize, b_batched: bool, gb: &mut [T]) {
    let work = batch * m * n * k;
    if b_batched {
        let body = |row: usize, gbrow: &mut [T]| {
            let bi = row / k;
            let kk = row % k;
            for i in 0..m {
                let aik = a[(bi * m + i) * k + kk];
                let gcrow = &gc[(bi * m + i) * n..(bi * m + i + 1) * n];
                for (g, gv) in gbrow.iter_mut().zip(gcrow) {
                    *g += aik * *gv;
                }
            }
        };
        if work < (1 << 16) {
            for (row, gbrow) in gb.chunks_exact_mut(n).enumerate() {
                body(row, gbrow);
            }
        } else {
            gb.par_chunks_exact_mut(n)
                .enumerate()
                .for_each(|(row, gbrow)| body(row, gbrow));
        }
    } else {
        let body = |kk: usize, gbrow: &mut [T]| {
            for bi in 0..batch {
                for i in 0..m {
                    let aik = a[(bi * m + i) * k + kk];
                    let gcrow = &gc[(bi * m + i) * n..(bi * m + i + 1) * n];
                    for (g, gv) in gbrow.iter_mut().zip(gcrow) {
                        *g += aik * *gv;
                    }
                }
            }
        };
        if work < (1 << 16) {
            for (kk, gbrow) in gb.chunks_exact_mut(n).enumerate() {
                body(kk, gbrow);
            }
        } else {
            gb.par_chunks_exact_mut(n)
                .enumerate()
                .for_each(|(kk, gbrow)| body(kk, gbrow));
        }
    }
}

/// Strides of `b` mapped into `a`'s index space (0 where `b` broadcasts),
/// or `None` when the shapes are incompatible. `b` is right-aligned and
/// each of its dims must be 1 or equal to `a`'s.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let offset = a.len() - b.len();
    let mut b_strides_native = vec![0usize; b.len()];
    let mut acc = 1usize;
    for d in (0..b.len()).rev() {
        b_strides_native[d] = acc;
        acc *= b[d];
    }
    let mut strides = vec![0usize; a.len()];
    for d in 0..a.len() {
        if d < offset {
            strides[d] = 0;
        } else {
            let bd = b[d - offset];
            if bd == a[d] {
                strides[d] = b_strides_native[d - offset];
            } else if bd == 1 {
                strides[d] = 0;
            } else {
                return None;
            }
        }
    }
    Some(strides)
}

/// Calls `f(lhs_index, rhs_index)` for every element of the lhs shape,
/// maintaining the rhs offset with an odometer walk.
fn for_each_broadcast(shape: &[usize], rhs_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for i in 0..numel {
        f(i, j);
        for d in (0..rank).rev() {
            idx[d] += 1;
            j += rhs_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            j -= rhs_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn is_permutation(axes: &[usize], rank: usize) -> bool {
    if axes.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return false;
        }
        seen[a] = true;
    }
    true
}

fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let strides_for_out: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides_for_out[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides_for_out[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 4], &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0, 4.0, 4.0, 0.0, 1.0]);
        let mut expect = vec![0.0f64; 8];
        for i in 0..2 {
            for j in 0..4 {
                for kk in 0..3 {
                    expect[i * 4 + j] += a.data()[i * 3 + kk] * b.data()[kk * 4 + j];
                }
            }
        }
        let mut g = Graph::new();
        let va = g.leaf(a, false);
        let vb = g.leaf(b, false);
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert_eq!(g.value(c).data(), expect.as_slice());
    }

    #[test]
    fn matmul_identity_is_identity() {
        let x = t(&[3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let vx = g.leaf(x.clone(), false);
        let vi = g.leaf(eye, false);
        let y = g.matmul(vx, vi).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![4, 2]), false);
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_values_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[1.0, -2.0, 0.5, 3.0]), true);
        let sq = g.square(x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 3], 5.0f64), true);
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_logits_are_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 5], 0.3f64), false);
        let y = g.softmax_lastdim(x).unwrap();
        for r in 0..2 {
            let row = &g.value(y).data()[r * 5..(r + 1) * 5];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn layer_norm_constant_row_returns_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![2, 4], 3.0f64), false);
        let gain = g.leaf(Tensor::full(vec![4], 1.0f64), false);
        let bias = g.leaf(t(&[4], &[0.1, 0.2, 0.3, 0.4]), false);
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for r in 0..2 {
            let row = &g.value(y).data()[r * 4..(r + 1) * 4];
            for (a, b) in row.iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_moments_pre_affine() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(vec![3, 16], -2.0f64, 2.0, &mut rng), false);
        let gain = g.leaf(Tensor::full(vec![16], 1.0f64), false);
        let bias = g.leaf(Tensor::zeros(vec![16]), false);
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        for r in 0..3 {
            let row = &g.value(y).data()[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), false);
        let a = g.dropout(x, 0.5, false, &mut rng).unwrap();
        let b = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn dropout_preserves_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(vec![n], 1.0f64), false);
        let y = g.dropout(x, 0.1, true, &mut rng).unwrap();
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn broadcast_add_bias_and_pad_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2, 3]), true);
        let bias = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = g.add(x, bias).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(bias).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = g.leaf(Tensor::zeros(vec![2]), false);
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[1e308]), false);
        let y = g.square(x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let y = g.permute(x, &[1, 0]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = g.permute(y, &[1, 0]).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_accumulates_across_two_losses() {
        // backward(l1 + l2) == backward(l1) then backward(l2)
        let x0 = t(&[3], &[0.5, -1.5, 2.0]);
        let mut g1 = Graph::new();
        let x = g1.leaf(x0.clone(), true);
        let sq = g1.square(x).unwrap();
        let l1 = g1.sum_all(sq).unwrap();
        let ab = g1.abs(x).unwrap();
        let l2 = g1.sum_all(ab).unwrap();
        let l = g1.add(l1, l2).unwrap();
        g1.backward(l).unwrap();
        let combined = g1.grad(x).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.leaf(x0.clone(), true);
        let sq2 = g2.square(x2).unwrap();
        let l21 = g2.sum_all(sq2).unwrap();
        g2.backward(l21).unwrap();
        let ga = g2.grad(x2).unwrap();

        let mut g3 = Graph::new();
        let x3 = g3.leaf(x0, true);
        let ab3 = g3.abs(x3).unwrap();
        let l31 = g3.sum_all(ab3).unwrap();
        g3.backward(l31).unwrap();
        let gb = g3.grad(x3).unwrap();

        for i in 0..3 {
            let sum = ga.data()[i] + gb.data()[i];
            assert!((combined.data()[i] - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        // (2,2,2) x (2,2) applies the same rhs to both batch members.
        let a = t(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let va = g.leaf(a, true);
        let vb = g.leaf(b, true);
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]
        );
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        // dB sums contributions from both batch members: col sums of A over batch.
        assert_eq!(g.grad(vb).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }
}
