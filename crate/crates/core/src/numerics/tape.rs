//! Reverse-mode differentiation over a linear tape.
//!
//! Every operator appends a node holding its output value; `backward` walks the
//! tape in reverse and accumulates gradients into the nodes that need them.

use super::kernels::{self, ConvGeom, GroupStats};
use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `[N,C,H,W] + [C]`
    AddBias(Var, Var),
    /// `[N,C,H,W] + [N,C]`
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats,
    },
    Silu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    ensure!(
        a.shape() == b.shape(),
        dim,
        "{}: shape {:?} vs {:?}",
        op,
        a.shape(),
        b.shape()
    );
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf; it takes part in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite("operator output")?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Add a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure!(self.value(b).shape() == [c], dim, "bias shape {:?} for {} channels", self.value(b).shape(), c);
        let bias = self.value(b).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        let hw = h * w;
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(out.len(), n * c * hw);
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// Add a per-image, per-channel vector `[N,C]` to an NCHW tensor.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure!(
            self.value(v).shape() == [n, c],
            dim,
            "channel vector {:?} for NCHW {:?}",
            self.value(v).shape(),
            self.value(x).shape()
        );
        let vals = self.value(v).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
            let bv = vals[i];
            chunk.iter_mut().for_each(|e| *e += bv);
        }
        self.push(out, Op::AddChannel(x, v), &[x, v])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], data)?;
        self.push(out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let data = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let out = Tensor::new(vec![n, c, 2 * h, 2 * w], data)?;
        self.push(out, Op::Upsample2x(x), &[x])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        ensure!(groups >= 1 && c % groups == 0, contract, "group_norm: {} channels not divisible into {} groups", c, groups);
        ensure!(self.value(gamma).shape() == [c], dim, "group_norm gamma shape {:?}", self.value(gamma).shape());
        ensure!(self.value(beta).shape() == [c], dim, "group_norm beta shape {:?}", self.value(beta).shape());
        let (data, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            h * w,
            groups,
        );
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = kernels::silu_forward(self.value(x).data());
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::Silu(x), &[x])
    }

    /// Dense layer: `x [N,in] · wᵀ [in,out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = match self.value(x).shape() {
            &[n, f] => (n, f),
            s => return Err(Error::dim(format!("linear input must be [N,in], got {s:?}"))),
        };
        let fout = match self.value(w).shape() {
            &[o, i] if i == fin => o,
            s => return Err(Error::dim(format!("linear weight {s:?} for input width {fin}"))),
        };
        ensure!(self.value(b).shape() == [fout], dim, "linear bias {:?}", self.value(b).shape());
        let mut data = vec![T::zero(); n * fout];
        T::gemm(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, &mut data, false);
        let bias = self.value(b).data();
        for row in data.chunks_mut(fout) {
            row.iter_mut().zip(bias).for_each(|(r, &bb)| *r += bb);
        }
        let out = Tensor::new(vec![n, fout], data)?;
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    /// Self-attention over the `H·W` positions of NCHW query/key/value maps.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(q).dims4()?;
        same_shape(self.value(q), self.value(k), "attention")?;
        same_shape(self.value(q), self.value(v), "attention")?;
        let (data, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n,
            c,
            h * w,
        );
        let out = Tensor::new(vec![n, c, h, w], data)?;
        self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&refs)?.with_requires_grad(false);
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        ensure!(!t.is_empty(), dim, "mean of empty tensor");
        let s = T::from_f64_lossy(t.sum_f64() / t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared difference, composed from primitive operators.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(
            self.value(loss).len() == 1,
            contract,
            "backward needs a scalar root, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape matches value")
    }

    fn backprop_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|x| -x));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddBias(x, b) => {
                let (_, c, h, w) = self.value(*x).dims4()?;
                if self.needs(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
                self.accumulate(grads, *x, g);
            }
            Op::AddChannel(x, v) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                if self.needs(*v) {
                    let dv: Vec<T> = g.data().chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(grads, *v, self.like(*v, dv));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    geom,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    g.data(),
                    stats,
                    n,
                    c,
                    h * w,
                    *groups,
                );
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::Silu(x) => {
                let dx = kernels::silu_backward(self.value(*x).data(), g.data());
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*w).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, g.data(), false, self.value(*w).data(), false, &mut dx, false);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, g.data(), true, self.value(*x).data(), false, &mut dw, false);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (n, c, h, w) = self.value(*q).dims4()?;
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g.data(),
                    n,
                    c,
                    h * w,
                );
                self.accumulate(grads, *q, self.like(*q, dq));
                self.accumulate(grads, *k, self.like(*k, dk));
                self.accumulate(grads, *v, self.like(*v, dv));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.channel_slice(start, c)?);
                    }
                    start += c;
                }
            }
            Op::Sum(x) => {
                let s = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g.item()? / T::from_f64_lossy(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), s));
            }
        }
        Ok(())
    }
}
