use std::collections::HashMap;

use super::{Activation, Tensor};
use crate::error::{MoceError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    Activation(Var, Activation),
    RmsNorm(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    ScaleRows(Var, Var),
    Column(Var, usize),
    SumRows(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        positions: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// A tape supports exactly one [`backward`](Tape::backward) pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Records a leaf. Gradients are tracked when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = super::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::zip_with(self.value(a), self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::zip_with(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::zip_with(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = super::map(self.value(a), |x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise `1 / a`.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().contains(&0.0) {
            return Err(MoceError::numeric("reciprocal of zero"));
        }
        let out = super::map(self.value(a), |x| 1.0 / x);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Recip(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = super::softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let out = super::causal_softmax(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::CausalSoftmax(a), rg))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = super::map(self.value(a), |x| kind.apply(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Activation(a, kind), rg)
    }

    pub fn rms_norm(&mut self, a: Var) -> Var {
        let (out, inv) = super::rms_norm(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::RmsNorm(a, inv), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = super::gather_rows(self.value(a), idx)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let out = super::scatter_rows(self.value(a), idx, total)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::ScatterRows(a, idx.to_vec()), rg))
    }

    /// Row `r` of `x` times `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = super::scale_rows(self.value(x), self.value(w))?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::ScaleRows(x, w), rg))
    }

    pub fn column(&mut self, a: Var, c: usize) -> Result<Var> {
        let out = super::column(self.value(a), c)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Column(a, c), rg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = super::sum_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Mean next-token negative log-likelihood over `positions`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let (loss, probs) = super::cross_entropy(self.value(logits), targets, positions)?;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            positions: positions.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate additively into every node reachable from `loss`
    /// that requires grad. A tape can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(MoceError::State("backward already ran on this tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(MoceError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    send(*a, da);
                }
                if nodes[b.0].requires_grad {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += a_ip * g[i * n + j];
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, da);
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::Recip(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(g, y)| -g * y * y).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((dx, yr), gr) in da.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dx.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                send(*a, da);
            }
            Op::Activation(a, kind) => {
                let x = val(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| g * kind.derivative(*x))
                        .collect(),
                );
            }
            Op::RmsNorm(a, inv) => {
                let x = val(*a).data();
                let cols = val(*a).cols();
                let mut da = vec![0.0; x.len()];
                for (((dx, xr), gr), r) in da
                    .chunks_mut(cols)
                    .zip(x.chunks(cols))
                    .zip(g.chunks(cols))
                    .zip(inv)
                {
                    let dot: f64 = gr.iter().zip(xr).map(|(g, x)| g * x).sum();
                    let c = r * r * r * dot / cols as f64;
                    for ((d, x), g) in dx.iter_mut().zip(xr).zip(gr) {
                        *d = r * g - c * x;
                    }
                }
                send(*a, da);
            }
            Op::GatherRows(a, idx) => {
                let cols = val(*a).cols();
                let mut da = vec![0.0; val(*a).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += g[r * cols + c];
                    }
                }
                send(*a, da);
            }
            Op::ScatterRows(a, idx) => {
                let cols = val(*a).cols();
                let mut da = Vec::with_capacity(val(*a).numel());
                for &i in idx {
                    da.extend_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                send(*a, da);
            }
            Op::ScaleRows(x, w) => {
                let (xv, wv) = (val(*x), val(*w));
                let cols = xv.cols();
                if nodes[x.0].requires_grad {
                    let mut dx = g.to_vec();
                    for (row, s) in dx.chunks_mut(cols).zip(wv.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    send(*x, dx);
                }
                let dw = g
                    .chunks(cols)
                    .zip(xv.data().chunks(cols))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(g, x)| g * x).sum())
                    .collect();
                send(*w, dw);
            }
            Op::Column(a, c) => {
                let cols = val(*a).cols();
                let mut da = vec![0.0; val(*a).numel()];
                for (r, gv) in g.iter().enumerate() {
                    da[r * cols + c] = *gv;
                }
                send(*a, da);
            }
            Op::SumRows(a) => {
                let n = val(*a).numel();
                let cols = val(*a).cols();
                send(*a, (0..n).map(|i| g[i % cols]).collect());
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::CrossEntropy {
                logits,
                targets,
                positions,
                probs,
            } => {
                let vocab = probs.cols();
                let scale = g[0] / positions.len() as f64;
                let mut dl = vec![0.0; probs.numel()];
                for &p in positions {
                    let row = &mut dl[p * vocab..(p + 1) * vocab];
                    for (d, pr) in row.iter_mut().zip(probs.row(p)) {
                        *d += scale * pr;
                    }
                    row[targets[p]] -= scale;
                }
                send(*logits, dl);
            }
        }
    }
}

/// `prefix.leaf`, the dotted parameter naming used with [`Binder`].
pub fn param_name(prefix: &str, leaf: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + leaf.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(leaf);
    s
}

/// Registers named parameters on a tape once each and maps gradients back to names.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<String, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the tape variable for `name`, recording `t` as a leaf on first use.
    pub fn bind(&mut self, tape: &mut Tape, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = tape.leaf(t.clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Names bound so far, in first-use order.
    pub fn names(&self) -> Vec<&str> {
        let mut named: Vec<(&str, Var)> = self.vars.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        named.sort_by_key(|(_, v)| *v);
        named.into_iter().map(|(n, _)| n).collect()
    }

    pub fn gradient<'g>(&self, grads: &'g Gradients, name: &str) -> Option<&'g [f64]> {
        self.get(name).and_then(|v| grads.get(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_self_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::vector(vec![1.5, -2.0, 0.25])
                .unwrap()
                .with_requires_grad(true),
        );
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(MoceError::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::vector(vec![1.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        assert!(matches!(tape.backward(x), Err(MoceError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::vector(vec![1.0, 2.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn binder_registers_once() {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let w = Tensor::vector(vec![1.0]).unwrap().with_requires_grad(true);
        let a = binder.bind(&mut tape, "w", &w);
        let b = binder.bind(&mut tape, "w", &w);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
        let y = tape.add(a, b).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(binder.gradient(&g, "w").unwrap(), &[2.0]);
    }
}
