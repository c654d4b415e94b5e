//! Tape-based reverse-mode differentiation over [`Tensor2`] values.
//!
//! The tape records each op with the handles of its inputs. Values are
//! kept on the tape, so the backward pass has everything it needs.
//! Only two ops exist, affine maps and ReLU, which is all an MLP needs;
//! the loss gradient w.r.t. the final output is supplied by the caller
//! as the seed of [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor2>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

/// `out[i,j] = Σ_d x[i,d]·w[j,d] + b[j]`.
pub fn affine(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let (n, d) = x.shape();
    let (m, wd) = w.shape();
    if wd != d {
        return Err(Error::invalid(format!(
            "affine: input has {d} columns but weight expects {wd}"
        )));
    }
    if b.shape() != (1, m) {
        return Err(Error::invalid(format!(
            "affine: bias shape {:?} does not match 1×{m}",
            b.shape()
        )));
    }
    let mut out = Tensor2::zeros(n, m);
    let bias = b.row(0);
    for i in 0..n {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for j in 0..m {
            let wj = w.row(j);
            let mut s = 0.0;
            for k in 0..d {
                s += xi[k] * wj[k];
            }
            oi[j] = s + bias[j];
        }
    }
    if !out.is_finite() {
        return Err(Error::numeric("affine produced a non-finite value"));
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
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

    /// Records a constant input; no gradient is produced for it.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter whose gradient will be produced.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = affine(self.value(x), self.value(w), self.value(b))?;
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(out, Op::Affine { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu { x }, rg)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates `seed = ∂L/∂out` back through the tape in reverse
    /// execution order. Contributions to a shared input are summed.
    pub fn backward(&self, out: Var, seed: Tensor2) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::invalid(format!(
                "backward seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(x);
                    let wv = self.value(w);
                    if self.requires_grad(x) {
                        accumulate(&mut grads[x.0], matmul_nn(&g, wv));
                    }
                    if self.requires_grad(w) {
                        accumulate(&mut grads[w.0], matmul_tn(&g, xv));
                    }
                    if self.requires_grad(b) {
                        accumulate(&mut grads[b.0], column_sums(&g));
                    }
                }
                Op::Relu { x } => {
                    if self.requires_grad(x) {
                        let xv = self.value(x);
                        let mut dx = g;
                        for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                            // subgradient at 0 is 0
                            if xi <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::numeric("backward produced a non-finite gradient"));
            }
        }
        Ok(Gradients(grads))
    }
}

fn accumulate(slot: &mut Option<Tensor2>, g: Tensor2) {
    match slot {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

/// `g[N×M] · w[M×D]`
fn matmul_nn(g: &Tensor2, w: &Tensor2) -> Tensor2 {
    let n = g.rows();
    let d = w.cols();
    let mut out = Tensor2::zeros(n, d);
    for i in 0..n {
        let gi = g.row(i);
        let oi = out.row_mut(i);
        for (j, &gij) in gi.iter().enumerate() {
            if gij == 0.0 {
                continue;
            }
            for (o, &wv) in oi.iter_mut().zip(w.row(j)) {
                *o += gij * wv;
            }
        }
    }
    out
}

/// `gᵀ[M×N] · x[N×D]`
fn matmul_tn(g: &Tensor2, x: &Tensor2) -> Tensor2 {
    let (n, m) = g.shape();
    let d = x.cols();
    let mut out = Tensor2::zeros(m, d);
    for i in 0..n {
        let gi = g.row(i);
        let xi = x.row(i);
        for (j, &gij) in gi.iter().enumerate() {
            if gij == 0.0 {
                continue;
            }
            for (o, &xv) in out.row_mut(j).iter_mut().zip(xi) {
                *o += gij * xv;
            }
        }
    }
    out
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut out = Tensor2::zeros(1, g.cols());
    for row in g.row_iter() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
