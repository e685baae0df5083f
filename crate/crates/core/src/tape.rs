//! Reverse-mode differentiation over a recorded sequence of tensor operations.
//!
//! Every operation appends a node holding its forward value plus whatever its
//! backward rule needs. [`Tape::backward`] walks the nodes in reverse order
//! once, accumulating gradients additively into each input.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{shape_err, GksError, Result};
use crate::kernels::{self, gemm, BnCache, BnMode, ConvGeom};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Median element(s) used as the Gaussian bandwidth for one batch item.
#[derive(Debug, Clone)]
struct Bandwidth {
    sigma: f64,
    /// `(row, col, weight)`; empty when the bandwidth fell back to a constant.
    picks: Vec<(usize, usize, f64)>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
        col: Option<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    BatchedMatmul {
        a: Var,
        b: Var,
    },
    AdjPropagate {
        adj: Var,
        y: Var,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    SoftmaxRows {
        x: Var,
    },
    CosineSim {
        a: Var,
        b: Var,
        na: Vec<f64>,
        nb: Vec<f64>,
    },
    GaussianSim {
        a: Var,
        b: Var,
        bands: Vec<Bandwidth>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require gradients or the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but returns zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn last_dim(t: &Tensor, what: &str) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| shape_err!("{what}: scalar operand"))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index()]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient is retained.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(k), self.value(b))?;
        let (out, col) =
            kernels::conv2d_forward(&geom, self.value(x), self.value(k), self.value(b));
        let ng = self.ng(&[x, k, b]);
        Ok(self.push(out, Op::Conv2d { x, k, b, geom, col }, ng))
    }

    /// Batch norm over the last axis. `running` holds `(mean, var)` and is
    /// updated in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [f64],
        running_var: &mut [f64],
        mode: BnMode,
    ) -> Result<Var> {
        let (out, cache) = kernels::batch_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            kernels::BN_EPSILON,
            kernels::BN_MOMENTUM,
            mode,
        )?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            ng,
        ))
    }

    /// `a · b` where `b` is a matrix and `a` has any rank with matching last
    /// extent; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let (k2, n) = kernels::dims2(self.value(b), "matmul rhs")?;
        let k = last_dim(av, "matmul lhs")?;
        if k != k2 || av.rank() < 2 {
            return Err(shape_err!(
                "matmul inner extents disagree: {:?} x {:?}",
                av.shape(),
                self.value(b).shape()
            ));
        }
        let m = av.len() / k.max(1);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&shape);
        gemm(false, false, m, k, n, av.data(), self.value(b).data(), 0.0, out.data_mut());
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Matmul { a, b }, ng))
    }

    /// Per-item product of `B×m×k` and `B×k×n`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = kernels::dims3(self.value(a), "batched_matmul lhs")?;
        let (bb, k2, n) = kernels::dims3(self.value(b), "batched_matmul rhs")?;
        if ba != bb || k != k2 {
            return Err(shape_err!(
                "batched_matmul: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let mut out = Tensor::zeros(&[ba, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for ((ac, bc), oc) in av
                .chunks_exact(m * k)
                .zip(bv.chunks_exact(k * n))
                .zip(out.data_mut().chunks_exact_mut(m * n))
            {
                gemm(false, false, m, k, n, ac, bc, 0.0, oc);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::BatchedMatmul { a, b }, ng))
    }

    /// Applies one shared `N×N` matrix to every item of a `B×N×d` batch.
    pub fn adj_propagate(&mut self, adj: Var, y: Var) -> Result<Var> {
        let (n, n2) = kernels::dims2(self.value(adj), "adjacency")?;
        let (bsz, ny, d) = kernels::dims3(self.value(y), "graph batch")?;
        if n != n2 || n != ny {
            return Err(shape_err!(
                "adjacency {:?} does not match graph batch {:?}",
                self.value(adj).shape(),
                self.value(y).shape()
            ));
        }
        let mut out = Tensor::zeros(&[bsz, n, d]);
        {
            let (a, yv) = (self.value(adj).data(), self.value(y).data());
            for (yc, oc) in yv
                .chunks_exact(n * d)
                .zip(out.data_mut().chunks_exact_mut(n * d))
            {
                gemm(false, false, n, n, d, a, yc, 0.0, oc);
            }
        }
        let ng = self.ng(&[adj, y]);
        Ok(self.push(out, Op::AdjPropagate { adj, y }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.value(x), "add_bias")?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err!(
                "bias shape {:?} does not match last extent {n}",
                self.value(bias).shape()
            ));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum { x }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape { x }, ng))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of nothing"))?;
        let lead = &self.value(*first).shape()[..self.value(*first).rank() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(shape_err!(
                    "concat: {:?} incompatible with leading extents {:?}",
                    s,
                    lead
                ));
            }
            widths.push(s[lead.len()]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(total);
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p.index()].value.data();
            for r in 0..rows {
                od[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = self.ng(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SoftmaxRows { x }, ng))
    }

    /// Pairwise cosine similarity between the rows of `a` (`B×m×d`) and `b`
    /// (`B×n×d`) for each batch item. A zero-norm row has similarity 0 with
    /// everything.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bsz, m, n, d) = self.pair_dims(a, b, "cosine_similarity")?;
        let norms = |t: &Tensor| -> Vec<f64> {
            t.data()
                .chunks_exact(d.max(1))
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect()
        };
        let na = norms(self.value(a));
        let nb = norms(self.value(b));
        let ua = unit_rows(self.value(a).data(), &na, d);
        let ub = unit_rows(self.value(b).data(), &nb, d);
        let mut out = Tensor::zeros(&[bsz, m, n]);
        for ((ac, bc), oc) in ua
            .chunks_exact(m * d)
            .zip(ub.chunks_exact(n * d))
            .zip(out.data_mut().chunks_exact_mut(m * n))
        {
            gemm(false, true, m, d, n, ac, bc, 0.0, oc);
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::CosineSim { a, b, na, nb }, ng))
    }

    /// Gaussian kernel `exp(-|a_i - b_j|^2 / (2 sigma^2))` per batch item, with
    /// `sigma` the median of that item's pairwise distances (1 when the median
    /// is zero).
    pub fn gaussian_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bsz, m, n, d) = self.pair_dims(a, b, "gaussian_similarity")?;
        let mut out = Tensor::zeros(&[bsz, m, n]);
        let mut bands = Vec::with_capacity(bsz);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for item in 0..bsz {
                let ac = &av[item * m * d..(item + 1) * m * d];
                let bc = &bv[item * n * d..(item + 1) * n * d];
                let sq = pairwise_sq_dist(ac, bc, m, n, d);
                let band = median_bandwidth(&sq, n);
                let inv = 1.0 / (2.0 * band.sigma * band.sigma);
                let oc = &mut out.data_mut()[item * m * n..(item + 1) * m * n];
                for (o, s) in oc.iter_mut().zip(&sq) {
                    *o = (-s * inv).exp();
                }
                bands.push(band);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::GaussianSim { a, b, bands }, ng))
    }

    fn pair_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        let (ba, m, d) = kernels::dims3(self.value(a), what)?;
        let (bb, n, d2) = kernels::dims3(self.value(b), what)?;
        if ba != bb || d != d2 {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok((ba, m, n, d))
    }

    /// Mean cross-entropy of `labels` under the row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), labels)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Discrete branch decisions taken during the forward pass: the sign of
    /// every ReLU input and every median pick. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    sig.extend(self.nodes[x.index()].value.data().iter().map(|&v| {
                        if v > 0.0 {
                            1
                        } else if v < 0.0 {
                            -1
                        } else {
                            0
                        }
                    }));
                }
                Op::GaussianSim { bands, .. } => {
                    for band in bands {
                        sig.push(band.picks.len() as i64);
                        for &(r, c, _) in &band.picks {
                            sig.push(r as i64);
                            sig.push(c as i64);
                        }
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Returns the name-free index of the first non-finite node value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.value.is_finite())
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index() >= self.nodes.len() {
            return Err(GksError::NotOnTape(format!(
                "loss variable {} is not recorded on this tape",
                loss.idx
            )));
        }
        if self.nodes[loss.index()].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index()].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(Tensor::full(self.nodes[loss.index()].value.shape(), 1.0));

        for i in (0..=loss.index()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.index()].needs_grad {
            return;
        }
        match &mut grads[v.index()] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, geom, col } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*x),
                    col.as_deref(),
                    self.value(*k),
                    g,
                    self.wants(*x),
                );
                if let Some(dx) = cg.input {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *k, cg.kernel);
                self.accumulate(grads, *b, cg.bias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let gv = self.value(*gamma);
                let (dx, dg, db) = kernels::batch_norm_backward(cache, gv.data(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::new(gv.shape(), dg)?);
                self.accumulate(grads, *beta, Tensor::new(gv.shape(), db)?);
            }
            Op::Matmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    gemm(false, true, m, n, k, g.data(), bv.data(), 0.0, da.data_mut());
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    gemm(true, false, k, m, n, av.data(), g.data(), 0.0, db.data_mut());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchedMatmul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (_, m, k) = kernels::dims3(av, "")?;
                let n = bv.shape()[2];
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    for ((gc, bc), dc) in g
                        .data()
                        .chunks_exact(m * n)
                        .zip(bv.data().chunks_exact(k * n))
                        .zip(da.data_mut().chunks_exact_mut(m * k))
                    {
                        gemm(false, true, m, n, k, gc, bc, 0.0, dc);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    for ((ac, gc), dc) in av
                        .data()
                        .chunks_exact(m * k)
                        .zip(g.data().chunks_exact(m * n))
                        .zip(db.data_mut().chunks_exact_mut(k * n))
                    {
                        gemm(true, false, k, m, n, ac, gc, 0.0, dc);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AdjPropagate { adj, y } => {
                let (av, yv) = (self.value(*adj), self.value(*y));
                let (_, n, d) = kernels::dims3(yv, "")?;
                if self.wants(*adj) {
                    let mut da = Tensor::zeros(av.shape());
                    for (gc, yc) in g.data().chunks_exact(n * d).zip(yv.data().chunks_exact(n * d)) {
                        gemm(false, true, n, d, n, gc, yc, 1.0, da.data_mut());
                    }
                    self.accumulate(grads, *adj, da);
                }
                if self.wants(*y) {
                    let mut dy = Tensor::zeros(yv.shape());
                    for (gc, dc) in g
                        .data()
                        .chunks_exact(n * d)
                        .zip(dy.data_mut().chunks_exact_mut(n * d))
                    {
                        gemm(true, false, n, n, d, av.data(), gc, 0.0, dc);
                    }
                    self.accumulate(grads, *y, dy);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = Tensor::new(
                    xv.shape(),
                    xv.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let prod = |t: &Tensor| {
                    Tensor::new(
                        g.shape(),
                        g.data().iter().zip(t.data()).map(|(x, y)| x * y).collect(),
                    )
                };
                if self.wants(*a) {
                    self.accumulate(grads, *a, prod(bv)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, prod(av)?);
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).len();
                let mut db = Tensor::zeros(&[n]);
                for row in g.data().chunks_exact(n) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *bias, db);
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).shape())?);
            }
            Op::Concat { parts } => {
                let total = *g.shape().last().unwrap();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape();
                    let w = *shape.last().unwrap();
                    if self.wants(p) {
                        let mut dp = Tensor::zeros(shape);
                        let dd = dp.data_mut();
                        for r in 0..rows {
                            dd[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SoftmaxRows { x } => {
                let dx = kernels::softmax_rows_backward(&node.value, g);
                self.accumulate(grads, *x, dx);
            }
            Op::CosineSim { a, b, na, nb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bsz, m, d) = kernels::dims3(av, "")?;
                let n = bv.shape()[1];
                let ua = unit_rows(av.data(), na, d);
                let ub = unit_rows(bv.data(), nb, d);
                let mut dua = vec![0.0; bsz * m * d];
                let mut dub = vec![0.0; bsz * n * d];
                for item in 0..bsz {
                    let gc = &g.data()[item * m * n..(item + 1) * m * n];
                    let uac = &ua[item * m * d..(item + 1) * m * d];
                    let ubc = &ub[item * n * d..(item + 1) * n * d];
                    gemm(false, false, m, n, d, gc, ubc, 0.0, &mut dua[item * m * d..(item + 1) * m * d]);
                    gemm(true, false, n, m, d, gc, uac, 0.0, &mut dub[item * n * d..(item + 1) * n * d]);
                }
                if self.wants(*a) {
                    let da = unit_rows_backward(&ua, &dua, na, d);
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.wants(*b) {
                    let db = unit_rows_backward(&ub, &dub, nb, d);
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::GaussianSim { a, b, bands } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (_, m, d) = kernels::dims3(av, "")?;
                let n = bv.shape()[1];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (item, band) in bands.iter().enumerate() {
                    let kc = &node.value.data()[item * m * n..(item + 1) * m * n];
                    let gc = &g.data()[item * m * n..(item + 1) * m * n];
                    let ac = &av.data()[item * m * d..(item + 1) * m * d];
                    let bc = &bv.data()[item * n * d..(item + 1) * n * d];
                    let sq = pairwise_sq_dist(ac, bc, m, n, d);
                    let s2 = band.sigma * band.sigma;
                    // gradient with respect to each squared distance
                    let mut gsq: Vec<f64> = kc
                        .iter()
                        .zip(gc)
                        .map(|(k, gv)| -gv * k / (2.0 * s2))
                        .collect();
                    if !band.picks.is_empty() {
                        let dsigma: f64 = kc
                            .iter()
                            .zip(gc)
                            .zip(&sq)
                            .map(|((k, gv), s)| gv * k * s)
                            .sum::<f64>()
                            / (s2 * band.sigma);
                        for &(r, c, w) in &band.picks {
                            let dist = sq[r * n + c].sqrt();
                            if dist > 0.0 {
                                gsq[r * n + c] += w * dsigma / (2.0 * dist);
                            }
                        }
                    }
                    let dac = &mut da[item * m * d..(item + 1) * m * d];
                    let dbc = &mut db[item * n * d..(item + 1) * n * d];
                    for i in 0..m {
                        for j in 0..n {
                            let w = 2.0 * gsq[i * n + j];
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                let diff = ac[i * d + t] - bc[j * d + t];
                                dac[i * d + t] += w * diff;
                                dbc[j * d + t] -= w * diff;
                            }
                        }
                    }
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let dl = kernels::cross_entropy_backward(probs, labels, g.item());
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

fn unit_rows(data: &[f64], norms: &[f64], d: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    if d == 0 {
        return out;
    }
    for (row, &nrm) in out.chunks_exact_mut(d).zip(norms) {
        if nrm > 0.0 {
            row.iter_mut().for_each(|v| *v /= nrm);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Gradient through `u = x / |x|` given `du`.
fn unit_rows_backward(units: &[f64], du: &[f64], norms: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; units.len()];
    if d == 0 {
        return dx;
    }
    for (((dxr, ur), gr), &nrm) in dx
        .chunks_exact_mut(d)
        .zip(units.chunks_exact(d))
        .zip(du.chunks_exact(d))
        .zip(norms)
    {
        if nrm == 0.0 {
            continue;
        }
        let dot: f64 = ur.iter().zip(gr).map(|(u, g)| u * g).sum();
        for t in 0..d {
            dxr[t] = (gr[t] - dot * ur[t]) / nrm;
        }
    }
    dx
}

fn pairwise_sq_dist(a: &[f64], b: &[f64], m: usize, n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &b[j * d..(j + 1) * d];
            out[i * n + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    out
}

fn median_bandwidth(sq: &[f64], n: usize) -> Bandwidth {
    let mut order: Vec<usize> = (0..sq.len()).collect();
    order.sort_by(|&x, &y| sq[x].total_cmp(&sq[y]).then(x.cmp(&y)));
    let len = order.len();
    let picks: Vec<(usize, f64)> = if len % 2 == 1 {
        vec![(order[len / 2], 1.0)]
    } else {
        vec![(order[len / 2 - 1], 0.5), (order[len / 2], 0.5)]
    };
    let sigma: f64 = picks.iter().map(|&(i, w)| w * sq[i].sqrt()).sum();
    if sigma > 0.0 && sigma.is_finite() {
        Bandwidth {
            sigma,
            picks: picks.into_iter().map(|(i, w)| (i / n, i % n, w)).collect(),
        }
    } else {
        Bandwidth {
            sigma: 1.0,
            picks: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let theta = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0));
        let loss = tape.sum(theta);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(theta).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gives_theta() {
        let mut tape = Tape::new();
        let t = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let theta = tape.param(t.clone());
        let sq = tape.mul(theta, theta).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta).unwrap(), &t);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[3], 2.0));
        let a = tape.scale(x, 3.0);
        let b = tape.scale(x, 4.0);
        let c = tape.add(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn loss_from_other_tape_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t2.param(Tensor::scalar(1.0));
        let l = t2.sum(x);
        let _ = t1.param(Tensor::scalar(1.0));
        assert!(matches!(t1.backward(l), Err(GksError::NotOnTape(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let p = tape.param(Tensor::full(&[2], 1.0));
        let s = tape.add(c, p).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn median_bandwidth_odd_and_even() {
        let b = median_bandwidth(&[1.0, 9.0, 4.0], 3);
        assert_eq!(b.sigma, 2.0);
        assert_eq!(b.picks, vec![(0, 2, 1.0)]);
        let b = median_bandwidth(&[1.0, 9.0, 4.0, 16.0], 2);
        assert_eq!(b.sigma, 2.5);
        let b = median_bandwidth(&[0.0; 4], 2);
        assert_eq!(b.sigma, 1.0);
        assert!(b.picks.is_empty());
    }
}
