//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every op applied to [`Var`] handles. Nodes are
//! append-only, so parents always precede children and [`Tape::backward`]
//! can sweep the node list once in reverse.

use crate::error::{Error, Result};
use crate::tensor::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one node. Receives the upstream gradient, the
/// parent values, the node's own output and which parents want a gradient.
type BackwardFn = Box<dyn Fn(&[f64], &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    is_leaf: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
    masked_rows: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
            masked_rows: 0,
        }
    }

    /// Enables or disables the post-op finiteness check (on by default in
    /// debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Number of softmax rows that had every entry masked so far. Such rows
    /// are emitted as all-zero rows instead of NaN.
    pub fn masked_rows(&self) -> usize {
        self.masked_rows
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: requires_grad,
            is_leaf: true,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, present once a backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a scalar `loss`, adding `dloss/dleaf` into every
    /// leaf that requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.is_leaf {
                if node.needs_grad {
                    accumulate(&mut self.leaf_grads[id], g);
                }
                continue;
            }
            let Some(backward) = &node.backward else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let pgrads = backward(&g, &parents, &node.value, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                if let (Some(pg), true) = (pg, need) {
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, op: &'static str, value: Tensor, parents: &[Var], backward: BackwardFn) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: needs_grad.then_some(backward),
            needs_grad,
            is_leaf: false,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let value = Tensor::new([m, n], out)?;
        self.push(
            "matmul",
            value,
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, p[1].data(), true, 0.0, &mut d);
                    d
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, p[0].data(), true, g, false, 0.0, &mut d);
                    d
                });
                vec![da, db]
            }),
        )
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let value = Tensor::new([m, n], out)?;
        self.push(
            "matmul_nt",
            value,
            &[a, b],
            Box::new(move |g, p, _, needs| {
                let da = needs[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, p[1].data(), false, 0.0, &mut d);
                    d
                });
                let db = needs[1].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(n, m, k, g, true, p[0].data(), false, 0.0, &mut d);
                    d
                });
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "transpose")?;
        let value = Tensor::new([n, m], transpose(m, n, self.value(a).data()))?;
        self.push(
            "transpose",
            value,
            &[a],
            Box::new(move |g, _, _, _| vec![Some(transpose(n, m, g))]),
        )
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add", value, &[a, b], Box::new(|g, _, _, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("sub", value, &[a, b], Box::new(|g, _, _, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|x| -x).collect())]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        self.push("mul", value, &[a, b], Box::new(|g, p, _, needs| {
            vec![
                needs[0].then(|| zip_map(g, p[1].data(), |g, y| g * y)),
                needs[1].then(|| zip_map(g, p[0].data(), |g, x| g * x)),
            ]
        }))
    }

    /// Adds the row vector `b` (length `n`) to every row of `a` (`m x n`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "add_row")?;
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_exact_mut(n.max(1)).take(m) {
            row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new([m, n], data)?;
        self.push("add_row", value, &[a, b], Box::new(move |g, _, _, needs| {
            let db = needs[1].then(|| {
                let mut d = vec![0.0; n];
                for row in g.chunks_exact(n.max(1)).take(m) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                d
            });
            vec![needs[0].then(|| g.to_vec()), db]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("scale", value, &[a], Box::new(move |g, _, _, _| {
            vec![Some(g.iter().map(|x| x * factor).collect())]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("relu", value, &[a], Box::new(|g, p, _, _| {
            vec![Some(zip_map(g, p[0].data(), |g, x| if x > 0.0 { g } else { 0.0 }))]
        }))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x.abs()).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("abs", value, &[a], Box::new(|g, p, _, _| {
            vec![Some(zip_map(g, p[0].data(), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))]
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("sigmoid", value, &[a], Box::new(|g, _, y, _| {
            vec![Some(zip_map(g, y.data(), |g, y| g * y * (1.0 - y)))]
        }))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        let n = self.value(a).numel();
        self.push("sum", Tensor::scalar(total), &[a], Box::new(move |g, _, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along `axis`. `mask` is an optional additive tensor of the same
    /// shape; entries whose masked logit is `-inf` come out as exactly zero.
    /// A slice with every entry masked becomes an all-zero slice and is
    /// counted in [`Tape::masked_rows`].
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("softmax", &shape, m.shape()));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        let mut dead = 0;
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut hi = f64::NEG_INFINITY;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = x[at(j)] + mask.map_or(0.0, |m| m.data()[at(j)]);
                    hi = hi.max(*b);
                }
                if hi == f64::NEG_INFINITY {
                    dead += 1;
                    continue;
                }
                let mut z = 0.0;
                for b in buf.iter_mut() {
                    *b = if *b == f64::NEG_INFINITY { 0.0 } else { (*b - hi).exp() };
                    z += *b;
                }
                for (j, b) in buf.iter().enumerate() {
                    y[at(j)] = b / z;
                }
            }
        }
        self.masked_rows += dead;
        let value = Tensor::new(shape, y)?;
        self.push("softmax", value, &[a], Box::new(move |g, _, y, _| {
            let y = y.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Row-wise layer normalization of `a` (`m x d`) with affine `gamma`,
    /// `beta` (length `d`).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.mat_dims(a, "layer_norm")?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(a), self.shape(gamma)));
        }
        let x = self.value(a).data();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = vec![0.0; m * d];
        for r in 0..m {
            let row = &x[r * d..(r + 1) * d];
            let (mu, inv) = ln_stats(row, eps);
            for c in 0..d {
                y[r * d + c] = (row[c] - mu) * inv * gm[c] + bt[c];
            }
        }
        let value = Tensor::new([m, d], y)?;
        self.push("layer_norm", value, &[a, gamma, beta], Box::new(move |g, p, _, needs| {
            let x = p[0].data();
            let gm = p[1].data();
            let mut dx = vec![0.0; m * d];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            for r in 0..m {
                let row = &x[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let (mu, inv) = ln_stats(row, eps);
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for c in 0..d {
                    xhat[c] = (row[c] - mu) * inv;
                    dg[c] += gr[c] * xhat[c];
                    db[c] += gr[c];
                    let dxh = gr[c] * gm[c];
                    s1 += dxh;
                    s2 += dxh * xhat[c];
                }
                let k = inv / d as f64;
                for c in 0..d {
                    let dxh = gr[c] * gm[c];
                    dx[r * d + c] = k * (d as f64 * dxh - s1 - xhat[c] * s2);
                }
            }
            vec![needs[0].then_some(dx), needs[1].then_some(dg), needs[2].then_some(db)]
        }))
    }

    /// Elementwise binary focal loss computed from logits against `targets`
    /// in `[0, 1]`:
    /// `t·α(1−p)^γ·(−ln p) + (1−t)·(1−α)p^γ·(−ln(1−p))` with `p = σ(x)`.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("focal_loss", self.shape(logits), targets.shape()));
        }
        let data = zip_map(self.value(logits).data(), targets.data(), |x, t| focal_value(x, t, alpha, gamma));
        let value = Tensor::new(targets.shape(), data)?;
        let t = targets.data().to_vec();
        self.push("focal_loss", value, &[logits], Box::new(move |g, p, _, _| {
            let dx = p[0]
                .data()
                .iter()
                .zip(&t)
                .zip(g)
                .map(|((&x, &t), &g)| g * focal_grad(x, t, alpha, gamma))
                .collect();
            vec![Some(dx)]
        }))
    }

    // ----------------------------------------------------------- re-layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[a], Box::new(|g, _, _, _| vec![Some(g.to_vec())]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, n) = self.mat_dims(first, "concat_rows")?;
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            let (_, c) = self.mat_dims(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            offsets.push((data.len(), self.value(p).numel()));
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new([data.len() / n.max(1), n], data)?;
        self.push("concat_rows", value, parts, Box::new(move |g, _, _, needs| {
            offsets
                .iter()
                .zip(needs)
                .map(|(&(o, len), &need)| need.then(|| g[o..o + len].to_vec()))
                .collect()
        }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (m, _) = self.mat_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat_dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new([m, total], data)?;
        self.push("concat_cols", value, parts, Box::new(move |g, _, _, needs| {
            let mut off = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let d = need.then(|| {
                        let mut d = vec![0.0; m * w];
                        for r in 0..m {
                            d[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        d
                    });
                    off += w;
                    d
                })
                .collect()
        }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::invalid(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let value = Tensor::new([end - start, n], data)?;
        self.push("slice_rows", value, &[a], Box::new(move |g, _, _, _| {
            let mut d = vec![0.0; m * n];
            d[start * n..end * n].copy_from_slice(g);
            vec![Some(d)]
        }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of {n} cols")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        let value = Tensor::new([m, w], data)?;
        self.push("slice_cols", value, &[a], Box::new(move |g, _, _, _| {
            let mut d = vec![0.0; m * n];
            for r in 0..m {
                d[r * n + start..r * n + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(d)]
        }))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.regroup_rows(a, rows, 1)
    }

    /// Builds each output row by concatenating `group` source rows. `indices`
    /// holds `out_rows * group` row indices; [`PAD`] contributes zeros. This
    /// is the im2col / patch-merge primitive.
    pub fn regroup_rows(&mut self, a: Var, indices: &[usize], group: usize) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "regroup_rows")?;
        if group == 0 || indices.len() % group != 0 {
            return Err(Error::invalid("regroup_rows: index count not a multiple of group"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i != PAD && i >= m) {
            return Err(Error::invalid(format!("regroup_rows: row {bad} out of {m}")));
        }
        let out_rows = indices.len() / group;
        let src = self.value(a).data();
        let mut data = vec![0.0; indices.len() * n];
        for (slot, &i) in indices.iter().enumerate() {
            if i != PAD {
                data[slot * n..(slot + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new([out_rows, group * n], data)?;
        let indices = indices.to_vec();
        self.push("regroup_rows", value, &[a], Box::new(move |g, _, _, _| {
            let mut d = vec![0.0; m * n];
            for (slot, &i) in indices.iter().enumerate() {
                if i != PAD {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[slot * n..(slot + 1) * n])
                        .for_each(|(d, g)| *d += g);
                }
            }
            vec![Some(d)]
        }))
    }

    /// Each output row is a weighted sum of source rows: `out[r] = Σ w·a[i]`
    /// over the `(i, w)` pairs of `weights[r]`. Bilinear sampling and RoI
    /// pooling are expressed through this.
    pub fn weighted_rows(&mut self, a: Var, weights: &[Vec<(usize, f64)>]) -> Result<Var> {
        let (m, n) = self.mat_dims(a, "weighted_rows")?;
        if let Some(&(bad, _)) = weights.iter().flatten().find(|(i, _)| *i >= m) {
            return Err(Error::invalid(format!("weighted_rows: row {bad} out of {m}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; weights.len() * n];
        for (r, ws) in weights.iter().enumerate() {
            let out = &mut data[r * n..(r + 1) * n];
            for &(i, w) in ws {
                out.iter_mut().zip(&src[i * n..(i + 1) * n]).for_each(|(o, x)| *o += w * x);
            }
        }
        let value = Tensor::new([weights.len(), n], data)?;
        let weights = weights.to_vec();
        self.push("weighted_rows", value, &[a], Box::new(move |g, _, _, _| {
            let mut d = vec![0.0; m * n];
            for (r, ws) in weights.iter().enumerate() {
                let gr = &g[r * n..(r + 1) * n];
                for &(i, w) in ws {
                    d[i * n..(i + 1) * n].iter_mut().zip(gr).for_each(|(d, g)| *d += w * g);
                }
            }
            vec![Some(d)]
        }))
    }
}

/// Padding marker for [`Tape::regroup_rows`].
pub const PAD: usize = usize::MAX;

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g),
        None => *slot = Some(g),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose(m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = x[i * n + j];
        }
    }
    t
}

fn ln_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`sigmoid`] with the argument clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-5, 1.0 - 1e-5);
    (p / (1.0 - p)).ln()
}

fn focal_value(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-x);
    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(x);
    t * pos + (1.0 - t) * neg
}

fn focal_grad(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let dpos = alpha * (1.0 - p).powf(gamma) * (-gamma * p * softplus(-x) - (1.0 - p));
    let dneg = (1.0 - alpha) * p.powf(gamma) * (gamma * (1.0 - p) * softplus(x) + p);
    t * dpos + (1.0 - t) * dneg
}

/// Positive-class focal term `α(1−p)^γ·(−ln p)` for a probability `p`. Used
/// as the classification part of the matching cost.
pub fn focal_positive(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0);
    alpha * (1.0 - p).powf(gamma) * -p.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let i = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = t.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(mat(&[vec![1.0, 2.0]]));
        let b = t.constant(mat(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let y = t.softmax(x, 0, None).unwrap();
        for v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t.constant(Tensor::vector(vec![1f64.ln(), 3f64.ln()]));
        let y = t.softmax(x, 0, None).unwrap();
        assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

        let x = t.constant(Tensor::vector(vec![5.0, f64::NEG_INFINITY]));
        let y = t.softmax(x, 0, None).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero_and_flagged() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), true);
        let ninf = f64::NEG_INFINITY;
        let mask = Tensor::from_rows(&[vec![ninf, ninf], vec![0.0, ninf]]).unwrap();
        let y = t.softmax(x, 1, Some(&mask)).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.masked_rows(), 1);
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().is_finite());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let y = t.softmax(x, 0, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(-100.0);
        assert!(s > 0.0 && s < 1e-40);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(500.0).is_finite() && sigmoid(-500.0).is_finite());
        assert!(sigmoid(-500.0) >= 0.0);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5]), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
        // a second pass without reset accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_outputs_are_errors_when_checked() {
        let mut t = Tape::new();
        t.set_check_finite(true);
        let x = t.leaf(Tensor::vector(vec![f64::MAX]), true);
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn focal_closed_form_values() {
        assert!(focal_positive(1.0, 0.25, 2.0).abs() < 1e-15);
        let want = 0.25 * 0.25 * 2f64.ln();
        assert!((focal_positive(0.5, 0.25, 2.0) - want).abs() < 1e-15);
        assert!((focal_value(0.0, 1.0, 0.25, 2.0) - want).abs() < 1e-15);
        assert!((want - 0.04332).abs() < 1e-5);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.leaf(Tensor::vector(vec![2.0]), true);
        let c = t.mul(a, b).unwrap();
        t.backward(c).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(b).unwrap().data(), &[1.0]);
    }
}
