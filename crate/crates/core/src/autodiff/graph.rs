use super::kernels::{self, ConvGeom};
use crate::error::{PctError, Result};
use crate::losses::MarginVariant;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    ConcatLast(Vec<Var>),
    Relu(Var),
    SoftmaxLast(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddChannelBias(Var, Var),
    MeanLast(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeLast {
        x: Var,
        norms: Vec<f64>,
    },
    MarginTarget {
        cos: Var,
        labels: Vec<usize>,
        variant: MarginVariant,
        scale: f64,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    RelPosBias {
        rows: Var,
        cols: Var,
        height: usize,
        width: usize,
        max_offset: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Lower clamp applied to cosines before `arccos`.
pub const COS_CLAMP: f64 = 1e-7;

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node index is a valid topological order for the reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_links: Vec<(Var, ParamId)>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous [`Graph::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records a trainable leaf for parameter `id`; its gradient is handed
    /// back by [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone().with_requires_grad(true);
        let v = self.leaf(value);
        self.param_links.push((v, id));
        v
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_raw(Tensor::from_parts(shape, data).with_requires_grad(rg), op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(PctError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), data, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Scale(a, c))
    }

    /// `x + y` where `y`'s shape equals the trailing dims of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(PctError::shape("add_broadcast", xs, ys));
        }
        let yd = self.value(y).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(yd.len()) {
            for (a, b) in chunk.iter_mut().zip(yd) {
                *a += b;
            }
        }
        Ok(self.push(xs.to_vec(), data, &[x, y], Op::AddBroadcast(x, y)))
    }

    /// Matrix product. `a` is `[m,k]` or `[B,m,k]`; `b` is `[k,n]` (shared
    /// across the batch) or `[B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n, shared) = matmul_dims(self.shape(a), self.shape(b))?;
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if shared {
            kernels::gemm_nn(ad, bd, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                kernels::gemm_nn(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if self.shape(a).len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Ok(self.push(shape, out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(PctError::shape("transpose", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let data = kernels::transpose_last2(self.value(a).data(), batch, rows, cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(shape, data, &[a], Op::TransposeLast2(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(PctError::shape("reshape", self.shape(a), shape));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.push(shape.to_vec(), data, &[a], Op::Reshape(a)))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| PctError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(PctError::shape("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, data, parts, Op::ConcatLast(parts.to_vec())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Relu(a))
    }

    /// Softmax over the last axis, one row at a time.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(PctError::Numeric("NaN in softmax input".into()));
        }
        let len = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        kernels::softmax_rows_inplace(&mut data, len);
        Ok(self.push(t.shape().to_vec(), data, &[a], Op::SoftmaxLast(a)))
    }

    /// Cross-correlation of NCHW input `x` with OIKK `kernel`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(PctError::Config(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != ks[3] || xs[1] != ks[1] {
            return Err(PctError::shape("conv2d", &xs, &ks));
        }
        if xs[2] + 2 * pad < ks[2] || xs[3] + 2 * pad < ks[2] {
            return Err(PctError::shape("conv2d", &xs, &ks));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ks[2],
            stride,
            pad,
        };
        let (batch, out_c) = (xs[0], ks[0]);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let img_len = xs[1] * xs[2] * xs[3];
        let mut cols = vec![0.0; batch * rows * ncols];
        let mut out = vec![0.0; batch * out_c * ncols];
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        for b in 0..batch {
            let col_b = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
            kernels::im2col(&xd[b * img_len..(b + 1) * img_len], &geom, col_b);
            kernels::gemm_nn(
                kd,
                col_b,
                &mut out[b * out_c * ncols..(b + 1) * out_c * ncols],
                out_c,
                rows,
                ncols,
            );
        }
        let shape = vec![batch, out_c, geom.out_h(), geom.out_w()];
        Ok(self.push(
            shape,
            out,
            &[x, kernel],
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Adds a per-channel bias `[C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(bias) != [xs[1]] {
            return Err(PctError::shape("add_channel_bias", &xs, self.shape(bias)));
        }
        let plane = xs[2] * xs[3];
        let bd = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let bv = bd[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(xs, data, &[x, bias], Op::AddChannelBias(x, bias)))
    }

    /// Mean over the last axis; the axis is dropped.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(PctError::shape("mean_last", &s, &[]));
        }
        let len = s[s.len() - 1];
        let data = self
            .value(a)
            .data()
            .chunks_exact(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        Ok(self.push(s[..s.len() - 1].to_vec(), data, &[a], Op::MeanLast(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(vec![1], vec![total], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.push(vec![1], vec![m], &[a], Op::Mean(a))
    }

    /// Scales each row (last axis) to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let len = *t.shape().last().unwrap();
        let mut norms = Vec::with_capacity(t.numel() / len);
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(len) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(PctError::Numeric(format!(
                    "cannot normalize a row with norm {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let shape = t.shape().to_vec();
        Ok(self.push(shape, data, &[a], Op::L2NormalizeLast { x: a, norms }))
    }

    /// Turns a `[B,K]` cosine matrix into scaled margin logits: every cosine
    /// is clamped to `[-1+1e-7, 1-1e-7]`, the target column receives the
    /// angular or cosine margin, and everything is multiplied by `scale`.
    pub fn margin_logits(
        &mut self,
        cos: Var,
        labels: &[usize],
        variant: MarginVariant,
        scale: f64,
        margin: f64,
    ) -> Result<Var> {
        let s = self.shape(cos).to_vec();
        check_labels(&s, labels)?;
        let k = s[1];
        let mut data = self.value(cos).data().to_vec();
        for (row, &y) in data.chunks_exact_mut(k).zip(labels) {
            for (j, v) in row.iter_mut().enumerate() {
                let c = v.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP);
                *v = scale
                    * if j == y {
                        variant.apply(c, margin)
                    } else {
                        c
                    };
            }
        }
        Ok(self.push(
            s,
            data,
            &[cos],
            Op::MarginTarget {
                cos,
                labels: labels.to_vec(),
                variant,
                scale,
                margin,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[B,K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        check_labels(&s, labels)?;
        let k = s[1];
        let mut probs = self.value(logits).data().to_vec();
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(PctError::Numeric("non-finite logits".into()));
        }
        let mut total = 0.0;
        for (row, &y) in probs.chunks_exact_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let loss = total / labels.len() as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Builds an `[n,n]` additive logit bias (`n = height·width`) from learned
    /// row-offset and column-offset tables of length `2·max_offset+1`.
    /// Entry `(i,j)` reads offset `pos(j) − pos(i)`, clipped to `±max_offset`.
    pub fn rel_pos_bias(
        &mut self,
        rows: Var,
        cols: Var,
        height: usize,
        width: usize,
        max_offset: usize,
    ) -> Result<Var> {
        let len = 2 * max_offset + 1;
        if self.shape(rows) != [len] || self.shape(cols) != [len] {
            return Err(PctError::shape("rel_pos_bias", self.shape(rows), self.shape(cols)));
        }
        let n = height * width;
        let rd = self.value(rows).data();
        let cd = self.value(cols).data();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (dr, dc) = rel_offsets(i, j, width, max_offset);
                data[i * n + j] = rd[dr] + cd[dc];
            }
        }
        Ok(self.push(
            vec![n, n],
            data,
            &[rows, cols],
            Op::RelPosBias {
                rows,
                cols,
                height,
                width,
                max_offset,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(PctError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.param_links {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).value.accumulate_grad(g);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.to_vec());
                self.send(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.send(grads, *a, || zip_map(g, bd, |x, y| x * y));
                self.send(grads, *b, || zip_map(g, ad, |x, y| x * y));
            }
            Op::Scale(a, c) => self.send(grads, *a, || g.iter().map(|v| v * c).collect()),
            Op::AddBroadcast(x, y) => {
                self.send(grads, *x, || g.to_vec());
                let len = self.value(*y).numel();
                self.send(grads, *y, || {
                    let mut out = vec![0.0; len];
                    for chunk in g.chunks_exact(len) {
                        for (o, v) in out.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    out
                });
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::TransposeLast2(a) => {
                let s = self.shape(*a);
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = s[..s.len() - 2].iter().product();
                self.send(grads, *a, || kernels::transpose_last2(g, batch, cols, rows));
            }
            Op::Reshape(a) => self.send(grads, *a, || g.to_vec()),
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.send(grads, p, || {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out
                    });
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                self.send(grads, *a, || {
                    zip_map(g, ad, |gv, x| if x > 0.0 { gv } else { 0.0 })
                });
            }
            Op::SoftmaxLast(a) => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap();
                self.send(grads, *a, || {
                    let mut out = vec![0.0; y.len()];
                    for ((o, yr), gr) in out
                        .chunks_exact_mut(len)
                        .zip(y.chunks_exact(len))
                        .zip(g.chunks_exact(len))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    out
                });
            }
            Op::Conv2d {
                x,
                kernel,
                geom,
                cols,
            } => {
                let batch = self.shape(*x)[0];
                let out_c = self.shape(*kernel)[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                self.send(grads, *kernel, || {
                    let mut dk = vec![0.0; out_c * rows];
                    for b in 0..batch {
                        kernels::gemm_nt(
                            &g[b * out_c * ncols..(b + 1) * out_c * ncols],
                            &cols[b * rows * ncols..(b + 1) * rows * ncols],
                            &mut dk,
                            out_c,
                            ncols,
                            rows,
                        );
                    }
                    dk
                });
                let kd = self.value(*kernel).data();
                let img_len = geom.channels * geom.height * geom.width;
                self.send(grads, *x, || {
                    let mut dx = vec![0.0; batch * img_len];
                    let mut dcols = vec![0.0; rows * ncols];
                    for b in 0..batch {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(
                            kd,
                            &g[b * out_c * ncols..(b + 1) * out_c * ncols],
                            &mut dcols,
                            out_c,
                            rows,
                            ncols,
                        );
                        kernels::col2im(&dcols, geom, &mut dx[b * img_len..(b + 1) * img_len]);
                    }
                    dx
                });
            }
            Op::AddChannelBias(x, bias) => {
                self.send(grads, *x, || g.to_vec());
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                self.send(grads, *bias, || {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    db
                });
            }
            Op::MeanLast(a) => {
                let len = *self.shape(*a).last().unwrap();
                let inv = 1.0 / len as f64;
                self.send(grads, *a, || {
                    g.iter()
                        .flat_map(|&v| std::iter::repeat(v * inv).take(len))
                        .collect()
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, || vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, || vec![g[0] / n as f64; n]);
            }
            Op::L2NormalizeLast { x, norms } => {
                let y = node.value.data();
                let len = *node.value.shape().last().unwrap();
                self.send(grads, *x, || {
                    let mut out = vec![0.0; y.len()];
                    for (((o, yr), gr), n) in out
                        .chunks_exact_mut(len)
                        .zip(y.chunks_exact(len))
                        .zip(g.chunks_exact(len))
                        .zip(norms)
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = (gv - yv * dot) / n;
                        }
                    }
                    out
                });
            }
            Op::MarginTarget {
                cos,
                labels,
                variant,
                scale,
                margin,
            } => {
                let cd = self.value(*cos).data();
                let k = self.shape(*cos)[1];
                self.send(grads, *cos, || {
                    let mut out = vec![0.0; cd.len()];
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let c = cd[i * k + j];
                            if c <= -1.0 + COS_CLAMP || c >= 1.0 - COS_CLAMP {
                                continue;
                            }
                            let local = if j == y {
                                variant.derivative(c, *margin)
                            } else {
                                1.0
                            };
                            out[i * k + j] = g[i * k + j] * scale * local;
                        }
                    }
                    out
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let coef = g[0] / labels.len() as f64;
                self.send(grads, *logits, || {
                    let mut out: Vec<f64> = probs.iter().map(|p| p * coef).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        out[i * k + y] -= coef;
                    }
                    out
                });
            }
            Op::RelPosBias {
                rows,
                cols,
                height,
                width,
                max_offset,
            } => {
                let n = height * width;
                let len = 2 * max_offset + 1;
                let mut dr = vec![0.0; len];
                let mut dc = vec![0.0; len];
                for i in 0..n {
                    for j in 0..n {
                        let (r, c) = rel_offsets(i, j, *width, *max_offset);
                        dr[r] += g[i * n + j];
                        dc[c] += g[i * n + j];
                    }
                }
                self.send(grads, *rows, || dr);
                self.send(grads, *cols, || dc);
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (batch, m, k, n, shared) =
            matmul_dims(self.shape(a), self.shape(b)).expect("validated in forward");
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        self.send(grads, a, || {
            let mut da = vec![0.0; ad.len()];
            if shared {
                kernels::gemm_nt(g, bd, &mut da, batch * m, n, k);
            } else {
                for i in 0..batch {
                    kernels::gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            da
        });
        self.send(grads, b, || {
            let mut db = vec![0.0; bd.len()];
            if shared {
                kernels::gemm_tn(ad, g, &mut db, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::gemm_tn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            db
        });
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, make: impl FnOnce() -> Vec<f64>) {
        if !self.requires_grad(to) {
            return;
        }
        let delta = make();
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(PctError::shape("labels", shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(PctError::Contract(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(())
}

/// Returns `(batch, m, k, n, shared_rhs)`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    let err = || PctError::shape("matmul", a, b);
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((1, a[0], a[1], b[1], true)),
        (3, 2) if a[2] == b[0] => Ok((a[0], a[1], a[2], b[1], true)),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok((a[0], a[1], a[2], b[2], false)),
        _ => Err(err()),
    }
}

/// Table indices for the clipped (row, column) offset from position `i` to `j`.
fn rel_offsets(i: usize, j: usize, width: usize, max_offset: usize) -> (usize, usize) {
    let m = max_offset as isize;
    let dr = (j / width) as isize - (i / width) as isize;
    let dc = (j % width) as isize - (i % width) as isize;
    ((dr.clamp(-m, m) + m) as usize, (dc.clamp(-m, m) + m) as usize)
}
