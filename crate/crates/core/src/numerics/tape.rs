use super::kernels;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    Softmax(Var),
    L2NormRows(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, rows: Vec<usize> },
    Sum(Var),
    /// Scalar function of one input whose local gradient was computed in the
    /// forward pass.
    ScalarFn { input: Var, local_grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations and replays their adjoints in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into the leaf `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, "elementwise")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Adds the length-`n` vector `b` to every row of `x[m×n]`.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        self.check_vector(b, n)?;
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, bj) in row.iter_mut().zip(bv) {
                *o += bj;
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRowVector(x, b), rg))
    }

    /// Multiplies column `j` of `x[m×n]` by `w[j]`.
    pub fn scale_cols(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        self.check_vector(w, n)?;
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(m) {
            for (o, wj) in row.iter_mut().zip(wv) {
                *o *= wj;
            }
        }
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ScaleCols(x, w), rg))
    }

    /// Multiplies row `i` of `x[m×n]` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        self.check_vector(w, m)?;
        let wv = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(n.max(1)).take(m).enumerate() {
            for o in row.iter_mut() {
                *o *= wv[i];
            }
        }
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ScaleRows(x, w), rg))
    }

    fn check_vector(&self, v: Var, len: usize) -> Result<()> {
        let shape = self.value(v).shape();
        if shape != [len] {
            return Err(Error::Dimension(format!(
                "expected vector of length {len}, got {shape:?}"
            )));
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn l2_norm_rows(&mut self, x: Var) -> Result<Var> {
        let out = super::l2_norm_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::L2NormRows(x), rg))
    }

    /// Root-mean-square normalisation of each row followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        self.check_vector(gain, n)?;
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                out[i * n + j] = row[j] * inv * g[j];
            }
        }
        let rg = self.any_grad(&[x, gain]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&z| 0.5 * z * (1.0 + (GELU_C * (z + 0.044_715 * z * z * z)).tanh()))
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start >= end || end > n {
            return Err(Error::Index(format!("column slice {start}..{end} of {n}")));
        }
        let w = end - start;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::Dimension(format!("concat rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `rows[r]` of `table` becomes output row `r`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(table)?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} of table with {m} rows")));
            }
            out.extend_from_slice(&tv[r * n..(r + 1) * n]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Records a scalar `value = f(input)` whose gradient `∂f/∂input` is
    /// already known. Custom fused losses go through here.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Tensor) -> Result<Var> {
        if local_grad.shape() != self.value(input).shape() {
            return Err(Error::Dimension(format!(
                "local gradient {:?} for input {:?}",
                local_grad.shape(),
                self.value(input).shape()
            )));
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::ScalarFn { input, local_grad }, rg))
    }

    /// `Σ_{i∈positions} −log softmax(logits[i])[targets[i]]`
    pub fn cross_entropy_at_positions(
        &mut self,
        logits: Var,
        targets: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let (loss, grad) = cross_entropy_value_and_grad(self.value(logits), targets, positions)?;
        self.scalar_fn(logits, loss, grad)
    }

    /// Replays adjoints from the scalar `loss`. Gradients are stored for
    /// every node that requires them and read back through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (_, n) = self.dims2(*b)?;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nt(gd, self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_tn(self.value(*a).data(), gd, &mut gb, m, k, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let (n, _) = self.dims2(*b)?;
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_nn(gd, self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; n * k];
                    kernels::matmul_tn(gd, self.value(*a).data(), &mut gb, m, n, k);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect());
            }
            Op::AddRowVector(x, b) => {
                let (_, n) = self.dims2(*x)?;
                self.accumulate(grads, *x, gd.to_vec());
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *b, gb);
            }
            Op::ScaleCols(x, w) => {
                let (_, n) = self.dims2(*x)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gx = gd.iter().enumerate().map(|(e, g)| g * wv[e % n]).collect();
                let mut gw = vec![0.0; n];
                for (e, g) in gd.iter().enumerate() {
                    gw[e % n] += g * xv[e];
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::ScaleRows(x, w) => {
                let (m, n) = self.dims2(*x)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gx = gd.iter().enumerate().map(|(e, g)| g * wv[e / n]).collect();
                let gw = (0..m)
                    .map(|i| kernels::dot(&gd[i * n..(i + 1) * n], &xv[i * n..(i + 1) * n]))
                    .collect();
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims2(*x)?;
                let y = node.value.data();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let inner = kernels::dot(yr, gr);
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2NormRows(x) => {
                let (_, n) = self.dims2(*x)?;
                let xv = self.value(*x).data();
                let norms = node.value.data();
                let gx = xv
                    .iter()
                    .enumerate()
                    .map(|(e, v)| {
                        let r = e / n;
                        if norms[r] > 0.0 {
                            gd[r] * v / norms[r]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = self.dims2(*x)?;
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                for i in 0..m {
                    let inv = inv_rms[i];
                    let xr = &xv[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let mut proj = 0.0;
                    for j in 0..n {
                        let xhat = xr[j] * inv;
                        ggain[j] += gr[j] * xhat;
                        proj += gr[j] * gv[j] * xhat;
                    }
                    proj /= n as f64;
                    for j in 0..n {
                        let xhat = xr[j] * inv;
                        gx[i * n + j] = (gr[j] * gv[j] - xhat * proj) * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, ggain);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&z, g)| {
                        let u = GELU_C * (z + 0.044_715 * z * z * z);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044_715 * z * z);
                        g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x)?;
                let w = node.value.shape()[1];
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut gp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        gp.extend_from_slice(&gd[i * n + offset..i * n + offset + w]);
                    }
                    self.accumulate(grads, p, gp);
                    offset += w;
                }
            }
            Op::GatherRows { table, rows } => {
                let (tm, n) = self.dims2(*table)?;
                let mut gt = vec![0.0; tm * n];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..n {
                        gt[src * n + j] += gd[r * n + j];
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::ScalarFn { input, local_grad } => {
                let up = gd[0];
                self.accumulate(grads, *input, local_grad.data().iter().map(|v| v * up).collect());
            }
        }
        Ok(())
    }
}

pub(super) fn cross_entropy_value_and_grad(
    logits: &Tensor,
    targets: &[usize],
    positions: &[usize],
) -> Result<(f64, Tensor)> {
    let (l, v) = logits.dims2()?;
    if targets.len() != l {
        return Err(Error::Dimension(format!(
            "{} targets for {l} logit rows",
            targets.len()
        )));
    }
    let mut grad = Tensor::zeros(&[l, v]);
    let mut loss = 0.0;
    for &i in positions {
        if i >= l {
            return Err(Error::Index(format!("position {i} of {l}")));
        }
        let t = targets[i];
        if t >= v {
            return Err(Error::Index(format!("target id {t} with vocab {v}")));
        }
        let row = logits.row(i);
        let lse = kernels::log_sum_exp(row);
        loss += lse - row[t];
        let g = &mut grad.data_mut()[i * v..(i + 1) * v];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj += (z - lse).exp();
        }
        g[t] -= 1.0;
    }
    Ok((loss, grad))
}
