//! Forward definitions of the differentiable primitives.

use super::tape::{norm, BinaryKind, Op, Tape, UnaryKind, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-12;

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source.
/// `None` when the source already has the output shape.
fn broadcast_map(src: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if src == out {
        return None;
    }
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(map)
}

fn split_last(shape: &[usize]) -> (usize, Vec<usize>) {
    let width = shape.last().copied().unwrap_or(1);
    let lead = if shape.is_empty() { Vec::new() } else { shape[..shape.len() - 1].to_vec() };
    (width, lead)
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, bpj) in orow.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let value = Tensor::from_parts_unchecked(vec![m, n], out);
        self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b], "matmul")
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out_shape = broadcast_shapes(self.shape(a), self.shape(b))?;
        let a_map = broadcast_map(self.shape(a), &out_shape);
        let b_map = broadcast_map(self.shape(b), &out_shape);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let x = av[a_map.as_ref().map_or(i, |m| m[i])];
            let y = bv[b_map.as_ref().map_or(i, |m| m[i])];
            out.push(match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    x / y
                }
            });
        }
        let value = Tensor::from_parts_unchecked(out_shape, out);
        let name = format!("{kind:?}").to_lowercase();
        self.push(value, Op::Binary { kind, a, b, a_map, b_map }, &[a, b], &name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Applies an elementwise unary map.
    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if let UnaryKind::Clamp { lo, hi } = kind {
            if !(lo < hi) {
                return Err(Error::Parameter(format!("clamp bounds [{lo}, {hi}]")));
            }
        }
        if kind == UnaryKind::Log {
            if let Some(i) = src.data().iter().position(|&v| v <= 0.0) {
                return Err(Error::Domain(format!(
                    "log of non-positive value {} at flat index {i}",
                    src.data()[i]
                )));
            }
        }
        let data = src
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Scale(c) => v * c,
                UnaryKind::AddScalar(c) => v + c,
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Log => v.ln(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Clamp { lo, hi } => v.clamp(lo, hi),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Abs => v.abs(),
            })
            .collect();
        let value = Tensor::from_parts_unchecked(src.shape().to_vec(), data);
        self.push(value, Op::Unary { kind, x }, &[x], "unary")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp { lo, hi }, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }

    /// Zero-mean, unit-variance rows over the last axis (biased variance).
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, _) = split_last(src.shape());
        let mut out = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::with_capacity(src.numel() / w);
        for (r, row) in src.data().chunks_exact(w).enumerate() {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let denom = var + eps;
            if !(denom > 0.0) {
                return Err(Error::Degenerate(format!(
                    "zero variance with eps = {eps} in row {r}; normalization would divide by zero"
                )));
            }
            let inv = 1.0 / denom.sqrt();
            inv_std.push(inv);
            out.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::from_parts_unchecked(src.shape().to_vec(), out);
        self.push(value, Op::Standardize { x, width: w, inv_std }, &[x], "standardize")
    }

    /// Standardizes over the last axis then applies `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            self.check(p)?;
            if self.shape(p) != [d] {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} has shape {:?}, expected [{d}]",
                    self.shape(p)
                )));
            }
        }
        if d == 1 && eps == 0.0 {
            return Err(Error::Degenerate(
                "layer_norm over a single feature with eps = 0 divides by zero".into(),
            ));
        }
        let z = self.standardize(x, eps)?;
        let scaled = self.mul(z, gamma)?;
        self.add(scaled, beta)
    }

    /// Rows rescaled to unit L2 norm over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, _) = split_last(src.shape());
        let mut out = Vec::with_capacity(src.numel());
        let mut norms = Vec::with_capacity(src.numel() / w);
        for (r, row) in src.data().chunks_exact(w).enumerate() {
            let n = norm(row);
            if n <= MIN_NORM {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::from_parts_unchecked(src.shape().to_vec(), out);
        self.push(value, Op::L2Normalize { x, width: w, norms }, &[x], "l2_normalize")
    }

    /// Row-wise cosine similarity of two equally shaped tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "cosine similarity of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (w, lead) = split_last(self.shape(a));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() / w);
        for (r, (ar, br)) in av.chunks_exact(w).zip(bv.chunks_exact(w)).enumerate() {
            let (na, nb) = (norm(ar), norm(br));
            if na <= MIN_NORM || nb <= MIN_NORM {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            out.push((dot / (na * nb)).clamp(-1.0, 1.0));
        }
        let value = Tensor::from_parts_unchecked(lead, out);
        self.push(value, Op::RowCosine { a, b, width: w }, &[a, b], "cosine_similarity")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, _) = split_last(src.shape());
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::from_parts_unchecked(src.shape().to_vec(), out);
        self.push(value, Op::Softmax { x, width: w }, &[x], "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, _) = split_last(src.shape());
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::from_parts_unchecked(src.shape().to_vec(), out);
        self.push(value, Op::LogSoftmax { x, width: w }, &[x], "log_softmax")
    }

    /// Mean of the `k` largest entries along the last axis. Ties go to the
    /// lowest index; the selected entries are summed in index order.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, lead) = split_last(src.shape());
        if k == 0 || k > w {
            return Err(Error::Parameter(format!("top-k with k = {k} over an axis of {w}")));
        }
        let mut out = Vec::with_capacity(src.numel() / w);
        let mut selected = Vec::with_capacity(src.numel() / w * k);
        for (r, row) in src.data().chunks_exact(w).enumerate() {
            let mut chosen = top_indices(row, k);
            chosen.sort_unstable();
            let sum: f64 = chosen.iter().map(|&j| row[j]).sum();
            out.push(sum / k as f64);
            selected.extend(chosen.into_iter().map(|j| r * w + j));
        }
        let value = Tensor::from_parts_unchecked(lead, out);
        self.push(value, Op::TopKMean { x, k, selected }, &[x], "topk_mean")
    }

    /// Maximum along the last axis (lowest index on ties).
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, lead) = split_last(src.shape());
        let mut out = Vec::with_capacity(src.numel() / w);
        let mut selected = Vec::with_capacity(src.numel() / w);
        for (r, row) in src.data().chunks_exact(w).enumerate() {
            let j = argmax(row);
            out.push(row[j]);
            selected.push(r * w + j);
        }
        let value = Tensor::from_parts_unchecked(lead, out);
        self.push(value, Op::MaxLast { x, selected }, &[x], "max_last")
    }

    /// Mean along the last axis: index-order sum divided by the axis length.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, lead) = split_last(src.shape());
        let out = src.data().chunks_exact(w).map(|r| r.iter().sum::<f64>() / w as f64).collect();
        let value = Tensor::from_parts_unchecked(lead, out);
        self.push(value, Op::MeanLast { x, width: w }, &[x], "mean_last")
    }

    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let (w, lead) = split_last(src.shape());
        let out = src.data().chunks_exact(w).map(|r| r.iter().sum::<f64>()).collect();
        let value = Tensor::from_parts_unchecked(lead, out);
        self.push(value, Op::SumLast { x, width: w }, &[x], "sum_last")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(total), Op::SumAll { x }, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let total = src.data().iter().sum::<f64>() / src.numel() as f64;
        self.push(Tensor::scalar(total), Op::MeanAll { x }, &[x], "mean")
    }

    /// Largest element of the whole tensor as a scalar.
    pub fn max_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let index = argmax(self.value(x).data());
        let v = self.value(x).data()[index];
        self.push(Tensor::scalar(v), Op::Extreme { x, index }, &[x], "max_all")
    }

    /// Smallest element of the whole tensor as a scalar.
    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let data = self.value(x).data();
        let mut index = 0;
        for (i, &v) in data.iter().enumerate() {
            if v < data[index] {
                index = i;
            }
        }
        let v = data[index];
        self.push(Tensor::scalar(v), Op::Extreme { x, index }, &[x], "min_all")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        if src.rank() != 2 {
            return Err(Error::Dimension(format!("transpose of rank-{} tensor", src.rank())));
        }
        let (rows, cols) = (src.shape()[0], src.shape()[1]);
        let d = src.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        let value = Tensor::from_parts_unchecked(vec![cols, rows], out);
        self.push(value, Op::Transpose { x, rows, cols }, &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).reshaped(shape)?;
        self.push(value, Op::Reshape { x }, &[x], "reshape")
    }

    /// Gathers rows along the leading axis.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let src = self.value(x);
        let lead = src.shape().first().copied().unwrap_or(1);
        if rows.is_empty() {
            return Err(Error::Parameter("index_select with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= lead) {
            return Err(Error::Dimension(format!("row {bad} out of range for {lead} rows")));
        }
        let width = src.numel() / lead;
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src.data()[r * width..(r + 1) * width]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::from_parts_unchecked(shape, out);
        self.push(value, Op::IndexSelect { x, rows: rows.to_vec(), width }, &[x], "index_select")
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, largest first, lowest index on ties.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
