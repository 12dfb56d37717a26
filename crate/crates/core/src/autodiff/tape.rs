use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Log,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Relu,
    Abs,
}

/// Recorded primitive together with whatever it saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Unary { kind: UnaryKind, x: Var },
    Standardize { x: Var, width: usize, inv_std: Vec<f64> },
    L2Normalize { x: Var, width: usize, norms: Vec<f64> },
    RowCosine { a: Var, b: Var, width: usize },
    Softmax { x: Var, width: usize },
    LogSoftmax { x: Var, width: usize },
    TopKMean { x: Var, k: usize, selected: Vec<usize> },
    MaxLast { x: Var, selected: Vec<usize> },
    MeanLast { x: Var, width: usize },
    SumLast { x: Var, width: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Extreme { x: Var, index: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    IndexSelect { x: Var, rows: Vec<usize>, width: usize },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives.
///
/// Values live in an arena indexed by [`Var`]; backward walks the arena in
/// reverse insertion order, which is the reverse execution order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Drops every recorded op. Vars from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records `tensor` as an input. Gradients flow to it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let mut value = tensor.clone();
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records `tensor` as a differentiation target regardless of its flag.
    pub fn variable(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor.with_requires_grad(false);
        value.clear_grad();
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("var {} is not on this tape", v.0)))
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "{name} produced a non-finite value at flat index {i}"
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, *b, k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (r, gij) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *r += aip * gij;
                            }
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, a_map, b_map } => {
                let av = val(*a);
                let bv = val(*b);
                let ai = |i: usize| a_map.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| b_map.as_ref().map_or(i, |m| m[i]);
                if wants(*a) {
                    let ga = slot(grads, *a, av.len());
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => bv[bi(i)],
                            BinaryKind::Div => 1.0 / bv[bi(i)],
                        };
                        ga[ai(i)] += gi * d;
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => av[ai(i)],
                            BinaryKind::Div => {
                                let den = bv[bi(i)];
                                -av[ai(i)] / (den * den)
                            }
                        };
                        gb[bi(i)] += gi * d;
                    }
                }
            }
            Op::Unary { kind, x } => {
                if !wants(*x) {
                    return;
                }
                let xv = val(*x);
                let gx = slot(grads, *x, xv.len());
                for i in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Scale(c) => c,
                        UnaryKind::AddScalar(_) => 1.0,
                        UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                        UnaryKind::Log => 1.0 / xv[i],
                        UnaryKind::Exp => y[i],
                        UnaryKind::Clamp { lo, hi } => {
                            if xv[i] > lo && xv[i] < hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Abs => {
                            if xv[i] > 0.0 {
                                1.0
                            } else if xv[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::Standardize { x, width, inv_std } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let gx = slot(grads, *x, y.len());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let span = r * w..(r + 1) * w;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / w as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for ((out, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *out += inv * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::L2Normalize { x, width, norms } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let gx = slot(grads, *x, y.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * w..(r + 1) * w;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((out, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *out += (gi - yi * dot) / norm;
                    }
                }
            }
            Op::RowCosine { a, b, width } => {
                let w = *width;
                let (av, bv) = (val(*a), val(*b));
                let rows = av.len() / w;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for r in 0..rows {
                    let ar = &av[r * w..(r + 1) * w];
                    let br = &bv[r * w..(r + 1) * w];
                    let na = norm(ar);
                    let nb = norm(br);
                    let c = y[r];
                    for j in 0..w {
                        da[r * w + j] = g[r] * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        db[r * w + j] = g[r] * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
                if wants(*a) {
                    add_into(slot(grads, *a, av.len()), &da);
                }
                if wants(*b) {
                    add_into(slot(grads, *b, bv.len()), &db);
                }
            }
            Op::Softmax { x, width } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let gx = slot(grads, *x, y.len());
                for r in 0..y.len() / w {
                    let span = r * w..(r + 1) * w;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((out, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *out += yi * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax { x, width } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let gx = slot(grads, *x, y.len());
                for r in 0..y.len() / w {
                    let span = r * w..(r + 1) * w;
                    let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                    let total = gr.iter().sum::<f64>();
                    for ((out, gi), yi) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *out += gi - yi.exp() * total;
                    }
                }
            }
            Op::TopKMean { x, k, selected } => {
                if !wants(*x) {
                    return;
                }
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                let kk = *k as f64;
                for (row, chosen) in selected.chunks_exact(*k).enumerate() {
                    for &flat in chosen {
                        gx[flat] += g[row] / kk;
                    }
                }
            }
            Op::MaxLast { x, selected } => {
                if !wants(*x) {
                    return;
                }
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for (row, &flat) in selected.iter().enumerate() {
                    gx[flat] += g[row];
                }
            }
            Op::MeanLast { x, width } | Op::SumLast { x, width } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let scale = if matches!(node.op, Op::MeanLast { .. }) { w as f64 } else { 1.0 };
                let gx = slot(grads, *x, g.len() * w);
                for (r, gr) in g.iter().enumerate() {
                    for out in &mut gx[r * w..(r + 1) * w] {
                        *out += gr / scale;
                    }
                }
            }
            Op::SumAll { x } | Op::MeanAll { x } => {
                if !wants(*x) {
                    return;
                }
                let n = val(*x).len();
                let d = if matches!(node.op, Op::MeanAll { .. }) { g[0] / n as f64 } else { g[0] };
                for out in slot(grads, *x, n) {
                    *out += d;
                }
            }
            Op::Extreme { x, index } => {
                if wants(*x) {
                    let n = val(*x).len();
                    slot(grads, *x, n)[*index] += g[0];
                }
            }
            Op::Transpose { x, rows, cols } => {
                if !wants(*x) {
                    return;
                }
                let (r, c) = (*rows, *cols);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape { x } => {
                if wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
            }
            Op::IndexSelect { x, rows, width } => {
                if !wants(*x) {
                    return;
                }
                let w = *width;
                let n = val(*x).len();
                let gx = slot(grads, *x, n);
                for (out_row, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * w..(src + 1) * w], &g[out_row * w..(out_row + 1) * w]);
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Euclidean norm of a slice.
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Result of a backward sweep: one gradient per recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// reach the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts_unchecked(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Stores the gradient for `v` in the tensor's gradient slot when the
    /// tensor is a differentiation target.
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        if !target.requires_grad() {
            return Ok(());
        }
        if self.shapes[v.0] != target.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match tensor shape {:?}",
                self.shapes[v.0],
                target.shape()
            )));
        }
        target.set_grad(self.get(v).into_data())
    }
}
