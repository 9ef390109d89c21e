//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the record in
//! reverse once and then marks the tape consumed.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Result, SetnError};

/// Negative slope of the leaky ReLU used by graph attention.
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    SoftmaxRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddOuter(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    SelectRow(Var, usize),
    StackRows(Vec<Var>),
    Reshape(Var),
    Dropout { input: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(SetnError::Contract(format!(
            "{op} expects a rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiated when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a recorded value out as a tensor.
    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "matmul")?;
        let (m2, k) = dims2(self.shape(b), "matmul")?;
        if m != m2 {
            return Err(SetnError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let orow = &mut out[i * k..(i + 1) * k];
            for p in 0..m {
                let x = av[i * m + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * k..(p + 1) * k];
                for (o, &w) in orow.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![n, k], out, Op::MatMul(a, b), rg))
    }

    /// `x·w + b` for `x [n×d]`, `w [d×k]`, `b [k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "transpose")?;
        let av = &self.node(a).value;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SetnError::dim("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SetnError::dim("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    fn row_broadcast_check(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, k) = dims2(self.shape(a), op)?;
        if self.shape(b) != [k] {
            return Err(SetnError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok((n, k))
    }

    /// Adds a `[k]` vector to every row of an `[n×k]` tensor.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.row_broadcast_check(a, b, "add_row")?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % k])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    /// Scales every row of an `[n×k]` tensor elementwise by a `[k]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, k) = self.row_broadcast_check(a, b, "mul_row")?;
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % k])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, Op::MulRow(a, b), rg))
    }

    /// `out[i][j] = col[i] + row[j]` for vectors `col [n]`, `row [m]`.
    pub fn add_outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let (&[n], &[m]) = (self.shape(col), self.shape(row)) else {
            return Err(SetnError::dim("add_outer", self.shape(col), self.shape(row)));
        };
        let cv = self.value(col);
        let rv = self.value(row);
        let mut out = Vec::with_capacity(n * m);
        for &c in cv {
            out.extend(rv.iter().map(|r| c + r));
        }
        let rg = self.rg(&[col, row]);
        Ok(self.push(vec![n, m], out, Op::AddOuter(col, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::LeakyRelu(a, slope), rg)
    }

    /// Row softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row softmax restricted to entries where `mask` is true; the others
    /// come out as exact zeros. Every row needs at least one open entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "softmax_rows")?;
        if n == 0 || m == 0 {
            return Err(SetnError::Contract("softmax_rows on empty tensor".into()));
        }
        if let Some(mask) = mask {
            if mask.len() != n * m {
                return Err(SetnError::dim("softmax_rows mask", &[n, m], &[mask.len()]));
            }
        }
        let av = self.value(a);
        let open = |idx: usize| mask.is_none_or(|mk| mk[idx]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if open(i * m + j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(SetnError::Contract(format!("softmax row {i} fully masked")));
            }
            let mut total = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if open(i * m + j) {
                    let e = (x - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= total;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::SoftmaxRows(a), rg))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(SetnError::Contract("activation on empty tensor".into()));
        }
        match kind {
            Activation::Relu => Ok(self.relu(a)),
            Activation::LeakyRelu => Ok(self.leaky_relu(a, LEAKY_RELU_SLOPE)),
            Activation::SoftmaxRows => self.softmax_rows(a),
        }
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "layer_norm_rows")?;
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &av[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (x - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::LayerNormRows { input: a, inv_std }, rg))
    }

    /// Embedding lookup: rows of `table [V×d]` at `ids`, giving `[len×d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(SetnError::Data(format!("row id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Column-wise mean of `[n×d]`, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = dims2(self.shape(a), "mean_rows")?;
        if n == 0 {
            return Err(SetnError::Contract("mean over zero rows".into()));
        }
        let av = self.value(a);
        let mut out = vec![0.0; d];
        for row in av.chunks_exact(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![d], out, Op::MeanRows(a), rg))
    }

    /// Column-wise max of `[n×d]`, giving `[d]`. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = dims2(self.shape(a), "max_rows")?;
        if n == 0 {
            return Err(SetnError::Contract("max over zero rows".into()));
        }
        let av = self.value(a);
        let mut out = av[..d].to_vec();
        let mut argmax = vec![0; d];
        for i in 1..n {
            for j in 0..d {
                let x = av[i * d + j];
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![d], out, Op::MaxRows { input: a, argmax }, rg))
    }

    /// Row `i` of `[n×d]` as a `[d]` vector.
    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (n, d) = dims2(self.shape(a), "select_row")?;
        if i >= n {
            return Err(SetnError::Contract(format!("row {i} of {n}")));
        }
        let out = self.value(a)[i * d..(i + 1) * d].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![d], out, Op::SelectRow(a, i), rg))
    }

    /// Stacks `[d]` vectors into `[n×d]`.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| SetnError::Contract("stack of zero rows".into()))?;
        let d = match self.shape(first) {
            [d] => *d,
            other => return Err(SetnError::dim("stack_rows", other, &[])),
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if self.shape(r) != [d] {
                return Err(SetnError::dim("stack_rows", &[d], self.shape(r)));
            }
            out.extend_from_slice(self.value(r));
        }
        let rg = self.rg(rows);
        Ok(self.push(vec![rows.len(), d], out, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(SetnError::dim("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1-rate)`. Identity when not training.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(SetnError::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, Op::Dropout { input: a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![total], Op::Sum(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(SetnError::dim("cross_entropy", &[n, c], &[targets.len()]));
        }
        if n == 0 {
            return Err(SetnError::Contract("cross_entropy over zero rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(SetnError::Label {
                index: bad,
                classes: c,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[t];
            for (p, x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss / n as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(SetnError::Contract("backward on a consumed tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(SetnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let k = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], n * m);
                    for i in 0..n {
                        let grow = &g[i * k..(i + 1) * k];
                        for p in 0..m {
                            let brow = &bv[p * k..(p + 1) * k];
                            ga[i * m + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], m * k);
                    for i in 0..n {
                        let grow = &g[i * k..(i + 1) * k];
                        for p in 0..m {
                            let x = av[i * m + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * k..(p + 1) * k].iter_mut().zip(grow) {
                                *o += x * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (n, m) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let ga = accumulate(&mut grads[a.0], n * m);
                    for i in 0..n {
                        for j in 0..m {
                            ga[i * m + j] += g[j * n + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let k = len(*b);
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k);
                    for (i, x) in g.iter().enumerate() {
                        gb[i % k] += x;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let k = len(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (i, x) in g.iter().enumerate() {
                        ga[i] += x * bv[i % k];
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k);
                    for (i, x) in g.iter().enumerate() {
                        gb[i % k] += x * av[i];
                    }
                }
            }
            Op::AddOuter(col, row) => {
                let n = len(*col);
                let m = len(*row);
                if wants(*col) {
                    let gc = accumulate(&mut grads[col.0], n);
                    for i in 0..n {
                        gc[i] += g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                }
                if wants(*row) {
                    let gr = accumulate(&mut grads[row.0], m);
                    for i in 0..n {
                        for j in 0..m {
                            gr[j] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += f * x);
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let av = &self.nodes[a.0].value;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if wants(*a) {
                    let av = &self.nodes[a.0].value;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                        *o += if *v > 0.0 { *x } else { slope * x };
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let m = node.shape[1];
                    let y = &node.value;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (i, (grow, yrow)) in g.chunks_exact(m).zip(y.chunks_exact(m)).enumerate() {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            ga[i * m + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows { input, inv_std } => {
                if wants(*input) {
                    let m = node.shape[1];
                    let y = &node.value;
                    let ga = accumulate(&mut grads[input.0], g.len());
                    for (i, (grow, yrow)) in g.chunks_exact(m).zip(y.chunks_exact(m)).enumerate() {
                        let mean_g = grow.iter().sum::<f64>() / m as f64;
                        let mean_gy =
                            grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for j in 0..m {
                            ga[i * m + j] += inv_std[i] * (grow[j] - mean_g - yrow[j] * mean_gy);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let d = self.nodes[table.0].shape[1];
                    let gt = accumulate(&mut grads[table.0], len(*table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let n = self.nodes[a.0].shape[0];
                    let d = g.len();
                    let ga = accumulate(&mut grads[a.0], n * d);
                    for row in ga.chunks_exact_mut(d) {
                        for (o, x) in row.iter_mut().zip(g) {
                            *o += x / n as f64;
                        }
                    }
                }
            }
            Op::MaxRows { input, argmax } => {
                if wants(*input) {
                    let d = g.len();
                    let ga = accumulate(&mut grads[input.0], len(*input));
                    for (j, &i) in argmax.iter().enumerate() {
                        ga[i * d + j] += g[j];
                    }
                }
            }
            Op::SelectRow(a, i) => {
                if wants(*a) {
                    let d = g.len();
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    for (o, x) in ga[i * d..(i + 1) * d].iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::StackRows(rows) => {
                let d = node.shape[1];
                for (r, v) in rows.iter().enumerate() {
                    if wants(*v) {
                        let gv = accumulate(&mut grads[v.0], d);
                        for (o, x) in gv.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Dropout { input, mask } => {
                if wants(*input) {
                    let ga = accumulate(&mut grads[input.0], g.len());
                    for ((o, x), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], len(*a));
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (probs[i * c + j] - indicator);
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to a leaf. `None` when
    /// the leaf does not require grad or the loss does not depend on it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}
