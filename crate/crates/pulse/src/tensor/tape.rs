//! Reverse-mode autodiff over a flat tape.
//!
//! The op set is exactly what the two training phases need; every op's
//! backward pass is covered by finite-difference checks in `gradcheck`.

use rand::Rng;

use crate::error::{PulseError, Result};

use super::{softmax_unchecked, Tensor};

pub(crate) const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul(Var, Var),
    /// `a @ b^T` with `b` stored row-major as `(n, k)`.
    MatmulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Embedding { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    Cosine(Var, Var),
    CrossEntropy { logits: Var, label: usize },
    CrossEntropyRows { logits: Var, labels: Vec<usize> },
    StackScalars(Vec<Var>),
    MeanScalars(Vec<Var>),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    fn add(&mut self, var: Var, shape: &[usize], update: impl FnOnce(&mut [f32])) {
        let slot = &mut self.grads[var.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        update(slot.as_mut().unwrap().data_mut());
    }
}

#[derive(Default)]
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() > 2 {
            return Err(PulseError::InvalidArgument(format!(
                "{what} expects rank <= 2, got {:?}",
                t.shape()
            )));
        }
        Ok((t.rows(), t.cols()))
    }

    /// `a (m,k) @ b (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(PulseError::InvalidArgument(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push_op(Op::Matmul(a, b), t, &[a, b]))
    }

    /// `a (m,k) @ b (n,k)^T -> (m,n)`; avoids materializing transposes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt lhs")?;
        let (n, k2) = self.dims2(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(PulseError::InvalidArgument(format!(
                "matmul_nt inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push_op(Op::MatmulNt(a, b), t, &[a, b]))
    }

    /// Elementwise add; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "add lhs")?;
        let (br, bc) = self.dims2(b, "add rhs")?;
        if ac != bc || (br != ar && br != 1) {
            return Err(PulseError::InvalidArgument(format!(
                "add shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        if br == ar {
            for (x, y) in data.iter_mut().zip(bv) {
                *x += y;
            }
        } else {
            for row in data.chunks_mut(ac) {
                for (x, y) in row.iter_mut().zip(bv) {
                    *x += y;
                }
            }
        }
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::Add(a, b), t, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(PulseError::InvalidArgument(format!(
                "mul shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::Mul(a, b), t, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        if !c.is_finite() {
            return Err(PulseError::InvalidArgument("scale by non-finite".into()));
        }
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::Scale(a, c), t, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f32> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::Relu(a), t, &[a]))
    }

    /// Row-wise stabilized softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims2(a, "softmax_rows")?;
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).data().chunks(c) {
            data.extend(softmax_unchecked(row));
        }
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::SoftmaxRows(a), t, &[a]))
    }

    /// Per-row layer norm with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(PulseError::InvalidArgument(format!(
                "layer_norm params must have length {c}"
            )));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(c) {
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                data.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let t = Tensor {
            shape: self.value(x).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::LayerNorm { x, gamma, beta }, t, &[x, gamma, beta]))
    }

    /// Row gather: output row i is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(PulseError::InvalidArgument("embedding of no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(PulseError::InvalidArgument(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.push_op(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            &[table],
        ))
    }

    /// Column means: `(t, d) -> (1, d)`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        let mut data = vec![0.0f32; c];
        for row in self.value(a).data().chunks(c) {
            for (acc, v) in data.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in data.iter_mut() {
            *v /= r as f32;
        }
        let t = Tensor {
            shape: vec![1, c],
            data,
        };
        Ok(self.push_op(Op::MeanRows(a), t, &[a]))
    }

    /// Unit-normalize each row; rejects zero rows.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims2(a, "l2_normalize_rows")?;
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).data().chunks(c) {
            let norm = row_norm(row);
            if norm == 0.0 {
                return Err(PulseError::DegenerateVector(
                    "l2_normalize_rows on zero row".into(),
                ));
            }
            data.extend(row.iter().map(|&v| v / norm));
        }
        let t = Tensor {
            shape: self.value(a).shape().to_vec(),
            data,
        };
        Ok(self.push_op(Op::L2NormalizeRows(a), t, &[a]))
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PulseError::InvalidArgument("concat of nothing".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(PulseError::InvalidArgument(format!(
                    "concat_cols row counts differ: {r} vs {pr}"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor {
            shape: vec![r, total],
            data,
        };
        Ok(self.push_op(Op::ConcatCols(parts.to_vec()), t, parts))
    }

    /// Cosine similarity of two vectors as a differentiable scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.len() != bv.len() {
            return Err(PulseError::InvalidArgument(format!(
                "cosine over lengths {} vs {}",
                av.len(),
                bv.len()
            )));
        }
        let (na, nb) = (row_norm(av.data()), row_norm(bv.data()));
        if na == 0.0 || nb == 0.0 {
            return Err(PulseError::DegenerateVector(
                "cosine of a zero-norm vector".into(),
            ));
        }
        let dot: f32 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let t = Tensor::scalar((dot / (na * nb)).clamp(-1.0, 1.0));
        Ok(self.push_op(Op::Cosine(a, b), t, &[a, b]))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() > 2 || lv.rows() != 1 {
            return Err(PulseError::InvalidArgument(
                "cross_entropy expects a single logit row".into(),
            ));
        }
        let loss = super::cross_entropy(lv.data(), label)?;
        Ok(self.push_op(Op::CrossEntropy { logits, label }, Tensor::scalar(loss), &[logits]))
    }

    /// Mean per-row cross entropy over `(t, n)` logits.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy_rows")?;
        if labels.len() != r {
            return Err(PulseError::InvalidArgument(format!(
                "{} labels for {r} logit rows",
                labels.len()
            )));
        }
        let mut total = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks(c).zip(labels) {
            total += super::cross_entropy(row, label)? as f64;
        }
        let t = Tensor::scalar((total / r as f64) as f32);
        Ok(self.push_op(
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
            },
            t,
            &[logits],
        ))
    }

    /// Gather scalar nodes into a rank-1 vector.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PulseError::InvalidArgument("stack of nothing".into()));
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(PulseError::InvalidArgument(
                    "stack_scalars input is not a scalar".into(),
                ));
            }
            data.push(v.data()[0]);
        }
        let t = Tensor::from_vec(data);
        Ok(self.push_op(Op::StackScalars(parts.to_vec()), t, parts))
    }

    /// Mean of scalar nodes, e.g. a batch loss.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(PulseError::InvalidArgument("mean of nothing".into()));
        }
        let mut total = 0.0f64;
        for &p in parts {
            let v = self.value(p);
            if v.len() != 1 {
                return Err(PulseError::InvalidArgument(
                    "mean_scalars input is not a scalar".into(),
                ));
            }
            total += v.data()[0] as f64;
        }
        let t = Tensor::scalar((total / parts.len() as f64) as f32);
        Ok(self.push_op(Op::MeanScalars(parts.to_vec()), t, parts))
    }

    /// Inverted dropout: keeps activations unbiased in expectation.
    /// Callers skip this entirely at inference time.
    pub fn dropout(&mut self, a: Var, rate: f32, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(PulseError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f32> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor {
            shape: self.value(a).shape().to_vec(),
            data: mask,
        });
        self.mul(a, m)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(PulseError::InvalidArgument(
                "backward from a non-scalar node".into(),
            ));
        }
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        grads.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads.grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut Gradients) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        mm_nt(m, n, k, g.data(), self.value(*b).data(), da);
                    });
                }
                if rg(*b) {
                    grads.add(*b, self.value(*b).shape(), |db| {
                        mm_tn(m, k, n, self.value(*a).data(), g.data(), db);
                    });
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        mm(m, n, k, g.data(), self.value(*b).data(), da);
                    });
                }
                if rg(*b) {
                    grads.add(*b, self.value(*b).shape(), |db| {
                        mm_tn(m, n, k, g.data(), self.value(*a).data(), db);
                    });
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for (x, y) in da.iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    });
                }
                if rg(*b) {
                    let bc = self.value(*b).cols();
                    grads.add(*b, self.value(*b).shape(), |db| {
                        for row in g.data().chunks(bc) {
                            for (x, y) in db.iter_mut().zip(row) {
                                *x += y;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for ((x, gv), bv) in da.iter_mut().zip(g.data()).zip(self.value(*b).data()) {
                            *x += gv * bv;
                        }
                    });
                }
                if rg(*b) {
                    grads.add(*b, self.value(*b).shape(), |db| {
                        for ((x, gv), av) in db.iter_mut().zip(g.data()).zip(self.value(*a).data()) {
                            *x += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for (x, gv) in da.iter_mut().zip(g.data()) {
                            *x += gv * c;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for ((x, gv), av) in da.iter_mut().zip(g.data()).zip(self.value(*a).data()) {
                            if *av > 0.0 {
                                *x += gv;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if rg(*a) {
                    let c = node.value.cols();
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for ((drow, grow), yrow) in da
                            .chunks_mut(c)
                            .zip(g.data().chunks(c))
                            .zip(node.value.data().chunks(c))
                        {
                            let dot: f32 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                            for j in 0..c {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let c = node.value.cols();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if rg(*beta) {
                    grads.add(*beta, self.value(*beta).shape(), |db| {
                        for grow in g.data().chunks(c) {
                            for (acc, gv) in db.iter_mut().zip(grow) {
                                *acc += gv;
                            }
                        }
                    });
                }
                if rg(*gamma) {
                    grads.add(*gamma, self.value(*gamma).shape(), |dg| {
                        for (grow, xrow) in g.data().chunks(c).zip(xv.chunks(c)) {
                            let (mean, var) = row_mean_var(xrow);
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            for j in 0..c {
                                dg[j] += grow[j] * (xrow[j] - mean) * inv;
                            }
                        }
                    });
                }
                if rg(*x) {
                    grads.add(*x, self.value(*x).shape(), |dx| {
                        for ((dxrow, grow), xrow) in
                            dx.chunks_mut(c).zip(g.data().chunks(c)).zip(xv.chunks(c))
                        {
                            let (mean, var) = row_mean_var(xrow);
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            let mut sum_gg = 0.0f32;
                            let mut sum_ggx = 0.0f32;
                            for j in 0..c {
                                let xhat = (xrow[j] - mean) * inv;
                                let gg = grow[j] * gam[j];
                                sum_gg += gg;
                                sum_ggx += gg * xhat;
                            }
                            let cf = c as f32;
                            for j in 0..c {
                                let xhat = (xrow[j] - mean) * inv;
                                let gg = grow[j] * gam[j];
                                dxrow[j] += inv * (gg - sum_gg / cf - xhat * sum_ggx / cf);
                            }
                        }
                    });
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = node.value.cols();
                    grads.add(*table, self.value(*table).shape(), |dt| {
                        for (i, grow) in g.data().chunks(d).enumerate() {
                            let base = ids[i] * d;
                            for (j, gv) in grow.iter().enumerate() {
                                dt[base + j] += gv;
                            }
                        }
                    });
                }
            }
            Op::MeanRows(a) => {
                if rg(*a) {
                    let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                    let inv = 1.0 / r as f32;
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for drow in da.chunks_mut(c) {
                            for (x, gv) in drow.iter_mut().zip(g.data()) {
                                *x += gv * inv;
                            }
                        }
                    });
                }
            }
            Op::L2NormalizeRows(a) => {
                if rg(*a) {
                    let c = node.value.cols();
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for ((drow, grow), (xrow, yrow)) in da
                            .chunks_mut(c)
                            .zip(g.data().chunks(c))
                            .zip(self.value(*a).data().chunks(c).zip(node.value.data().chunks(c)))
                        {
                            let norm = row_norm(xrow);
                            let dot: f32 = grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                            for j in 0..c {
                                drow[j] += (grow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0usize;
                for &p in parts {
                    let w = self.value(p).cols();
                    if rg(p) {
                        let off = offset;
                        grads.add(p, self.value(p).shape(), |dp| {
                            for i in 0..rows {
                                let src = &g.data()[i * total + off..i * total + off + w];
                                for (x, gv) in dp[i * w..(i + 1) * w].iter_mut().zip(src) {
                                    *x += gv;
                                }
                            }
                        });
                    }
                    offset += w;
                }
            }
            Op::Cosine(a, b) => {
                let gs = g.data()[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (na, nb) = (row_norm(av), row_norm(bv));
                let dot: f32 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
                let cos = dot / (na * nb);
                if rg(*a) {
                    grads.add(*a, self.value(*a).shape(), |da| {
                        for j in 0..av.len() {
                            da[j] += gs * (bv[j] / (na * nb) - cos * av[j] / (na * na));
                        }
                    });
                }
                if rg(*b) {
                    grads.add(*b, self.value(*b).shape(), |db| {
                        for j in 0..bv.len() {
                            db[j] += gs * (av[j] / (na * nb) - cos * bv[j] / (nb * nb));
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, label } => {
                if rg(*logits) {
                    let gs = g.data()[0];
                    let p = softmax_unchecked(self.value(*logits).data());
                    grads.add(*logits, self.value(*logits).shape(), |dl| {
                        for (j, pj) in p.iter().enumerate() {
                            let onehot = if j == *label { 1.0 } else { 0.0 };
                            dl[j] += gs * (pj - onehot);
                        }
                    });
                }
            }
            Op::CrossEntropyRows { logits, labels } => {
                if rg(*logits) {
                    let gs = g.data()[0];
                    let c = self.value(*logits).cols();
                    let inv = 1.0 / labels.len() as f32;
                    grads.add(*logits, self.value(*logits).shape(), |dl| {
                        for ((drow, xrow), &label) in dl
                            .chunks_mut(c)
                            .zip(self.value(*logits).data().chunks(c))
                            .zip(labels)
                        {
                            let p = softmax_unchecked(xrow);
                            for (j, pj) in p.iter().enumerate() {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                drow[j] += gs * inv * (pj - onehot);
                            }
                        }
                    });
                }
            }
            Op::StackScalars(parts) => {
                for (i, &p) in parts.iter().enumerate() {
                    if rg(p) {
                        let gv = g.data()[i];
                        grads.add(p, &[1], |dp| dp[0] += gv);
                    }
                }
            }
            Op::MeanScalars(parts) => {
                let gv = g.data()[0] / parts.len() as f32;
                for &p in parts {
                    if rg(p) {
                        grads.add(p, &[1], |dp| dp[0] += gv);
                    }
                }
            }
        }
    }
}

fn row_mean_var(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, var)
}

fn row_norm(row: &[f32]) -> f32 {
    row.iter().map(|&v| v * v).sum::<f32>().sqrt()
}

/// `out += a (m,k) @ b (k,n)`, ikj order for cache-friendly inner loops.
fn mm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m,k) @ b (n,k)^T`.
fn mm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a (m,k)^T @ b (m,n)`.
fn mm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t2(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_agrees_with_matmul_of_transpose() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // b stored as (2, 3); matmul_nt multiplies by its transpose.
        let b = tape.constant(t2(2, 3, &[7.0, 9.0, 11.0, 8.0, 10.0, 12.0]));
        let c = tape.matmul_nt(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn add_broadcasts_single_row() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::from_vec(vec![10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_roots() {
        let mut tape = Tape::new();
        let a = tape.param(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn embedding_gathers_and_accumulates_gradient() {
        let mut tape = Tape::new();
        let table = tape.param(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

        let pooled = tape.mean_rows(e).unwrap();
        let ce = tape.cross_entropy(pooled, 0).unwrap();
        let grads = tape.backward(ce).unwrap();
        let dt = grads.get(table).unwrap();
        // Row 1 untouched, row 2 gathered twice as strongly as row 0.
        assert_eq!(dt.row(1), &[0.0, 0.0]);
        let r0 = dt.row(0);
        let r2 = dt.row(2);
        assert!((r2[0] / r0[0] - 2.0).abs() < 1e-5);
        assert!((r2[1] / r0[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.param(Tensor::from_vec(vec![3.0, 4.0]));
        let c = tape.cosine(a, b).unwrap();
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_vec(vec![0.0, 0.0]));
        let ce = tape.cross_entropy(logits, 0).unwrap();
        let grads = tape.backward(ce).unwrap();
        let dl = grads.get(logits).unwrap().data();
        assert!((dl[0] - (-0.5)).abs() < 1e-6);
        assert!((dl[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        let d = tape.dropout(a, 0.0, &mut rng).unwrap();
        assert_eq!(d, a);
    }
}
