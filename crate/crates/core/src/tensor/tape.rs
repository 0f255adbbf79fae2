//! The reverse-mode tape: records each forward operation together with the
//! references it needs to replay its backward rule.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, UnaryFn};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Compute mean/variance from the batch (training).
    Batch,
    /// Use fixed running statistics (evaluation).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

/// Per-feature statistics a batch-norm op actually used.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// `[m x n] + [1 x n]`, bias broadcast down the rows.
    AddRow(TensorId, TensorId),
    /// `[m x n] * [m x 1]`, each row scaled by its coefficient.
    ScaleRows(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Unary(TensorId, UnaryFn),
    SegmentSoftmax(TensorId, Arc<Vec<usize>>),
    Concat(Vec<TensorId>, usize),
    GatherRows(TensorId, Arc<Vec<usize>>),
    SegmentSumRows(TensorId, Arc<Vec<usize>>),
    Transpose(TensorId),
    Sum(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        from_batch: bool,
    },
    Dropout(TensorId, Arc<Vec<f64>>),
    Bce(TensorId, Arc<Vec<f64>>),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of forward operations; replaying it in reverse computes
/// gradients. Inputs of every node precede it, so a single reverse sweep
/// visits each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an existing tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that participates in gradients.
    pub fn var(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor.with_grad(), Op::Leaf)
    }

    /// Leaf treated as constant input data.
    pub fn input(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Gradient of the most recent backward pass, if the tensor requires one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        debug_assert!(
            tensor.data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[TensorId], op: Op) -> TensorId {
        let requires = inputs.iter().any(|&i| self.requires(i));
        let mut t = Tensor::new(shape, data).expect("internal shape bookkeeping");
        t.requires_grad = requires;
        self.push(t, op)
    }

    // ---- forward operations -------------------------------------------------

    /// `a [m x k] . b [k x n] -> [m x n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2().ok_or_else(|| dim_err("matmul", self, a, b))?;
        let (k2, n) = self.value(b).dims2().ok_or_else(|| dim_err("matmul", self, a, b))?;
        if k != k2 {
            return Err(dim_err("matmul", self, a, b));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.derived(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape_binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape_binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape_binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    fn same_shape_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self, a, b));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, data, &[a, b], op))
    }

    /// `x [m x n] + bias [1 x n]`.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2().ok_or_else(|| dim_err("add_row", self, x, bias))?;
        match self.value(bias).dims2() {
            Some((1, nb)) if nb == n => {}
            _ => return Err(dim_err("add_row", self, x, bias)),
        }
        let bd = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        Ok(self.derived(vec![m, n], data, &[x, bias], Op::AddRow(x, bias)))
    }

    /// `x [m x n] * c [m x 1]`, row-wise scaling.
    pub fn scale_rows(&mut self, x: TensorId, c: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2().ok_or_else(|| dim_err("scale_rows", self, x, c))?;
        match self.value(c).dims2() {
            Some((mc, 1)) if mc == m => {}
            _ => return Err(dim_err("scale_rows", self, x, c)),
        }
        let cd = self.data(c).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cd[i / n])
            .collect();
        Ok(self.derived(vec![m, n], data, &[x, c], Op::ScaleRows(x, c)))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, data, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, data, &[x], Op::AddScalar(x))
    }

    pub fn apply(&mut self, x: TensorId, f: UnaryFn) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| f.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.derived(shape, data, &[x], Op::Unary(x, f))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.apply(x, UnaryFn::Sigmoid)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.apply(x, UnaryFn::Tanh)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.apply(x, UnaryFn::Relu)
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        self.apply(x, UnaryFn::LeakyRelu(slope))
    }

    pub fn elu(&mut self, x: TensorId) -> TensorId {
        self.apply(x, UnaryFn::Elu)
    }

    /// Exp-normalize `scores` within each segment (max-subtracted). Segment
    /// ids are arbitrary small integers; outputs within one segment sum to 1.
    pub fn segment_softmax(&mut self, scores: TensorId, segments: Vec<usize>) -> Result<TensorId> {
        let x = self.data(scores);
        if x.len() != segments.len() {
            return Err(Error::Dimension {
                op: "segment_softmax",
                lhs: self.shape(scores).to_vec(),
                rhs: vec![segments.len()],
            });
        }
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut seg_max = vec![f64::NEG_INFINITY; nseg];
        for (&v, &s) in x.iter().zip(&segments) {
            if v > seg_max[s] {
                seg_max[s] = v;
            }
        }
        let mut exps: Vec<f64> = x
            .iter()
            .zip(&segments)
            .map(|(&v, &s)| (v - seg_max[s]).exp())
            .collect();
        let mut seg_sum = vec![0.0; nseg];
        for (&e, &s) in exps.iter().zip(&segments) {
            seg_sum[s] += e;
        }
        for (e, &s) in exps.iter_mut().zip(&segments) {
            *e /= seg_sum[s];
        }
        let shape = self.shape(scores).to_vec();
        Ok(self.derived(
            shape,
            exps,
            &[scores],
            Op::SegmentSoftmax(scores, Arc::new(segments)),
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, tensors: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Precondition("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut axis_total = 0;
        for &t in tensors {
            let s = self.shape(t);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &t in tensors {
            let extent = self.shape(t)[axis];
            let block = extent * inner;
            let src = self.data(t);
            for o in 0..outer {
                let dst = o * out_stride + offset * inner;
                data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += extent;
        }
        Ok(self.derived(shape, data, tensors, Op::Concat(tensors.to_vec(), axis)))
    }

    /// Select rows of a matrix by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let (m, n) = self
            .value(x)
            .dims2()
            .ok_or_else(|| Error::Precondition("gather_rows needs a matrix".into()))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Range(format!("gather_rows index {bad} >= {m}")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let p = idx.len();
        Ok(self.derived(vec![p, n], data, &[x], Op::GatherRows(x, Arc::new(idx))))
    }

    /// Sum rows that share a segment id into `num_segments` output rows.
    pub fn segment_sum_rows(
        &mut self,
        x: TensorId,
        segments: Vec<usize>,
        num_segments: usize,
    ) -> Result<TensorId> {
        let (m, n) = self
            .value(x)
            .dims2()
            .ok_or_else(|| Error::Precondition("segment_sum_rows needs a matrix".into()))?;
        if segments.len() != m {
            return Err(Error::Dimension {
                op: "segment_sum_rows",
                lhs: vec![m, n],
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(Error::Range(format!(
                "segment id {bad} >= {num_segments}"
            )));
        }
        let src = self.data(x);
        let mut data = vec![0.0; num_segments * n];
        for (r, &s) in segments.iter().enumerate() {
            let dst = &mut data[s * n..(s + 1) * n];
            let row = &src[r * n..(r + 1) * n];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        Ok(self.derived(
            vec![num_segments, n],
            data,
            &[x],
            Op::SegmentSumRows(x, Arc::new(segments)),
        ))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self
            .value(x)
            .dims2()
            .ok_or_else(|| Error::Precondition("transpose needs a matrix".into()))?;
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.derived(vec![n, m], data, &[x], Op::Transpose(x)))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.derived(vec![1], vec![s], &[x], Op::Sum(x))
    }

    /// Row-wise layer normalization with learnable gain/offset.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2().ok_or_else(|| dim_err("layer_norm", self, x, gamma))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err("layer_norm", self, x, gamma));
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = g[j] * (row[j] - mean) * rstd + b[j];
            }
        }
        Ok(self.derived(
            vec![m, n],
            data,
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Column-wise batch normalization. In [`BnMode::Batch`] the statistics
    /// come from the batch itself (and are returned so the caller can update
    /// running averages); in [`BnMode::Running`] the provided statistics are
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mode: BnMode,
        eps: f64,
    ) -> Result<(TensorId, BnStats)> {
        let (m, n) = self.value(x).dims2().ok_or_else(|| dim_err("batch_norm", self, x, gamma))?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(dim_err("batch_norm", self, x, gamma));
        }
        let (mean, var, from_batch) = match mode {
            BnMode::Batch => {
                let src = self.data(x);
                let mut mean = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        mean[j] += src[i * n + j];
                    }
                }
                for v in &mut mean {
                    *v /= m as f64;
                }
                let mut var = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        var[j] += (src[i * n + j] - mean[j]).powi(2);
                    }
                }
                for v in &mut var {
                    *v /= m as f64;
                }
                (mean, var, true)
            }
            BnMode::Running { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(dim_err("batch_norm", self, x, gamma));
                }
                (mean, var, false)
            }
        };
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let rstd = 1.0 / (var[j] + eps).sqrt();
                data[i * n + j] = g[j] * (src[i * n + j] - mean[j]) * rstd + b[j];
            }
        }
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let id = self.derived(
            vec![m, n],
            data,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                from_batch,
            },
        );
        Ok((id, stats))
    }

    /// Multiply by a fixed mask (entries 0 or 1/(1-p)); the caller owns mask
    /// generation so training stays deterministic under a seed.
    pub fn dropout_mask(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, data, &[x], Op::Dropout(x, Arc::new(mask))))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels,
    /// clamped 1e-12 away from the boundaries.
    pub fn bce_loss(&mut self, probs: TensorId, labels: &[f64]) -> Result<TensorId> {
        let p = self.data(probs);
        if p.len() != labels.len() {
            return Err(Error::Dimension {
                op: "bce_loss",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if p.is_empty() {
            return Err(Error::Precondition("bce_loss on empty batch".into()));
        }
        let mut total = 0.0;
        for (&pi, &yi) in p.iter().zip(labels) {
            let pc = pi.clamp(1e-12, 1.0 - 1e-12);
            total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let mean = total / p.len() as f64;
        Ok(self.derived(
            vec![1],
            vec![mean],
            &[probs],
            Op::Bce(probs, Arc::new(labels.to_vec())),
        ))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients accumulate additively into
    /// every `requires_grad` leaf reachable from it.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with explicit cotangents; used to chain tapes.
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut work: Vec<Option<Vec<f64>>> = vec![None; n];
        for (id, seed) in seeds {
            let numel = self.value(*id).numel();
            if seed.len() != numel {
                return Err(Error::Dimension {
                    op: "backward_seeded",
                    lhs: self.shape(*id).to_vec(),
                    rhs: vec![seed.len()],
                });
            }
            let buf = work[id.0].get_or_insert_with(|| vec![0.0; numel]);
            for (b, &s) in buf.iter_mut().zip(seed) {
                *b += s;
            }
        }
        for i in (0..n).rev() {
            let Some(g) = work[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut work);
            // gradients are retained on leaves; interior cotangents live
            // only in the sweep workspace
            if matches!(self.nodes[i].op, Op::Leaf) {
                let store = self.nodes[i]
                    .tensor
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, &v) in store.iter_mut().zip(&g) {
                    *s += v;
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().1;
                if self.requires(a) {
                    // dA = g . B^T, via an explicit transpose so the inner
                    // product runs over contiguous rows
                    let bd = self.data(b);
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let delta = matmul_raw(g, &bt, m, n, k);
                    let da = self.acc(a, work);
                    for (d, v) in da.iter_mut().zip(delta) {
                        *d += v;
                    }
                }
                if self.requires(b) {
                    // dB = A^T . g, again through the contiguous kernel
                    let ad = self.data(a);
                    let mut at = vec![0.0; k * m];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = ad[r * k + p];
                        }
                    }
                    let delta = matmul_raw(&at, g, k, m, n);
                    let db = self.acc(b, work);
                    for (d, v) in db.iter_mut().zip(delta) {
                        *d += v;
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_into(a, g, work);
                self.add_into(b, g, work);
            }
            Op::Sub(a, b) => {
                self.add_into(a, g, work);
                if self.requires(b) {
                    let db = self.acc(b, work);
                    for (d, &v) in db.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let other = self.data(b);
                    let da = work[a.0].get_or_insert_with(|| vec![0.0; other.len()]);
                    for ((d, &v), &o) in da.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
                if self.requires(b) {
                    let other = self.data(a);
                    let db = work[b.0].get_or_insert_with(|| vec![0.0; other.len()]);
                    for ((d, &v), &o) in db.iter_mut().zip(g).zip(other) {
                        *d += v * o;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                self.add_into(x, g, work);
                if self.requires(bias) {
                    let n = self.value(bias).numel();
                    let db = self.acc(bias, work);
                    for (idx, &v) in g.iter().enumerate() {
                        db[idx % n] += v;
                    }
                }
            }
            Op::ScaleRows(x, c) => {
                let (m, ncol) = self.value(x).dims2().unwrap();
                if self.requires(x) {
                    let cd = self.data(c);
                    let dx = work[x.0].get_or_insert_with(|| vec![0.0; m * ncol]);
                    for (idx, &v) in g.iter().enumerate() {
                        dx[idx] += v * cd[idx / ncol];
                    }
                }
                if self.requires(c) {
                    let xd = self.data(x);
                    let dc = work[c.0].get_or_insert_with(|| vec![0.0; m]);
                    for r in 0..m {
                        let mut s = 0.0;
                        for j in 0..ncol {
                            s += g[r * ncol + j] * xd[r * ncol + j];
                        }
                        dc[r] += s;
                    }
                }
            }
            Op::Scale(x, cst) => {
                if self.requires(x) {
                    let dx = self.acc(x, work);
                    for (d, &v) in dx.iter_mut().zip(g) {
                        *d += v * cst;
                    }
                }
            }
            Op::AddScalar(x) => {
                self.add_into(x, g, work);
            }
            Op::Unary(x, f) => {
                if self.requires(x) {
                    let xin = &self.nodes[x.0].tensor.data;
                    let yout = &self.nodes[i].tensor.data;
                    let dx = work[x.0].get_or_insert_with(|| vec![0.0; xin.len()]);
                    for (((d, &v), &xi), &yi) in dx.iter_mut().zip(g).zip(xin).zip(yout) {
                        *d += v * f.derivative(xi, yi);
                    }
                }
            }
            Op::SegmentSoftmax(x, segments) => {
                if self.requires(x) {
                    let alpha = &self.nodes[i].tensor.data;
                    let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                    let mut seg_dot = vec![0.0; nseg];
                    for ((&a, &s), &gv) in alpha.iter().zip(segments.iter()).zip(g) {
                        seg_dot[s] += a * gv;
                    }
                    let dx = work[x.0].get_or_insert_with(|| vec![0.0; alpha.len()]);
                    for (((d, &a), &s), &gv) in
                        dx.iter_mut().zip(alpha).zip(segments.iter()).zip(g)
                    {
                        *d += a * (gv - seg_dot[s]);
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let out_shape = self.nodes[i].tensor.shape.clone();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let out_stride = out_shape[axis] * inner;
                let mut offset = 0;
                for &t in &inputs {
                    let extent = self.shape(t)[axis];
                    let block = extent * inner;
                    if self.requires(t) {
                        let dt = self.acc(t, work);
                        for o in 0..outer {
                            let src = o * out_stride + offset * inner;
                            let dst = &mut dt[o * block..(o + 1) * block];
                            for (d, &v) in dst.iter_mut().zip(&g[src..src + block]) {
                                *d += v;
                            }
                        }
                    }
                    offset += extent;
                }
            }
            Op::GatherRows(x, idx) => {
                if self.requires(x) {
                    let ncol = self.value(x).dims2().unwrap().1;
                    let dx = self.acc(x, work);
                    for (r, &src_row) in idx.iter().enumerate() {
                        let dst = &mut dx[src_row * ncol..(src_row + 1) * ncol];
                        for (d, &v) in dst.iter_mut().zip(&g[r * ncol..(r + 1) * ncol]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::SegmentSumRows(x, segments) => {
                if self.requires(x) {
                    let ncol = self.value(x).dims2().unwrap().1;
                    let dx = self.acc(x, work);
                    for (r, &s) in segments.iter().enumerate() {
                        let dst = &mut dx[r * ncol..(r + 1) * ncol];
                        for (d, &v) in dst.iter_mut().zip(&g[s * ncol..(s + 1) * ncol]) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.requires(x) {
                    let (m, n) = self.value(x).dims2().unwrap();
                    let dx = self.acc(x, work);
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires(x) {
                    let dx = self.acc(x, work);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (m, n) = self.value(x).dims2().unwrap();
                let xd = self.data(x).to_vec(); // rows reused across three grads
                let gd = self.data(gamma).to_vec();
                // Recompute per-row statistics.
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let g_row = &g[r * n..(r + 1) * n];
                    if self.requires(gamma) {
                        let dgamma = self.acc(gamma, work);
                        for j in 0..n {
                            dgamma[j] += g_row[j] * (row[j] - mean) * rstd;
                        }
                    }
                    if self.requires(beta) {
                        let dbeta = self.acc(beta, work);
                        for j in 0..n {
                            dbeta[j] += g_row[j];
                        }
                    }
                    if self.requires(x) {
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            dxhat[j] = g_row[j] * gd[j];
                        }
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            mean_dxhat_xhat += dxhat[j] * (row[j] - mean) * rstd;
                        }
                        mean_dxhat_xhat /= n as f64;
                        let dx = self.acc(x, work);
                        for j in 0..n {
                            let xhat = (row[j] - mean) * rstd;
                            dx[r * n + j] +=
                                rstd * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                from_batch,
            } => {
                let (m, n) = self.value(x).dims2().unwrap();
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let rstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                if self.requires(gamma) {
                    let dgamma = self.acc(gamma, work);
                    for r in 0..m {
                        for j in 0..n {
                            dgamma[j] += g[r * n + j] * (xd[r * n + j] - mean[j]) * rstd[j];
                        }
                    }
                }
                if self.requires(beta) {
                    let dbeta = self.acc(beta, work);
                    for r in 0..m {
                        for j in 0..n {
                            dbeta[j] += g[r * n + j];
                        }
                    }
                }
                if self.requires(x) {
                    if from_batch {
                        // Gradients flow through the batch statistics.
                        let mut sum_dy = vec![0.0; n];
                        let mut sum_dy_xhat = vec![0.0; n];
                        for r in 0..m {
                            for j in 0..n {
                                let dy = g[r * n + j] * gd[j];
                                sum_dy[j] += dy;
                                sum_dy_xhat[j] += dy * (xd[r * n + j] - mean[j]) * rstd[j];
                            }
                        }
                        let dx = self.acc(x, work);
                        for r in 0..m {
                            for j in 0..n {
                                let dy = g[r * n + j] * gd[j];
                                let xhat = (xd[r * n + j] - mean[j]) * rstd[j];
                                dx[r * n + j] += rstd[j]
                                    * (dy
                                        - sum_dy[j] / m as f64
                                        - xhat * sum_dy_xhat[j] / m as f64);
                            }
                        }
                    } else {
                        let dx = self.acc(x, work);
                        for r in 0..m {
                            for j in 0..n {
                                dx[r * n + j] += g[r * n + j] * gd[j] * rstd[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if self.requires(x) {
                    let dx = self.acc(x, work);
                    for ((d, &v), &m) in dx.iter_mut().zip(g).zip(mask.iter()) {
                        *d += v * m;
                    }
                }
            }
            Op::Bce(probs, labels) => {
                if self.requires(probs) {
                    let pd = self.data(probs);
                    let count = pd.len() as f64;
                    let dp = work[probs.0].get_or_insert_with(|| vec![0.0; pd.len()]);
                    for ((d, &p), &y) in dp.iter_mut().zip(pd).zip(labels.iter()) {
                        let pc = p.clamp(1e-12, 1.0 - 1e-12);
                        *d += g[0] * (pc - y) / (pc * (1.0 - pc)) / count;
                    }
                }
            }
        }
    }

    fn add_into(&mut self, target: TensorId, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        if self.requires(target) {
            let dt = self.acc(target, work);
            for (d, &v) in dt.iter_mut().zip(g) {
                *d += v;
            }
        }
    }

    fn acc<'w>(&self, id: TensorId, work: &'w mut [Option<Vec<f64>>]) -> &'w mut Vec<f64> {
        let numel = self.value(id).numel();
        work[id.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

fn dim_err(op: &'static str, tape: &Tape, a: TensorId, b: TensorId) -> Error {
    Error::Dimension {
        op,
        lhs: tape.shape(a).to_vec(),
        rhs: tape.shape(b).to_vec(),
    }
}

/// Row-major `A[m x k] . B[k x n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_multi};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 3]));
        let b = tape.input(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = Tensor::new(vec![3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |tape, x| {
                let bid = tape.input(t(&[3, 3], &b));
                let prod = tape.matmul(x, bid)?;
                Ok(tape.sum(prod))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn segment_softmax_examples() {
        let mut tape = Tape::new();
        let one = tape.input(t(&[1], &[5.0]));
        let w = tape.segment_softmax(one, vec![0]).unwrap();
        assert_eq!(tape.data(w), &[1.0]);

        let two = tape.input(t(&[2], &[1.0, 1.0]));
        let w = tape.segment_softmax(two, vec![0, 0]).unwrap();
        assert_eq!(tape.data(w), &[0.5, 0.5]);

        let ln2 = tape.input(t(&[2], &[2.0_f64.ln(), 0.0]));
        let w = tape.segment_softmax(ln2, vec![0, 0]).unwrap();
        assert!((tape.data(w)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((tape.data(w)[1] - 1.0 / 3.0).abs() < 1e-15);

        let empty = tape.input(t(&[0], &[]));
        let w = tape.segment_softmax(empty, vec![]).unwrap();
        assert!(tape.data(w).is_empty());
    }

    #[test]
    fn segment_softmax_sums_to_one_and_shift_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let segments: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let mut tape = Tape::new();
            let s = tape.input(t(&[n], &scores));
            let w = tape.segment_softmax(s, segments.clone()).unwrap();
            let out = tape.data(w);
            let mut sums = std::collections::HashMap::new();
            for (&v, &seg) in out.iter().zip(&segments) {
                assert!(v > 0.0 && v <= 1.0);
                *sums.entry(seg).or_insert(0.0) += v;
            }
            for (_, s) in sums {
                assert!((s - 1.0).abs() < 1e-9);
            }
            // shifting all logits of segment 0 leaves its weights unchanged
            let shifted: Vec<f64> = scores
                .iter()
                .zip(&segments)
                .map(|(&v, &seg)| if seg == 0 { v + 7.25 } else { v })
                .collect();
            let s2 = tape.input(t(&[n], &shifted));
            let w2 = tape.segment_softmax(s2, segments.clone()).unwrap();
            for ((&a, &b), &seg) in tape.data(w).iter().zip(tape.data(w2)).zip(&segments) {
                if seg == 0 {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_axis1_example() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.input(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.data(c), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_three_scales_widths_add() {
        let mut tape = Tape::new();
        let parts: Vec<TensorId> = (0..3)
            .map(|i| tape.input(Tensor::zeros(vec![4, 5 + i - i]))) // width 5 each
            .collect();
        let c = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.shape(c), &[4, 15]);
    }

    #[test]
    fn concat_incompatible_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(vec![2, 2]));
        let b = tape.input(Tensor::zeros(vec![3, 2]));
        assert!(tape.concat(&[a, b], 1).is_err());
    }

    #[test]
    fn concat_gradient_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(vec![2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check_multi(
            |tape, ids| {
                let c = tape.concat(&[ids[0], ids[1]], 1)?;
                let sq = tape.mul(c, c)?;
                Ok(tape.sum(sq))
            },
            &[x, y],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[3], &[2.0, -1.0, 7.0]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sigmoid_dot_at_zero_weights() {
        let x_data = [1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let w = tape.var(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let x = tape.input(t(&[3, 1], &x_data));
        let z = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(z);
        tape.backward(y).unwrap();
        let g = tape.grad(w).unwrap();
        for (gi, xi) in g.iter().zip(&x_data) {
            assert!((gi - 0.25 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        tape.matmul(x, y).unwrap();
        tape.mul(x, y).unwrap();
        tape.relu(x);
        assert_eq!(tape.data(x), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.data(y), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.var(t(&[2, 3], &[0.3, -0.2, 0.9, 1.4, -2.2, 0.01]));
            let w = tape.var(t(&[3, 2], &[0.5, -0.1, 0.2, 0.8, -0.7, 0.3]));
            let h = tape.matmul(x, w).unwrap();
            let a = tape.tanh(h);
            let s = tape.sum(a);
            tape.backward(s).unwrap();
            (
                tape.data(a).to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = t(&[2], &[1.0, 2.0]);
        let err = grad_check(
            |tape, id| {
                let sq = tape.mul(id, id)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let x = t(&[1], &[1.0]);
        let r = grad_check(|tape, id| Ok(tape.sum(id)), &x, 0.0);
        assert!(matches!(r, Err(crate::Error::Precondition(_))));
    }

    #[test]
    fn grad_check_rejects_non_scalar_function() {
        let x = t(&[2], &[1.0, 2.0]);
        let r = grad_check(|tape, id| tape.add(id, id), &x, 1e-5);
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    /// Every differentiable op passes the finite-difference check at random
    /// float64 points; one op family per closure keeps failures attributable.
    #[test]
    fn all_ops_pass_grad_check_at_random_points() {
        // Piecewise checks: one op per function keeps failures attributable.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let rand_t = |rng: &mut ChaCha20Rng, shape: &[usize]| {
            let numel: usize = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            )
            .unwrap()
        };
        for _ in 0..10 {
            let x = rand_t(&mut rng, &[3, 4]);
            let aux = rand_t(&mut rng, &[3, 4]);
            let aux_d = aux.data.clone();

            let unary_err = grad_check(
                |tape, id| {
                    let s = tape.sigmoid(id);
                    let t2 = tape.tanh(s);
                    let e = tape.elu(t2);
                    let l = tape.leaky_relu(e, 0.2);
                    Ok(tape.sum(l))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(unary_err < 1e-4, "unary {unary_err}");

            let binary_err = grad_check(
                |tape, id| {
                    let o = tape.input(Tensor::new(vec![3, 4], aux_d.clone()).unwrap());
                    let a = tape.add(id, o)?;
                    let m = tape.mul(a, o)?;
                    let s = tape.sub(m, id)?;
                    Ok(tape.sum(s))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(binary_err < 1e-4, "binary {binary_err}");

            let soft_err = grad_check(
                |tape, id| {
                    let soft = tape.segment_softmax(id, (0..12).map(|i| i % 3).collect())?;
                    let sq = tape.mul(soft, soft)?;
                    Ok(tape.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(soft_err < 1e-4, "softmax {soft_err}");

            let structural_err = grad_check(
                |tape, id| {
                    let g = tape.gather_rows(id, vec![2, 0, 1, 2])?;
                    let ss = tape.segment_sum_rows(g, vec![0, 1, 0, 1], 2)?;
                    let tr = tape.transpose(ss)?;
                    let sq = tape.mul(tr, tr)?;
                    Ok(tape.sum(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(structural_err < 1e-4, "structural {structural_err}");

            let norm_err = grad_check_multi(
                |tape, ids| {
                    let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                    let (bn, _) = tape.batch_norm(ln, ids[1], ids[2], BnMode::Batch, 1e-5)?;
                    let sq = tape.mul(bn, bn)?;
                    Ok(tape.sum(sq))
                },
                &[
                    rand_t(&mut rng, &[3, 4]),
                    rand_t(&mut rng, &[1, 4]),
                    rand_t(&mut rng, &[1, 4]),
                ],
                1e-5,
            )
            .unwrap();
            assert!(norm_err < 1e-4, "norms {norm_err}");

            let bce_err = grad_check(
                |tape, id| {
                    let p = tape.sigmoid(id);
                    let flatp = tape.concat(&[p], 0)?;
                    tape.bce_loss(flatp, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(bce_err < 1e-4, "bce {bce_err}");
        }
    }

    #[test]
    fn dropout_mask_scales_and_backprops() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let mask = vec![2.0, 0.0, 2.0, 0.0]; // p = 0.5 inverted dropout
        let d = tape.dropout_mask(x, mask).unwrap();
        assert_eq!(tape.data(d), &[2.0, 0.0, 6.0, 0.0]);
        let loss = tape.sum(d);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn bce_matches_ln2_at_half() {
        let mut tape = Tape::new();
        let p = tape.input(t(&[2], &[0.5, 0.5]));
        let l = tape.bce_loss(p, &[1.0, 0.0]).unwrap();
        assert!((tape.data(l)[0] - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_identical_rows_in_batch_mode_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]));
        let gamma = tape.input(t(&[1, 2], &[1.5, 0.5]));
        let beta = tape.input(t(&[1, 2], &[0.3, -0.7]));
        let (bn, stats) = tape.batch_norm(x, gamma, beta, BnMode::Batch, 1e-5).unwrap();
        for row in 0..3 {
            assert!((tape.data(bn)[row * 2] - 0.3).abs() < 1e-12);
            assert!((tape.data(bn)[row * 2 + 1] + 0.7).abs() < 1e-12);
        }
        assert_eq!(stats.mean, vec![1.0, 2.0]);
        assert_eq!(stats.var, vec![0.0, 0.0]);
    }
}
