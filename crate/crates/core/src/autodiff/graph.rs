use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use super::AutodiffError;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position on the tape.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Storage<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, factor: T },
    Gather { table: NodeId, ids: Vec<usize> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, normed: Vec<T>, rstd: Vec<f64> },
    Gelu { a: NodeId },
    Softmax { a: NodeId },
    Log { a: NodeId },
    Mean { a: NodeId },
    Dropout { a: NodeId, mask: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    WeightedSum { terms: Vec<(NodeId, T)> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Gather { .. } => "embedding_gather",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::Log { .. } => "log",
            Op::Mean { .. } => "mean",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Storage<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    /// `self += other`, elementwise per parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            let Some(theirs) = theirs else { continue };
            match mine {
                Some(m) => m.iter_mut().zip(theirs).for_each(|(a, &b)| *a += b),
                None => *mine = Some(theirs.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean norm over every stored gradient, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Single-use reverse-mode tape over 2-D values.
///
/// Parameters are borrowed from a [`ParamStore`] and are never copied. Nodes
/// are appended in evaluation order, so the node list is already topologically
/// sorted.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Inference-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), dropout: None }
    }

    /// Training-mode graph with dropout probability `p` drawn from `rng`.
    pub fn training(params: &'p ParamStore<T>, p: f64, rng: ChaCha8Rng) -> Self {
        let dropout = (p > 0.0).then_some((p, rng));
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), dropout }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        match &self.nodes[id.0].value {
            Storage::Owned(v) => v,
            Storage::Param(p) => self.params.get(*p).values(),
        }
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id)[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { rows, cols, value: Storage::Owned(value), op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf referencing a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let t = self.params.get(id);
        let (rows, cols) = t.matrix_dims().expect("parameters are at most 2-D");
        self.nodes.push(Node {
            rows,
            cols,
            value: Storage::Param(id),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<NodeId, AutodiffError> {
        if rows * cols != values.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf, &[]))
    }

    /// Leaf holding a copy of `t`, trainable iff `t.requires_grad()`.
    pub fn tensor(&mut self, t: &Tensor<T>) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = t.matrix_dims()?;
        let id = self.push(rows, cols, t.values().to_vec(), Op::Leaf, &[]);
        self.nodes[id.0].needs_grad = t.requires_grad();
        Ok(id)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        AutodiffError::ShapeMismatch { op, lhs: vec![ar, ac], rhs: vec![br, bc] }
    }

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        Ok(self.push(m, n, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), 1, k as isize, T::zero(), &mut out, n as isize, 1);
        Ok(self.push(m, n, out, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.shape(a);
        if self.shape(bias) != (1, n) {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        Ok(self.push(m, n, out, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(r, c, out, Op::Scale { a, factor }, &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange { op: "embedding_gather", index: bad, bound: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(ids.len(), d, out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) {
            return Err(self.mismatch("layernorm", x, gamma));
        }
        if self.shape(beta) != (1, n) {
            return Err(self.mismatch("layernorm", x, beta));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut normed = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xv.chunks_exact(n) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let xh = T::from_f64_lossy((v.as_f64() - mean) * r);
                normed.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        Ok(self.push(m, n, out, Op::LayerNorm { x, gamma, beta, normed, rstd }, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| {
                let xf = x.as_f64();
                T::from_f64_lossy(0.5 * xf * (1.0 + (GELU_C * (xf + GELU_A * xf * xf * xf)).tanh()))
            })
            .collect();
        self.push(r, c, out, Op::Gelu { a }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut out = vec![T::zero(); r * c];
        if c > 0 {
            for (row, orow) in self.value(a).chunks_exact(c).zip(out.chunks_exact_mut(c)) {
                softmax_row(row, orow);
            }
        }
        self.push(r, c, out, Op::Softmax { a }, &[a])
    }

    /// Row-wise softmax over the first `valid` columns; the remaining columns
    /// behave as logits of −∞ and receive probability 0.
    pub fn softmax_prefix(&mut self, a: NodeId, valid: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if valid == 0 || valid > c {
            return Err(AutodiffError::IndexOutOfRange { op: "softmax", index: valid, bound: c });
        }
        let mut out = vec![T::zero(); r * c];
        for (row, orow) in self.value(a).chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            softmax_row(&row[..valid], &mut orow[..valid]);
        }
        Ok(self.push(r, c, out, Op::Softmax { a }, &[a]))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(r, c, out, Op::Log { a }, &[a])
    }

    /// Mean over every element, as a `1×1` node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![T::from_f64_lossy(m)], Op::Mean { a }, &[a])
    }

    /// Inverted dropout; identity in inference mode.
    pub fn dropout(&mut self, a: NodeId) -> NodeId {
        let Some((p, rng)) = self.dropout.as_mut() else { return a };
        let p = *p;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = match &self.nodes[a.0].value {
            Storage::Owned(v) => v.len(),
            Storage::Param(id) => self.params.get(*id).len(),
        };
        let mask: Vec<T> = (0..n).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.push(r, c, out, Op::Dropout { a, mask }, &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are excluded.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(AutodiffError::ShapeMismatch { op: "cross_entropy", lhs: vec![r, c], rhs: vec![targets.len()] });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: *bad, bound: c });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(AutodiffError::Empty { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = 0.0f64;
        for ((row, prow), t) in self.value(logits).chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(targets) {
            let Some(t) = *t else { continue };
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t].as_f64();
            for (p, v) in prow.iter_mut().zip(row) {
                *p = T::from_f64_lossy((v.as_f64() - lse).exp());
            }
        }
        let loss = T::from_f64_lossy(total / count as f64);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, &[logits]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_rows", index: start + len, bound: r });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::SliceRows { a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(AutodiffError::IndexOutOfRange { op: "slice_cols", index: start + len, bound: c });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.value(a).chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(r, len, out, Op::SliceCols { a, start }, &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Empty { op: "concat_cols" });
        };
        let r = self.shape(first).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != r) {
            return Err(self.mismatch("concat_cols", first, bad));
        }
        let c: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId, AutodiffError> {
        let Some(&(first, _)) = terms.first() else {
            return Err(AutodiffError::Empty { op: "weighted_sum" });
        };
        let shape = self.shape(first);
        if let Some(&(bad, _)) = terms.iter().find(|(t, _)| self.shape(*t) != shape) {
            return Err(self.mismatch("weighted_sum", first, bad));
        }
        let mut out = vec![T::zero(); shape.0 * shape.1];
        for &(t, w) in terms {
            out.iter_mut().zip(self.value(t)).for_each(|(o, &v)| *o += w * v);
        }
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(shape.0, shape.1, out, Op::WeightedSum { terms: terms.to_vec() }, &inputs))
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        (0..self.nodes.len())
            .map(NodeId)
            .find(|&id| self.value(id).iter().any(|v| !v.is_finite()))
            .map(|id| (id, self.nodes[id.0].op.name()))
    }

    /// Reverse pass from the `1×1` node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        self.backward_scaled(loss, T::one())
    }

    /// Reverse pass seeded with `d loss = seed`.
    pub fn backward_scaled(&self, loss: NodeId, seed: T) -> Result<Gradients<T>, AutodiffError> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(AutodiffError::NotScalar { shape: vec![r, c] });
        }
        if !self.scalar(loss).is_finite() {
            let (node, op) = self.first_non_finite().map(|(n, op)| (n.0, op)).unwrap_or((loss.0, "unknown"));
            return Err(AutodiffError::NonFinite { op, node });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::empty(self.params.len());
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![seed]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backward_node(idx, &gy, &mut grads);
            if let (Op::Leaf, Storage::Param(pid)) = (&node.op, &node.value) {
                out.grads[pid.0] = Some(gy);
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); node.rows * node.cols]))
    }

    fn backward_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dY·Bᵀ
                    T::gemm(m, n, k, T::one(), gy, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    // dB = Aᵀ·dY
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, gy, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dY·B
                    T::gemm(m, n, k, T::one(), gy, n as isize, 1, bv, k as isize, 1, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    // dB = dYᵀ·A
                    T::gemm(n, m, k, T::one(), gy, 1, n as isize, av, k as isize, 1, T::one(), gb, k as isize, 1);
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if let Some(g) = self.grad_buf(grads, id) {
                        g.iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                }
                if let Some(g) = self.grad_buf(grads, *bias) {
                    for row in gy.chunks_exact(cols) {
                        g.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    g.iter_mut().zip(gy).for_each(|(x, &y)| *x += y * *factor);
                }
            }
            Op::Gather { table, ids } => {
                if let Some(g) = self.grad_buf(grads, *table) {
                    for (row, &i) in gy.chunks_exact(cols).zip(ids) {
                        g[i * cols..(i + 1) * cols].iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let gv = self.value(*gamma);
                if let Some(g) = self.grad_buf(grads, *gamma) {
                    for (row, nrow) in gy.chunks_exact(cols).zip(normed.chunks_exact(cols)) {
                        g.iter_mut().zip(row.iter().zip(nrow)).for_each(|(x, (&y, &h))| *x += y * h);
                    }
                }
                if let Some(g) = self.grad_buf(grads, *beta) {
                    for row in gy.chunks_exact(cols) {
                        g.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
                if let Some(g) = self.grad_buf(grads, *x) {
                    let n = cols as f64;
                    for (i, (row, nrow)) in gy.chunks_exact(cols).zip(normed.chunks_exact(cols)).enumerate() {
                        let dxh: Vec<f64> = row.iter().zip(gv).map(|(&y, &w)| (y * w).as_f64()).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n;
                        let mean_dh = dxh.iter().zip(nrow).map(|(d, h)| d * h.as_f64()).sum::<f64>() / n;
                        let grow = &mut g[i * cols..(i + 1) * cols];
                        for ((gx, d), h) in grow.iter_mut().zip(&dxh).zip(nrow) {
                            *gx += T::from_f64_lossy(rstd[i] * (d - mean_d - h.as_f64() * mean_dh));
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((gx, &y), &x) in g.iter_mut().zip(gy).zip(av) {
                        let x = x.as_f64();
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *gx += y * T::from_f64_lossy(d);
                    }
                }
            }
            Op::Softmax { a } => {
                let y = self.value(NodeId(idx));
                if let Some(g) = self.grad_buf(grads, *a) {
                    for ((grow, yrow), gyrow) in g.chunks_exact_mut(cols).zip(y.chunks_exact(cols)).zip(gy.chunks_exact(cols)) {
                        let dot: f64 = yrow.iter().zip(gyrow).map(|(p, d)| (*p * *d).as_f64()).sum();
                        for ((gx, &p), &d) in grow.iter_mut().zip(yrow).zip(gyrow) {
                            *gx += p * (d - T::from_f64_lossy(dot));
                        }
                    }
                }
            }
            Op::Log { a } => {
                let av = self.value(*a);
                if let Some(g) = self.grad_buf(grads, *a) {
                    g.iter_mut().zip(gy).zip(av).for_each(|((x, &y), &v)| *x += y / v);
                }
            }
            Op::Mean { a } => {
                let (r, c) = self.shape(*a);
                if let Some(g) = self.grad_buf(grads, *a) {
                    let d = gy[0] / T::from_usize(r * c).expect("size fits scalar");
                    g.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    g.iter_mut().zip(gy).zip(mask).for_each(|((x, &y), &m)| *x += y * m);
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let c = self.shape(*logits).1;
                if let Some(g) = self.grad_buf(grads, *logits) {
                    let scale = gy[0] / T::from_usize(*count).expect("count fits scalar");
                    for ((grow, prow), t) in g.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(targets) {
                        let Some(t) = *t else { continue };
                        for (j, (gx, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *gx += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(g) = self.grad_buf(grads, *a) {
                    g[start * cols..(start + rows) * cols].iter_mut().zip(gy).for_each(|(x, &y)| *x += y);
                }
            }
            Op::SliceCols { a, start } => {
                let ac = self.shape(*a).1;
                if let Some(g) = self.grad_buf(grads, *a) {
                    for (grow, gyrow) in g.chunks_exact_mut(ac).zip(gy.chunks_exact(cols)) {
                        grow[*start..start + cols].iter_mut().zip(gyrow).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(g) = self.grad_buf(grads, p) {
                        for (grow, gyrow) in g.chunks_exact_mut(pc).zip(gy.chunks_exact(cols)) {
                            grow.iter_mut().zip(&gyrow[offset..offset + pc]).for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += pc;
                }
            }
            Op::WeightedSum { terms } => {
                for &(t, w) in terms {
                    if let Some(g) = self.grad_buf(grads, t) {
                        g.iter_mut().zip(gy).for_each(|(x, &y)| *x += w * y);
                    }
                }
            }
        }
    }
}

fn softmax_row<T: Scalar>(logits: &[T], out: &mut [T]) {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64_lossy(e / sum);
    }
}
