use std::collections::HashMap;

use super::{log_sum_exp, softmax_in_place, ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// One block of the block-diagonal attention pattern: queries
/// `q_start..q_start+q_len` attend keys `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Column window `(node, first column)` into a wider node.
type ColView = (NodeId, usize);

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, R),
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Softmax(NodeId),
    Attention(Box<AttnRecord<R>>),
    GatherRows(Vec<(NodeId, usize)>),
    ConcatCols(NodeId, NodeId),
    NormalizeRows { x: NodeId, norms: Vec<R> },
    RowDot(NodeId, NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        active: usize,
    },
    Sum(NodeId),
    SumSquares(NodeId),
}

#[derive(Debug)]
struct AttnRecord<R> {
    q: ColView,
    k: ColView,
    v: ColView,
    width: usize,
    heads: usize,
    segments: Vec<AttnSegment>,
    /// Row-major attention probabilities, one block per (segment, head).
    probs: Vec<Vec<R>>,
}

#[derive(Debug)]
struct Node<R> {
    value: Option<Tensor<R>>,
    op: Op<R>,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients<R> {
    grads: Vec<(ParamId, Tensor<R>)>,
}

impl<R: Real> Gradients<R> {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<R>)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

/// A tape of executed operations over a borrowed parameter store.
pub struct Graph<'p, R: Real> {
    params: &'p ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_nodes: HashMap<ParamId, NodeId>,
    backward_done: bool,
    zero_norms: usize,
    trace: Vec<usize>,
}

const LN_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, l: &[usize], r: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: l.to_vec(),
        right: r.to_vec(),
    }
}

fn gelu_parts<R: Real>(x: R) -> (R, R) {
    let c = R::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = R::from_f64_lossy(0.044715);
    let half = R::from_f64_lossy(0.5);
    let three = R::from_f64_lossy(3.0);
    let one = R::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + three * a * x * x);
    (y, dy)
}

impl<'p, R: Real> Graph<'p, R> {
    pub fn new(params: &'p ParamStore<R>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            backward_done: false,
            zero_norms: 0,
            trace: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<R> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of zero-norm rows seen by [`Graph::normalize_rows`].
    pub fn zero_norm_count(&self) -> usize {
        self.zero_norms
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_trace(&self) -> &[usize] {
        &self.trace
    }

    /// Constant leaves (features, masks, queue keys) visited by the last
    /// backward pass; always zero.
    pub fn traced_constants(&self) -> usize {
        self.trace
            .iter()
            .filter(|&&i| matches!(self.nodes[i].op, Op::Leaf))
            .count()
    }

    /// Number of constant leaves on the tape.
    pub fn constants(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<R> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            _ => unreachable!("node without value"),
        }
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.params.get(id).trainable,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = self.value(id);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let out = super::matmul(av, bv)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_bt", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let mut out = Tensor::zeros(&[m, n]);
        R::gemm(
            m,
            k,
            n,
            R::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            1,
            k as isize,
            R::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        Ok(self.push(out, Op::MatMulBT(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(R, R) -> R,
    ) -> Result<Tensor<R>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op_name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector (numel = cols) to every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.numel() != av.cols() {
            return Err(mismatch("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let c = av.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % c];
        }
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: NodeId, c: R) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(mismatch("mul_scalar", self.value(a).shape(), sv.shape()));
        }
        let c = sv.item();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        Ok(self.push(out, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_parts(*v).0);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != cols || bv.numel() != cols {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let n = R::from_usize(cols).expect("cols");
        let eps = R::from_f64_lossy(LN_EPS);
        let mut xhat = vec![R::zero(); rows * cols];
        let mut rstd = vec![R::zero(); rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<R>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                o[c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let out = super::softmax_lastdim(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Multi-head scaled dot-product attention over column windows of
    /// width `width`, restricted to the given segments. With `causal`,
    /// query `i` of a segment sees keys `0..=i` of that segment.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: ColView,
        k: ColView,
        v: ColView,
        width: usize,
        heads: usize,
        segments: Vec<AttnSegment>,
        causal: bool,
    ) -> Result<NodeId, TensorError> {
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let (q_rows, q_cols) = self.dims2(q.0);
        let (k_rows, k_cols) = self.dims2(k.0);
        let (v_rows, v_cols) = self.dims2(v.0);
        if q.1 + width > q_cols || k.1 + width > k_cols || v.1 + width > v_cols || k_rows != v_rows
        {
            return Err(mismatch(
                "attention",
                &[q_rows, q_cols],
                &[k_rows, k_cols],
            ));
        }
        for s in &segments {
            if s.q_len == 0
                || s.k_len == 0
                || s.q_start + s.q_len > q_rows
                || s.k_start + s.k_len > k_rows
                || (causal && s.q_len != s.k_len)
            {
                return Err(TensorError::Invalid(format!("bad attention segment {s:?}")));
            }
        }
        let dh = width / heads;
        let scale = R::one() / R::from_usize(dh).expect("dh").sqrt();
        let (qv, kv, vv) = (self.value(q.0), self.value(k.0), self.value(v.0));
        let mut out = Tensor::zeros(&[q_rows, width]);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for s in &segments {
            for h in 0..heads {
                let qo = s.q_start * q_cols + q.1 + h * dh;
                let ko = s.k_start * k_cols + k.1 + h * dh;
                let vo = s.k_start * v_cols + v.1 + h * dh;
                let mut p = vec![R::zero(); s.q_len * s.k_len];
                R::gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    scale,
                    &qv.data()[qo..],
                    q_cols as isize,
                    1,
                    &kv.data()[ko..],
                    1,
                    k_cols as isize,
                    R::zero(),
                    &mut p,
                    s.k_len as isize,
                    1,
                );
                for i in 0..s.q_len {
                    let row = &mut p[i * s.k_len..(i + 1) * s.k_len];
                    if causal {
                        row[i + 1..].iter_mut().for_each(|x| *x = R::neg_infinity());
                    }
                    softmax_in_place(row);
                }
                let oo = s.q_start * width + h * dh;
                R::gemm(
                    s.q_len,
                    s.k_len,
                    dh,
                    R::one(),
                    &p,
                    s.k_len as isize,
                    1,
                    &vv.data()[vo..],
                    v_cols as isize,
                    1,
                    R::zero(),
                    &mut out.data_mut()[oo..],
                    width as isize,
                    1,
                );
                probs.push(p);
            }
        }
        let rec = AttnRecord {
            q,
            k,
            v,
            width,
            heads,
            segments,
            probs,
        };
        Ok(self.push(out, Op::Attention(Box::new(rec)), &[q.0, k.0, v.0]))
    }

    /// Builds a tensor whose row `i` is row `sources[i].1` of node
    /// `sources[i].0`.
    pub fn gather_rows(&mut self, sources: Vec<(NodeId, usize)>) -> Result<NodeId, TensorError> {
        let Some(&(first, _)) = sources.first() else {
            return Err(TensorError::Invalid("gather_rows with no rows".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::with_capacity(sources.len() * cols);
        for &(n, r) in &sources {
            let t = self.value(n);
            if t.cols() != cols || r >= t.rows() {
                return Err(mismatch("gather_rows", t.shape(), &[r, cols]));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![sources.len(), cols], data)?;
        let mut inputs: Vec<NodeId> = sources.iter().map(|s| s.0).collect();
        inputs.sort_unstable();
        inputs.dedup();
        Ok(self.push(out, Op::GatherRows(sources), &inputs))
    }

    /// Embedding lookup / row selection from a single node.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId, TensorError> {
        self.gather_rows(rows.iter().map(|&r| (x, r)).collect())
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(mismatch("concat_cols", av.shape(), bv.shape()));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![m, p + q], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// L2-normalises every row. A zero row maps to zero and bumps
    /// [`Graph::zero_norm_count`].
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut zeros = 0;
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<R>().sqrt();
            norms.push(n);
            let row = out.row_mut(r);
            if n > R::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            } else {
                zeros += 1;
                row.iter_mut().for_each(|v| *v = R::zero());
            }
        }
        self.zero_norms += zeros;
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Row-wise dot product `[m×n] · [m×n] → [m×1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("row_dot", av.shape(), bv.shape()));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let out = Tensor::new(vec![av.rows(), 1], data)?;
        Ok(self.push(out, Op::RowDot(a, b), &[a, b]))
    }

    /// Mean of `-log softmax(logits)[target]` over rows with `mask` set.
    /// All-masked input yields a zero loss.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len(), mask.len()]));
        }
        let mut total = R::zero();
        let mut active = 0usize;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                return Err(TensorError::Invalid(format!(
                    "target {} outside vocabulary of {vocab}",
                    targets[r]
                )));
            }
            let row = lv.row(r);
            total += log_sum_exp(row) - row[targets[r]];
            active += 1;
        }
        let loss = if active == 0 {
            R::zero()
        } else {
            total / R::from_usize(active).expect("count")
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            active,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a), &[a])
    }

    /// Clears the backward guard so the tape can be replayed again.
    pub fn reset_backward(&mut self) {
        self.backward_done = false;
        self.trace.clear();
    }

    /// Replays the tape in reverse from a scalar `loss`. Gradients of
    /// trainable parameters reachable from `loss` are returned; a second
    /// call without [`Graph::reset_backward`] is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<R>, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_done = true;
        self.trace.clear();
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, R::one()));
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.trace.push(i);
            self.backprop_node(i, &g, &mut grads, &mut out)?;
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads: out })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<R>>],
        id: NodeId,
    ) -> Option<&'g mut Tensor<R>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let shape = self.value(id).shape().to_vec();
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape)))
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
        out: &mut Vec<(ParamId, Tensor<R>)>,
    ) -> Result<(), TensorError> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(p) => out.push((*p, g.clone())),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA += dC · Bᵀ
                    R::gemm(
                        m,
                        n,
                        k,
                        R::one(),
                        gd,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        R::one(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB += Aᵀ · dC
                    R::gemm(
                        k,
                        m,
                        n,
                        R::one(),
                        av.data(),
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        R::one(),
                        gb.data_mut(),
                        n as isize,
                        1,
                    );
                }
            }
            Op::MatMulBT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA += dC · B
                    R::gemm(
                        m,
                        n,
                        k,
                        R::one(),
                        gd,
                        n as isize,
                        1,
                        bv.data(),
                        k as isize,
                        1,
                        R::one(),
                        ga.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB += dCᵀ · A
                    R::gemm(
                        n,
                        m,
                        k,
                        R::one(),
                        gd,
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        R::one(),
                        gb.data_mut(),
                        k as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if let Some(gx) = self.grad_slot(grads, *x) {
                        gx.add_assign(g);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(g);
                }
                let c = g.cols();
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for (j, v) in gd.iter().enumerate() {
                        gb.data_mut()[j % c] += *v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, &x), &y) in ga.data_mut().iter_mut().zip(gd).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, &x), &y) in gb.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x * *c;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s).item());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, &x) in ga.data_mut().iter_mut().zip(gd) {
                        *o += x * sv;
                    }
                }
                if let Some(gs) = self.grad_slot(grads, *s) {
                    let d: R = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    gs.data_mut()[0] += d;
                }
            }
            Op::Exp(a) => {
                let y = self.value(NodeId(i));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, &x), &yv) in ga.data_mut().iter_mut().zip(gd).zip(y.data()) {
                        *o += x * yv;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, &x), &xv) in ga.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *o += x * gelu_parts(xv).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = g.cols();
                let rows = g.rows();
                let gv = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (j, (&d, &h)) in gd.iter().zip(xhat).enumerate() {
                        gg.data_mut()[j % cols] += d * h;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for (j, &d) in gd.iter().enumerate() {
                        gb.data_mut()[j % cols] += d;
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let n = R::from_usize(cols).expect("cols");
                    let mut dxhat = vec![R::zero(); cols];
                    for r in 0..rows {
                        let grow = &gd[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = R::zero();
                        let mut sum_dh = R::zero();
                        for c in 0..cols {
                            dxhat[c] = grow[c] * gv[c];
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hrow[c];
                        }
                        let orow = gx.row_mut(r);
                        for c in 0..cols {
                            orow[c] +=
                                rstd[r] * (dxhat[c] - sum_d / n - hrow[c] * sum_dh / n);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.value(NodeId(i));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * y.cols()..(r + 1) * y.cols()];
                        let dot: R = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        let orow = ga.row_mut(r);
                        for c in 0..yr.len() {
                            orow[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Attention(rec) => self.backprop_attention(rec, g, grads),
            Op::GatherRows(sources) => {
                let cols = g.cols();
                for (r, &(n, src_row)) in sources.iter().enumerate() {
                    if let Some(gn) = self.grad_slot(grads, n) {
                        let dst = gn.row_mut(src_row);
                        for (o, &d) in dst.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let cols = g.cols();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (o, &d) in ga.row_mut(r).iter_mut().zip(&gd[r * cols..r * cols + p]) {
                            *o += d;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows() {
                        let src = &gd[r * cols + p..(r + 1) * cols];
                        for (o, &d) in gb.row_mut(r).iter_mut().zip(src) {
                            *o += d;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.value(NodeId(i));
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let cols = y.cols();
                    for r in 0..y.rows() {
                        if norms[r] <= R::zero() {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let orow = gx.row_mut(r);
                        for c in 0..cols {
                            orow[c] += (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..av.rows() {
                        let s = gd[r];
                        for (o, &y) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                            *o += s * y;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..av.rows() {
                        let s = gd[r];
                        for (o, &x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o += s * x;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                active,
            } => {
                if *active == 0 {
                    return Ok(());
                }
                let lv = self.value(*logits);
                let scale = gd[0] / R::from_usize(*active).expect("count");
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let mut p = vec![R::zero(); lv.cols()];
                    for r in 0..lv.rows() {
                        if !mask[r] {
                            continue;
                        }
                        p.copy_from_slice(lv.row(r));
                        softmax_in_place(&mut p);
                        p[targets[r]] -= R::one();
                        for (o, &pv) in gl.row_mut(r).iter_mut().zip(&p) {
                            *o += scale * pv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::SumSquares(a) => {
                let av = self.value(*a);
                let two = R::from_f64_lossy(2.0);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (o, &x) in ga.data_mut().iter_mut().zip(av.data()) {
                        *o += two * x * gd[0];
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_attention(
        &self,
        rec: &AttnRecord<R>,
        g: &Tensor<R>,
        grads: &mut [Option<Tensor<R>>],
    ) {
        let AttnRecord {
            q,
            k,
            v,
            width,
            heads,
            segments,
            probs,
        } = rec;
        let dh = width / heads;
        let scale = R::one() / R::from_usize(dh).expect("dh").sqrt();
        let (qv, kv, vv) = (self.value(q.0), self.value(k.0), self.value(v.0));
        let (qc, kc, vc) = (qv.cols(), kv.cols(), vv.cols());
        let gd = g.data();
        let (need_q, need_k, need_v) = (
            self.nodes[q.0 .0].requires_grad,
            self.nodes[k.0 .0].requires_grad,
            self.nodes[v.0 .0].requires_grad,
        );
        // Make sure every slot exists before taking disjoint borrows below.
        for n in [q.0, k.0, v.0] {
            let _ = self.grad_slot(grads, n);
        }
        let mut pi = 0;
        for s in segments {
            for h in 0..*heads {
                let p = &probs[pi];
                pi += 1;
                let go = s.q_start * width + h * dh;
                let qo = s.q_start * qc + q.1 + h * dh;
                let ko = s.k_start * kc + k.1 + h * dh;
                let vo = s.k_start * vc + v.1 + h * dh;
                if need_v {
                    let gv = grads[v.0 .0].as_mut().expect("slot");
                    // dV += Pᵀ · dO
                    R::gemm(
                        s.k_len,
                        s.q_len,
                        dh,
                        R::one(),
                        p,
                        1,
                        s.k_len as isize,
                        &gd[go..],
                        *width as isize,
                        1,
                        R::one(),
                        &mut gv.data_mut()[vo..],
                        vc as isize,
                        1,
                    );
                }
                if !(need_q || need_k) {
                    continue;
                }
                // dP = dO · Vᵀ
                let mut ds = vec![R::zero(); s.q_len * s.k_len];
                R::gemm(
                    s.q_len,
                    dh,
                    s.k_len,
                    R::one(),
                    &gd[go..],
                    *width as isize,
                    1,
                    &vv.data()[vo..],
                    1,
                    vc as isize,
                    R::zero(),
                    &mut ds,
                    s.k_len as isize,
                    1,
                );
                for r in 0..s.q_len {
                    let pr = &p[r * s.k_len..(r + 1) * s.k_len];
                    let dr = &mut ds[r * s.k_len..(r + 1) * s.k_len];
                    let dot: R = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..s.k_len {
                        dr[c] = pr[c] * (dr[c] - dot);
                    }
                }
                if need_q {
                    let gq = grads[q.0 .0].as_mut().expect("slot");
                    R::gemm(
                        s.q_len,
                        s.k_len,
                        dh,
                        scale,
                        &ds,
                        s.k_len as isize,
                        1,
                        &kv.data()[ko..],
                        kc as isize,
                        1,
                        R::one(),
                        &mut gq.data_mut()[qo..],
                        qc as isize,
                        1,
                    );
                }
                if need_k {
                    let gk = grads[k.0 .0].as_mut().expect("slot");
                    R::gemm(
                        s.k_len,
                        s.q_len,
                        dh,
                        scale,
                        &ds,
                        1,
                        s.k_len as isize,
                        &qv.data()[qo..],
                        qc as isize,
                        1,
                        R::one(),
                        &mut gk.data_mut()[ko..],
                        kc as isize,
                        1,
                    );
                }
            }
        }
    }
}
