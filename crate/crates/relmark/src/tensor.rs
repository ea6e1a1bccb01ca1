//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! The engine is deliberately small: it supports exactly the operations the
//! four benchmark architectures need, batched so that the heavy work lands in
//! [`crate::gemm::dgemm`]. A forward pass records nodes on a [`Tape`];
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients.
//!
//! Set-structured inputs are laid out as row blocks: a batch of B universes
//! with n objects each is a single `[B*n, d]` matrix, and pooling ops reduce
//! over consecutive `group`-sized row blocks. The pairwise message op used by
//! the graph network has a fused variant ([`Tape::pair_relu_sum`]) that never
//! materializes the `[B*n*n, d]` pair tensor.

use crate::gemm::dgemm;
use rand::Rng;
use thiserror::Error;

/// Errors from tensor/tape contract violations.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropoutRate(f64),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
}

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "shape {shape:?} expects {expected} elements, got {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Matrix with entries drawn uniformly from `[-limit, limit]`.
    pub fn uniform<R: Rng>(shape: Vec<usize>, limit: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a 2-D tensor (length for 1-D).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(usize);

enum Op {
    /// Input or parameter leaf; `param` leaves receive gradients.
    Leaf { param: bool },
    MatMul(Node, Node),
    /// x + row-broadcast bias.
    AddRow(Node, Node),
    Add(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    Relu(Node),
    Sigmoid(Node),
    Tanh(Node),
    /// out[(g,s,t)] = a[(g,s)] + b[(g,t)] for every ordered within-group pair.
    PairSum { a: Node, b: Node, n: usize },
    /// out[(g,s)] = sum_t relu(a[(g,s)] + b[(g,t)]); fused, pair tensor never stored.
    PairReluSum { a: Node, b: Node, n: usize },
    /// Sum over consecutive `group`-sized row blocks.
    SumPool { x: Node, group: usize },
    /// Elementwise max over consecutive row blocks; ties go to the lowest row.
    MaxPool {
        x: Node,
        group: usize,
        argmax: Vec<u32>,
    },
    PermuteRows { x: Node, perm: Vec<u32> },
    SliceCols { x: Node, lo: usize, hi: usize },
    ConcatRows(Vec<Node>),
    Dropout { x: Node, mask: Vec<f64> },
    /// Mean cross-entropy over rows; keeps softmax probabilities for backward.
    SoftmaxCrossEntropy {
        logits: Node,
        labels: Vec<u32>,
        probs: Tensor,
    },
    SumAll(Node),
}

struct TapeNode {
    op: Op,
    value: Tensor,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: Node) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Gradient of a node, taking ownership (useful to avoid copies).
    pub fn take(&mut self, node: Node) -> Option<Tensor> {
        self.grads[node.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Node {
        self.nodes.push(TapeNode { op, value });
        Node(self.nodes.len() - 1)
    }

    /// Non-differentiable input leaf.
    pub fn input(&mut self, value: Tensor) -> Node {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Parameter leaf; receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Node {
        self.push(Op::Leaf { param: true }, value)
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Node, b: Node) -> Node {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, ka) = (av.rows(), av.cols());
        let (kb, n) = (bv.rows(), bv.cols());
        assert_eq!(
            ka, kb,
            "matmul inner dims: {:?} @ {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = Tensor::zeros(vec![m, n]);
        dgemm(m, n, ka, av.data(), false, bv.data(), false, out.data_mut(), false);
        self.push(Op::MatMul(a, b), out)
    }

    /// Adds a `[n]` bias row to every row of `[m,n]`.
    pub fn add_row(&mut self, x: Node, bias: Node) -> Node {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias length {} vs {} cols", bv.len(), n);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out.data().to_vec());
        self.push(Op::AddRow(x, bias), value)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Node {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push(Op::Add(a, b), value)
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Node {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Node {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        self.push(Op::Scale(x, c), value)
    }

    pub fn relu(&mut self, x: Node) -> Node {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Node) -> Node {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: Node) -> Node {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        self.push(Op::Tanh(x), value)
    }

    /// All ordered within-group pairs: `a,b: [G*n, d] -> [G*n*n, d]` where
    /// row `(g, s, t)` holds `a[(g,s)] + b[(g,t)]`.
    pub fn pair_sum(&mut self, a: Node, b: Node, n: usize) -> Node {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "pair_sum shapes differ");
        let d = av.cols();
        let rows = av.rows();
        assert_eq!(rows % n, 0, "rows {rows} not a multiple of group {n}");
        let groups = rows / n;
        let mut out = Tensor::zeros(vec![groups * n * n, d]);
        {
            let o = out.data_mut();
            let mut w = 0;
            for g in 0..groups {
                for s in 0..n {
                    let ar = av.row(g * n + s);
                    for t in 0..n {
                        let br = bv.row(g * n + t);
                        for j in 0..d {
                            o[w + j] = ar[j] + br[j];
                        }
                        w += d;
                    }
                }
            }
        }
        self.push(Op::PairSum { a, b, n }, out)
    }

    /// Fused `sum_t relu(a[(g,s)] + b[(g,t)])`: `[G*n, d] -> [G*n, d]`.
    ///
    /// Equivalent to `sum_pool(relu(pair_sum(a, b, n)), n)` but the pair
    /// tensor is never materialized; backward recomputes the relu mask.
    pub fn pair_relu_sum(&mut self, a: Node, b: Node, n: usize) -> Node {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "pair_relu_sum shapes differ");
        let d = av.cols();
        let rows = av.rows();
        assert_eq!(rows % n, 0, "rows {rows} not a multiple of group {n}");
        let groups = rows / n;
        let mut out = Tensor::zeros(vec![rows, d]);
        {
            let o = out.data_mut();
            for g in 0..groups {
                for s in 0..n {
                    let ar = av.row(g * n + s);
                    let acc = &mut o[(g * n + s) * d..(g * n + s + 1) * d];
                    for t in 0..n {
                        let br = bv.row(g * n + t);
                        for j in 0..d {
                            let v = ar[j] + br[j];
                            if v > 0.0 {
                                acc[j] += v;
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::PairReluSum { a, b, n }, out)
    }

    /// Sums consecutive `group`-sized row blocks: `[G*group, d] -> [G, d]`.
    pub fn sum_pool(&mut self, x: Node, group: usize) -> Node {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        assert_eq!(rows % group, 0, "rows {rows} not a multiple of group {group}");
        let groups = rows / group;
        let mut out = Tensor::zeros(vec![groups, d]);
        {
            let o = out.data_mut();
            for g in 0..groups {
                for r in 0..group {
                    let src = xv.row(g * group + r);
                    let dst = &mut o[g * d..(g + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
            }
        }
        self.push(Op::SumPool { x, group }, out)
    }

    /// Elementwise max over consecutive row blocks: `[G*group, d] -> [G, d]`.
    ///
    /// The subgradient routes to the first row attaining the max, which keeps
    /// backward deterministic under ties.
    pub fn max_pool(&mut self, x: Node, group: usize) -> Node {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        assert_eq!(rows % group, 0, "rows {rows} not a multiple of group {group}");
        let groups = rows / group;
        let mut out = Tensor::zeros(vec![groups, d]);
        let mut argmax = vec![0u32; groups * d];
        {
            let o = out.data_mut();
            for g in 0..groups {
                for j in 0..d {
                    let mut best = xv.row(g * group)[j];
                    let mut best_r = 0u32;
                    for r in 1..group {
                        let v = xv.row(g * group + r)[j];
                        if v > best {
                            best = v;
                            best_r = r as u32;
                        }
                    }
                    o[g * d + j] = best;
                    argmax[g * d + j] = best_r;
                }
            }
        }
        self.push(Op::MaxPool { x, group, argmax }, out)
    }

    /// Reorders rows: `out[i] = x[perm[i]]`; `perm` must be a permutation.
    pub fn permute_rows(&mut self, x: Node, perm: Vec<u32>) -> Node {
        let xv = self.value(x);
        let d = xv.cols();
        assert_eq!(perm.len(), xv.rows(), "perm length vs rows");
        let mut out = Tensor::zeros(vec![perm.len(), d]);
        for (i, &p) in perm.iter().enumerate() {
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(xv.row(p as usize));
        }
        self.push(Op::PermuteRows { x, perm }, out)
    }

    /// Column range `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Node, lo: usize, hi: usize) -> Node {
        let xv = self.value(x);
        let d = xv.cols();
        assert!(lo < hi && hi <= d, "slice [{lo},{hi}) of {d} cols");
        let rows = xv.rows();
        let mut out = Tensor::zeros(vec![rows, hi - lo]);
        for r in 0..rows {
            out.data_mut()[r * (hi - lo)..(r + 1) * (hi - lo)]
                .copy_from_slice(&xv.row(r)[lo..hi]);
        }
        self.push(Op::SliceCols { x, lo, hi }, out)
    }

    /// Stacks tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Node]) -> Node {
        assert!(!xs.is_empty());
        let d = self.value(xs[0]).cols();
        let total: usize = xs.iter().map(|&x| self.value(x).rows()).sum();
        let mut data = Vec::with_capacity(total * d);
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(xv.cols(), d, "concat_rows column mismatch");
            data.extend_from_slice(xv.data());
        }
        self.push(Op::ConcatRows(xs.to_vec()), Tensor::new(vec![total, d], data))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales
    /// survivors by `1/(1-rate)` in training mode; identity in eval mode.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Node,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Node, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidDropoutRate(rate));
        }
        if !training || rate == 0.0 {
            // identity; no node needed
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data);
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// Mean softmax cross-entropy over rows; returns a scalar node.
    ///
    /// Stable log-sum-exp evaluation: correct-class losses stay accurate all
    /// the way down to ~1e-300.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Node,
        labels: &[u32],
    ) -> Result<Node, NnError> {
        let lv = self.value(logits);
        let rows = lv.rows();
        let classes = lv.cols();
        assert_eq!(labels.len(), rows, "one label per logits row");
        for &y in labels {
            if y as usize >= classes {
                return Err(NnError::LabelOutOfRange {
                    label: y as usize,
                    classes,
                });
            }
        }
        let mut probs = Tensor::zeros(vec![rows, classes]);
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let mut m = row[0];
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > m {
                    m = v;
                    arg = j;
                }
            }
            // sum of exp(l - m) over non-argmax entries; argmax contributes 1
            let mut rest = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if j != arg {
                    rest += (v - m).exp();
                }
            }
            let denom = 1.0 + rest;
            let p = probs.data_mut();
            for j in 0..classes {
                p[r * classes + j] = if j == arg {
                    1.0 / denom
                } else {
                    (row[j] - m).exp() / denom
                };
            }
            let y = labels[r] as usize;
            // -log p_y = log1p(rest) + (m - l_y)
            total += rest.ln_1p() + (m - row[y]);
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Softmax probabilities of a recorded cross-entropy node.
    pub fn ce_probs(&self, ce: Node) -> &Tensor {
        match &self.nodes[ce.0].op {
            Op::SoftmaxCrossEntropy { probs, .. } => probs,
            _ => panic!("ce_probs on a non-cross-entropy node"),
        }
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum_all(&mut self, x: Node) -> Node {
        let v = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(v))
    }

    /// Reverse pass from a scalar loss; returns per-node gradients.
    ///
    /// Only nodes that (transitively) feed the loss receive gradients;
    /// parameter leaves are the usual query targets.
    pub fn backward(&self, loss: Node) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            // leave the gradient in place for queries
            grads[idx] = Some(g);
            let g = grads[idx].as_ref().unwrap().clone();
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    {
                        let ga = Self::grad_slot(&mut grads, *a, av.shape());
                        dgemm(m, k, n, g.data(), false, bv.data(), true, ga.data_mut(), true);
                    }
                    {
                        let gb = Self::grad_slot(&mut grads, *b, bv.shape());
                        dgemm(k, n, m, av.data(), true, g.data(), false, gb.data_mut(), true);
                    }
                }
                Op::AddRow(x, bias) => {
                    let (xs, bs) = (
                        self.value(*x).shape().to_vec(),
                        self.value(*bias).shape().to_vec(),
                    );
                    let n = g.cols();
                    {
                        let gx = Self::grad_slot(&mut grads, *x, &xs);
                        for (o, gi) in gx.data_mut().iter_mut().zip(g.data()) {
                            *o += gi;
                        }
                    }
                    {
                        let gb = Self::grad_slot(&mut grads, *bias, &bs);
                        for r in 0..g.rows() {
                            for j in 0..n {
                                gb.data_mut()[j] += g.data()[r * n + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &inp in &[*a, *b] {
                        let shape = self.value(inp).shape().to_vec();
                        let gi = Self::grad_slot(&mut grads, inp, &shape);
                        for (o, v) in gi.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    {
                        let ga = Self::grad_slot(&mut grads, *a, av.shape());
                        for ((o, v), w) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += v * w;
                        }
                    }
                    {
                        let gb = Self::grad_slot(&mut grads, *b, bv.shape());
                        for ((o, v), w) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *o += v * w;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    let shape = self.value(*x).shape().to_vec();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += v * c;
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).clone();
                    let gx = Self::grad_slot(&mut grads, *x, xv.shape());
                    for ((o, v), inp) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *inp > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = self.nodes[idx].value.clone();
                    let shape = self.value(*x).shape().to_vec();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for ((o, v), y) in gx.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o += v * y * (1.0 - y);
                    }
                }
                Op::Tanh(x) => {
                    let yv = self.nodes[idx].value.clone();
                    let shape = self.value(*x).shape().to_vec();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for ((o, v), y) in gx.data_mut().iter_mut().zip(g.data()).zip(yv.data()) {
                        *o += v * (1.0 - y * y);
                    }
                }
                Op::PairSum { a, b, n } => {
                    let n = *n;
                    let av = self.value(*a).clone();
                    let d = av.cols();
                    let groups = av.rows() / n;
                    {
                        let ga = Self::grad_slot(&mut grads, *a, av.shape());
                        let go = g.data();
                        for gr in 0..groups {
                            for s in 0..n {
                                let dst = &mut ga.data_mut()[(gr * n + s) * d..(gr * n + s + 1) * d];
                                for t in 0..n {
                                    let src = &go[((gr * n + s) * n + t) * d..][..d];
                                    for j in 0..d {
                                        dst[j] += src[j];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let gb = Self::grad_slot(&mut grads, *b, av.shape());
                        let go = g.data();
                        for gr in 0..groups {
                            for s in 0..n {
                                for t in 0..n {
                                    let dst =
                                        &mut gb.data_mut()[(gr * n + t) * d..(gr * n + t + 1) * d];
                                    let src = &go[((gr * n + s) * n + t) * d..][..d];
                                    for j in 0..d {
                                        dst[j] += src[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::PairReluSum { a, b, n } => {
                    let n = *n;
                    let av = self.value(*a).clone();
                    let bv = self.value(*b).clone();
                    let d = av.cols();
                    let groups = av.rows() / n;
                    // recompute the relu mask pairwise; rows fit in cache
                    let mut ga_acc = Tensor::zeros(av.shape().to_vec());
                    let mut gb_acc = Tensor::zeros(bv.shape().to_vec());
                    for gr in 0..groups {
                        for s in 0..n {
                            let ar = av.row(gr * n + s);
                            let gr_out = g.row(gr * n + s);
                            for t in 0..n {
                                let br = bv.row(gr * n + t);
                                for j in 0..d {
                                    if ar[j] + br[j] > 0.0 {
                                        ga_acc.data_mut()[(gr * n + s) * d + j] += gr_out[j];
                                        gb_acc.data_mut()[(gr * n + t) * d + j] += gr_out[j];
                                    }
                                }
                            }
                        }
                    }
                    {
                        let ga = Self::grad_slot(&mut grads, *a, av.shape());
                        for (o, v) in ga.data_mut().iter_mut().zip(ga_acc.data()) {
                            *o += v;
                        }
                    }
                    {
                        let gb = Self::grad_slot(&mut grads, *b, bv.shape());
                        for (o, v) in gb.data_mut().iter_mut().zip(gb_acc.data()) {
                            *o += v;
                        }
                    }
                }
                Op::SumPool { x, group } => {
                    let group = *group;
                    let shape = self.value(*x).shape().to_vec();
                    let d = g.cols();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for gr in 0..g.rows() {
                        let src = g.row(gr);
                        for r in 0..group {
                            let dst = &mut gx.data_mut()[(gr * group + r) * d..][..d];
                            for j in 0..d {
                                dst[j] += src[j];
                            }
                        }
                    }
                }
                Op::MaxPool { x, group, argmax } => {
                    let group = *group;
                    let shape = self.value(*x).shape().to_vec();
                    let d = g.cols();
                    let argmax = argmax.clone();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for gr in 0..g.rows() {
                        let src = g.row(gr);
                        for j in 0..d {
                            let r = argmax[gr * d + j] as usize;
                            gx.data_mut()[(gr * group + r) * d + j] += src[j];
                        }
                    }
                }
                Op::PermuteRows { x, perm } => {
                    let shape = self.value(*x).shape().to_vec();
                    let d = g.cols();
                    let perm = perm.clone();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for (i, &p) in perm.iter().enumerate() {
                        let dst = &mut gx.data_mut()[p as usize * d..][..d];
                        for (o, v) in dst.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let xv_shape = self.value(*x).shape().to_vec();
                    let d_full = self.value(*x).cols();
                    let gx = Self::grad_slot(&mut grads, *x, &xv_shape);
                    for r in 0..g.rows() {
                        let src = g.row(r);
                        let dst = &mut gx.data_mut()[r * d_full + lo..r * d_full + hi];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::ConcatRows(xs) => {
                    let xs = xs.clone();
                    let d = g.cols();
                    let mut offset = 0;
                    for x in xs {
                        let rows = self.value(x).rows();
                        let shape = self.value(x).shape().to_vec();
                        let gx = Self::grad_slot(&mut grads, x, &shape);
                        for r in 0..rows {
                            let src = g.row(offset + r);
                            let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        offset += rows;
                    }
                }
                Op::Dropout { x, mask } => {
                    let mask = mask.clone();
                    let shape = self.value(*x).shape().to_vec();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for ((o, v), m) in gx.data_mut().iter_mut().zip(g.data()).zip(&mask) {
                        *o += v * m;
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / labels.len() as f64;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let shape = self.value(*logits).shape().to_vec();
                    let classes = probs.cols();
                    let gl = Self::grad_slot(&mut grads, *logits, &shape);
                    for (r, &y) in labels.iter().enumerate() {
                        let p = probs.row(r);
                        let dst = &mut gl.data_mut()[r * classes..(r + 1) * classes];
                        for j in 0..classes {
                            let onehot = if j == y as usize { 1.0 } else { 0.0 };
                            dst[j] += scale * (p[j] - onehot);
                        }
                    }
                }
                Op::SumAll(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let v = g.item();
                    let gx = Self::grad_slot(&mut grads, *x, &shape);
                    for o in gx.data_mut().iter_mut() {
                        *o += v;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(
        grads: &'g mut [Option<Tensor>],
        node: Node,
        shape: &[usize],
    ) -> &'g mut Tensor {
        grads[node.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = tape.relu(w);
        match tape.backward(y) {
            Err(NnError::NonScalarLoss(shape)) => assert_eq!(shape, vec![2]),
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn quadratic_form_gradient_matches_closed_form() {
        // loss = 0.5 * ||W x||^2  =>  dW = (W x) x^T
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.5, 1.5]));
        let x_data = [0.7, -1.3];
        let x = tape.input(Tensor::new(vec![2, 1], x_data.to_vec()));
        let y = tape.matmul(w, x);
        let y2 = tape.mul(y, y);
        let s = tape.sum_all(y2);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();

        let wx = [
            1.0 * 0.7 + 2.0 * -1.3,
            -0.5 * 0.7 + 1.5 * -1.3,
        ];
        let want = [
            wx[0] * x_data[0],
            wx[0] * x_data[1],
            wx[1] * x_data[0],
            wx[1] * x_data[1],
        ];
        let got = grads.get(w).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_ce_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(vec![1, 101]));
        let loss = tape.softmax_cross_entropy(logits, &[17]).unwrap();
        let want = (101.0f64).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_large_margin_loss_is_tiny() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(vec![1, 5]);
        t.data_mut()[2] = 100.0;
        let logits = tape.input(t);
        let loss = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        let v = tape.value(loss).item();
        assert!(v < 1e-40, "loss {v} not tiny");
        assert!(v > 0.0, "stable path should keep the tiny mass");
    }

    #[test]
    fn softmax_ce_probs_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::uniform(vec![8, 21], 5.0, &mut rng));
        let ce = tape.softmax_cross_entropy(logits, &[0; 8]).unwrap();
        let probs = tape.ce_probs(ce);
        for r in 0..8 {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(vec![1, 3]));
        match tape.softmax_cross_entropy(logits, &[3]) {
            Err(NnError::LabelOutOfRange { label: 3, classes: 3 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn pair_relu_sum_matches_unfused_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (groups, n, d) = (3, 4, 5);
        let a = Tensor::uniform(vec![groups * n, d], 1.0, &mut rng);
        let b = Tensor::uniform(vec![groups * n, d], 1.0, &mut rng);

        let mut t1 = Tape::new();
        let a1 = t1.param(a.clone());
        let b1 = t1.param(b.clone());
        let fused = t1.pair_relu_sum(a1, b1, n);
        let l1 = t1.sum_all(fused);

        let mut t2 = Tape::new();
        let a2 = t2.param(a);
        let b2 = t2.param(b);
        let pairs = t2.pair_sum(a2, b2, n);
        let relu = t2.relu(pairs);
        let pooled = t2.sum_pool(relu, n);
        let l2 = t2.sum_all(pooled);

        let v1 = t1.value(fused).clone();
        let v2 = t2.value(pooled).clone();
        assert_eq!(v1.shape(), v2.shape());
        for (x, y) in v1.data().iter().zip(v2.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let g1 = t1.backward(l1).unwrap();
        let g2 = t2.backward(l2).unwrap();
        for (p1, p2) in [(a1, a2), (b1, b2)] {
            let d1 = g1.get(p1).unwrap();
            let d2 = g2.get(p2).unwrap();
            for (x, y) in d1.data().iter().zip(d2.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![4, 1], vec![2.0, 2.0, 1.0, 2.0]));
        let m = tape.max_pool(x, 4);
        assert_eq!(tape.value(m).data(), &[2.0]);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]));
        let eval = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval, x);
        let zero = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(zero, x);
    }

    #[test]
    fn dropout_training_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![n], vec![1.0; n]));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let data = tape.value(y).data();
        let mean: f64 = data.iter().sum::<f64>() / n as f64;
        let zero_frac = data.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zero_frac - 0.5).abs() < 0.01, "zero fraction {zero_frac}");
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(NnError::InvalidDropoutRate(_))
        ));
    }
}
