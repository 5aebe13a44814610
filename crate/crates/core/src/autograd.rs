//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Graph`]; nodes are only ever
//! appended, so creation order is a topological order and the backward pass
//! is a single reverse sweep. A graph supports exactly one backward pass.
//!
//! Reductions run sequentially in row-major order so that identical inputs
//! give bitwise identical results.

use crate::attention::HeadPlan;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
        include: Vec<bool>,
        count: usize,
    },
    Attention {
        qk: Var,
        v: Var,
        heads: Vec<HeadPlan>,
        scale: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    non_finite: Option<String>,
}

fn cols(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable log(1 + e^z) - z*y style binary cross-entropy term.
fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// The first operation that produced a NaN or infinity, if any. Finite
    /// inputs can still overflow; callers turn this into a numeric error.
    pub fn non_finite(&self) -> Option<&str> {
        self.non_finite.as_deref()
    }

    /// Number of positions averaged by a loss node (cross-entropy or BCE).
    pub fn loss_positions(&self, v: Var) -> Option<usize> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { count, .. } | Op::BceWithLogits { count, .. } => Some(*count),
            _ => None,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::Numeric(format!("non-finite value produced by {op}"))),
            None => Ok(()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some(format!("{op:?}").split(['(', ' ', '{']).next().unwrap_or("op").to_string());
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. It participates in differentiation iff the tensor
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        if n.shape.is_empty() {
            Tensor::scalar(n.value[0])
        } else {
            Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape")
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad`, or zeros if `v` received none.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)
    }

    // ----- forward operations -------------------------------------------------

    /// `a[.., k] · b[k, n]`; leading dimensions of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || cols(&sa) != sb[0] {
            return Err(Error::shape(&sa, &sb, "matmul inner dimensions"));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        axpy(x, &bv[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    /// `a[m, k] · b[n, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || cols(&sa) != sb[1] {
            return Err(Error::shape(&sa, &sb, "matmul_t inner dimensions"));
        }
        let (n, k) = (sb[0], sb[1]);
        let m = self.value(a).len() / k;
        let mut out = vec![0.0; m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
                }
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b), "add"));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b), "mul"));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a bias vector to every row (broadcast over leading dimensions).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = cols(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape(self.shape(x), self.shape(bias), "bias length"));
        }
        let b = self.value(bias).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bi) in row.iter_mut().zip(&b) {
                *o += bi;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, bias), rg))
    }

    /// `x · weight + bias`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(x, weight)?;
        self.add_bias(h, bias)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = cols(self.shape(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(self.shape(x), self.shape(gamma), "layer norm parameters"));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / n;
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let z = (row[c] - mean) * rs;
                normed[r * n + c] = z;
                out[r * n + c] = z * gv[c] + bv[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be 2-d, got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("id {bad} outside embedding table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of a 2-d tensor (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = cols(self.shape(x));
        let total = self.value(x).len() / n;
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Index(format!("row {bad} outside tensor of {total} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let n = cols(self.shape(first));
        let mut out = Vec::new();
        for &p in parts {
            if cols(self.shape(p)) != n {
                return Err(Error::shape(self.shape(first), self.shape(p), "concat columns"));
            }
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Applies a precomputed dropout mask (entries are 0 or 1/(1-p)).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let n = cols(self.shape(x));
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// Zero included rows give a loss of exactly 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let v = cols(&s);
        let n = self.value(logits).len() / v;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target id {bad} outside vocabulary of {v}")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            if let Some(t) = *t {
                loss += lse - row[t];
                count += 1;
            }
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy with logits over included positions.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], include: &[bool]) -> Result<Var> {
        let n = self.value(logits).len();
        if labels.len() != n || include.len() != n {
            return Err(Error::Shape(format!(
                "{} logits, {} labels, {} include flags",
                n,
                labels.len(),
                include.len()
            )));
        }
        let z = self.value(logits);
        let mut loss = 0.0;
        let mut count = 0;
        for i in 0..n {
            if include[i] {
                loss += bce_term(z[i], labels[i]);
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                include: include.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Sparse multi-head attention driven by precomputed per-head plans.
    ///
    /// Head `h` reads columns `h*d_head..(h+1)*d_head` of `qk` and `v`. For each
    /// query the plan lists attended keys with their softmax weights; a query
    /// with an empty list attends to itself.
    pub(crate) fn planned_attention(
        &mut self,
        qk: Var,
        v: Var,
        heads: Vec<HeadPlan>,
        scale: f64,
    ) -> Result<Var> {
        let shape = self.shape(qk).to_vec();
        if self.shape(v) != shape.as_slice() || shape.len() != 2 {
            return Err(Error::shape(&shape, self.shape(v), "attention qk/v"));
        }
        let (l, d) = (shape[0], shape[1]);
        let dh = d / heads.len();
        let vv = self.value(v);
        let mut out = vec![0.0; l * d];
        for (h, plan) in heads.iter().enumerate() {
            let c0 = h * dh;
            for i in 0..l {
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                let (s, e) = (plan.offsets[i], plan.offsets[i + 1]);
                if s == e {
                    orow.copy_from_slice(&vv[i * d + c0..i * d + c0 + dh]);
                    continue;
                }
                for k in s..e {
                    let j = plan.keys[k] as usize;
                    axpy(plan.effective_weight(k), &vv[j * d + c0..j * d + c0 + dh], orow);
                }
            }
        }
        let rg = self.rg(qk) || self.rg(v);
        Ok(self.push(shape, out, Op::Attention { qk, v, heads, scale }, rg))
    }

    // ----- backward -----------------------------------------------------------

    fn acc(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Populates gradients of every differentiable node with respect to the
    /// scalar `loss`. Can only be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            // Take the op out so we can borrow values of other nodes freely.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_node(idx, &op, &gout);
            self.nodes[idx].op = op;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b).to_vec();
                let (k, n) = (sb[0], sb[1]);
                let m = gout.len() / n;
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                    self.acc(*a, &ga);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x != 0.0 {
                                axpy(x, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    self.acc(*b, &gb);
                }
            }
            Op::MatMulT(a, b) => {
                let sb = self.shape(*b).to_vec();
                let (n, k) = (sb[0], sb[1]);
                let m = gout.len() / n;
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            axpy(g, &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                    self.acc(*a, &ga);
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            axpy(g, &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                    self.acc(*b, &gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, gout);
                self.acc(*b, gout);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gout.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gout.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect();
                self.acc(*a, &ga);
                self.acc(*b, &gb);
            }
            Op::AddBias(x, bias) => {
                self.acc(*x, gout);
                if self.rg(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in gout.chunks(n) {
                        for (b, g) in gb.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    self.acc(*bias, &gb);
                }
            }
            Op::Scale(x, c) => {
                let g: Vec<f64> = gout.iter().map(|v| v * c).collect();
                self.acc(*x, &g);
            }
            Op::Gelu(x) => {
                let g: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.acc(*x, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; n];
                    let mut gbeta = vec![0.0; n];
                    for (r, grow) in gout.chunks(n).enumerate() {
                        for c in 0..n {
                            gg[c] += grow[c] * normed[r * n + c];
                            gbeta[c] += grow[c];
                        }
                    }
                    self.acc(*gamma, &gg);
                    self.acc(*beta, &gbeta);
                }
                if self.rg(*x) {
                    let gv = self.value(*gamma);
                    let mut gx = vec![0.0; gout.len()];
                    let nf = n as f64;
                    for (r, grow) in gout.chunks(n).enumerate() {
                        let z = &normed[r * n..(r + 1) * n];
                        let mut mean_dz = 0.0;
                        let mut mean_dz_z = 0.0;
                        for c in 0..n {
                            let dz = grow[c] * gv[c];
                            mean_dz += dz;
                            mean_dz_z += dz * z[c];
                        }
                        mean_dz /= nf;
                        mean_dz_z /= nf;
                        for c in 0..n {
                            let dz = grow[c] * gv[c];
                            gx[r * n + c] = rstd[r] * (dz - mean_dz - z[c] * mean_dz_z);
                        }
                    }
                    self.acc(*x, &gx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let s = self.shape(*table).to_vec();
                    let d = s[1];
                    let mut gt = vec![0.0; s[0] * d];
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &gout[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                    self.acc(*table, &gt);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.rg(*x) {
                    let n = cols(self.shape(*x));
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(1.0, &gout[r * n..(r + 1) * n], &mut gx[src * n..(src + 1) * n]);
                    }
                    self.acc(*x, &gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(p, &gout[off..off + len]);
                    off += len;
                }
            }
            Op::Dropout { x, mask } => {
                let g: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.acc(*x, &g);
            }
            Op::SoftmaxRows(x) => {
                let n = cols(&self.nodes[idx].shape);
                let y = &self.nodes[idx].value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        gx[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.acc(*x, &gx);
            }
            Op::Sum(x) => {
                let g = vec![gout[0]; self.value(*x).len()];
                self.acc(*x, &g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let v = cols(self.shape(*logits));
                let scale = gout[0] / *count as f64;
                let mut g = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..v {
                            g[r * v + c] = probs[r * v + c] * scale;
                        }
                        g[r * v + t] -= scale;
                    }
                }
                self.acc(*logits, &g);
            }
            Op::BceWithLogits {
                logits,
                labels,
                include,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let scale = gout[0] / *count as f64;
                let z = self.value(*logits);
                let g: Vec<f64> = (0..z.len())
                    .map(|i| {
                        if include[i] {
                            (sigmoid(z[i]) - labels[i]) * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(*logits, &g);
            }
            Op::Attention {
                qk,
                v,
                heads,
                scale,
            } => {
                let shape = self.shape(*qk).to_vec();
                let (l, d) = (shape[0], shape[1]);
                let dh = d / heads.len();
                let mut gqk = vec![0.0; l * d];
                let mut gv = vec![0.0; l * d];
                {
                    let qv = self.value(*qk);
                    let vv = self.value(*v);
                    let mut dp = Vec::new();
                    for (h, plan) in heads.iter().enumerate() {
                        let c0 = h * dh;
                        for i in 0..l {
                            let go = &gout[i * d + c0..i * d + c0 + dh];
                            let (s, e) = (plan.offsets[i], plan.offsets[i + 1]);
                            if s == e {
                                axpy(1.0, go, &mut gv[i * d + c0..i * d + c0 + dh]);
                                continue;
                            }
                            dp.clear();
                            let mut weighted = 0.0;
                            for k in s..e {
                                let j = plan.keys[k] as usize;
                                let vj = &vv[j * d + c0..j * d + c0 + dh];
                                axpy(plan.effective_weight(k), go, &mut gv[j * d + c0..j * d + c0 + dh]);
                                let g = plan.dropout_factor(k) * dot(go, vj);
                                weighted += plan.weights[k] * g;
                                dp.push(g);
                            }
                            let qi = qv[i * d + c0..i * d + c0 + dh].to_vec();
                            for (n, k) in (s..e).enumerate() {
                                let j = plan.keys[k] as usize;
                                let ds = plan.weights[k] * (dp[n] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                axpy(ds, &qv[j * d + c0..j * d + c0 + dh], &mut gqk[i * d + c0..i * d + c0 + dh]);
                                axpy(ds, &qi, &mut gqk[j * d + c0..j * d + c0 + dh]);
                            }
                        }
                    }
                }
                self.acc(*qk, &gqk);
                self.acc(*v, &gv);
            }
        }
    }
}

/// Compares autodiff gradients of a scalar function against central finite
/// differences and returns the largest relative error
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` over all elements of `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let xv = g.param(x.shape().to_vec(), x.data().to_vec());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.shape().to_vec(), data);
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ad = analytic[i];
        let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_identity_and_hand_product() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![1.0, 2.0]);
        let eye = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zero = g.constant(vec![2], vec![0.0, 0.0]);
        let y = g.linear(x, eye, zero).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);

        let w = g.constant(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let b = g.constant(vec![2], vec![1.0, 1.0]);
        let y = g.linear(x, w, b).unwrap();
        // [1,2]·[[1,0],[1,1]] = [3,2]; + [1,1]
        assert_eq!(g.value(y), &[4.0, 3.0]);
        assert_eq!(g.shape(y), &[1, 2]);
    }

    #[test]
    fn linear_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(vec![3, 5], vec![0.0; 15]);
        let w = g.constant(vec![4, 4], vec![0.0; 16]);
        let err = g.matmul(x, w).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape(_)));
        assert!(msg.contains("[3, 5]") && msg.contains("[4, 4]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0; 3]);
        let y = g.softmax_rows(x);
        for v in g.value(y) {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let x = g.constant(vec![2], vec![0.0, 3f64.ln()]);
        let y = g.softmax_rows(x);
        assert!(close(g.value(y)[0], 0.25, 1e-15));
        assert!(close(g.value(y)[1], 0.75, 1e-15));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let l = g.constant(vec![1, 4], vec![1000.0, 0.0, 0.0, 0.0]);
        let loss = g.cross_entropy(l, &[Some(0)]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);

        let l = g.constant(vec![1, 4], vec![0.0; 4]);
        let loss = g.cross_entropy(l, &[Some(2)]).unwrap();
        assert!(close(g.scalar(loss), 4f64.ln(), 1e-12));
        assert!(close(g.scalar(loss), 1.386294, 1e-6));

        let loss = g.cross_entropy(l, &[None]).unwrap();
        assert_eq!(g.scalar(loss), 0.0);

        assert!(matches!(g.cross_entropy(l, &[Some(4)]), Err(Error::Index(_))));
    }

    #[test]
    fn bce_cases() {
        let mut g = Graph::new();
        let z = g.constant(vec![1], vec![0.0]);
        let loss = g.bce_with_logits(z, &[1.0], &[true]).unwrap();
        assert!(close(g.scalar(loss), 2f64.ln(), 1e-12));

        let z = g.constant(vec![1], vec![1000.0]);
        let loss = g.bce_with_logits(z, &[1.0], &[true]).unwrap();
        assert!(g.scalar(loss).abs() < 1e-12);

        let z = g.constant(vec![2], vec![0.0, 0.0]);
        let loss = g.bce_with_logits(z, &[0.0, 1.0], &[true, true]).unwrap();
        assert!(close(g.scalar(loss), 2f64.ln(), 1e-12));

        assert!(matches!(
            g.bce_with_logits(z, &[0.0], &[true]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_square_and_bias() {
        let mut g = Graph::new();
        let x = g.param(vec![1], vec![3.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]);
        let w = g.param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = g.param(vec![2], vec![0.0, 0.0]);
        let y = g.linear(x, w, b).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        // d/db of the sum over two rows is the row count for every element.
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let mut g = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn write_grad_fills_leaf_tensor() {
        let mut t = Tensor::vector(vec![1.0, -2.0]).requiring_grad();
        let mut g = Graph::new();
        let x = g.leaf(&t);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.write_grad(x, &mut t).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn gradcheck_sum_of_squares_and_constant() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]);
        let err = check_gradients(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let err = check_gradients(
            |g, _x| Ok(g.constant(Vec::new(), vec![7.0])),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_each_primitive() {
        let x = Tensor::new(
            vec![3, 4],
            vec![0.3, -1.2, 2.5, 0.1, 0.7, -0.4, 0.9, -2.0, 1.1, 0.05, -0.6, 0.8],
        )
        .unwrap();
        let w = [0.2, -0.5, 0.3, 0.9, -0.1, 0.4, 0.6, -0.7];
        let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>)> = vec![
            ("matmul", Box::new(move |g: &mut Graph, x: Var| {
                let wv = g.constant(vec![4, 2], w.to_vec());
                let y = g.matmul(x, wv)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            })),
            ("matmul_t", Box::new(move |g: &mut Graph, x: Var| {
                let y = g.matmul_t(x, x)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            })),
            ("gelu", Box::new(|g: &mut Graph, x: Var| {
                let y = g.gelu(x);
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            })),
            ("layer_norm", Box::new(|g: &mut Graph, x: Var| {
                let gamma = g.constant(vec![4], vec![1.0, 0.5, -1.0, 2.0]);
                let beta = g.constant(vec![4], vec![0.1, 0.0, 0.2, -0.3]);
                let y = g.layer_norm(x, gamma, beta)?;
                let c = g.constant(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect());
                let y2 = g.mul(y, c)?;
                Ok(g.sum(y2))
            })),
            ("softmax", Box::new(|g: &mut Graph, x: Var| {
                let y = g.softmax_rows(x);
                let c = g.constant(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect());
                let y2 = g.mul(y, c)?;
                Ok(g.sum(y2))
            })),
            ("cross_entropy", Box::new(|g: &mut Graph, x: Var| {
                g.cross_entropy(x, &[Some(1), None, Some(3)])
            })),
            ("bce", Box::new(|g: &mut Graph, x: Var| {
                let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
                let include: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
                g.bce_with_logits(x, &labels, &include)
            })),
            ("gather_concat", Box::new(|g: &mut Graph, x: Var| {
                let a = g.gather_rows(x, &[2, 0, 2])?;
                let c = g.concat_rows(&[a, x])?;
                let y = g.mul(c, c)?;
                Ok(g.sum(y))
            })),
        ];
        for (name, f) in cases {
            let err = check_gradients(|g, v| f(g, v), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn embedding_gradient_scatters() {
        let mut g = Graph::new();
        let t = g.param(vec![3, 2], vec![0.0; 6]);
        let e = g.embedding(t, &[2, 2, 0]).unwrap();
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.embedding(t, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn overflow_is_recorded_and_losses_count_positions() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3], vec![0.5, -1.0, 2.0]);
        let bce = g.bce_with_logits(x, &[1.0, 0.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(g.loss_positions(bce), Some(2));
        assert_eq!(g.loss_positions(x), None);
        assert!(g.check_finite().is_ok());
        let big = g.scale(x, 1e308);
        let _ = g.scale(big, 10.0);
        assert!(g.non_finite().is_some());
        assert!(matches!(g.check_finite(), Err(Error::Numeric(_))));
    }
}
