//! Reverse-mode tape over `ndarray` matrices, 64-bit throughout.
//!
//! The tape holds every intermediate value, so a training step is: rebuild
//! the graph (forward), call [`Tape::backward`] on the scalar loss, then let
//! the optimizer consume the gradients. The op set is exactly what the
//! backbones and losses need; losses are fused ops for numerical stability.

use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Index of a tape node.
pub type Var = usize;

/// Sparse row-major matrix with explicit values.
#[derive(Debug, Clone)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from triplets; entries must be grouped by row in ascending
    /// row order (duplicates are summed by the multiply, not merged).
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            by_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in by_row {
            for (c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    /// `self * x` for dense `x` of shape `(cols, d)`.
    pub fn mul(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((self.rows, d));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let v = self.values[k];
                let src = x.row(c);
                let mut dst = out.row_mut(r);
                dst.scaled_add(v, &src);
            }
        }
        out
    }

    /// `self^T * g` for dense `g` of shape `(rows, d)`.
    pub fn t_mul(&self, g: &Array2<f64>) -> Array2<f64> {
        let d = g.ncols();
        let mut out = Array2::zeros((self.cols, d));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k];
                let v = self.values[k];
                let src = g.row(r);
                let mut dst = out.row_mut(c);
                dst.scaled_add(v, &src);
            }
        }
        out
    }
}

/// Attention candidate: either another node's transformed state or a
/// transformed edge message (interpreter first layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cand {
    Node(usize),
    Edge(usize),
}

const LEAKY_SLOPE: f64 = 0.2;

fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// `(x: n x d) + broadcast(b: 1 x d)`
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SpMM(Rc<Csr>, Var),
    Attention(AttentionOp),
    CeMean(CeOp),
    MseSoftmaxMean(MseOp),
    WeightedSqDistMean(SqDistOp),
    WeightedSum(Vec<(Var, f64)>),
}

struct AttentionOp {
    z: Var,
    edge_vals: Option<Var>,
    a_src: Var,
    a_dst: Var,
    cand: Rc<Vec<Vec<Cand>>>,
    /// Softmax weights per node, saved at forward.
    alpha: Vec<Vec<f64>>,
    /// Pre-LeakyReLU scores per node, saved at forward.
    pre: Vec<Vec<f64>>,
}

struct CeOp {
    logits: Var,
    /// `(row, class)` pairs; loss is the mean over them.
    targets: Vec<(usize, usize)>,
    probs: Vec<Vec<f64>>,
}

struct MseOp {
    logits: Var,
    /// `(row, target probability vector)`; loss is the mean over rows of the
    /// per-class mean squared difference in probability space.
    targets: Vec<(usize, Vec<f64>)>,
    probs: Vec<Vec<f64>>,
}

struct SqDistOp {
    a: Var,
    b: Rc<Array2<f64>>,
    /// `(row, weight)`; loss is `mean over rows of w * ||a_r - b_r||^2 / d`.
    terms: Vec<(usize, f64)>,
}

struct Node {
    value: Array2<f64>,
    requires_grad: bool,
    op: Op,
}

/// Numerically stable softmax of a slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Sub(a, b))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let value = &self.nodes[x].value + &self.nodes[b].value;
        let rg = self.rg(x) || self.rg(b);
        self.push(value, rg, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.nodes[x].value.mapv(|v| v * c);
        let rg = self.rg(x);
        self.push(value, rg, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn spmm(&mut self, s: Rc<Csr>, x: Var) -> Var {
        let value = s.mul(&self.nodes[x].value);
        let rg = self.rg(x);
        self.push(value, rg, Op::SpMM(s, x))
    }

    /// Masked single-head attention.
    ///
    /// For node `i` with candidates `cand[i]`, score for candidate `c` is
    /// `LeakyReLU(a_src . z_i + a_dst . k_c)` where `k_c` is `z_j` for
    /// `Cand::Node(j)` or `edge_vals_e` for `Cand::Edge(e)`; the output row
    /// is the softmax-weighted sum of the `k_c`. Nodes with no candidates
    /// yield a zero row.
    pub fn attention(
        &mut self,
        z: Var,
        edge_vals: Option<Var>,
        a_src: Var,
        a_dst: Var,
        cand: Rc<Vec<Vec<Cand>>>,
    ) -> Var {
        let zv = &self.nodes[z].value;
        let (n, d) = (zv.nrows(), zv.ncols());
        let asv = &self.nodes[a_src].value;
        let adv = &self.nodes[a_dst].value;
        let ev = edge_vals.map(|e| &self.nodes[e].value);

        let key_row = |c: &Cand| match c {
            Cand::Node(j) => zv.row(*j),
            Cand::Edge(e) => ev.expect("edge candidate without edge values").row(*e),
        };

        let mut out = Array2::zeros((n, d));
        let mut alpha = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        for i in 0..n {
            let cands = &cand[i];
            if cands.is_empty() {
                alpha.push(Vec::new());
                pre.push(Vec::new());
                continue;
            }
            let s_i: f64 = zv.row(i).dot(&asv.row(0));
            let pre_i: Vec<f64> = cands
                .iter()
                .map(|c| s_i + key_row(c).dot(&adv.row(0)))
                .collect();
            let scores: Vec<f64> = pre_i.iter().map(|&p| leaky_relu(p)).collect();
            let a = softmax(&scores);
            for (c, &w) in cands.iter().zip(&a) {
                let mut dst = out.row_mut(i);
                dst.scaled_add(w, &key_row(c));
            }
            alpha.push(a);
            pre.push(pre_i);
        }

        let rg = self.rg(z)
            || self.rg(a_src)
            || self.rg(a_dst)
            || edge_vals.map(|e| self.rg(e)).unwrap_or(false);
        self.push(
            out,
            rg,
            Op::Attention(AttentionOp {
                z,
                edge_vals,
                a_src,
                a_dst,
                cand,
                alpha,
                pre,
            }),
        )
    }

    /// Mean cross-entropy of `softmax(logits[row])` against class targets.
    pub fn ce_mean(&mut self, logits: Var, targets: Vec<(usize, usize)>) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::EmptyTrainSet);
        }
        let lv = &self.nodes[logits].value;
        let mut probs = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for &(row, class) in &targets {
            let p = softmax(lv.row(row).as_slice().expect("contiguous row"));
            total -= p[class].max(1e-300).ln();
            probs.push(p);
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::CeMean(CeOp {
                logits,
                targets,
                probs,
            }),
        ))
    }

    /// Mean over rows of the per-class mean squared difference between
    /// `softmax(logits[row])` and the target probability vector.
    pub fn mse_softmax_mean(&mut self, logits: Var, targets: Vec<(usize, Vec<f64>)>) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::EmptyTrainSet);
        }
        let lv = &self.nodes[logits].value;
        let classes = lv.ncols();
        let mut probs = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        for (row, t) in &targets {
            if t.len() != classes {
                return Err(Error::DimMismatch {
                    context: "soft label".into(),
                    expected: classes,
                    got: t.len(),
                });
            }
            let p = softmax(lv.row(*row).as_slice().expect("contiguous row"));
            total += p
                .iter()
                .zip(t)
                .map(|(pi, ti)| (pi - ti) * (pi - ti))
                .sum::<f64>()
                / classes as f64;
            probs.push(p);
        }
        let value = Array2::from_elem((1, 1), total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            rg,
            Op::MseSoftmaxMean(MseOp {
                logits,
                targets,
                probs,
            }),
        ))
    }

    /// `mean over (row, w) of w * ||a_row - b_row||^2 / width`, with `b`
    /// held constant (the frozen side of an alignment pair).
    pub fn weighted_sqdist_mean(
        &mut self,
        a: Var,
        b: Rc<Array2<f64>>,
        terms: Vec<(usize, f64)>,
    ) -> Result<Var> {
        let av = &self.nodes[a].value;
        if av.ncols() != b.ncols() {
            return Err(Error::DimMismatch {
                context: "alignment embedding width".into(),
                expected: av.ncols(),
                got: b.ncols(),
            });
        }
        if terms.is_empty() {
            return Err(Error::EmptyTrainSet);
        }
        let d = av.ncols() as f64;
        let k = terms.len() as f64;
        let mut total = 0.0;
        for &(row, w) in &terms {
            let diff = &av.row(row) - &b.row(row);
            total += w * diff.dot(&diff) / d;
        }
        let value = Array2::from_elem((1, 1), total / k);
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::WeightedSqDistMean(SqDistOp { a, b, terms })))
    }

    /// Weighted sum of `1 x 1` scalars.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total: f64 = terms
            .iter()
            .map(|&(v, c)| self.nodes[v].value[[0, 0]] * c)
            .sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            Array2::from_elem((1, 1), total),
            rg,
            Op::WeightedSum(terms),
        )
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per tape
    /// node; only nodes that require grad receive one.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        let mut accum = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            match &mut grads[v] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for idx in (0..=loss).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for the optimizer
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.dot(&bv.t()));
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, av.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accum(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accum(&mut grads, *b, g.mapv(|v| -v));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.rg(*b) {
                        let col = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads, *b, col);
                    }
                    if self.rg(*x) {
                        accum(&mut grads, *x, g);
                    }
                }
                Op::Scale(x, c) => {
                    if self.rg(*x) {
                        accum(&mut grads, *x, g.mapv(|v| v * c));
                    }
                }
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let xv = &self.nodes[*x].value;
                        let gx = ndarray::Zip::from(&g)
                            .and(xv)
                            .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                        accum(&mut grads, *x, gx);
                    }
                }
                Op::SpMM(s, x) => {
                    if self.rg(*x) {
                        accum(&mut grads, *x, s.t_mul(&g));
                    }
                }
                Op::Attention(op) => {
                    self.attention_backward(op, &g, &mut grads, &mut accum);
                }
                Op::CeMean(op) => {
                    if self.rg(op.logits) {
                        let lv = &self.nodes[op.logits].value;
                        let mut gl = Array2::zeros(lv.raw_dim());
                        let scale = g[[0, 0]] / op.targets.len() as f64;
                        for ((row, class), p) in op.targets.iter().zip(&op.probs) {
                            for c in 0..p.len() {
                                let indicator = if c == *class { 1.0 } else { 0.0 };
                                gl[[*row, c]] += scale * (p[c] - indicator);
                            }
                        }
                        accum(&mut grads, op.logits, gl);
                    }
                }
                Op::MseSoftmaxMean(op) => {
                    if self.rg(op.logits) {
                        let lv = &self.nodes[op.logits].value;
                        let classes = lv.ncols() as f64;
                        let mut gl = Array2::zeros(lv.raw_dim());
                        let scale = g[[0, 0]] / op.targets.len() as f64;
                        for ((row, t), p) in op.targets.iter().zip(&op.probs) {
                            // dL/dp then pull back through the softmax Jacobian.
                            let dp: Vec<f64> = p
                                .iter()
                                .zip(t)
                                .map(|(pi, ti)| 2.0 * (pi - ti) / classes)
                                .collect();
                            let dot: f64 = dp.iter().zip(p).map(|(d, pi)| d * pi).sum();
                            for c in 0..p.len() {
                                gl[[*row, c]] += scale * p[c] * (dp[c] - dot);
                            }
                        }
                        accum(&mut grads, op.logits, gl);
                    }
                }
                Op::WeightedSqDistMean(op) => {
                    if self.rg(op.a) {
                        let av = &self.nodes[op.a].value;
                        let d = av.ncols() as f64;
                        let k = op.terms.len() as f64;
                        let mut ga = Array2::zeros(av.raw_dim());
                        let scale = g[[0, 0]];
                        for &(row, w) in &op.terms {
                            let coef = scale * 2.0 * w / (k * d);
                            for c in 0..av.ncols() {
                                ga[[row, c]] += coef * (av[[row, c]] - op.b[[row, c]]);
                            }
                        }
                        accum(&mut grads, op.a, ga);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        if self.rg(v) {
                            accum(&mut grads, v, g.mapv(|x| x * c));
                        }
                    }
                }
            }
        }
        grads
    }

    fn attention_backward(
        &self,
        op: &AttentionOp,
        g: &Array2<f64>,
        grads: &mut Vec<Option<Array2<f64>>>,
        accum: &mut impl FnMut(&mut Vec<Option<Array2<f64>>>, Var, Array2<f64>),
    ) {
        let zv = &self.nodes[op.z].value;
        let asv = &self.nodes[op.a_src].value;
        let adv = &self.nodes[op.a_dst].value;
        let ev = op.edge_vals.map(|e| &self.nodes[e].value);
        let (n, d) = (zv.nrows(), zv.ncols());

        let mut gz = Array2::zeros((n, d));
        let mut ge = ev.map(|e| Array2::zeros(e.raw_dim()));
        let mut gas = Array2::zeros((1, d));
        let mut gad = Array2::zeros((1, d));

        for i in 0..n {
            let cands = &op.cand[i];
            if cands.is_empty() {
                continue;
            }
            let gi = g.row(i);
            let alpha = &op.alpha[i];
            let pre = &op.pre[i];

            let key_row = |c: &Cand| match c {
                Cand::Node(j) => zv.row(*j),
                Cand::Edge(e) => ev.expect("edge candidate without edge values").row(*e),
            };

            // d(loss)/d(alpha_c) and the softmax pullback.
            let dalpha: Vec<f64> = cands.iter().map(|c| gi.dot(&key_row(c))).collect();
            let dot: f64 = dalpha.iter().zip(alpha).map(|(da, a)| da * a).sum();
            let mut ds_i = 0.0;
            for (ci, c) in cands.iter().enumerate() {
                let de = alpha[ci] * (dalpha[ci] - dot);
                let dpre = de * leaky_relu_grad(pre[ci]);
                ds_i += dpre;
                // value path: out_i += alpha_c * key_c
                // score path: t_c = key_c . a_dst
                let add_key_grad = |target: &mut Array2<f64>, row: usize| {
                    for k in 0..d {
                        target[[row, k]] += alpha[ci] * gi[k] + dpre * adv[[0, k]];
                    }
                };
                match c {
                    Cand::Node(j) => add_key_grad(&mut gz, *j),
                    Cand::Edge(e) => add_key_grad(ge.as_mut().expect("edge grads"), *e),
                }
                let key = key_row(c);
                for k in 0..d {
                    gad[[0, k]] += dpre * key[k];
                }
            }
            // s_i = z_i . a_src contributes to every candidate's score.
            for k in 0..d {
                gz[[i, k]] += ds_i * asv[[0, k]];
                gas[[0, k]] += ds_i * zv[[i, k]];
            }
        }

        if self.rg(op.z) {
            accum(grads, op.z, gz);
        }
        if let (Some(e), Some(gev)) = (op.edge_vals, ge) {
            if self.rg(e) {
                accum(grads, e, gev);
            }
        }
        if self.rg(op.a_src) {
            accum(grads, op.a_src, gas);
        }
        if self.rg(op.a_dst) {
            accum(grads, op.a_dst, gad);
        }
    }
}

/// Adam with the default moment coefficients.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One step over parameter slots; a slot with `lr = 0` or a missing
    /// gradient is skipped but its moments stay aligned by index.
    pub fn step(
        &mut self,
        params: &mut [Array2<f64>],
        grads: &[Option<Array2<f64>>],
        lrs: &[f64],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let g = match (&grads[i], lr != 0.0) {
                (Some(g), true) => g,
                _ => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` w.r.t. one parameter matrix.
    fn finite_diff(
        mut f: impl FnMut(&Array2<f64>) -> f64,
        at: &Array2<f64>,
        eps: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(at.raw_dim());
        for idx in 0..at.len() {
            let (r, c) = (idx / at.ncols(), idx % at.ncols());
            let mut plus = at.clone();
            plus[[r, c]] += eps;
            let mut minus = at.clone();
            minus[[r, c]] -= eps;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| {
                let denom = (x.abs() + y.abs()).max(1e-8);
                (x - y).abs() / denom
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_relu_bias_gradients_match_fd() {
        let x = array![[0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]];
        let w0 = array![[0.2, -0.4, 0.6], [0.1, 0.3, -0.2]];
        let b0 = array![[0.05, -0.1, 0.2]];

        let loss_at = |w: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(w.clone());
            let bv = t.param(b0.clone());
            let h = t.matmul(xv, wv);
            let h = t.add_bias(h, bv);
            let h = t.relu(h);
            // squared frobenius via weighted_sqdist against zeros
            let zero = Rc::new(Array2::zeros((3, 3)));
            let l = t
                .weighted_sqdist_mean(h, zero, vec![(0, 1.0), (1, 1.0), (2, 1.0)])
                .unwrap();
            t.scalar(l)
        };

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(w0.clone());
        let bv = t.param(b0.clone());
        let h = t.matmul(xv, wv);
        let h = t.add_bias(h, bv);
        let h = t.relu(h);
        let zero = Rc::new(Array2::zeros((3, 3)));
        let l = t
            .weighted_sqdist_mean(h, zero, vec![(0, 1.0), (1, 1.0), (2, 1.0)])
            .unwrap();
        let grads = t.backward(l);

        let fd = finite_diff(|w| loss_at(w), &w0, 1e-6);
        assert!(max_rel_err(grads[wv].as_ref().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn spmm_gradient_matches_fd() {
        let s = Rc::new(Csr::from_triplets(
            2,
            3,
            &[(0, 0, 0.5), (0, 2, 1.5), (1, 1, -0.7)],
        ));
        let x0 = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.6]];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let y = t.spmm(s.clone(), xv);
            let zero = Rc::new(Array2::zeros((2, 2)));
            let l = t
                .weighted_sqdist_mean(y, zero, vec![(0, 1.0), (1, 2.0)])
                .unwrap();
            t.scalar(l)
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let y = t.spmm(s.clone(), xv);
        let zero = Rc::new(Array2::zeros((2, 2)));
        let l = t
            .weighted_sqdist_mean(y, zero, vec![(0, 1.0), (1, 2.0)])
            .unwrap();
        let grads = t.backward(l);
        let fd = finite_diff(f, &x0, 1e-6);
        assert!(max_rel_err(grads[xv].as_ref().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn ce_and_mse_gradients_match_fd() {
        let l0 = array![[0.4, -0.3, 0.8], [1.1, 0.0, -0.6]];
        let targets = vec![(0usize, 2usize), (1, 0)];
        let soft = vec![(0usize, vec![0.2, 0.3, 0.5]), (1, vec![0.7, 0.2, 0.1])];

        let f = |l: &Array2<f64>| {
            let mut t = Tape::new();
            let lv = t.param(l.clone());
            let ce = t.ce_mean(lv, targets.clone()).unwrap();
            let mse = t.mse_softmax_mean(lv, soft.clone()).unwrap();
            let total = t.weighted_sum(vec![(ce, 1.0), (mse, 0.7)]);
            t.scalar(total)
        };
        let mut t = Tape::new();
        let lv = t.param(l0.clone());
        let ce = t.ce_mean(lv, targets.clone()).unwrap();
        let mse = t.mse_softmax_mean(lv, soft.clone()).unwrap();
        let total = t.weighted_sum(vec![(ce, 1.0), (mse, 0.7)]);
        let grads = t.backward(total);
        let fd = finite_diff(f, &l0, 1e-6);
        assert!(max_rel_err(grads[lv].as_ref().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn attention_gradients_match_fd() {
        // 3 nodes, node 0 attends to {0, 1 via edge message, 2}, others self-only.
        let z0 = array![[0.5, -0.2], [0.1, 0.9], [-0.4, 0.3]];
        let e0 = array![[0.7, 0.2]];
        let asrc = array![[0.3, -0.5]];
        let adst = array![[0.2, 0.6]];
        let cand = Rc::new(vec![
            vec![Cand::Node(0), Cand::Edge(0), Cand::Node(2)],
            vec![Cand::Node(1)],
            vec![Cand::Node(2), Cand::Node(1)],
        ]);

        let run = |z: &Array2<f64>, e: &Array2<f64>, as_: &Array2<f64>, ad: &Array2<f64>| {
            let mut t = Tape::new();
            let zv = t.param(z.clone());
            let ev = t.param(e.clone());
            let asv = t.param(as_.clone());
            let adv = t.param(ad.clone());
            let out = t.attention(zv, Some(ev), asv, adv, cand.clone());
            let zero = Rc::new(Array2::zeros((3, 2)));
            let l = t
                .weighted_sqdist_mean(out, zero, vec![(0, 1.0), (1, 0.5), (2, 2.0)])
                .unwrap();
            (t.scalar(l), t, [zv, ev, asv, adv], l)
        };

        let (_, t, vars, l) = run(&z0, &e0, &asrc, &adst);
        let grads = t.backward(l);

        let fd_z = finite_diff(|z| run(z, &e0, &asrc, &adst).0, &z0, 1e-6);
        let fd_e = finite_diff(|e| run(&z0, e, &asrc, &adst).0, &e0, 1e-6);
        let fd_as = finite_diff(|a| run(&z0, &e0, a, &adst).0, &asrc, 1e-6);
        let fd_ad = finite_diff(|a| run(&z0, &e0, &asrc, a).0, &adst, 1e-6);

        assert!(max_rel_err(grads[vars[0]].as_ref().unwrap(), &fd_z) < 1e-5);
        assert!(max_rel_err(grads[vars[1]].as_ref().unwrap(), &fd_e) < 1e-5);
        assert!(max_rel_err(grads[vars[2]].as_ref().unwrap(), &fd_as) < 1e-5);
        assert!(max_rel_err(grads[vars[3]].as_ref().unwrap(), &fd_ad) < 1e-5);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut params = vec![array![[5.0, -3.0]]];
        let mut opt = Adam::new(&[(1, 2)]);
        for _ in 0..500 {
            let g = params[0].mapv(|x| 2.0 * x);
            opt.step(&mut params, &[Some(g)], &[0.05]);
        }
        assert!(params[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 999.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
