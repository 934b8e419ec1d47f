//! Reverse-mode differentiation over vector-valued nodes.
//!
//! A [`Tape`] records the forward computation of one training example (or one
//! decode) as a flat list of nodes. Matrices only ever appear as parameters,
//! so every node value is a plain `Vec<f64>`; matrix-vector products and
//! embedding lookups read the [`ParamStore`] directly instead of copying
//! weights onto the tape.

use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatVec { w: ParamId, x: Var },
    ParamRow { p: ParamId, row: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Index(Var, usize),
    ScaleBy { x: Var, s: Var },
    Dot(Var, Var),
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum { w: Var, rows: Vec<Var> },
    ColMax { rows: Vec<Var>, argmax: Vec<usize> },
    MulConst { x: Var, c: Vec<f64> },
    Nll { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_leaves: Vec<Option<Var>>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of `logits`, with `masked` forced to probability zero.
pub fn softmax_masked(logits: &[f64], masked: Option<usize>) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != masked)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &x)| if Some(i) == masked { 0.0 } else { (x - max).exp() })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

pub fn matvec(store: &ParamStore, w: ParamId, x: &[f64]) -> Vec<f64> {
    let p = store.get(w);
    assert_eq!(p.cols, x.len(), "matvec shape mismatch for {}", p.name);
    (0..p.rows)
        .map(|r| p.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_leaves: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.input(vec![0.0; n])
    }

    /// A vector parameter as a node; registered once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves[id.0] {
            return v;
        }
        let value = self.params.get(id).data.clone();
        let v = self.push(Op::Param(id), value);
        self.param_leaves[id.0] = Some(v);
        v
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let value = matvec(self.params, w, self.value(x));
        self.push(Op::MatVec { w, x }, value)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, x: Var, b: ParamId) -> Var {
        let wx = self.matvec(w, x);
        let b = self.param(b);
        self.add(wx, b)
    }

    pub fn param_row(&mut self, p: ParamId, row: usize) -> Var {
        let value = self.params.get(p).row(row).to_vec();
        self.push(Op::ParamRow { p, row }, value)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.len(), y.len(), "elementwise shape mismatch");
        x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push(Op::OneMinus(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), value)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let value = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        self.push(Op::Concat(parts.to_vec()), value)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let value = vec![self.value(a)[i]];
        self.push(Op::Index(a, i), value)
    }

    /// Vector `x` times scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * k).collect();
        self.push(Op::ScaleBy { x, s }, value)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = vec![self.zip_with(a, b, |x, y| x * y).iter().sum()];
        self.push(Op::Dot(a, b), value)
    }

    /// Gathers scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let value = scalars.iter().map(|&s| self.scalar(s)).collect();
        self.push(Op::Stack(scalars.to_vec()), value)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_masked(self.value(a), None);
        self.push(Op::Softmax(a), value)
    }

    /// `sum_i w[i] * rows[i]`.
    pub fn weighted_sum(&mut self, w: Var, rows: &[Var]) -> Var {
        let weights = self.value(w);
        assert_eq!(weights.len(), rows.len(), "weighted_sum arity mismatch");
        let mut value = vec![0.0; self.value(rows[0]).len()];
        for (&wi, &r) in weights.iter().zip(rows) {
            for (acc, x) in value.iter_mut().zip(self.value(r)) {
                *acc += wi * x;
            }
        }
        self.push(
            Op::WeightedSum {
                w,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    /// Columnwise maximum over equally sized row vectors.
    pub fn col_max(&mut self, rows: &[Var]) -> Var {
        let n = self.value(rows[0]).len();
        let mut value = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for (ri, &r) in rows.iter().enumerate() {
            for (j, &x) in self.value(r).iter().enumerate() {
                if x > value[j] {
                    value[j] = x;
                    argmax[j] = ri;
                }
            }
        }
        self.push(
            Op::ColMax {
                rows: rows.to_vec(),
                argmax,
            },
            value,
        )
    }

    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Var {
        let value = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        self.push(Op::MulConst { x, c }, value)
    }

    /// `-log softmax(logits)[target]`, with `masked` excluded from the softmax.
    pub fn nll(&mut self, logits: Var, target: usize, masked: Option<usize>) -> Var {
        let probs = softmax_masked(self.value(logits), masked);
        let value = vec![-probs[target].ln()];
        self.push(
            Op::Nll {
                logits,
                target,
                probs,
            },
            value,
        )
    }

    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let value = vec![scalars.iter().map(|&s| self.scalar(s)).sum()];
        self.push(Op::Sum(scalars.to_vec()), value)
    }

    /// Back-propagates from scalar `root`, accumulating parameter gradients
    /// into `grads` (scaled by `seed`).
    pub fn backward(&self, root: Var, seed: f64, grads: &mut Gradients) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        adj[root.0] = vec![seed];

        fn acc(adj: &mut [Vec<f64>], v: Var, n: usize) -> &mut Vec<f64> {
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; n];
            }
            slot
        }

        for i in (0..=root.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (a, b) in grads.get_mut(*id).iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatVec { w, x } => {
                    let p = self.params.get(*w);
                    let xv = self.value(*x);
                    let gw = grads.get_mut(*w);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * p.cols..(r + 1) * p.cols];
                        for (a, &xj) in row.iter_mut().zip(xv) {
                            *a += gr * xj;
                        }
                    }
                    let gx = acc(&mut adj, *x, p.cols);
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        for (a, &wj) in gx.iter_mut().zip(p.row(r)) {
                            *a += gr * wj;
                        }
                    }
                }
                Op::ParamRow { p, row } => {
                    let cols = self.params.get(*p).cols;
                    let gp = &mut grads.get_mut(*p)[row * cols..(row + 1) * cols];
                    for (a, b) in gp.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Add(a, b) => {
                    for (t, &gi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, &gi) in acc(&mut adj, *b, g.len()).iter_mut().zip(&g) {
                        *t += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (t, &gi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g) {
                        *t += gi;
                    }
                    for (t, &gi) in acc(&mut adj, *b, g.len()).iter_mut().zip(&g) {
                        *t -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    for ((t, &gi), &y) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                        *t += gi * y;
                    }
                    for ((t, &gi), &x) in acc(&mut adj, *b, g.len()).iter_mut().zip(&g).zip(av) {
                        *t += gi * x;
                    }
                }
                Op::OneMinus(a) => {
                    for (t, &gi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g) {
                        *t -= gi;
                    }
                }
                Op::Sigmoid(a) => {
                    for ((t, &gi), &y) in acc(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(&node.value)
                    {
                        *t += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    for ((t, &gi), &y) in acc(&mut adj, *a, g.len())
                        .iter_mut()
                        .zip(&g)
                        .zip(&node.value)
                    {
                        *t += gi * (1.0 - y * y);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        for (t, &gi) in acc(&mut adj, p, n).iter_mut().zip(&g[offset..offset + n]) {
                            *t += gi;
                        }
                        offset += n;
                    }
                }
                Op::Index(a, idx) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, *a, n)[*idx] += g[0];
                }
                Op::ScaleBy { x, s } => {
                    let k = self.scalar(*s);
                    let xv = self.value(*x);
                    let gs: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    for (t, &gi) in acc(&mut adj, *x, g.len()).iter_mut().zip(&g) {
                        *t += gi * k;
                    }
                    acc(&mut adj, *s, 1)[0] += gs;
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len();
                    for (t, &y) in acc(&mut adj, *a, n).iter_mut().zip(bv) {
                        *t += g[0] * y;
                    }
                    for (t, &x) in acc(&mut adj, *b, n).iter_mut().zip(av) {
                        *t += g[0] * x;
                    }
                }
                Op::Stack(scalars) => {
                    for (&s, &gi) in scalars.iter().zip(&g) {
                        acc(&mut adj, s, 1)[0] += gi;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let inner: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((t, &gi), &yi) in acc(&mut adj, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *t += yi * (gi - inner);
                    }
                }
                Op::WeightedSum { w, rows } => {
                    let wv = self.value(*w).to_vec();
                    let gw: Vec<f64> = rows
                        .iter()
                        .map(|&r| g.iter().zip(self.value(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    for (t, gi) in acc(&mut adj, *w, rows.len()).iter_mut().zip(gw) {
                        *t += gi;
                    }
                    for (&r, &wi) in rows.iter().zip(&wv) {
                        for (t, &gi) in acc(&mut adj, r, g.len()).iter_mut().zip(&g) {
                            *t += wi * gi;
                        }
                    }
                }
                Op::ColMax { rows, argmax } => {
                    for (j, (&ri, &gi)) in argmax.iter().zip(&g).enumerate() {
                        acc(&mut adj, rows[ri], g.len())[j] += gi;
                    }
                }
                Op::MulConst { x, c } => {
                    for ((t, &gi), &ci) in acc(&mut adj, *x, g.len()).iter_mut().zip(&g).zip(c) {
                        *t += gi * ci;
                    }
                }
                Op::Nll {
                    logits,
                    target,
                    probs,
                } => {
                    let t = acc(&mut adj, *logits, probs.len());
                    for (j, (a, &p)) in t.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *a += g[0] * (p - onehot);
                    }
                }
                Op::Sum(scalars) => {
                    for &s in scalars {
                        acc(&mut adj, s, 1)[0] += g[0];
                    }
                }
            }
        }
    }
}
