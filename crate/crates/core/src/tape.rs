//! Reverse-mode gradient tape over flat vectors.
//!
//! Every forward operation appends a node holding its value and the recipe
//! for its local derivative. Weight matrices are never copied onto the tape:
//! matrix-vector products reference the bound [`ParamSet`] directly, so a
//! tape is cheap to build even for inference-only passes.
//!
//! Binary elementwise ops broadcast an operand of length one.

use crate::tensor::{ParamSet, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter set bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(usize);

/// A single tensor inside a bound parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub slot: Slot,
    pub idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamRef),
    MatVec(ParamRef, Var),
    AddParam(Var, ParamRef),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    Concat(Vec<Var>),
    Slice(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Records forward computations for exact reverse-mode differentiation.
pub struct GradTape<'a> {
    sets: Vec<&'a ParamSet>,
    nodes: Vec<Node>,
}

/// Result of [`GradTape::backward`]: parameter gradients per bound slot and
/// the adjoint of every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Vec<Tensor>>,
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn slot(&self, slot: Slot) -> &[Tensor] {
        &self.params[slot.0]
    }

    pub fn take_slot(&mut self, slot: Slot) -> Vec<Tensor> {
        std::mem::take(&mut self.params[slot.0])
    }

    /// Adjoint of a recorded value. Zero-length if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> &[f64] {
        &self.adjoints[var.0]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn broadcast_len(a: usize, b: usize) -> usize {
    match (a, b) {
        _ if a == b => a,
        (1, n) | (n, 1) => n,
        _ => panic!("incompatible operand lengths {a} and {b}"),
    }
}

impl<'a> Default for GradTape<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self {
            sets: Vec::new(),
            nodes: Vec::with_capacity(256),
        }
    }

    /// Makes a parameter set addressable from this tape.
    pub fn bind(&mut self, params: &'a ParamSet) -> Slot {
        self.sets.push(params);
        Slot(self.sets.len() - 1)
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
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub fn param(&self, p: ParamRef) -> &'a Tensor {
        self.sets[p.slot.0].get(p.idx)
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Its adjoint is available after backward.
    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Leaf)
    }

    /// A whole parameter tensor, flattened, as a differentiable value.
    pub fn param_value(&mut self, p: ParamRef) -> Var {
        let value = self.param(p).data().to_vec();
        self.push(value, Op::Param(p))
    }

    /// `W · x` for a row-major `[out, in]` weight matrix.
    pub fn matvec(&mut self, w: ParamRef, x: Var) -> Var {
        let wt = self.param(w);
        let (rows, cols) = wt.dims2();
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), cols, "matvec width mismatch");
        let wd = wt.data();
        let out = (0..rows)
            .map(|i| {
                wd[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        self.push(out, Op::MatVec(w, x))
    }

    pub fn add_param(&mut self, x: Var, b: ParamRef) -> Var {
        let bias = self.param(b).data();
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), bias.len(), "bias width mismatch");
        let out = xv.iter().zip(bias).map(|(a, b)| a + b).collect();
        self.push(out, Op::AddParam(x, b))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = broadcast_len(av.len(), bv.len());
        (0..n)
            .map(|i| {
                let x = if av.len() == 1 { av[0] } else { av[i] };
                let y = if bv.len() == 1 { bv[0] } else { bv[i] };
                f(x, y)
            })
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        self.push(out, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        self.push(out, Op::Offset(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![s], Op::Sum(x))
    }

    /// `Σ cᵢ xᵢ` with constant coefficients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f64>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), coeffs.len(), "weighted_sum length mismatch");
        let s = xv.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        self.push(vec![s], Op::WeightedSum(x, coeffs))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.nodes[x.0].value[start..start + len].to_vec();
        self.push(out, Op::Slice(x, start))
    }

    /// Sums a list of scalars (or equal-length vectors).
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let first = *iter.next().expect("add_all needs at least one term");
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    /// Exact gradients of the scalar `loss` with respect to every bound
    /// parameter set and every recorded node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut params: Vec<Vec<Tensor>> = self.sets.iter().map(|s| s.zeros_like()).collect();
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        adj[loss.0] = vec![1.0];

        fn acc(adj: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
            let a = &mut adj[v.0];
            if a.is_empty() {
                a.resize(len, 0.0);
            }
            a
        }

        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (d, gi) in params[p.slot.0][p.idx].data_mut().iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::MatVec(w, x) => {
                    let wt = self.param(*w);
                    let (rows, cols) = wt.dims2();
                    let wd = wt.data();
                    let xv = &self.nodes[x.0].value;
                    {
                        let dw = params[w.slot.0][w.idx].data_mut();
                        for r in 0..rows {
                            let gr = g[r];
                            if gr == 0.0 {
                                continue;
                            }
                            for (d, xj) in dw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *d += gr * xj;
                            }
                        }
                    }
                    let dx = acc(&mut adj, *x, cols);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for (d, wij) in dx.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                            *d += gr * wij;
                        }
                    }
                }
                Op::AddParam(x, b) => {
                    for (d, gi) in params[b.slot.0][b.idx].data_mut().iter_mut().zip(&g) {
                        *d += gi;
                    }
                    let dx = acc(&mut adj, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (sa, sb) = match node.op {
                        Op::Sub(..) => (1.0, -1.0),
                        _ => (1.0, 1.0),
                    };
                    let is_mul = matches!(node.op, Op::Mul(..));
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (la, lb) = (av.len(), bv.len());
                    let mut da = vec![0.0; la];
                    let mut db = vec![0.0; lb];
                    for (k, gk) in g.iter().enumerate() {
                        let ia = if la == 1 { 0 } else { k };
                        let ib = if lb == 1 { 0 } else { k };
                        if is_mul {
                            da[ia] += gk * bv[ib];
                            db[ib] += gk * av[ia];
                        } else {
                            da[ia] += sa * gk;
                            db[ib] += sb * gk;
                        }
                    }
                    for (d, v) in acc(&mut adj, *a, la).iter_mut().zip(&da) {
                        *d += v;
                    }
                    for (d, v) in acc(&mut adj, *b, lb).iter_mut().zip(&db) {
                        *d += v;
                    }
                }
                Op::Scale(x, c) => {
                    let dx = acc(&mut adj, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                }
                Op::Offset(x) => {
                    let dx = acc(&mut adj, *x, g.len());
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Relu(x) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Exp(x) | Op::Ln(x) | Op::Square(x)
                | Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &node.value;
                    let local: Vec<f64> = match node.op {
                        Op::Relu(_) => xv.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                        Op::Sigmoid(_) => yv.iter().map(|&y| y * (1.0 - y)).collect(),
                        Op::Tanh(_) => yv.iter().map(|&y| 1.0 - y * y).collect(),
                        Op::Exp(_) => yv.clone(),
                        Op::Ln(_) => xv.iter().map(|&v| 1.0 / v).collect(),
                        Op::Square(_) => xv.iter().map(|&v| 2.0 * v).collect(),
                        Op::Softplus(_) => xv.iter().map(|&v| sigmoid(v)).collect(),
                        _ => unreachable!(),
                    };
                    let dx = acc(&mut adj, *x, g.len());
                    for ((d, gi), l) in dx.iter_mut().zip(&g).zip(&local) {
                        *d += gi * l;
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    for d in acc(&mut adj, *x, n).iter_mut() {
                        *d += g[0];
                    }
                }
                Op::WeightedSum(x, coeffs) => {
                    let dx = acc(&mut adj, *x, coeffs.len());
                    for (d, c) in dx.iter_mut().zip(coeffs) {
                        *d += g[0] * c;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        let dp = acc(&mut adj, *p, n);
                        for (d, gi) in dp.iter_mut().zip(&g[off..off + n]) {
                            *d += gi;
                        }
                        off += n;
                    }
                }
                Op::Slice(x, start) => {
                    let n = self.nodes[x.0].value.len();
                    let dx = acc(&mut adj, *x, n);
                    for (d, gi) in dx[*start..*start + g.len()].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
            }
            adj[i] = g;
        }
        Gradients {
            params,
            adjoints: adj,
        }
    }
}
