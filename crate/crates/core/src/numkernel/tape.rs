//! Reverse-mode differentiation over a recorded operation sequence.
//!
//! Every operation evaluates eagerly, caches its output on the tape and
//! records which nodes it read. [`Tape::backward`] then walks the tape from
//! the output back to the leaves, accumulating vector-Jacobian products.
//! Nodes that do not depend on any gradient-requiring leaf are skipped.
//!
//! Parameters are bound by reference ([`Tape::bind`]), so building a tape per
//! training example does not copy the model.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::ops::{self, axpy, dot};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    AddRows(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Slice(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Dot(Var, Var),
    Normalize(Var),
    Cosine(Var, Var),
    Hinge(Var, f64),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Parameters of a [`ParamStore`] bound onto a tape, addressable by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients of one scalar output with respect to every leaf that asked for one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every bound parameter; parameters the output does not
    /// depend on get zeros.
    pub fn to_store(mut self, tape: &Tape<'_>, bound: &Bound) -> ParamStore {
        bound
            .vars
            .iter()
            .map(|(name, &v)| {
                let g = self.grads.get_mut(v.0).and_then(Option::take);
                let g = g.unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Cow::Owned(value), op, needs)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn variable_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Binds every tensor of `store` as a gradient-receiving leaf.
    pub fn bind(&mut self, store: &'a ParamStore) -> Bound {
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), self.variable_ref(t)))
            .collect();
        Bound { vars }
    }

    /// Like [`Tape::bind`], taking ownership of the tensors.
    pub fn bind_owned(&mut self, store: ParamStore) -> Bound {
        let vars = store
            .into_iter()
            .map(|(name, t)| (name, self.variable(t)))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = ops::matvec(self.value(w), self.value(x))?;
        Ok(self.derived(out, Op::MatVec(w, x), &[w, x]))
    }

    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = ops::vecmat(self.value(x), self.value(w))?;
        Ok(self.derived(out, Op::VecMat(x, w), &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds vector `v[k]` to every row of matrix `m[r×k]`.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.cols() != tv.numel() {
            return Err(Error::dim(format!(
                "add_rows: cannot broadcast {:?} over rows of {:?}",
                tv.shape(),
                tm.shape()
            )));
        }
        let mut out = tm.clone();
        let k = tv.numel();
        for row in out.data_mut().chunks_exact_mut(k) {
            for (o, x) in row.iter_mut().zip(tv.data()) {
                *o += x;
            }
        }
        Ok(self.derived(out, Op::AddRows(m, v), &[m, v]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = map(self.value(a), |x| scale * x + shift);
        self.derived(out, Op::Affine(a, scale), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.derived(out, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), ops::sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax(self.value(a))?;
        Ok(self.derived(out, Op::Softmax(a), &[a]))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || len == 0 || start + len > t.numel() {
            return Err(Error::dim(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        Ok(self.derived(out, Op::Slice(a, start), &[a]))
    }

    /// Mean of the rows of a matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::dim(format!("mean_rows: expected a matrix, got {:?}", t.shape())));
        }
        let n = t.rows() as f64;
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            axpy(&mut out, 1.0, t.row(r));
        }
        out.iter_mut().for_each(|v| *v /= n);
        Ok(self.derived(Tensor::vector(out), Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("dot", ta, tb)?;
        let d = dot(ta.data(), tb.data());
        Ok(self.derived(Tensor::scalar(d), Op::Dot(a, b), &[a, b]))
    }

    /// Scales a vector to unit L2 norm.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Degenerate(format!("cannot normalize a vector of norm {n}")));
        }
        let out = map(t, |x| x / n);
        Ok(self.derived(out, Op::Normalize(a), &[a]))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = ops::cosine_similarity(self.value(a), self.value(b))?;
        Ok(self.derived(Tensor::scalar(c), Op::Cosine(a, b), &[a, b]))
    }

    /// `max(0, a - margin)`, elementwise.
    pub fn hinge(&mut self, a: Var, margin: f64) -> Var {
        let out = map(self.value(a), |x| (x - margin).max(0.0));
        self.derived(out, Op::Hinge(a, margin), &[a])
    }

    /// Sum of several one-element nodes, accumulated left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::arg("add_all of an empty list"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Backpropagates from the one-element node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let v = self.value(out);
        if v.numel() != 1 {
            return Err(Error::dim(format!("backward from non-scalar of shape {:?}", v.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::full(v.shape(), 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &*node.value;
            match node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let ga = ops::matmul_nt(&g, self.value(b))?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let ta = self.value(a);
                        let mut gb = Tensor::zeros(self.value(b).shape());
                        let n = gb.cols();
                        for r in 0..ta.rows() {
                            for (p, &arp) in ta.row(r).iter().enumerate() {
                                axpy(&mut gb.data_mut()[p * n..(p + 1) * n], arp, g.row(r));
                            }
                        }
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    if self.needs(a) {
                        let ga = ops::matmul(&g, tb)?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        // gb[j,:] = Σ_i g[i,j] a[i,:]
                        let mut gb = Tensor::zeros(tb.shape());
                        let k = tb.cols();
                        let n = tb.rows();
                        for r in 0..ta.rows() {
                            let grow = g.row(r);
                            for j in 0..n {
                                axpy(&mut gb.data_mut()[j * k..(j + 1) * k], grow[j], ta.row(r));
                            }
                        }
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatVec(w, x) => {
                    let (tw, tx) = (self.value(w), self.value(x));
                    if self.needs(w) {
                        let k = tw.cols();
                        let mut gw = Tensor::zeros(tw.shape());
                        for (r, &gr) in g.data().iter().enumerate() {
                            axpy(&mut gw.data_mut()[r * k..(r + 1) * k], gr, tx.data());
                        }
                        accumulate(&mut grads, w, gw);
                    }
                    if self.needs(x) {
                        let gx = ops::vecmat(&g, tw)?;
                        accumulate(&mut grads, x, gx);
                    }
                }
                Op::VecMat(x, w) => {
                    let (tx, tw) = (self.value(x), self.value(w));
                    if self.needs(x) {
                        let gx = ops::matvec(tw, &g)?;
                        accumulate(&mut grads, x, gx);
                    }
                    if self.needs(w) {
                        let n = tw.cols();
                        let mut gw = Tensor::zeros(tw.shape());
                        for (r, &xr) in tx.data().iter().enumerate() {
                            axpy(&mut gw.data_mut()[r * n..(r + 1) * n], xr, g.data());
                        }
                        accumulate(&mut grads, w, gw);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::AddRows(m, v) => {
                    if self.needs(v) {
                        let k = self.value(v).numel();
                        let mut gv = vec![0.0; k];
                        for row in g.data().chunks_exact(k) {
                            axpy(&mut gv, 1.0, row);
                        }
                        accumulate(&mut grads, v, Tensor::vector(gv));
                    }
                    if self.needs(m) {
                        accumulate(&mut grads, m, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    if self.needs(a) {
                        accumulate(&mut grads, a, zip_map(&g, tb, |gi, bi| gi * bi));
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, zip_map(&g, ta, |gi, ai| gi * ai));
                    }
                }
                Op::Affine(a, scale) => {
                    accumulate(&mut grads, a, map(&g, |gi| gi * scale));
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads, a, zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads, a, zip_map(&g, y, |gi, yi| gi * yi * (1.0 - yi)));
                }
                Op::Relu(a) => {
                    let ta = self.value(a);
                    accumulate(&mut grads, a, zip_map(&g, ta, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let gy = dot(g.data(), y.data());
                    accumulate(&mut grads, a, zip_map(&g, y, |gi, yi| yi * (gi - gy)));
                }
                Op::Slice(a, start) => {
                    let mut ga = Tensor::zeros(self.value(a).shape());
                    ga.data_mut()[start..start + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, a, ga);
                }
                Op::MeanRows(a) => {
                    let ta = self.value(a);
                    let scale = 1.0 / ta.rows() as f64;
                    let row: Vec<f64> = g.data().iter().map(|gi| gi * scale).collect();
                    let data = row.iter().copied().cycle().take(ta.numel()).collect();
                    accumulate(&mut grads, a, Tensor::new(ta.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let g0 = g.item();
                    accumulate(&mut grads, a, Tensor::full(self.value(a).shape(), g0));
                }
                Op::Dot(a, b) => {
                    let g0 = g.item();
                    if self.needs(a) {
                        accumulate(&mut grads, a, map(self.value(b), |x| g0 * x));
                    }
                    if self.needs(b) {
                        accumulate(&mut grads, b, map(self.value(a), |x| g0 * x));
                    }
                }
                Op::Normalize(a) => {
                    let n = self.value(a).norm();
                    let gy = dot(g.data(), y.data());
                    accumulate(&mut grads, a, zip_map(&g, y, |gi, yi| (gi - yi * gy) / n));
                }
                Op::Cosine(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (na, nb) = (ta.norm(), tb.norm());
                    let c = y.item();
                    let g0 = g.item();
                    // ∂c/∂a = b/(|a||b|) - c·a/|a|²
                    if self.needs(a) {
                        let ga = zip_map(tb, ta, |bi, ai| g0 * (bi / (na * nb) - c * ai / (na * na)));
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = zip_map(ta, tb, |ai, bi| g0 * (ai / (na * nb) - c * bi / (nb * nb)));
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Hinge(a, margin) => {
                    let ta = self.value(a);
                    accumulate(&mut grads, a, zip_map(&g, ta, |gi, xi| if xi > margin { gi } else { 0.0 }));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
