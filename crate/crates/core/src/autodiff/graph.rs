//! Tape-based reverse-mode differentiation over dense arrays.
//!
//! Every operation appends a node to the [`Graph`]; insertion order is a
//! topological order, so [`Graph::backward`] walks the nodes once in reverse.
//! Leaves created with [`Graph::param`] remember their [`ParamId`] and their
//! adjoints are added into the store's gradients.

use crate::error::{dim_err, HocaError, Result};
use crate::tensor::{self, DenseTensor, FeatureMatrix, DEFAULT_CAPACITY};

use super::params::{ParamId, ParamStore};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColumn(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    Column(Var, usize),
    StackColumns(Vec<Var>),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, usize),
    TensorMultiply(Vec<Var>),
    Outer(Vec<Var>),
    ContractSlices(Var, Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseTensor,
    op: Op,
}

/// A single-threaded differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<DenseTensor>>,
    capacity: Option<usize>,
}

fn vec_tensor(values: Vec<f64>) -> DenseTensor {
    DenseTensor::new(vec![values.len()], values).expect("non-empty vector")
}

fn same_shape(a: &DenseTensor, b: &DenseTensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

fn matrix_dims(t: &DenseTensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => dim_err(format!("{what}: expected a matrix, got shape {other:?}")),
    }
}

fn vector_len(t: &DenseTensor, what: &str) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        other => dim_err(format!("{what}: expected a vector, got shape {other:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Element cap applied to correlation and outer-product nodes.
    pub fn with_capacity_cap(cap: usize) -> Self {
        Self {
            capacity: Some(cap),
            ..Self::default()
        }
    }

    fn cap(&self) -> usize {
        self.capacity.unwrap_or(DEFAULT_CAPACITY)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    /// Adjoint of `v` from the most recent [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(DenseTensor::scalar(value))
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Result<Var> {
        Ok(self.constant(DenseTensor::vector(values)?))
    }

    pub fn features(&mut self, m: &FeatureMatrix) -> Var {
        self.constant(m.to_tensor())
    }

    /// Leaf holding the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = DenseTensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Sum of several same-shaped nodes, folded left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| HocaError::Argument("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = DenseTensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = DenseTensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the length-`r` vector `v` to every column of the `r × c` matrix `m`.
    pub fn add_column(&mut self, m: Var, v: Var) -> Result<Var> {
        let (vm, vv) = (self.value(m), self.value(v));
        let (rows, cols) = matrix_dims(vm, "add_column")?;
        if vector_len(vv, "add_column")? != rows {
            return dim_err(format!("add_column: vector length {} vs {rows} rows", vv.len()));
        }
        let mut data = vm.data().to_vec();
        for (row, &b) in data.chunks_mut(cols).zip(vv.data()) {
            row.iter_mut().for_each(|x| *x += b);
        }
        let out = DenseTensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::AddColumn(m, v)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scaled(factor);
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    /// `x · s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self.value(s).item()?;
        let out = self.value(x).scaled(factor);
        Ok(self.push(out, Op::MulScalar(x, s)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(va, "matmul")?;
        let (k2, n) = matrix_dims(vb, "matmul")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dimensions {k} and {k2}"));
        }
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = da[i * k + p];
                for (o, &bpj) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += aip * bpj;
                }
            }
        }
        let out = DenseTensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `A · v` for an `m × k` matrix and a length-`k` vector.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        let (m, k) = matrix_dims(va, "matvec")?;
        if vector_len(vv, "matvec")? != k {
            return dim_err(format!("matvec: matrix has {k} columns, vector {}", vv.len()));
        }
        let out: Vec<f64> = va
            .data()
            .chunks(k)
            .map(|row| row.iter().zip(vv.data()).map(|(x, y)| x * y).sum())
            .collect();
        debug_assert_eq!(out.len(), m);
        Ok(self.push(vec_tensor(out), Op::MatVec(a, v)))
    }

    /// `vᵀ · A` for a length-`m` vector and an `m × n` matrix.
    pub fn vecmat(&mut self, v: Var, a: Var) -> Result<Var> {
        let (vv, va) = (self.value(v), self.value(a));
        let (m, n) = matrix_dims(va, "vecmat")?;
        if vector_len(vv, "vecmat")? != m {
            return dim_err(format!("vecmat: matrix has {m} rows, vector {}", vv.len()));
        }
        let mut out = vec![0.0; n];
        for (row, &s) in va.data().chunks(n).zip(vv.data()) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += s * x;
            }
        }
        Ok(self.push(vec_tensor(out), Op::VecMat(v, a)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = DenseTensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        Ok(self.push(DenseTensor::scalar(s), Op::Sum(a)))
    }

    /// Inner product of two same-shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// Flattens and concatenates the parts into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HocaError::Argument("concat of no parts".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        Ok(self.push(vec_tensor(data), Op::Concat(parts.to_vec())))
    }

    /// Elements `start..start + len` of a vector.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let vv = self.value(v);
        let n = vector_len(vv, "slice")?;
        if len == 0 || start + len > n {
            return Err(HocaError::Index(format!(
                "slice {start}..{} of a length-{n} vector",
                start + len
            )));
        }
        let out = vec_tensor(vv.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(v, start)))
    }

    pub fn row(&mut self, m: Var, row: usize) -> Result<Var> {
        let vm = self.value(m);
        let (rows, cols) = matrix_dims(vm, "row")?;
        if row >= rows {
            return Err(HocaError::Index(format!("row {row} of {rows}")));
        }
        let out = vec_tensor(vm.data()[row * cols..(row + 1) * cols].to_vec());
        Ok(self.push(out, Op::Row(m, row)))
    }

    pub fn column(&mut self, m: Var, col: usize) -> Result<Var> {
        let vm = self.value(m);
        let (rows, cols) = matrix_dims(vm, "column")?;
        if col >= cols {
            return Err(HocaError::Index(format!("column {col} of {cols}")));
        }
        let out = vec_tensor((0..rows).map(|r| vm.data()[r * cols + col]).collect());
        Ok(self.push(out, Op::Column(m, col)))
    }

    /// Builds an `r × n` matrix from `n` length-`r` column vectors.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| HocaError::Argument("stack of no columns".into()))?;
        let rows = vector_len(self.value(first), "stack_columns")?;
        let n = cols.len();
        let mut data = vec![0.0; rows * n];
        for (j, &c) in cols.iter().enumerate() {
            let vc = self.value(c);
            if vector_len(vc, "stack_columns")? != rows {
                return dim_err("stack_columns: columns differ in length");
            }
            for (r, &x) in vc.data().iter().enumerate() {
                data[r * n + j] = x;
            }
        }
        let out = DenseTensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::StackColumns(cols.to_vec())))
    }

    pub fn softmax(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        vector_len(vv, "softmax")?;
        let w = tensor::softmax_stable(vv.data())?;
        Ok(self.push(vec_tensor(w.into_vec()), Op::Softmax(v)))
    }

    /// `-log softmax(logits)[target]`, fused for stability.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let vl = self.value(logits);
        let n = vector_len(vl, "softmax_cross_entropy")?;
        if target >= n {
            return Err(HocaError::Argument(format!("target {target} outside {n} classes")));
        }
        let data = vl.data();
        let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + data.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - data[target];
        if !loss.is_finite() {
            return Err(HocaError::Numeric(format!("cross-entropy is {loss}")));
        }
        Ok(self.push(DenseTensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, target)))
    }

    /// Correlation tensor of `d × t_i` matrix nodes (see [`tensor::tensor_multiply`]).
    pub fn tensor_multiply(&mut self, mats: &[Var]) -> Result<Var> {
        let fms = mats
            .iter()
            .map(|&m| FeatureMatrix::from_tensor(self.value(m)))
            .collect::<Result<Vec<_>>>()?;
        let out = tensor::tensor_multiply_capped(&fms, self.cap())?;
        Ok(self.push(out, Op::TensorMultiply(mats.to_vec())))
    }

    /// Outer product of vector nodes.
    pub fn outer(&mut self, vecs: &[Var]) -> Result<Var> {
        let parts: Vec<&[f64]> = vecs
            .iter()
            .map(|&v| {
                vector_len(self.value(v), "outer")?;
                Ok(self.value(v).data())
            })
            .collect::<Result<_>>()?;
        let out = tensor::outer_rank1_capped(&parts, self.cap())?;
        Ok(self.push(out, Op::Outer(vecs.to_vec())))
    }

    /// For each position `p` along `axis`, `Σ[W ∘ slice(C, axis, p)]`.
    pub fn contract_slices(&mut self, c: Var, w: Var, axis: usize) -> Result<Var> {
        let (vc, vw) = (self.value(c), self.value(w));
        let shape = vc.shape();
        if axis >= shape.len() {
            return Err(HocaError::Index(format!("axis {axis} of order {}", shape.len())));
        }
        let mut expected = shape.to_vec();
        expected.remove(axis);
        if vw.shape() != expected.as_slice() {
            return dim_err(format!(
                "contract_slices: weight shape {:?}, expected {expected:?}",
                vw.shape()
            ));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let (dc, dw) = (vc.data(), vw.data());
        let out: Vec<f64> = (0..extent)
            .map(|p| {
                let mut acc = 0.0;
                for o in 0..outer {
                    let cbase = (o * extent + p) * inner;
                    let wbase = o * inner;
                    for i in 0..inner {
                        acc += dc[cbase + i] * dw[wbase + i];
                    }
                }
                acc
            })
            .collect();
        Ok(self.push(vec_tensor(out), Op::ContractSlices(c, w, axis)))
    }

    /// Reverse sweep from the scalar `loss`. Internal adjoints are recomputed
    /// from scratch; adjoints of trainable parameter leaves are **added** to
    /// the store's gradients.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(HocaError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; self.nodes.len()];
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(DenseTensor::new(seed_shape, vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[idx]) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let shape = self.nodes[v.0].value.shape();
                *slot = Some(DenseTensor::zeros(shape).unwrap_or_else(|_| DenseTensor::scalar(0.0)));
            }
            f(slot.as_mut().expect("initialised").data_mut());
        };

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(x, g)| *x -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, g), bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *x += g * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, g), av) in gb.iter_mut().zip(gd).zip(va) {
                        *x += g * av;
                    }
                });
            }
            Op::AddColumn(m, v) => {
                let cols = g.shape()[1];
                acc(*m, &mut |gm| add_into(gm, gd));
                acc(*v, &mut |gv| {
                    for (x, row) in gv.iter_mut().zip(gd.chunks(cols)) {
                        *x += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(gd).for_each(|(x, g)| *x += f * g)
            }),
            Op::MulScalar(x, s) => {
                let factor = val(*s)[0];
                let vx = val(*x);
                acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(o, g)| *o += factor * g));
                let ds: f64 = gd.iter().zip(vx).map(|(g, x)| g * x).sum();
                acc(*s, &mut |gs| gs[0] += ds);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += aip * gd[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatVec(a, v) => {
                let k = self.nodes[a.0].value.shape()[1];
                let (va, vv) = (val(*a), val(*v));
                acc(*a, &mut |ga| {
                    for (row, &gi) in ga.chunks_mut(k).zip(gd) {
                        for (x, &vp) in row.iter_mut().zip(vv) {
                            *x += gi * vp;
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for (row, &gi) in va.chunks(k).zip(gd) {
                        for (x, &aip) in gv.iter_mut().zip(row) {
                            *x += aip * gi;
                        }
                    }
                });
            }
            Op::VecMat(v, a) => {
                let n = self.nodes[a.0].value.shape()[1];
                let (vv, va) = (val(*v), val(*a));
                acc(*v, &mut |gv| {
                    for (x, row) in gv.iter_mut().zip(va.chunks(n)) {
                        *x += row.iter().zip(gd).map(|(a, g)| a * g).sum::<f64>();
                    }
                });
                acc(*a, &mut |ga| {
                    for (row, &vi) in ga.chunks_mut(n).zip(vv) {
                        for (x, &gj) in row.iter_mut().zip(gd) {
                            *x += vi * gj;
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((x, g), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *x += g * (1.0 - yv * yv);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, g), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *x += g * yv * (1.0 - yv);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((x, g), yv) in ga.iter_mut().zip(gd).zip(y) {
                    *x += g * yv;
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, g), av) in ga.iter_mut().zip(gd).zip(va) {
                        *x += g / av;
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += s));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    let chunk = &gd[offset..offset + len];
                    acc(p, &mut |gp| add_into(gp, chunk));
                    offset += len;
                }
            }
            Op::Slice(v, start) => {
                let start = *start;
                acc(*v, &mut |gv| add_into(&mut gv[start..start + gd.len()], gd));
            }
            Op::Row(m, row) => {
                let cols = gd.len();
                let row = *row;
                acc(*m, &mut |gm| add_into(&mut gm[row * cols..(row + 1) * cols], gd));
            }
            Op::Column(m, col) => {
                let cols = self.nodes[m.0].value.shape()[1];
                let col = *col;
                acc(*m, &mut |gm| {
                    for (r, &gr) in gd.iter().enumerate() {
                        gm[r * cols + col] += gr;
                    }
                });
            }
            Op::StackColumns(cols) => {
                let n = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    acc(c, &mut |gc| {
                        for (r, x) in gc.iter_mut().enumerate() {
                            *x += gd[r * n + j];
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let dot: f64 = gd.iter().zip(y).map(|(g, yv)| g * yv).sum();
                acc(*a, &mut |ga| {
                    for ((x, g), yv) in ga.iter_mut().zip(gd).zip(y) {
                        *x += yv * (g - dot);
                    }
                });
            }
            Op::SoftmaxCrossEntropy(logits, target) => {
                let p = tensor::softmax_unchecked(val(*logits));
                let s = gd[0];
                let target = *target;
                acc(*logits, &mut |gl| {
                    for (i, (x, pi)) in gl.iter_mut().zip(&p).enumerate() {
                        let onehot = if i == target { 1.0 } else { 0.0 };
                        *x += s * (pi - onehot);
                    }
                });
            }
            Op::TensorMultiply(mats) => {
                let partials = self.correlation_partials(mats, gd);
                for (&m, part) in mats.iter().zip(&partials) {
                    acc(m, &mut |gm| add_into(gm, part));
                }
            }
            Op::Outer(vecs) => {
                let partials = self.outer_partials(vecs, gd);
                for (&v, part) in vecs.iter().zip(&partials) {
                    acc(v, &mut |gv| add_into(gv, part));
                }
            }
            Op::ContractSlices(c, w, axis) => {
                let shape = self.nodes[c.0].value.shape();
                let (outer, extent, inner) = split_axis(shape, *axis);
                let (vc, vw) = (val(*c), val(*w));
                acc(*c, &mut |gc| {
                    for o in 0..outer {
                        for (p, &gp) in gd.iter().enumerate() {
                            let cbase = (o * extent + p) * inner;
                            for i in 0..inner {
                                gc[cbase + i] += gp * vw[o * inner + i];
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for o in 0..outer {
                        for (p, &gp) in gd.iter().enumerate() {
                            let cbase = (o * extent + p) * inner;
                            for i in 0..inner {
                                gw[o * inner + i] += gp * vc[cbase + i];
                            }
                        }
                    }
                });
            }
        }
    }

    /// Partial derivatives of `Σ_r G[r] C[r]` with respect to each `d × t_i`
    /// input of a correlation node.
    fn correlation_partials(&self, mats: &[Var], gd: &[f64]) -> Vec<Vec<f64>> {
        let values: Vec<&DenseTensor> = mats.iter().map(|m| &self.nodes[m.0].value).collect();
        let d = values[0].shape()[0];
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let n = extents.len();
        let mut partials: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut index = vec![0usize; n];
        let mut prefix = vec![0.0; n + 1];
        let mut suffix = vec![0.0; n + 1];
        for &gr in gd {
            if gr != 0.0 {
                for k in 0..d {
                    prefix[0] = 1.0;
                    for i in 0..n {
                        prefix[i + 1] = prefix[i] * values[i].data()[k * extents[i] + index[i]];
                    }
                    suffix[n] = 1.0;
                    for i in (0..n).rev() {
                        suffix[i] = suffix[i + 1] * values[i].data()[k * extents[i] + index[i]];
                    }
                    for i in 0..n {
                        partials[i][k * extents[i] + index[i]] += gr * prefix[i] * suffix[i + 1];
                    }
                }
            }
            advance(&mut index, &extents);
        }
        partials
    }

    fn outer_partials(&self, vecs: &[Var], gd: &[f64]) -> Vec<Vec<f64>> {
        let values: Vec<&[f64]> = vecs.iter().map(|v| self.nodes[v.0].value.data()).collect();
        let extents: Vec<usize> = values.iter().map(|v| v.len()).collect();
        let n = extents.len();
        let mut partials: Vec<Vec<f64>> = extents.iter().map(|&e| vec![0.0; e]).collect();
        let mut index = vec![0usize; n];
        let mut prefix = vec![0.0; n + 1];
        let mut suffix = vec![0.0; n + 1];
        for &gr in gd {
            if gr != 0.0 {
                prefix[0] = 1.0;
                for i in 0..n {
                    prefix[i + 1] = prefix[i] * values[i][index[i]];
                }
                suffix[n] = 1.0;
                for i in (0..n).rev() {
                    suffix[i] = suffix[i + 1] * values[i][index[i]];
                }
                for i in 0..n {
                    partials[i][index[i]] += gr * prefix[i] * suffix[i + 1];
                }
            }
            advance(&mut index, &extents);
        }
        partials
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, s)| *x += s);
}

/// `(outer, extent, inner)` element counts around `axis` in a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major odometer increment; wraps to all zeros after the last index.
fn advance(index: &mut [usize], extents: &[usize]) {
    for axis in (0..index.len()).rev() {
        index[axis] += 1;
        if index[axis] < extents[axis] {
            return;
        }
        index[axis] = 0;
    }
}
