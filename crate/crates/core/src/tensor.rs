//! Dense tensor storage and the multimodal tensor algebra shared by every
//! attention path.
//!
//! All indices are zero-based. Tensors are stored row-major (last axis
//! fastest) with precomputed strides; slicing copies.

use std::ops::Deref;

use crate::error::{dim_err, HocaError, Result};

/// Default cap on the number of elements a dense tensor may materialise.
pub const DEFAULT_CAPACITY: usize = 100_000_000;

/// A dense real tensor of arbitrary order. Order 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    data: Vec<f64>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// Product of extents, or `None` on overflow.
pub fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e))
}

fn check_capacity(shape: &[usize], cap: usize) -> Result<usize> {
    match element_count(shape) {
        Some(n) if n <= cap => Ok(n),
        Some(n) => Err(HocaError::Capacity { requested: n, cap }),
        None => Err(HocaError::Capacity {
            requested: usize::MAX,
            cap,
        }),
    }
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(HocaError::Argument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected = element_count(&shape)
            .ok_or_else(|| HocaError::Argument(format!("shape {shape:?} overflows")))?;
        if data.len() != expected {
            return dim_err(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            ));
        }
        let strides = row_major_strides(&shape);
        Ok(Self {
            shape,
            strides,
            data,
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = element_count(shape)
            .ok_or_else(|| HocaError::Argument(format!("shape {shape:?} overflows")))?;
        Self::new(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            strides: Vec::new(),
            data: vec![value],
        }
    }

    /// A 1-D tensor holding `values`.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    /// A row-major `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of an order-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            dim_err(format!("expected one element, shape is {:?}", self.shape))
        }
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(HocaError::Index(format!(
                "index {index:?} has wrong order for shape {:?}",
                self.shape
            )));
        }
        let mut off = 0;
        for (axis, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            if i >= e {
                return Err(HocaError::Index(format!(
                    "index {i} out of range for axis {axis} of extent {e}"
                )));
            }
            off += i * self.strides[axis];
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn add_assign(&mut self, other: &DenseTensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "cannot add shape {:?} into {:?}",
                other.shape, self.shape
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One modality's features: a `d × t` matrix whose column `r` is time step `r`.
///
/// Stored row-major (`values[row * t + col]`), which is also the on-disk layout
/// of feature bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    d: usize,
    t: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(d: usize, t: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || t == 0 {
            return Err(HocaError::Argument(format!(
                "feature matrix must be at least 1×1, got {d}×{t}"
            )));
        }
        if values.len() != d * t {
            return dim_err(format!(
                "{d}×{t} feature matrix needs {} values, got {}",
                d * t,
                values.len()
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(HocaError::Numeric(format!(
                "feature matrix contains non-finite value {bad}"
            )));
        }
        Ok(Self { d, t, values })
    }

    /// Builds a matrix from its nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let t = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t) {
            return dim_err("ragged rows");
        }
        Self::new(d, t, rows.concat())
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let t = columns.len();
        let d = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != d) {
            return dim_err("ragged columns");
        }
        let mut values = vec![0.0; d * t];
        for (r, col) in columns.iter().enumerate() {
            for (k, &v) in col.iter().enumerate() {
                values[k * t + r] = v;
            }
        }
        Self::new(d, t, values)
    }

    pub fn zeros(d: usize, t: usize) -> Result<Self> {
        Self::new(d, t, vec![0.0; d * t])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.t + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.d).map(|k| self.get(k, col)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.t).map(|c| self.column(c)).collect()
    }

    /// Column-major copy: `out[col * d + row]`.
    pub fn to_column_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.t];
        for k in 0..self.d {
            for r in 0..self.t {
                out[r * self.d + k] = self.values[k * self.t + r];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            d: self.d,
            t: self.t,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// `I ∘ w`: every row multiplied elementwise by the length-`t` vector `w`.
    pub fn scale_columns(&self, w: &[f64]) -> Result<Self> {
        if w.len() != self.t {
            return dim_err(format!(
                "column weights have length {}, matrix has {} columns",
                w.len(),
                self.t
            ));
        }
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.t) {
            row.iter_mut().zip(w).for_each(|(v, s)| *v *= s);
        }
        Ok(Self {
            d: self.d,
            t: self.t,
            values,
        })
    }

    /// `I · w`, the `w`-weighted sum of columns (length `d`).
    pub fn mul_vec(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.t {
            return dim_err(format!(
                "vector has length {}, matrix has {} columns",
                w.len(),
                self.t
            ));
        }
        Ok(self
            .values
            .chunks(self.t)
            .map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `I · 1_t`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.t).map(|row| row.iter().sum()).collect()
    }

    /// Same matrix with its columns reordered so that new column `r` is old
    /// column `perm[r]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.t {
            return dim_err("permutation length differs from column count");
        }
        let cols = self.columns();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| cols[p].clone()).collect();
        Self::from_columns(&permuted)
    }

    pub fn into_tensor(self) -> DenseTensor {
        DenseTensor::new(vec![self.d, self.t], self.values).expect("valid feature matrix")
    }

    pub fn to_tensor(&self) -> DenseTensor {
        self.clone().into_tensor()
    }

    pub fn from_tensor(tensor: &DenseTensor) -> Result<Self> {
        match tensor.shape() {
            [d, t] => Self::new(*d, *t, tensor.data().to_vec()),
            other => dim_err(format!("expected a matrix, got shape {other:?}")),
        }
    }
}

/// Attention weights over one modality's time steps; entries are positive and
/// sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights(Vec<f64>);

impl AttentionWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Wraps values that are already known to lie on the simplex.
    #[cfg(test)]
    pub(crate) fn from_simplex(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for AttentionWeights {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Builds the order-`n` correlation tensor of `n` modalities sharing a common
/// dimension `d`. Entry `(r_1,…,r_n)` is `Σ_k Π_i I_i[k, r_i]`; for a single
/// modality this is the vector of column sums.
pub fn tensor_multiply(modalities: &[FeatureMatrix]) -> Result<DenseTensor> {
    tensor_multiply_capped(modalities, DEFAULT_CAPACITY)
}

pub fn tensor_multiply_capped(modalities: &[FeatureMatrix], cap: usize) -> Result<DenseTensor> {
    let refs: Vec<&FeatureMatrix> = modalities.iter().collect();
    tensor_multiply_refs(&refs, cap)
}

pub(crate) fn tensor_multiply_refs(modalities: &[&FeatureMatrix], cap: usize) -> Result<DenseTensor> {
    let first = modalities
        .first()
        .ok_or_else(|| HocaError::Argument("tensor_multiply needs at least one modality".into()))?;
    let d = first.d();
    if let Some(bad) = modalities.iter().find(|m| m.d() != d) {
        return dim_err(format!(
            "all modalities must share d = {d}, found d = {}",
            bad.d()
        ));
    }
    let shape: Vec<usize> = modalities.iter().map(|m| m.t()).collect();
    let total = check_capacity(&shape, cap)?;
    let columns: Vec<Vec<f64>> = modalities.iter().map(|m| m.to_column_major()).collect();
    let data = correlation_entries(&columns, &shape, d, total);
    DenseTensor::new(shape, data)
}

/// Odometer over all multi-indices, keeping running elementwise products of
/// the selected columns so each entry costs `O(d)`.
fn correlation_entries(columns: &[Vec<f64>], shape: &[usize], d: usize, total: usize) -> Vec<f64> {
    let n = shape.len();
    let mut index = vec![0usize; n];
    let mut prefix = vec![vec![0.0; d]; n];
    let refresh = |prefix: &mut Vec<Vec<f64>>, index: &[usize], from: usize| {
        for axis in from..n {
            let col = &columns[axis][index[axis] * d..(index[axis] + 1) * d];
            if axis == 0 {
                prefix[0].copy_from_slice(col);
            } else {
                let (done, rest) = prefix.split_at_mut(axis);
                for ((out, &p), &c) in rest[0].iter_mut().zip(&done[axis - 1]).zip(col) {
                    *out = p * c;
                }
            }
        }
    };
    refresh(&mut prefix, &index, 0);
    let mut out = Vec::with_capacity(total);
    loop {
        out.push(prefix[n - 1].iter().sum());
        let mut axis = n;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            index[axis] += 1;
            if index[axis] < shape[axis] {
                break;
            }
            index[axis] = 0;
        }
        refresh(&mut prefix, &index, axis);
    }
}

/// Fixes `axis` at `position`, returning the order `n − 1` sub-tensor (a
/// scalar for order-1 input).
pub fn slice_fix_axis(tensor: &DenseTensor, axis: usize, position: usize) -> Result<DenseTensor> {
    let shape = tensor.shape();
    if axis >= shape.len() {
        return Err(HocaError::Index(format!(
            "axis {axis} out of range for order {}",
            shape.len()
        )));
    }
    if position >= shape[axis] {
        return Err(HocaError::Index(format!(
            "position {position} out of range for axis {axis} of extent {}",
            shape[axis]
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let mut data = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let start = (o * extent + position) * inner;
        data.extend_from_slice(&tensor.data()[start..start + inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        return Ok(DenseTensor::scalar(data[0]));
    }
    DenseTensor::new(out_shape, data)
}

/// `Σ[W ∘ T]`, the full contraction of the Hadamard product.
pub fn weighted_sum(tensor: &DenseTensor, weights: &DenseTensor) -> Result<f64> {
    if tensor.shape() != weights.shape() {
        return dim_err(format!(
            "weighted_sum shapes differ: {:?} vs {:?}",
            tensor.shape(),
            weights.shape()
        ));
    }
    Ok(tensor
        .data()
        .iter()
        .zip(weights.data())
        .map(|(a, b)| a * b)
        .sum())
}

/// Outer product of `n` vectors: entry `(r_1,…,r_n)` is `Π_i f_i[r_i]`.
pub fn outer_rank1(factors: &[&[f64]]) -> Result<DenseTensor> {
    outer_rank1_capped(factors, DEFAULT_CAPACITY)
}

pub fn outer_rank1_capped(factors: &[&[f64]], cap: usize) -> Result<DenseTensor> {
    if factors.is_empty() {
        return Err(HocaError::Argument("outer product of zero factors".into()));
    }
    if factors.iter().any(|f| f.is_empty()) {
        return Err(HocaError::Argument("outer product factor is empty".into()));
    }
    let shape: Vec<usize> = factors.iter().map(|f| f.len()).collect();
    let total = check_capacity(&shape, cap)?;
    let mut data = Vec::with_capacity(total);
    data.push(1.0);
    for factor in factors {
        data = data
            .iter()
            .flat_map(|&acc| factor.iter().map(move |&v| acc * v))
            .collect();
    }
    DenseTensor::new(shape, data)
}

/// Max-shifted softmax.
pub fn softmax_stable(scores: &[f64]) -> Result<AttentionWeights> {
    if scores.is_empty() {
        return Err(HocaError::Argument("softmax of an empty vector".into()));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(HocaError::Numeric(format!("softmax input contains {bad}")));
    }
    Ok(AttentionWeights(softmax_unchecked(scores)))
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Straight-line evaluation of one correlation entry.
    fn entry_oracle(mods: &[FeatureMatrix], index: &[usize]) -> f64 {
        (0..mods[0].d())
            .map(|k| {
                mods.iter()
                    .zip(index)
                    .map(|(m, &r)| m.get(k, r))
                    .product::<f64>()
            })
            .sum()
    }

    #[test]
    fn tensor_multiply_two_scalar_rows() {
        let c = tensor_multiply(&[fm(&[&[1.0, 2.0]]), fm(&[&[3.0, 4.0]])]).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn tensor_multiply_zero_modality_gives_zero() {
        let c = tensor_multiply(&[
            FeatureMatrix::zeros(3, 2).unwrap(),
            fm(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]),
        ])
        .unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tensor_multiply_identity_columns_order_three() {
        let eye = fm(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mods = vec![eye.clone(), eye.clone(), eye];
        let c = tensor_multiply(&mods).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                for e in 0..2 {
                    let expected = entry_oracle(&mods, &[a, b, e]);
                    assert_eq!(c.get(&[a, b, e]).unwrap(), expected);
                    assert_eq!(expected, if a == b && b == e { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn tensor_multiply_single_modality_is_column_sums() {
        let c = tensor_multiply(&[fm(&[&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]])]).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 33.0]);
    }

    #[test]
    fn tensor_multiply_errors() {
        assert!(matches!(tensor_multiply(&[]), Err(HocaError::Argument(_))));
        let err = tensor_multiply(&[FeatureMatrix::zeros(2, 2).unwrap(), FeatureMatrix::zeros(3, 2).unwrap()]);
        assert!(matches!(err, Err(HocaError::Dimension(_))));
        let big = FeatureMatrix::zeros(1, 100).unwrap();
        let capped = tensor_multiply_capped(&[big.clone(), big.clone(), big], 999_999);
        assert!(matches!(
            capped,
            Err(HocaError::Capacity { requested: 1_000_000, cap: 999_999 })
        ));
    }

    #[test]
    fn slice_row_of_matrix() {
        let c = tensor_multiply(&[fm(&[&[1.0, 2.0]]), fm(&[&[3.0, 4.0]])]).unwrap();
        let row = slice_fix_axis(&c, 0, 1).unwrap();
        assert_eq!(row.shape(), &[2]);
        assert_eq!(row.data(), &[6.0, 8.0]);
        let col = slice_fix_axis(&c, 1, 0).unwrap();
        assert_eq!(col.data(), &[3.0, 6.0]);
    }

    #[test]
    fn slice_of_ones_and_scalar_result() {
        let ones = DenseTensor::filled(&[2, 3, 4], 1.0).unwrap();
        for axis in 0..3 {
            let s = slice_fix_axis(&ones, axis, 1).unwrap();
            assert_eq!(s.order(), 2);
            assert!(s.data().iter().all(|&v| v == 1.0));
        }
        let v = DenseTensor::vector(vec![5.0, 7.0]).unwrap();
        let s = slice_fix_axis(&v, 0, 1).unwrap();
        assert_eq!(s.order(), 0);
        assert_eq!(s.item().unwrap(), 7.0);
    }

    #[test]
    fn slice_errors() {
        let t = DenseTensor::zeros(&[2, 2]).unwrap();
        assert!(matches!(slice_fix_axis(&t, 2, 0), Err(HocaError::Index(_))));
        assert!(matches!(slice_fix_axis(&t, 0, 2), Err(HocaError::Index(_))));
    }

    #[test]
    fn weighted_sum_cases() {
        let t = DenseTensor::vector(vec![1.0, 1.0]).unwrap();
        let w = DenseTensor::vector(vec![1.0, 2.0]).unwrap();
        assert_eq!(weighted_sum(&t, &w).unwrap(), 3.0);
        let x = DenseTensor::new(vec![2, 2], vec![1.5, -2.0, 3.0, 0.25]).unwrap();
        let ones = DenseTensor::filled(&[2, 2], 1.0).unwrap();
        assert_eq!(weighted_sum(&x, &ones).unwrap(), x.sum());
        assert!(matches!(weighted_sum(&x, &t), Err(HocaError::Dimension(_))));
    }

    #[test]
    fn outer_product_cases() {
        let t = outer_rank1(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.data(), &[3.0, 4.0, 6.0, 8.0]);
        let z = outer_rank1(&[&[1.0, 2.0], &[0.0, 0.0, 0.0]]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let single = outer_rank1(&[&[2.0, -1.0, 4.0]]).unwrap();
        assert_eq!(single.shape(), &[3]);
        assert_eq!(single.data(), &[2.0, -1.0, 4.0]);
        assert!(matches!(outer_rank1(&[]), Err(HocaError::Argument(_))));
    }

    #[test]
    fn softmax_cases() {
        let w = softmax_stable(&[0.0, 0.0, 0.0]).unwrap();
        for &v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-700.0, -3.5, 0.0, 12.0, 650.0] {
            let w = softmax_stable(&[c, c + 2f64.ln()]).unwrap();
            assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(softmax_stable(&[1.0, f64::NAN]), Err(HocaError::Numeric(_))));
        assert!(matches!(softmax_stable(&[]), Err(HocaError::Argument(_))));
    }

    #[test]
    fn softmax_extreme_scores() {
        // Log-sum-exp oracle: w_i = exp(s_i - lse), lse evaluated as
        // max + ln(1 + Σ exp(s_j - max)) over the non-max terms.
        let scores = [1000.0, 0.0];
        let lse = 1000.0 + (-1000f64).exp().ln_1p();
        let oracle: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
        let w = softmax_stable(&scores).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert_eq!(w[0], 1.0);
        assert!(w[1] >= 0.0 && w[1] < 1e-300);
        assert_eq!(w.as_slice(), oracle.as_slice());
    }

    #[test]
    fn dense_tensor_invariants() {
        assert!(DenseTensor::new(vec![2, 0], vec![]).is_err());
        assert!(matches!(
            DenseTensor::new(vec![2, 2], vec![0.0; 3]),
            Err(HocaError::Dimension(_))
        ));
        let t = DenseTensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        assert_eq!(t.strides(), &[12, 4, 1]);
        assert_eq!(t.get(&[1, 2, 3]).unwrap(), 23.0);
    }

    #[test]
    fn feature_matrix_helpers() {
        let m = fm(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(m.mul_vec(&[1.0, 2.0]).unwrap(), vec![5.0, 11.0]);
        assert_eq!(m.row_sums(), vec![3.0, 7.0]);
        assert_eq!(m.column(1), vec![2.0, 4.0]);
        assert_eq!(FeatureMatrix::from_columns(&m.columns()).unwrap(), m);
        assert!(FeatureMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
    }
}
