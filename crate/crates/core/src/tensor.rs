//! Dense N-dimensional tensors and the multilinear primitives built on them.
//!
//! Conventions shared by the whole crate:
//!
//! * elements are stored row-major (last index fastest);
//! * `unfold(t, m)` places axis `m` on the rows and the remaining axes on the
//!   columns, in row-major order of those axes (earliest remaining axis
//!   slowest);
//! * `khatri_rao(a, b)` puts row `i_a * b.rows() + i_b` in the result, i.e.
//!   column `r` is `a[:, r] ⊗ b[:, r]` with `a` varying slowest.
//!
//! With these, `unfold(reconstruct(A_0..A_{D-1}), m)` equals
//! `A_m · khatri_rao(A_0, .., A_{m-1}, A_{m+1}, .., A_{D-1})ᵀ`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// On-disk element type code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable as a tensor element.
pub trait Element: Float + Sum + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::invalid("tensor shape must have at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero-sized axis in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(format!("shape {shape:?} overflows")))
}

impl<T: Element> DenseTensor<T> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tensor elements must be finite".into()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            advance(&mut idx, shape);
        }
        Self::from_vec(shape, data)
    }

    /// Builds a tensor without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Element>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Increments a row-major multi-index in place.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Dense `rows × rank` factor matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    rows: usize,
    rank: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    pub fn zeros(rows: usize, rank: usize) -> Result<Self> {
        if rows == 0 || rank == 0 {
            return Err(Error::invalid("factor matrix needs rows ≥ 1 and rank ≥ 1"));
        }
        Ok(Self {
            rows,
            rank,
            data: vec![0.0; rows * rank],
        })
    }

    pub fn from_vec(rows: usize, rank: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || rank == 0 {
            return Err(Error::invalid("factor matrix needs rows ≥ 1 and rank ≥ 1"));
        }
        if data.len() != rows * rank {
            return Err(Error::invalid(format!(
                "{rows}×{rank} factor needs {} elements, got {}",
                rows * rank,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("factor elements must be finite".into()));
        }
        Ok(Self { rows, rank, data })
    }

    /// Builds a factor from its columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rank = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::invalid("columns differ in length"));
        }
        let mut data = vec![0.0; rows * rank];
        for (r, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * rank + r] = v;
            }
        }
        Self::from_vec(rows, rank, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.rank + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.rank + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.rank..(row + 1) * self.rank]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn column_norm(&self, col: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, col).powi(2)).sum::<f64>().sqrt()
    }

    pub fn scale_column(&mut self, col: usize, c: f64) {
        for i in 0..self.rows {
            self.data[i * self.rank + col] *= c;
        }
    }

    /// `selfᵀ · self`, a `rank × rank` Gram matrix in row-major order.
    pub fn gram(&self) -> Vec<f64> {
        let r = self.rank;
        let mut g = vec![0.0; r * r];
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..r {
                for b in a..r {
                    g[a * r + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g[a * r + b] = g[b * r + a];
            }
        }
        g
    }

    /// Returns a copy with `extra` appended columns filled by `fill(row, col)`.
    pub fn with_extra_columns(&self, extra: usize, mut fill: impl FnMut(usize, usize) -> f64) -> Self {
        let rank = self.rank + extra;
        let mut data = Vec::with_capacity(self.rows * rank);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            for c in 0..extra {
                data.push(fill(i, c));
            }
        }
        Self {
            rows: self.rows,
            rank,
            data,
        }
    }

    pub fn to_tensor(&self) -> DenseTensor<f64> {
        DenseTensor::from_parts(vec![self.rows, self.rank], self.data.clone())
    }

    pub fn from_tensor(t: &DenseTensor<f64>) -> Result<Self> {
        match *t.shape() {
            [rows, rank] => Self::from_vec(rows, rank, t.data().to_vec()),
            _ => Err(Error::invalid(format!(
                "factor matrix must be 2-D, got shape {:?}",
                t.shape()
            ))),
        }
    }
}

/// Outer product of `D ≥ 2` vectors (or `D ≥ 1`; a single vector is returned as-is).
pub fn outer_rank1(vectors: &[Vec<f64>]) -> Result<DenseTensor<f64>> {
    if vectors.is_empty() {
        return Err(Error::invalid("outer product of an empty vector list"));
    }
    let shape: Vec<usize> = vectors.iter().map(Vec::len).collect();
    check_shape(&shape)?;
    let mut data = vec![1.0];
    for v in vectors {
        let mut next = Vec::with_capacity(data.len() * v.len());
        for &a in &data {
            next.extend(v.iter().map(|&b| a * b));
        }
        data = next;
    }
    DenseTensor::from_vec(&shape, data)
}

/// Mode-`mode` matricization; see the module docs for the column order.
pub fn unfold<T: Element>(t: &DenseTensor<T>, mode: usize) -> Result<DenseTensor<T>> {
    let shape = t.shape();
    if mode >= shape.len() {
        return Err(Error::invalid(format!(
            "mode {mode} out of range for a {}-way tensor",
            shape.len()
        )));
    }
    let rows = shape[mode];
    let cols = t.len() / rows;
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    let mut out = vec![T::zero(); t.len()];
    let src = t.data();
    for o in 0..outer {
        for i in 0..rows {
            let s = (o * rows + i) * inner;
            let d = i * cols + o * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Ok(DenseTensor::from_parts(vec![rows, cols], out))
}

/// Column-wise Kronecker product; `a` varies slowest along the result rows.
pub fn khatri_rao(a: &FactorMatrix, b: &FactorMatrix) -> Result<FactorMatrix> {
    if a.rank() != b.rank() {
        return Err(Error::invalid(format!(
            "khatri-rao rank mismatch: {} vs {}",
            a.rank(),
            b.rank()
        )));
    }
    let r = a.rank();
    let mut data = Vec::with_capacity(a.rows() * b.rows() * r);
    for i in 0..a.rows() {
        let ra = a.row(i);
        for j in 0..b.rows() {
            let rb = b.row(j);
            data.extend(ra.iter().zip(rb).map(|(x, y)| x * y));
        }
    }
    FactorMatrix::from_vec(a.rows() * b.rows(), r, data)
}

pub fn frobenius_norm<T: Element>(t: &DenseTensor<T>) -> f64 {
    t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// `‖approx − reference‖ / ‖reference‖`.
pub fn relative_error<T: Element>(approx: &DenseTensor<T>, reference: &DenseTensor<T>) -> Result<f64> {
    if approx.shape() != reference.shape() {
        return Err(Error::ShapeMismatch {
            expected: reference.shape().to_vec(),
            actual: approx.shape().to_vec(),
        });
    }
    let denom = frobenius_norm(reference);
    if denom == 0.0 {
        return Err(Error::Domain("relative error against a zero tensor".into()));
    }
    let num = approx
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_factor, random_tensor};
    use proptest::prelude::*;

    #[test]
    fn outer_examples() {
        let t = outer_rank1(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[1.0, 1.0, 0.0, 0.0]);

        let t = outer_rank1(&[vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1]);
        assert_eq!(t.data(), &[24.0]);

        let t = outer_rank1(&[vec![1.0, 2.0], vec![1.0, 1.0], vec![3.0, 0.0, 1.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3]);
        assert_eq!(t.get(&[1, 0, 2]), 2.0);

        assert!(matches!(outer_rank1(&[]), Err(Error::InvalidArgument(_))));
        assert!(outer_rank1(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn unfold_of_matrix() {
        let m = DenseTensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(unfold(&m, 0).unwrap(), m);
        let t = unfold(&m, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(unfold(&m, 2).is_err());
    }

    #[test]
    fn unfold_preserves_norm() {
        let t = random_tensor(&[3, 4, 5], 11);
        let direct: f64 = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let u = unfold(&t, 0).unwrap();
        assert_eq!(u.shape(), &[3, 20]);
        assert!((frobenius_norm(&u) - direct).abs() < 1e-12);
    }

    #[test]
    fn khatri_rao_examples() {
        let a = FactorMatrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap();
        let b = FactorMatrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(khatri_rao(&a, &b).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);

        let eye = FactorMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let kr = khatri_rao(&eye, &eye).unwrap();
        assert_eq!(kr.rows(), 4);
        assert_eq!(kr.column(0), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(kr.column(1), vec![0.0, 0.0, 0.0, 1.0]);

        let c = FactorMatrix::zeros(2, 3).unwrap();
        assert!(matches!(khatri_rao(&a, &c), Err(Error::InvalidArgument(_))));
    }

    /// Brute-force `Σ_r ∏_m A_m(i_m, r)`.
    fn brute_reconstruct(factors: &[FactorMatrix]) -> DenseTensor<f64> {
        let shape: Vec<usize> = factors.iter().map(FactorMatrix::rows).collect();
        DenseTensor::from_fn(&shape, |idx| {
            (0..factors[0].rank())
                .map(|r| idx.iter().zip(factors).map(|(&i, f)| f.get(i, r)).product::<f64>())
                .sum()
        })
        .unwrap()
    }

    #[test]
    fn unfold_equals_factor_times_khatri_rao() {
        let factors: Vec<_> = [3usize, 4, 2]
            .iter()
            .enumerate()
            .map(|(k, &n)| random_factor(n, 2, 100 + k as u64))
            .collect();
        let full = brute_reconstruct(&factors);
        for m in 0..3 {
            let others: Vec<&FactorMatrix> = (0..3).filter(|&k| k != m).map(|k| &factors[k]).collect();
            let kr = khatri_rao(others[0], others[1]).unwrap();
            let u = unfold(&full, m).unwrap();
            let (rows, cols) = (u.shape()[0], u.shape()[1]);
            for i in 0..rows {
                for j in 0..cols {
                    let expect: f64 = (0..2).map(|r| factors[m].get(i, r) * kr.get(j, r)).sum();
                    assert!((u.get(&[i, j]) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn norms_and_relative_error() {
        let z = DenseTensor::<f64>::zeros(&[2, 2, 2]).unwrap();
        assert_eq!(frobenius_norm(&z), 0.0);
        let t = DenseTensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&t), 5.0);

        let g = crate::cp::appendix_tensor();
        assert!((frobenius_norm(&g) - 8f64.sqrt()).abs() < 1e-15);

        let t = random_tensor(&[2, 3], 4);
        assert_eq!(relative_error(&t, &t).unwrap(), 0.0);
        let zero = DenseTensor::zeros(&[2, 3]).unwrap();
        assert!((relative_error(&zero, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(relative_error(&t, &zero), Err(Error::Domain(_))));
        let other = DenseTensor::zeros(&[3, 2]).unwrap();
        assert!(matches!(relative_error(&other, &t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(DenseTensor::<f64>::zeros(&[2, 0]).is_err());
        assert!(DenseTensor::<f64>::zeros(&[]).is_err());
        assert!(DenseTensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(DenseTensor::from_vec(&[3], vec![1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn unfold_norm_invariant(dims in proptest::collection::vec(1usize..5, 2..5), seed in any::<u64>()) {
            let t = random_tensor(&dims, seed);
            let n = frobenius_norm(&t);
            for m in 0..dims.len() {
                let u = unfold(&t, m).unwrap();
                prop_assert!((frobenius_norm(&u) - n).abs() <= 1e-12 * n.max(1.0));
            }
        }

        #[test]
        fn outer_is_multilinear(
            a in proptest::collection::vec(-3.0f64..3.0, 1..4),
            b in proptest::collection::vec(-3.0f64..3.0, 1..4),
            c in -4.0f64..4.0,
        ) {
            let base = outer_rank1(&[a.clone(), b.clone()]).unwrap();
            let scaled_a: Vec<f64> = a.iter().map(|v| v * c).collect();
            let scaled = outer_rank1(&[scaled_a, b]).unwrap();
            for (x, y) in base.data().iter().zip(scaled.data()) {
                prop_assert!((x * c - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
