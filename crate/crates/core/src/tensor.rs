//! Dense N-order tensors, factor matrices and Kruskal (CP) evaluation.
//!
//! Storage is row-major with the last index fastest. Indices are 0-based in
//! code; [`MultiIndex::from_one_based`] accepts the 1-based notation used in
//! documentation and in the CSV exchange format.

use std::fmt;

use crate::error::{Error, Result};

/// Dimensions `I_1 x ... x I_N` of an N-order tensor (N >= 2).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    element_count: usize,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.len() < 2 {
            return Err(Error::Dimension(format!(
                "tensor order must be at least 2, got {}",
                dims.len()
            )));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Dimension(format!("dimension {} is zero", pos + 1)));
        }
        let element_count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension("element count overflows usize".into()))?;
        Ok(Self {
            dims,
            element_count,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.element_count
    }

    /// Row-major strides (last index has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for n in (0..self.dims.len() - 1).rev() {
            strides[n] = strides[n + 1] * self.dims[n + 1];
        }
        strides
    }

    pub fn indices(&self) -> IndexIter<'_> {
        IndexIter {
            shape: self,
            current: vec![0; self.order()],
            done: false,
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape{:?}", self.dims)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

/// A position `[i_1, ..., i_N]` inside a tensor, stored 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(zero_based: impl Into<Vec<usize>>) -> Self {
        Self(zero_based.into())
    }

    /// Builds an index from 1-based coordinates. Any zero coordinate is a
    /// bounds error.
    pub fn from_one_based(one_based: &[usize]) -> Result<Self> {
        one_based
            .iter()
            .map(|&i| {
                i.checked_sub(1)
                    .ok_or_else(|| Error::Bounds("1-based index must be >= 1".into()))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }
}

/// Odometer over every index of a shape in row-major order.
pub struct IndexIter<'a> {
    shape: &'a Shape,
    current: Vec<usize>,
    done: bool,
}

impl Iterator for IndexIter<'_> {
    type Item = MultiIndex;

    fn next(&mut self) -> Option<MultiIndex> {
        if self.done {
            return None;
        }
        let out = MultiIndex(self.current.clone());
        self.done = !advance(&mut self.current, self.shape.dims());
        Some(out)
    }
}

/// Advances a row-major odometer in place; returns false once it wraps.
pub(crate) fn advance(index: &mut [usize], dims: &[usize]) -> bool {
    for n in (0..dims.len()).rev() {
        index[n] += 1;
        if index[n] < dims[n] {
            return true;
        }
        index[n] = 0;
    }
    false
}

/// Row-major offset of `idx` inside `shape`.
pub fn flat_offset(shape: &Shape, idx: &MultiIndex) -> Result<usize> {
    if idx.0.len() != shape.order() {
        return Err(Error::Bounds(format!(
            "index has {} coordinates, tensor has order {}",
            idx.0.len(),
            shape.order()
        )));
    }
    let mut offset = 0;
    for (n, (&i, &d)) in idx.0.iter().zip(shape.dims()).enumerate() {
        if i >= d {
            return Err(Error::Bounds(format!(
                "coordinate {} of mode {} exceeds dimension {}",
                i + 1,
                n + 1,
                d
            )));
        }
        offset = offset * d + i;
    }
    Ok(offset)
}

/// Dense real tensor with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let values = vec![value; shape.element_count()];
        Self { shape, values }
    }

    pub fn from_vec(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.element_count() {
            return Err(Error::Dimension(format!(
                "{} values supplied for shape {} ({} elements)",
                values.len(),
                shape,
                shape.element_count()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut values = Vec::with_capacity(shape.element_count());
        let mut idx = vec![0; shape.order()];
        loop {
            values.push(f(&idx));
            if !advance(&mut idx, shape.dims()) {
                break;
            }
        }
        Self { shape, values }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, idx: &MultiIndex) -> Result<f64> {
        Ok(self.values[flat_offset(&self.shape, idx)?])
    }

    pub fn set(&mut self, idx: &MultiIndex, value: f64) -> Result<()> {
        let off = flat_offset(&self.shape, idx)?;
        self.values[off] = value;
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &DenseTensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{what}: shape {} does not match {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Row-major `rows x cols` real matrix used for per-mode factor data.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_columns(&self, keep: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * keep.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(keep.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: keep.len(),
            data,
        }
    }
}

/// Posterior means and variances of every factor entry, one `I_n x R` pair
/// of matrices per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    means: Vec<Matrix>,
    variances: Vec<Matrix>,
}

impl FactorState {
    pub fn new(means: Vec<Matrix>, variances: Vec<Matrix>) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::Dimension("need at least two factor matrices".into()));
        }
        if means.len() != variances.len() {
            return Err(Error::Dimension(format!(
                "{} mean matrices but {} variance matrices",
                means.len(),
                variances.len()
            )));
        }
        let rank = means[0].cols();
        for (n, (m, v)) in means.iter().zip(&variances).enumerate() {
            if m.cols() != rank || v.cols() != rank {
                return Err(Error::Dimension(format!(
                    "mode {} has {} columns, expected {rank}",
                    n + 1,
                    m.cols()
                )));
            }
            if m.rows() != v.rows() {
                return Err(Error::Dimension(format!(
                    "mode {} means have {} rows but variances have {}",
                    n + 1,
                    m.rows(),
                    v.rows()
                )));
            }
            if m.rows() == 0 {
                return Err(Error::Dimension(format!("mode {} has no rows", n + 1)));
            }
            if v.as_slice().iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Domain(format!(
                    "mode {} has a negative or NaN variance",
                    n + 1
                )));
            }
        }
        Ok(Self { means, variances })
    }

    /// Factors with the given means and all variances zero.
    pub fn from_means(means: Vec<Matrix>) -> Result<Self> {
        let variances = means
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self::new(means, variances)
    }

    pub fn order(&self) -> usize {
        self.means.len()
    }

    pub fn rank(&self) -> usize {
        self.means[0].cols()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.means.iter().map(Matrix::rows).collect()
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.dims()).expect("factor state has at least two non-empty modes")
    }

    pub fn means(&self) -> &[Matrix] {
        &self.means
    }

    pub fn variances(&self) -> &[Matrix] {
        &self.variances
    }

    pub fn mean(&self, mode: usize) -> &Matrix {
        &self.means[mode]
    }

    pub fn variance(&self, mode: usize) -> &Matrix {
        &self.variances[mode]
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Matrix], &mut [Matrix]) {
        (&mut self.means, &mut self.variances)
    }

    pub fn select_columns(&self, keep: &[usize]) -> Self {
        Self {
            means: self.means.iter().map(|m| m.select_columns(keep)).collect(),
            variances: self
                .variances
                .iter()
                .map(|m| m.select_columns(keep))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means
            .iter()
            .chain(&self.variances)
            .all(|m| m.as_slice().iter().all(|v| v.is_finite()))
    }
}

/// `sum_r prod_n vectors[n][r]`, the CP entry evaluation.
pub fn generalized_inner_product(vectors: &[&[f64]]) -> Result<f64> {
    let Some(first) = vectors.first() else {
        return Err(Error::Dimension("no vectors supplied".into()));
    };
    let len = first.len();
    if let Some(bad) = vectors.iter().position(|v| v.len() != len) {
        return Err(Error::Dimension(format!(
            "vector {} has length {}, expected {len}",
            bad + 1,
            vectors[bad].len()
        )));
    }
    Ok((0..len)
        .map(|r| vectors.iter().map(|v| v[r]).product::<f64>())
        .sum())
}

/// Assembles the full tensor `[[A^(1), ..., A^(N)]]` from the factor means.
pub fn kruskal_full(factors: &FactorState) -> DenseTensor {
    kruskal_from_means(factors.means())
}

pub(crate) fn kruskal_from_means(means: &[Matrix]) -> DenseTensor {
    let dims: Vec<usize> = means.iter().map(Matrix::rows).collect();
    let shape = Shape::new(dims).expect("factor state has at least two non-empty modes");
    let rank = means[0].cols();
    let mut prod = vec![0.0; rank];
    DenseTensor::from_fn(shape, |idx| {
        prod.copy_from_slice(means[0].row(idx[0]));
        for (mode, &i) in idx.iter().enumerate().skip(1) {
            for (p, a) in prod.iter_mut().zip(means[mode].row(i)) {
                *p *= a;
            }
        }
        prod.iter().sum()
    })
}
