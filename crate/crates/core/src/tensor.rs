//! Dense row-major `f64` tensors.
//!
//! Every feature map, weight, gradient and volume in the crate is a [`Tensor`].
//! Storage is always contiguous; there are no strided views. Operations in this
//! module are pure and refuse to produce non-finite values.

use std::fmt;

use thiserror::Error;

/// Largest supported rank.
pub const MAX_RANK: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("rank {0} is outside 1..={MAX_RANK}")]
    BadRank(usize),
    #[error("zero extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("element count of shape {0:?} overflows usize")]
    Overflow(Vec<usize>),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds { index: Vec<usize>, shape: Vec<usize> },
    #[error("non-finite value produced at flat offset {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Validated list of extents, each at least 1.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::BadRank(dims.len()));
        }
        if dims.contains(&0) {
            return Err(TensorError::ZeroExtent(dims.to_vec()));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Overflow(dims.to_vec()))?;
        Ok(Self(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for k in (0..self.0.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.0[k + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.0.len() || index.iter().zip(&self.0).any(|(&i, &d)| i >= d) {
            return Err(TensorError::IndexOutOfBounds {
                index: index.to_vec(),
                shape: self.0.clone(),
            });
        }
        Ok(index
            .iter()
            .zip(self.strides())
            .map(|(&i, s)| i * s)
            .sum())
    }

    /// Inverse of [`Shape::offset`].
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0; self.0.len()];
        for k in (0..self.0.len()).rev() {
            index[k] = offset % self.0[k];
            offset /= self.0[k];
        }
        index
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    /// Index of the maximum; ties resolve to the lowest index.
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    All,
    Index(usize),
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![0.0; shape.numel()];
        Ok(Self { shape, data })
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Self { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: dims.to_vec(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let offset = self.shape.offset(index)?;
        self.data[offset] = value;
        Ok(())
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Offset of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    fn checked(self) -> Result<Self> {
        match self.first_non_finite() {
            Some(offset) => Err(TensorError::NonFinite(offset)),
            None => Ok(self),
        }
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match op {
            ElementwiseOp::Add => |a, b| a + b,
            ElementwiseOp::Sub => |a, b| a - b,
            ElementwiseOp::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .checked()
    }

    pub fn elementwise_scalar(&self, op: ElementwiseOp, scalar: f64) -> Result<Tensor> {
        let data = self
            .data
            .iter()
            .map(|&a| match op {
                ElementwiseOp::Add => a + scalar,
                ElementwiseOp::Sub => a - scalar,
                ElementwiseOp::Mul => a * scalar,
            })
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .checked()
    }

    /// `max(x, scalar)` per element; with `scalar = 0` this is ReLU.
    pub fn max_scalar(&self, scalar: f64) -> Result<Tensor> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a.max(scalar)).collect(),
        }
        .checked()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(ElementwiseOp::Mul, other)
    }

    /// Reduces along `axis`, removing it. Reducing a rank-1 tensor or using
    /// [`Axis::All`] yields a shape-`[1]` tensor. Argmax results are stored as
    /// `f64` indices.
    pub fn reduce(&self, op: ReduceOp, axis: Axis) -> Result<Tensor> {
        match axis {
            Axis::All => {
                let value = reduce_lane(op, self.data.iter().copied());
                Tensor::from_vec(&[1], vec![value])?.checked()
            }
            Axis::Index(axis) => {
                let rank = self.shape.rank();
                if axis >= rank {
                    return Err(TensorError::AxisOutOfRange { axis, rank });
                }
                let dims = self.dims();
                let outer: usize = dims[..axis].iter().product();
                let extent = dims[axis];
                let inner: usize = dims[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let lane = (0..extent).map(|k| self.data[base + k * inner]);
                        out.push(reduce_lane(op, lane));
                    }
                }
                let mut out_dims: Vec<usize> = dims.to_vec();
                out_dims.remove(axis);
                if out_dims.is_empty() {
                    out_dims.push(1);
                }
                Tensor::from_vec(&out_dims, out)?.checked()
            }
        }
    }
}

fn reduce_lane(op: ReduceOp, lane: impl Iterator<Item = f64>) -> f64 {
    match op {
        ReduceOp::Sum => lane.sum(),
        ReduceOp::Mean => {
            let (sum, n) = lane.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            sum / n as f64
        }
        ReduceOp::Max => lane.fold(f64::NEG_INFINITY, f64::max),
        ReduceOp::Argmax => {
            let mut best = 0usize;
            let mut best_value = f64::NEG_INFINITY;
            for (k, v) in lane.enumerate() {
                // strict comparison keeps the lowest index on ties
                if k == 0 || v > best_value {
                    best = k;
                    best_value = v;
                }
            }
            best as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn zeros_examples() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(z.len(), 6);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        assert_eq!(Tensor::zeros(&[25, 25, 25]).unwrap().len(), 15_625);
    }

    #[test]
    fn shape_validation() {
        assert_eq!(Shape::new(&[]), Err(TensorError::BadRank(0)));
        assert_eq!(Shape::new(&[1, 1, 1, 1, 1, 1]), Err(TensorError::BadRank(6)));
        assert!(matches!(Shape::new(&[3, 0]), Err(TensorError::ZeroExtent(_))));
        assert!(matches!(
            Shape::new(&[usize::MAX, 2]),
            Err(TensorError::Overflow(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(t(&[3], &[-1., 0., 2.]).max_scalar(0.0).unwrap().data(), &[0., 0., 2.]);
        assert_eq!(t(&[2], &[2., 2.]).mul(&t(&[2], &[0.5, 3.])).unwrap().data(), &[1., 6.]);
        assert_eq!(t(&[2], &[5., 1.]).sub(&t(&[2], &[2., 2.])).unwrap().data(), &[3., -1.]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let err = t(&[2], &[1., 2.]).add(&t(&[1, 2], &[1., 2.])).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let big = t(&[1], &[f64::MAX]);
        assert_eq!(big.add(&big), Err(TensorError::NonFinite(0)));
        assert!(big.elementwise_scalar(ElementwiseOp::Mul, 10.0).is_err());
    }

    #[test]
    fn reduce_examples() {
        let v = t(&[3], &[1., 2., 3.]);
        assert_eq!(v.reduce(ReduceOp::Sum, Axis::All).unwrap().data(), &[6.0]);
        let p = t(&[3], &[0.2, 0.5, 0.3]);
        assert_eq!(p.reduce(ReduceOp::Argmax, Axis::All).unwrap().data(), &[1.0]);
        let tie = t(&[2], &[0.5, 0.5]);
        assert_eq!(tie.reduce(ReduceOp::Argmax, Axis::All).unwrap().data(), &[0.0]);
    }

    #[test]
    fn reduce_along_axis() {
        let m = t(&[2, 3], &[1., 5., 3., 4., 2., 6.]);
        assert_eq!(m.reduce(ReduceOp::Sum, Axis::Index(0)).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(m.reduce(ReduceOp::Mean, Axis::Index(1)).unwrap().data(), &[3., 4.]);
        assert_eq!(m.reduce(ReduceOp::Max, Axis::Index(1)).unwrap().data(), &[5., 6.]);
        assert_eq!(m.reduce(ReduceOp::Argmax, Axis::Index(1)).unwrap().data(), &[1., 2.]);
        assert_eq!(m.reduce(ReduceOp::Argmax, Axis::Index(1)).unwrap().dims(), &[2]);
        assert!(matches!(
            m.reduce(ReduceOp::Sum, Axis::Index(2)),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn argmax_constant_tensor_is_zero() {
        for n in 1..10 {
            let c = Tensor::full(&[n, 4], 0.25).unwrap();
            let am = c.reduce(ReduceOp::Argmax, Axis::Index(0)).unwrap();
            assert!(am.data().iter().all(|&i| i == 0.0));
            let all = c.reduce(ReduceOp::Argmax, Axis::All).unwrap();
            assert_eq!(all.data(), &[0.0]);
        }
    }

    fn checksum(t: &Tensor) -> u64 {
        t.data()
            .iter()
            .fold(0u64, |h, v| h.rotate_left(7) ^ v.to_bits())
    }

    proptest! {
        #[test]
        fn offset_round_trip(dims in prop::collection::vec(1usize..5, 1..=5)) {
            let shape = Shape::new(&dims).unwrap();
            let strides = shape.strides();
            for offset in 0..shape.numel() {
                let index = shape.unravel(offset);
                prop_assert_eq!(shape.offset(&index).unwrap(), offset);
                let manual: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
                prop_assert_eq!(manual, offset);
            }
        }

        #[test]
        fn ops_do_not_modify_inputs(data in prop::collection::vec(-1e3f64..1e3, 12)) {
            let a = Tensor::from_vec(&[3, 4], data.clone()).unwrap();
            let b = Tensor::from_vec(&[3, 4], data.iter().rev().copied().collect()).unwrap();
            let (ca, cb) = (checksum(&a), checksum(&b));
            let _ = a.add(&b).unwrap();
            let _ = a.mul(&b).unwrap();
            let _ = a.max_scalar(0.0).unwrap();
            let _ = a.reduce(ReduceOp::Argmax, Axis::Index(1)).unwrap();
            let _ = b.reduce(ReduceOp::Mean, Axis::All).unwrap();
            prop_assert_eq!(checksum(&a), ca);
            prop_assert_eq!(checksum(&b), cb);
        }
    }
}
