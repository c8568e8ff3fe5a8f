//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! All math is f64. Tensors are flat row-major buffers plus a shape;
//! broadcasting follows trailing-dimension alignment. The [`tape::Tape`]
//! records operations and replays them in reverse for gradients.

pub mod gradcheck;
pub mod tape;

pub use tape::{Tape, TensorId};

use crate::error::{Error, Result};

/// Dense multi-dimensional array. `grad` is populated by a backward pass
/// when `requires_grad` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {:?}",
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols view of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Trailing-dimension broadcast: shapes are right-aligned, missing or
/// size-1 dimensions stretch.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i >= rank - a.len() { a[i - (rank - a.len())] } else { 1 };
        let db = if i >= rank - b.len() { b[i - (rank - b.len())] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        };
    }
    Ok(out)
}

/// Gather the value of `data` (with `shape`) at the coordinates of a
/// position in the broadcast output shape.
pub(crate) fn broadcast_index(shape: &[usize], out_shape: &[usize], out_flat: usize) -> usize {
    let out_rank = out_shape.len();
    let offset = out_rank - shape.len();
    let mut rem = out_flat;
    let mut idx = 0usize;
    let mut stride = 1usize;
    // walk dimensions right to left
    let mut strides = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        strides[d] = stride;
        stride *= shape[d];
    }
    for d in (0..out_rank).rev() {
        let coord = rem % out_shape[d];
        rem /= out_shape[d];
        if d >= offset {
            let sd = d - offset;
            let c = if shape[sd] == 1 { 0 } else { coord };
            idx += c * strides[sd];
        }
    }
    idx
}

/// Sum a gradient of `from` shape down to `to` shape (the reverse of a
/// broadcast).
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0; to_numel];
    for (flat, &g) in grad.iter().enumerate() {
        out[broadcast_index(to, from, flat)] += g;
    }
    out
}

#[cfg(test)]
mod shape_tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[4, 3], &[1]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[4, 3], &[4, 3]).unwrap(), vec![4, 3]);
        assert_eq!(broadcast_shape(&[1], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape(&[4, 3], &[2]).is_err());
    }

    #[test]
    fn reduce_reverses_broadcast() {
        // grad over [2,3] reduced to [3] sums the rows
        let g = vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![11.0, 22.0, 33.0]);
        // reduced to [1]: sums everything
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[1]), vec![66.0]);
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }
}
