//! Dense row-major double-precision arrays.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major tensor of `f64` values.
///
/// The data length always equals the product of the shape. Scalars use shape
/// `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Default for Tensor {
    /// Empty placeholder, used where a tensor has been moved out.
    fn default() -> Self {
        Tensor {
            shape: vec![0],
            data: Vec::new(),
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a `[rows.len() x width]` tensor; every row must have the same
    /// width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            if row.len() != width {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    detail: format!("row width {} differs from first row {}", row.len(), width),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "scalar_value",
                detail: format!("expected a single element, got shape {:?}", self.shape),
            })
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2("get2").expect("rank-2 tensor");
        self.data[r * cols + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let (_, cols) = self.dims2("set2").expect("rank-2 tensor");
        self.data[r * cols + c] = v;
    }

    /// Copy of row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> Vec<f64> {
        let (rows, cols) = self.dims2("row").expect("rank-2 tensor");
        assert!(r < rows, "row index out of range");
        self.data[r * cols..(r + 1) * cols].to_vec()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn test_from_rows_rejects_ragged_input() {
        let err = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn test_scalar_roundtrip() {
        let t = Tensor::scalar(2.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn test_get_set_rank2() {
        let mut t = Tensor::zeros(vec![2, 2]);
        t.set2(1, 0, 7.0);
        assert_eq!(t.get2(1, 0), 7.0);
        assert_eq!(t.row(1), vec![7.0, 0.0]);
    }

    #[test]
    fn test_all_finite_detects_nan() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(!t.all_finite());
    }
}
