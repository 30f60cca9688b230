//! Dense row-major matrix storage.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    data: Array2<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries.
    pub fn from_row_major(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        if rows * cols != entries.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        let data = Array2::from_shape_vec((rows, cols), entries).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(DenseMatrix { data })
    }

    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::invalid("matrix dimensions must be positive"));
        }
        // Normalize layout so row-major iteration order is guaranteed.
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(DenseMatrix { data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        self.data.as_slice().expect("DenseMatrix is always in standard layout")
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.sum_axis(Axis(1)).to_vec()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols() != other.rows() {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows(),
                self.cols(),
                other.rows(),
                other.cols()
            )));
        }
        DenseMatrix::from_array(self.data.dot(&other.data))
    }

    /// Largest absolute asymmetry `|A_ij - A_ji|`; `None` for non-square.
    pub fn max_asymmetry(&self) -> Option<f64> {
        if self.rows() != self.cols() {
            return None;
        }
        let n = self.rows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.data[[i, j]] - self.data[[j, i]]).abs());
            }
        }
        Some(worst)
    }
}
