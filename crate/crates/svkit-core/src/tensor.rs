//! Dense row-major tensor of f64 values.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// N-dimensional real array, row-major. Networks use the layout
/// `[batch, height, width, channels]`; vectors and matrices use 1-D/2-D
/// shapes directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { dims: vec![1], data: vec![v] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    /// Reinterpret with new dims of identical element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "cannot reshape {:?} into {:?}",
                self.dims,
                dims
            )));
        }
        Ok(Tensor { dims: dims.to_vec(), data: self.data.clone() })
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    #[inline]
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        let (_, dh, dw, dc) = self.dims4();
        debug_assert!(h < dh && w < dw && c < dc);
        self.data[((n * dh + h) * dw + w) * dc + c]
    }

    #[inline]
    pub fn at4_mut(&mut self, n: usize, h: usize, w: usize, c: usize) -> &mut f64 {
        let (_, dh, dw, dc) = self.dims4();
        &mut self.data[((n * dh + h) * dw + w) * dc + c]
    }

    /// Dims as (n, h, w, c), requiring a 4-D tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        debug_assert_eq!(self.dims.len(), 4, "expected 4-D tensor, got {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(alloc::format!("non-finite values in {what}")));
        }
        Ok(())
    }

    /// Debug-mode NaN sweep; a no-op in release builds.
    #[inline]
    pub fn debug_check_finite(&self, what: &str) {
        #[cfg(debug_assertions)]
        {
            assert!(
                self.data.iter().all(|v| v.is_finite()),
                "non-finite values in {}",
                what
            );
        }
        let _ = what;
    }

    pub fn shape_string(&self) -> String {
        let mut s = String::new();
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                s.push('x');
            }
            s.push_str(&alloc::format!("{d}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn at4_row_major_layout() {
        let t = Tensor::from_vec(&[1, 2, 2, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at4(0, 0, 0, 0), 0.0);
        assert_eq!(t.at4(0, 0, 0, 2), 2.0);
        assert_eq!(t.at4(0, 0, 1, 0), 3.0);
        assert_eq!(t.at4(0, 1, 0, 0), 6.0);
        assert_eq!(t.at4(0, 1, 1, 2), 11.0);
    }
}
