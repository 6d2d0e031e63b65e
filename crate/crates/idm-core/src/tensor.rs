//! Dense array carriers: channel-planar float tensors for images and
//! activations, and byte label maps with an ignore sentinel.

use crate::error::{IdmError, Result};
use crate::scalar::Scalar;

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// A C×H×W tensor stored channel-planar; `at(ch, y, x)` addresses the
/// logical H×W×C element (y, x, ch).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

/// H×W×C float image with intensities in [0, 1].
pub type Image = Tensor3<f32>;

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            ch,
            h,
            w,
            data: vec![T::zero(); ch * h * w],
        }
    }

    pub fn from_vec(ch: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != ch * h * w {
            return Err(IdmError::Contract(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                ch,
                h,
                w
            )));
        }
        Ok(Tensor3 { ch, h, w, data })
    }

    pub fn full(ch: usize, h: usize, w: usize, value: T) -> Self {
        Tensor3 {
            ch,
            h,
            w,
            data: vec![value; ch * h * w],
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn at(&self, ch: usize, y: usize, x: usize) -> T {
        self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn row(&self, ch: usize, y: usize) -> &[T] {
        let start = (ch * self.h + y) * self.w;
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, ch: usize, y: usize) -> &mut [T] {
        let start = (ch * self.h + y) * self.w;
        &mut self.data[start..start + self.w]
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<F: FnMut(T) -> T>(&self, mut f: F) -> Self {
        Tensor3 {
            ch: self.ch,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            ch: self.ch,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| U::from(v).expect("scalar cast"))
                .collect(),
        }
    }

    pub fn same_shape<U: Scalar>(&self, other: &Tensor3<U>) -> bool {
        self.ch == other.ch && self.h == other.h && self.w == other.w
    }

    /// Per-pixel probability vector across channels at (y, x).
    pub fn pixel_vec(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.ch).map(|c| self.at(c, y, x)).collect()
    }
}

/// H×W map of class indices in [0, C) plus [`IGNORE_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(IdmError::Contract(format!(
                "label data length {} does not match {}x{}",
                data.len(),
                h,
                w
            )));
        }
        Ok(LabelMap { h, w, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: u8) {
        self.data[y * self.w + x] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// All label values are either valid classes or the ignore sentinel.
    pub fn validate(&self, num_classes: u8) -> Result<()> {
        if let Some(&bad) = self
            .data
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v >= num_classes)
        {
            return Err(IdmError::Contract(format!(
                "label value {bad} outside [0, {num_classes}) and not ignore"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_channel_planar() {
        let mut t: Tensor3<f32> = Tensor3::zeros(2, 3, 4);
        *t.at_mut(1, 2, 3) = 7.0;
        assert_eq!(t.at(1, 2, 3), 7.0);
        assert_eq!(t.plane(1)[2 * 4 + 3], 7.0);
        assert_eq!(t.row(1, 2)[3], 7.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor3::<f32>::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(LabelMap::from_vec(2, 2, vec![0; 5]).is_err());
    }

    #[test]
    fn label_validation() {
        let l = LabelMap::from_vec(1, 3, vec![0, 4, IGNORE_LABEL]).unwrap();
        assert!(l.validate(5).is_ok());
        assert!(l.validate(4).is_err());
    }
}
