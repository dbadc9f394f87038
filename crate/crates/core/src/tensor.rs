//! Dense row-major tensors of rank at most four.
//!
//! Image-like tensors use the `[batch, channels, height, width]` layout.
//! Values are stored as `f64`; the autodiff engine in [`crate::autodiff`]
//! records operations over these plain values.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::dim(
            "tensor",
            format!("rank {} exceeds {MAX_RANK}", shape.len()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} values but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank exceeds {MAX_RANK}");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    /// Single value of a tensor with exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::dim(
                "dims4",
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    #[inline]
    pub fn index4(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        ((n * ch + c) * h + i) * w + j
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index4(n, c, i, j)]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, i: usize, j: usize, value: f64) {
        let idx = self.index4(n, c, i, j);
        self.data[idx] = value;
    }

    /// Contiguous `h * w` plane for batch `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let start = (n * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let start = (n * ch + c) * h * w;
        &mut self.data[start..start + h * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..start + count` of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + count > c {
            return Err(Error::dim(
                "narrow_channels",
                format!("channels {start}..{} out of {c}", start + count),
            ));
        }
        let mut out = Tensor::zeros(&[n, count, h, w]);
        for b in 0..n {
            for k in 0..count {
                out.plane_mut(b, k).copy_from_slice(self.plane(b, start + k));
            }
        }
        Ok(out)
    }

    /// Round every value to the nearest `f32`.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at4(0, 0, 1, 0), 3.0);
    }

    #[test]
    fn rank_above_four_is_rejected() {
        assert!(Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn narrow_channels_copies_planes() {
        let t = Tensor::from_vec(&[1, 3, 1, 2], (0..6).map(f64::from).collect()).unwrap();
        let mid = t.narrow_channels(1, 1).unwrap();
        assert_eq!(mid.data(), &[2.0, 3.0]);
        assert!(t.narrow_channels(2, 2).is_err());
    }
}
