//! Dense 4-D tensors in NHWC layout.
//!
//! A `Tensor` is always `batch × height × width × channels`, stored
//! row-major in double precision. Matrices are viewed through the same
//! layout: rows are the flattened `(batch, height, width)` positions and
//! columns are channels, so a `1×H×W×C` feature map is directly an
//! `(H·W) × C` matrix.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    /// A `rows × cols` matrix stored as `1×1×rows×cols`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape::new(1, 1, rows, cols)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    /// Number of rows in the matrix view.
    pub const fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.h, self.w, self.c)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn offset(&self, n: usize, h: usize, w: usize, c: usize) -> usize {
        let s = self.shape;
        ((n * s.h + h) * s.w + w) * s.c + c
    }

    pub fn at(&self, n: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data[self.offset(n, h, w, c)]
    }

    pub fn set(&mut self, n: usize, h: usize, w: usize, c: usize, value: f64) {
        let i = self.offset(n, h, w, c);
        self.data[i] = value;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!("item() on non-scalar tensor {}", self.shape))),
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "inner product of {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("compare {} with {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Replicate-pads the bottom and right edges up to `h × w`.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if h < s.h || w < s.w || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!("cannot replicate-pad {s} to {h}×{w}")));
        }
        let mut out = Tensor::zeros([s.n, h, w, s.c]);
        for n in 0..s.n {
            for y in 0..h {
                let sy = y.min(s.h - 1);
                for x in 0..w {
                    let sx = x.min(s.w - 1);
                    let src = self.offset(n, sy, sx, 0);
                    let dst = out.offset(n, y, x, 0);
                    out.data[dst..dst + s.c].copy_from_slice(&self.data[src..src + s.c]);
                }
            }
        }
        Ok(out)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?
            .shape;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(format!(
                    "channel concat of {first} with {s}: spatial dims differ"
                )));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape.c).sum();
        let rows = first.rows();
        let mut data = Vec::with_capacity(rows * c_total);
        for r in 0..rows {
            for p in parts {
                let c = p.shape.c;
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Tensor::from_vec([first.n, first.h, first.w, c_total], data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec([1, 2, 2, 1], vec![0.0; 3]).is_err());
        let t = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(0, 1, 0, 0), 3.0);
        assert_eq!(t.shape().rows(), 4);
    }

    #[test]
    fn grad_slot_must_match_shape() {
        let mut t = Tensor::zeros([1, 2, 2, 1]);
        assert!(t.set_grad(vec![0.0; 5]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn replicate_pad_copies_edges() {
        let t = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.pad_replicate(3, 3).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn concat_interleaves_channels() {
        let a = Tensor::from_vec([1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 1, 2, 3));
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
