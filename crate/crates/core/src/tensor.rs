use crate::element::Element;
use crate::error::{Error, Result};

/// Dense 4-D feature array in (batch, channels, height, width) layout.
///
/// Data is contiguous row-major: element (n, c, y, x) lives at flat offset
/// `((n * C + c) * H + y) * W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![E::ZERO; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch {
                what: "tensor construction",
                left: format!("{}x{}x{}x{} = {} elements", n, c, h, w, n * c * h * w),
                right: format!("{} data values", data.len()),
            });
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: E) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Contiguous (h*w) slice of one channel plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [E] {
        let start = (n * self.c + c) * self.h * self.w;
        let end = start + self.h * self.w;
        &mut self.data[start..end]
    }

    pub fn map<F: Fn(E) -> E>(&self, f: F) -> Self {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element precision, rounding through f64.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn same_shape<T: Element>(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}
