//! Dense 4-D tensors in `(batch, channel, row, col)` layout.
//!
//! Production code runs on `Tensor<f32>`. The same operations are available
//! on `Tensor<f64>` so that finite-difference and conservation checks can run
//! at a precision where float noise stays below their tolerances.

use std::fmt;

use crate::error::{Error, Result};

/// Tensor shape `(n, c, h, w)`; every dimension is at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    /// Total element count.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Scalar element type for tensor math.
///
/// Implemented for `f32` (all production paths) and `f64` (verification
/// paths: finite-difference gradient checks and relevance conservation).
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `C = A · B` for row-major-strided matrices: `A` is `m x k` with row
    /// stride `rsa` / column stride `csa`, and so on. `C` is overwritten.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_real(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts")
    }

    fn to_real(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float widens to f64")
    }
}

fn check_gemm_extents<T>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], rsb: usize, csb: usize, c: &[T], rsc: usize, csc: usize) {
    let need = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(need(m, k, rsa, csa) <= a.len(), "gemm: A extent out of range");
    assert!(need(k, n, rsb, csb) <= b.len(), "gemm: B extent out of range");
    assert!(need(m, n, rsc, csc) <= c.len(), "gemm: C extent out of range");
}

impl Element for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    ) {
        check_gemm_extents(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        assert!(rsc == n && csc == 1, "gemm writes C row-major contiguous");
        crate::gemm::gemm_f32(m, k, n, a, rsa, csa, b, rsb, csb, c);
    }
}

impl Element for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    ) {
        check_gemm_extents(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        assert!(rsc == n && csc == 1, "gemm writes C row-major contiguous");
        crate::gemm::gemm_f64(m, k, n, a, rsa, csa, b, rsb, csb, c);
    }
}

/// Dense 4-D array of floats, contiguous in `n`-major then `c`, `h`, `w` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from raw data, validating the shape invariants.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must all be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.count() {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.count()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        assert!(
            shape.n >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
            "tensor dimensions must all be >= 1, got {shape}"
        );
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        t.data[i] = f(n, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // dimensions are all >= 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && y < self.shape.h && x < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Elements of one batch item, `c*h*w` long.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.h * self.shape.w;
        &self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("elementwise op", self.shape, other.shape));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_in_place(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("elementwise add", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("dot product", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_real(v.to_real())).collect(),
        }
    }

    /// Stacks tensors along the batch axis; channel and spatial dims must agree.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(Error::shape_mismatch("batch stack", first.shape, t.shape));
            }
            n += t.shape.n;
        }
        let mut data = Vec::with_capacity(n * first.shape.c * first.shape.h * first.shape.w);
        for t in items {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.shape.c, first.shape.h, first.shape.w),
            data,
        })
    }
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape_mismatch("channel concat", sa, sb));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = Vec::with_capacity(out_shape.count());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor::new(out_shape, data)
}

/// Splits a tensor on the channel axis; exact inverse of [`concat_channels`].
pub fn split_channels<T: Element>(x: &Tensor<T>, c_a: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if c_a < 1 || c_a >= s.c {
        return Err(Error::InvalidArgument(format!(
            "channel split at {c_a} outside 1..{} for shape {s}",
            s.c
        )));
    }
    let plane = s.h * s.w;
    let c_b = s.c - c_a;
    let mut da = Vec::with_capacity(s.n * c_a * plane);
    let mut db = Vec::with_capacity(s.n * c_b * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        da.extend_from_slice(&x.data()[base..base + c_a * plane]);
        db.extend_from_slice(&x.data()[base + c_a * plane..base + s.c * plane]);
    }
    Ok((
        Tensor::new(Shape::new(s.n, c_a, s.h, s.w), da)?,
        Tensor::new(Shape::new(s.n, c_b, s.h, s.w), db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::<f32>::new(Shape::new(0, 1, 1, 1), vec![]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 4]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.get(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.idx(0, 0, 0, 1)], 1.0);
        assert_eq!(t.data()[t.idx(0, 0, 1, 0)], 10.0);
    }

    #[test]
    fn concat_adds_channels() {
        let a = Tensor::<f32>::filled(Shape::new(1, 3, 4, 4), 1.0);
        let b = Tensor::<f32>::filled(Shape::new(1, 1, 4, 4), -1.0);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape().c, 4);
        assert_eq!(cat.get(0, 2, 0, 0), 1.0);
        assert_eq!(cat.get(0, 3, 3, 3), -1.0);
    }

    #[test]
    fn concat_rejects_mismatched_spatial_dims() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn split_rejects_out_of_range_boundary() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        assert!(split_channels(&x, 0).is_err());
        assert!(split_channels(&x, 4).is_err());
        assert!(split_channels(&x, 1).is_ok());
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, &a, 2, 1, &b, 2, 1, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // Transposed A via strides: A^T * B
        let mut ct = [0.0f32; 4];
        f32::gemm(2, 2, 2, &a, 1, 2, &b, 2, 1, &mut ct, 2, 1);
        assert_eq!(ct, [26.0, 30.0, 38.0, 44.0]);
    }

    proptest! {
        #[test]
        fn split_inverts_concat(
            n in 1usize..3, ca in 1usize..4, cb in 1usize..4,
            h in 1usize..5, w in 1usize..5, seed in 0u64..1000
        ) {
            let mut v = seed as f32;
            let mut next = || { v = (v * 1.1 + 1.0) % 97.0; v };
            let a = Tensor::<f32>::from_fn(Shape::new(n, ca, h, w), |_, _, _, _| next());
            let b = Tensor::<f32>::from_fn(Shape::new(n, cb, h, w), |_, _, _, _| next());
            let cat = concat_channels(&a, &b).unwrap();
            prop_assert_eq!(cat.shape().c, ca + cb);
            let (a2, b2) = split_channels(&cat, ca).unwrap();
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }
    }
}
