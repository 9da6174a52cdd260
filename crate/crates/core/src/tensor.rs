//! Dense rank-4 tensors in `(batch, channel, height, width)` layout.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a rank-4 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one `(h, w)` plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn offset(&self, b: usize, ch: usize, y: usize, x: usize) -> usize {
        ((b * self.c + ch) * self.h + y) * self.w + x
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical dims.
    None,
    /// Right operand has one channel shared by every channel of the left.
    Channel,
    /// Right operand is `(n, c, 1, 1)`, constant over each plane.
    Spatial,
}

impl Broadcast {
    pub fn resolve(a: Dims, b: Dims) -> Result<Self> {
        if a == b {
            Ok(Broadcast::None)
        } else if b.c == 1 && b.n == a.n && b.h == a.h && b.w == a.w {
            Ok(Broadcast::Channel)
        } else if b.h == 1 && b.w == 1 && b.n == a.n && b.c == a.c {
            Ok(Broadcast::Spatial)
        } else {
            Err(Error::shape(format!("cannot broadcast {b} against {a}")))
        }
    }

    /// Flat index into the right operand for flat index `i` of the left.
    #[inline]
    pub(crate) fn index(self, a: Dims, i: usize) -> usize {
        match self {
            Broadcast::None => i,
            Broadcast::Channel => {
                let plane = a.plane();
                let b = i / (a.c * plane);
                b * plane + i % plane
            }
            Broadcast::Spatial => i / a.plane(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Immutable rank-4 tensor with a contiguous row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: Dims, value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.n {
            for ch in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Dims::new(1, 1, 1, 1), value)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, b: usize, ch: usize, y: usize, x: usize) -> T {
        self.data[self.dims.offset(b, ch, y, x)]
    }

    /// Mutable access for kernels building a fresh output.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Same buffer, new dims of equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.len() != self.dims.len() {
            return Err(Error::shape(format!("cannot reshape {} into {dims}", self.dims)));
        }
        Ok(Tensor4 { dims, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// Left-to-right sum of every element.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape(format!("comparing {} with {}", self.dims, other.dims)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Errors with the first offending flat index if any element is NaN or infinite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Elementwise add/mul with the broadcasting rules of [`Broadcast`].
    pub fn elementwise(op: BinaryOp, a: &Self, b: &Self) -> Result<Self> {
        let bc = Broadcast::resolve(a.dims, b.dims)?;
        let ad = a.dims;
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b.data[bc.index(ad, i)];
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        let out = Tensor4 { dims: ad, data };
        out.ensure_finite(match op {
            BinaryOp::Add => "add",
            BinaryOp::Mul => "mul",
        })?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Add, self, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        Self::elementwise(BinaryOp::Mul, self, other)
    }

    /// Sums a left-shaped tensor down to the shape implied by `bc` (the
    /// adjoint of broadcasting).
    pub(crate) fn reduce_broadcast(&self, bc: Broadcast, target: Dims) -> Self {
        match bc {
            Broadcast::None => self.clone(),
            _ => {
                let mut out = Self::zeros(target);
                for (i, &v) in self.data.iter().enumerate() {
                    out.data[bc.index(self.dims, i)] += v;
                }
                out
            }
        }
    }

    /// Stacks tensors along the channel axis; part `k` occupies the slab
    /// after parts `0..k`.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of an empty list"))?
            .dims;
        let mut c = 0;
        for p in parts {
            let d = p.dims;
            if d.n != first.n || d.h != first.h || d.w != first.w {
                return Err(Error::shape(format!(
                    "concat_channels: {d} does not share n/h/w with {first}"
                )));
            }
            c += d.c;
        }
        let dims = Dims::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..first.n {
            for p in parts {
                let slab = p.dims.c * p.dims.plane();
                data.extend_from_slice(&p.data[b * slab..(b + 1) * slab]);
            }
        }
        Ok(Tensor4 { dims, data })
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let d = self.dims;
        if len == 0 || start + len > d.c {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of range for {d}",
                start + len
            )));
        }
        let dims = Dims::new(d.n, len, d.h, d.w);
        let plane = d.plane();
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..d.n {
            let from = d.offset(b, start, 0, 0);
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Tensor4 { dims, data })
    }

    /// Writes `part` into channels `start..` of `self` (adjoint of slicing).
    pub(crate) fn add_into_channels(&mut self, start: usize, part: &Self) {
        let d = self.dims;
        let plane = d.plane();
        let len = part.dims.c * plane;
        for b in 0..d.n {
            let to = d.offset(b, start, 0, 0);
            let src = &part.data[b * len..(b + 1) * len];
            for (o, &v) in self.data[to..to + len].iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dims, other.dims);
        for (o, &v) in self.data.iter_mut().zip(&other.data) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(d: Dims) -> Tensor4<f64> {
        Tensor4::from_vec(d, (0..d.len()).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn offset_is_row_major() {
        let d = Dims::new(2, 3, 4, 5);
        assert_eq!(d.offset(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
        let t = seq(d);
        assert_eq!(t.get(1, 2, 3, 4), d.offset(1, 2, 3, 4) as f64);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor4::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn mul_by_half_map_halves() {
        let x = seq(Dims::new(1, 3, 2, 2));
        let m = Tensor4::full(Dims::new(1, 1, 2, 2), 0.5);
        let y = x.mul(&m).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.5);
        }
    }

    #[test]
    fn add_zeros_is_identity() {
        let x = seq(Dims::new(2, 2, 3, 3));
        assert_eq!(x.add(&Tensor4::zeros(x.dims())).unwrap(), x);
    }

    #[test]
    fn spatial_broadcast() {
        let x = seq(Dims::new(1, 2, 2, 2));
        let b = Tensor4::from_vec(Dims::new(1, 2, 1, 1), vec![10.0, 20.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.get(0, 0, 1, 1), 13.0);
        assert_eq!(y.get(0, 1, 0, 0), 24.0);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let a = Tensor4::<f64>::zeros(Dims::new(1, 2, 3, 3));
        let b = Tensor4::<f64>::zeros(Dims::new(1, 2, 2, 3));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("1x2x3x3") && err.contains("1x2x2x3"), "{err}");
    }

    #[test]
    fn mul_overflow_is_an_error() {
        let a = Tensor4::full(Dims::new(1, 1, 1, 2), f32::MAX);
        assert!(matches!(a.mul(&a), Err(Error::NonFinite { op: "mul", .. })));
    }

    #[test]
    fn concat_keeps_order() {
        let a = Tensor4::full(Dims::new(1, 1, 2, 2), 1.0f64);
        let b = Tensor4::full(Dims::new(1, 1, 2, 2), 2.0f64);
        let c = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), Dims::new(1, 2, 2, 2));
        assert_eq!(c.get(0, 0, 1, 1), 1.0);
        assert_eq!(c.get(0, 1, 0, 0), 2.0);
        assert_eq!(Tensor4::concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn concat_rejects_mismatch_and_empty() {
        let a = Tensor4::<f64>::zeros(Dims::new(1, 1, 2, 2));
        let b = Tensor4::<f64>::zeros(Dims::new(2, 1, 2, 2));
        assert!(Tensor4::concat_channels(&[&a, &b]).is_err());
        assert!(Tensor4::<f64>::concat_channels(&[]).is_err());
    }
}
