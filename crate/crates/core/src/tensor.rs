//! Dense `(t, c, h, w)` feature maps and the `SFT1` dump format.

use std::io::{Read, Write};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SFT1";

/// Shape of a [`Tensor4`]: timesteps, channels, rows, cols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(t: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { t, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one timestep slice.
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    #[inline]
    pub fn offset(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.c + c) * self.h + y) * self.w + x
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from((t, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape4 { t, c, h, w }
    }
}

/// Row-major real tensor indexed `(t, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: impl Into<Shape4>, value: f64) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wraps `data`, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(Error::dims("tensor data length", &[shape.len()], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value at element {i}")));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for t in 0..shape.t {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(t, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// One timestep as a `(c, h, w)` slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        let n = self.shape.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor4 {
        self.map(|v| v * k)
    }

    fn check_same(&self, other: &Tensor4, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dims(context, &self.shape.dims(), &other.shape.dims()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same(other, "tensor add")?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same(other, "tensor sub")?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same(other, "tensor add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.check_same(other, "tensor comparison")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Copies a single-timestep tensor `times` times along `t`.
    pub fn repeat_time(&self, times: usize) -> Result<Tensor4> {
        if self.shape.t != 1 {
            return Err(Error::dims(
                "repeat_time input",
                &[1, self.shape.c, self.shape.h, self.shape.w],
                &self.shape.dims(),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor4 {
            shape: Shape4 { t: times, ..self.shape },
            data,
        })
    }

    /// Mean over the time axis, returning a `t = 1` tensor.
    pub fn mean_time(&self) -> Tensor4 {
        let n = self.shape.frame_len();
        let mut out = vec![0.0; n];
        for t in 0..self.shape.t {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v;
            }
        }
        let k = 1.0 / self.shape.t.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= k);
        Tensor4 {
            shape: Shape4 { t: 1, ..self.shape },
            data: out,
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&self, other: &Tensor4) -> Result<Tensor4> {
        let (a, b) = (self.shape, other.shape);
        if a.t != b.t || a.h != b.h || a.w != b.w {
            return Err(Error::dims("channel concat", &a.dims(), &b.dims()));
        }
        let shape = Shape4::new(a.t, a.c + b.c, a.h, a.w);
        let mut data = Vec::with_capacity(shape.len());
        for t in 0..a.t {
            data.extend_from_slice(self.frame(t));
            data.extend_from_slice(other.frame(t));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Splits the channel axis at `at`; inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, at: usize) -> (Tensor4, Tensor4) {
        let s = self.shape;
        let left = Shape4::new(s.t, at, s.h, s.w);
        let right = Shape4::new(s.t, s.c - at, s.h, s.w);
        let split = at * s.plane_len();
        let mut a = Vec::with_capacity(left.len());
        let mut b = Vec::with_capacity(right.len());
        for t in 0..s.t {
            let f = self.frame(t);
            a.extend_from_slice(&f[..split]);
            b.extend_from_slice(&f[split..]);
        }
        (
            Tensor4 { shape: left, data: a },
            Tensor4 { shape: right, data: b },
        )
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor4 {
        let s = self.shape;
        let out = Shape4::new(s.t, s.c, s.h * factor, s.w * factor);
        Tensor4::from_fn(out, |t, c, y, x| self[(t, c, y / factor, x / factor)])
    }

    /// Adjoint of [`Tensor4::upsample_nearest`]: sums each `factor × factor` patch.
    pub fn upsample_nearest_backward(&self, factor: usize) -> Tensor4 {
        let s = self.shape;
        let out = Shape4::new(s.t, s.c, s.h / factor, s.w / factor);
        let mut g = Tensor4::zeros(out);
        for t in 0..s.t {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        g[(t, c, y / factor, x / factor)] += self[(t, c, y, x)];
                    }
                }
            }
        }
        g
    }

    /// Writes the tensor in `SFT1` layout (`f32` payload).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        for d in self.shape.dims() {
            let d = u32::try_from(d).map_err(|_| Error::Domain(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.data.len() * 4);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads one `SFT1` tensor, leaving the reader positioned after it.
    pub fn read_from(mut r: impl Read) -> Result<Tensor4> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|_| Error::parse(0, "truncated SFT1 header"))?;
        if &header[..4] != TENSOR_MAGIC {
            return Err(Error::parse(0, "bad magic, expected SFT1"));
        }
        let dim = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let shape = Shape4::new(dim(0), dim(1), dim(2), dim(3));
        let mut buf = vec![0u8; shape.len() * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::parse(20, format!("truncated SFT1 payload for shape {:?}", shape.dims())))?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Tensor4::from_vec(shape, data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor4> {
        let t = Tensor4::read_from(bytes)?;
        let used = 20 + t.len() * 4;
        if used != bytes.len() {
            return Err(Error::parse(used, "trailing bytes after SFT1 tensor"));
        }
        Ok(t)
    }
}

impl Index<(usize, usize, usize, usize)> for Tensor4 {
    type Output = f64;

    #[inline]
    fn index(&self, (t, c, y, x): (usize, usize, usize, usize)) -> &f64 {
        &self.data[self.shape.offset(t, c, y, x)]
    }
}

impl IndexMut<(usize, usize, usize, usize)> for Tensor4 {
    #[inline]
    fn index_mut(&mut self, (t, c, y, x): (usize, usize, usize, usize)) -> &mut f64 {
        let o = self.shape.offset(t, c, y, x);
        &mut self.data[o]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Tensor4::from_vec((1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor4::from_vec((1, 1, 1, 2), vec![0.0, f64::NAN]).is_err());
        assert!(Tensor4::from_vec((1, 1, 1, 2), vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sft1_layout_is_bit_exact() {
        let t = Tensor4::from_vec((1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"SFT1");
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(Tensor4::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn sft1_rejects_bad_magic_and_truncation() {
        let mut bytes = Tensor4::zeros((1, 2, 2, 2)).to_bytes();
        assert!(Tensor4::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Tensor4::from_bytes(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor4::from_fn((2, 2, 3, 3), |t, c, y, x| (t * 100 + c * 10 + y * 3 + x) as f64);
        let b = Tensor4::full((2, 1, 3, 3), -1.0);
        let cat = a.concat_channels(&b).unwrap();
        assert_eq!(cat.shape(), Shape4::new(2, 3, 3, 3));
        let (l, r) = cat.split_channels(2);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor4::from_fn((1, 2, 2, 3), |_, c, y, x| (c + 2 * y + x) as f64 * 0.5);
        let g = Tensor4::from_fn((1, 2, 4, 6), |_, c, y, x| ((c * 7 + y * 3 + x) % 5) as f64);
        let lhs: f64 = x.upsample_nearest(2).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.upsample_nearest_backward(2).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
