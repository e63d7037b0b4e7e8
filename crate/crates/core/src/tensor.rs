//! Dense rank-4 tensors in `(batch, channel, height, width)` row-major order.
//!
//! Width is the fastest-moving index, so convolution inner loops stream over
//! contiguous memory. Every value in the crate, from images to detail maps and
//! loss targets, is a [`Tensor4`].

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Mean,
    Sum,
    SumSq,
    SumAbs,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous slice holding batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * stride..(n + 1) * stride]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let stride = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * stride..(n + 1) * stride]
    }

    /// Contiguous `h*w` plane for `(n, c)`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    pub fn zip_with(&self, other: &Tensor4, op: BinaryOp) -> Result<Tensor4> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        self.ensure_same_shape(other, name)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
            })
            .collect();
        Ok(Tensor4 {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, BinaryOp::Mul)
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        self.ensure_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor4) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn reduce(&self, op: ReduceOp) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Empty("reduce"));
        }
        Ok(match op {
            ReduceOp::Sum => self.data.iter().sum(),
            ReduceOp::Mean => self.data.iter().sum::<f64>() / self.data.len() as f64,
            ReduceOp::SumSq => self.data.iter().map(|v| v * v).sum(),
            ReduceOp::SumAbs => self.data.iter().map(|v| v.abs()).sum(),
        })
    }

    pub fn mean(&self) -> Result<f64> {
        self.reduce(ReduceOp::Mean)
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Stacks single-item tensors of identical shape along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or(Error::Empty("stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape,
                    right: t.shape,
                });
            }
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Ok(Tensor4 {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Batch item `n` as a standalone `(1, c, h, w)` tensor.
    pub fn select(&self, n: usize) -> Tensor4 {
        Tensor4 {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.item(n).to_vec(),
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.shape[0] != b.shape[0] || a.shape[2..] != b.shape[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: a.shape,
                right: b.shape,
            });
        }
        let [n, ca, h, w] = a.shape;
        let cb = b.shape[1];
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Ok(Tensor4 {
            shape: [n, ca + cb, h, w],
            data,
        })
    }

    /// Splits channels `[0, at)` and `[at, c)`; inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, at: usize) -> Result<(Tensor4, Tensor4)> {
        let [n, c, h, w] = self.shape;
        if at > c {
            return Err(Error::InvalidShape(format!(
                "cannot split {c} channels at {at}"
            )));
        }
        let hw = h * w;
        let mut a = Vec::with_capacity(n * at * hw);
        let mut b = Vec::with_capacity(n * (c - at) * hw);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..at * hw]);
            b.extend_from_slice(&item[at * hw..]);
        }
        Ok((
            Tensor4 {
                shape: [n, at, h, w],
                data: a,
            },
            Tensor4 {
                shape: [n, c - at, h, w],
                data: b,
            },
        ))
    }

    /// Spatial window `[top, top+height) x [left, left+width)` of every plane.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor4> {
        let [n, c, h, w] = self.shape;
        if top + height > h || left + width > w {
            return Err(Error::InvalidShape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {h}x{w}"
            )));
        }
        Ok(Tensor4::from_fn([n, c, height, width], |b, ch, y, x| {
            self.at(b, ch, top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Tensor4 {
        let w = self.shape[3];
        Tensor4::from_fn(self.shape, |b, c, y, x| self.at(b, c, y, w - 1 - x))
    }

    pub fn flip_vertical(&self) -> Tensor4 {
        let h = self.shape[2];
        Tensor4::from_fn(self.shape, |b, c, y, x| self.at(b, c, h - 1 - y, x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn nearest_up2(&self) -> Tensor4 {
        let [n, c, h, w] = self.shape;
        Tensor4::from_fn([n, c, 2 * h, 2 * w], |b, ch, y, x| self.at(b, ch, y / 2, x / 2))
    }

    /// Adjoint of [`Tensor4::nearest_up2`]: sums each 2x2 block.
    pub fn nearest_up2_backward(&self) -> Result<Tensor4> {
        let [n, c, h, w] = self.shape;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                divisor: 2,
            });
        }
        Ok(Tensor4::from_fn([n, c, h / 2, w / 2], |b, ch, y, x| {
            self.at(b, ch, 2 * y, 2 * x)
                + self.at(b, ch, 2 * y, 2 * x + 1)
                + self.at(b, ch, 2 * y + 1, 2 * x)
                + self.at(b, ch, 2 * y + 1, 2 * x + 1)
        }))
    }

    /// Rounds every value to the nearest `f32` (storage precision of checkpoints).
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Deterministic random source.
///
/// Backed by ChaCha8 seeded through `seed_from_u64`; the stream depends only
/// on the seed, never on platform or thread count.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn uniform_tensor(&mut self, shape: [usize; 4], lo: f64, hi: f64) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| self.uniform(lo, hi))
    }
}

/// Xavier/Glorot uniform initialization on `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: [usize; 4]) -> Result<Tensor4> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidShape(format!(
            "xavier fan_in={fan_in} fan_out={fan_out} must be positive"
        )));
    }
    let bound = xavier_bound(fan_in, fan_out);
    Ok(rng.uniform_tensor(shape, -bound, bound))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
