//! Classical Laplacian pyramid (Burt–Adelson) and bicubic 2x resampling.
//!
//! These are the non-learned references: the pyramid is the oracle the
//! autoencoder imitates, and [`bicubic_down2`] produces the target for the
//! approximation image.
//!
//! Border rule everywhere is symmetric reflection without repeating the edge
//! sample (`-1 -> 1`, `n -> n - 2`).

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Binomial generating kernel `[1, 4, 6, 4, 1] / 16`.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Keys cubic convolution parameter.
pub const KEYS_A: f64 = -0.5;

/// Detail images `[d_1 .. d_K]` (finest first) and the coarsest approximation.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecomposition {
    pub details: Vec<Tensor4>,
    pub coarsest: Tensor4,
}

impl PyramidDecomposition {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Checks that every level is exactly twice the size of the next coarser one.
    pub fn validate(&self) -> Result<()> {
        if self.details.is_empty() {
            return Err(Error::InvalidShape("pyramid without detail levels".into()));
        }
        let mut below = self.coarsest.shape();
        for d in self.details.iter().rev() {
            let s = d.shape();
            if s[0] != below[0] || s[1] != below[1] || s[2] != 2 * below[2] || s[3] != 2 * below[3] {
                return Err(Error::InvalidShape(format!(
                    "pyramid level {:?} does not double {:?}",
                    s, below
                )));
            }
            below = s;
        }
        Ok(())
    }

    /// Element-wise sum of two pyramids with identical shapes.
    pub fn add(&self, other: &PyramidDecomposition) -> Result<PyramidDecomposition> {
        if self.levels() != other.levels() {
            return Err(Error::InvalidShape(format!(
                "pyramids with {} and {} levels",
                self.levels(),
                other.levels()
            )));
        }
        Ok(PyramidDecomposition {
            details: self
                .details
                .iter()
                .zip(&other.details)
                .map(|(a, b)| a.add(b))
                .collect::<Result<_>>()?,
            coarsest: self.coarsest.add(&other.coarsest)?,
        })
    }
}

/// Reflects index `i` into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let divisor = 1usize << levels;
    if h == 0 || w == 0 || !h.is_multiple_of(divisor) || !w.is_multiple_of(divisor) {
        return Err(Error::Indivisible {
            height: h,
            width: w,
            divisor,
        });
    }
    Ok(())
}

/// Applies `row_op` to every row and then `col_op` to every column of each plane.
fn separable(
    t: &Tensor4,
    out_h: usize,
    out_w: usize,
    row_op: impl Fn(&[f64], &mut [f64]),
    col_op: impl Fn(&[f64], &mut [f64]),
) -> Tensor4 {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor4::zeros([n, c, out_h, out_w]);
    let mut tmp = vec![0.0; h * out_w];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; out_h];
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            for y in 0..h {
                row_op(&src[y * w..(y + 1) * w], &mut tmp[y * out_w..(y + 1) * out_w]);
            }
            let dst = out.plane_mut(b, ch);
            for x in 0..out_w {
                for y in 0..h {
                    col_in[y] = tmp[y * out_w + x];
                }
                col_op(&col_in, &mut col_out);
                for y in 0..out_h {
                    dst[y * out_w + x] = col_out[y];
                }
            }
        }
    }
    out
}

/// Low-pass with the binomial kernel, then keep even samples.
fn reduce_line(src: &[f64], dst: &mut [f64]) {
    let n = src.len();
    for (i, d) in dst.iter_mut().enumerate() {
        let center = 2 * i as isize;
        *d = BINOMIAL5
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * src[reflect(center + k as isize - 2, n)])
            .sum();
    }
}

/// Zero-insertion upsampling followed by the binomial kernel scaled by 2.
fn expand_line(src: &[f64], dst: &mut [f64]) {
    let up_len = dst.len();
    for (i, d) in dst.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, wk) in BINOMIAL5.iter().enumerate() {
            let j = reflect(i as isize + k as isize - 2, up_len);
            if j.is_multiple_of(2) {
                acc += 2.0 * wk * src[j / 2];
            }
        }
        *d = acc;
    }
}

/// One pyramid reduction step: blur and decimate by 2 in each direction.
pub fn pyr_reduce(t: &Tensor4) -> Result<Tensor4> {
    check_divisible(t.h(), t.w(), 1)?;
    Ok(separable(t, t.h() / 2, t.w() / 2, reduce_line, reduce_line))
}

/// One pyramid expansion step to exactly twice the spatial size.
pub fn pyr_expand(t: &Tensor4) -> Result<Tensor4> {
    if t.h() == 0 || t.w() == 0 {
        return Err(Error::Empty("pyr_expand"));
    }
    Ok(separable(t, 2 * t.h(), 2 * t.w(), expand_line, expand_line))
}

pub fn lp_build(image: &Tensor4, levels: usize) -> Result<PyramidDecomposition> {
    if levels == 0 {
        return Err(Error::InvalidShape("pyramid needs at least one level".into()));
    }
    check_divisible(image.h(), image.w(), levels)?;
    let mut details = Vec::with_capacity(levels);
    let mut current = image.clone();
    for _ in 0..levels {
        let low = pyr_reduce(&current)?;
        details.push(current.sub(&pyr_expand(&low)?)?);
        current = low;
    }
    Ok(PyramidDecomposition {
        details,
        coarsest: current,
    })
}

pub fn lp_collapse(pyramid: &PyramidDecomposition) -> Result<Tensor4> {
    pyramid.validate()?;
    let mut current = pyramid.coarsest.clone();
    for d in pyramid.details.iter().rev() {
        current = d.add(&pyr_expand(&current)?)?;
    }
    Ok(current)
}

/// Keys cubic convolution kernel with parameter `a`.
#[inline]
pub fn keys_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output sample.
struct TapTable {
    taps: Vec<Vec<(usize, f64)>>,
}

impl TapTable {
    /// Resampling from `in_len` to `out_len` samples, pixel centres at `(i + 0.5) / len`.
    /// When shrinking, the kernel is stretched by the scale factor (antialiasing).
    fn new(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
        let support = 2.0 * stretch;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) / scale - 0.5;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut row: Vec<(usize, f64)> = Vec::new();
                for j in lo..=hi {
                    let wgt = keys_kernel((j as f64 - center) / stretch, KEYS_A) / stretch;
                    if wgt != 0.0 {
                        let idx = reflect(j, in_len);
                        match row.iter_mut().find(|(k, _)| *k == idx) {
                            Some(entry) => entry.1 += wgt,
                            None => row.push((idx, wgt)),
                        }
                    }
                }
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        TapTable { taps }
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (d, row) in dst.iter_mut().zip(&self.taps) {
            *d = row.iter().map(|&(j, w)| w * src[j]).sum();
        }
    }
}

fn bicubic_resize(t: &Tensor4, out_h: usize, out_w: usize) -> Tensor4 {
    let rows = TapTable::new(t.w(), out_w);
    let cols = TapTable::new(t.h(), out_h);
    separable(t, out_h, out_w, |s, d| rows.apply(s, d), |s, d| cols.apply(s, d))
}

/// Bicubic 2x downsampling (antialiased Keys kernel, a = -0.5).
pub fn bicubic_down2(t: &Tensor4) -> Result<Tensor4> {
    if t.is_empty() {
        return Err(Error::Empty("bicubic_down2"));
    }
    check_divisible(t.h(), t.w(), 1)?;
    Ok(bicubic_resize(t, t.h() / 2, t.w() / 2))
}

/// Bicubic 2x upsampling (Keys kernel, a = -0.5).
pub fn bicubic_up2(t: &Tensor4) -> Result<Tensor4> {
    if t.is_empty() {
        return Err(Error::Empty("bicubic_up2"));
    }
    Ok(bicubic_resize(t, 2 * t.h(), 2 * t.w()))
}

/// `levels` successive bicubic 2x upsamplings.
pub fn bicubic_up(t: &Tensor4, levels: usize) -> Result<Tensor4> {
    let mut cur = t.clone();
    for _ in 0..levels {
        cur = bicubic_up2(&cur)?;
    }
    Ok(cur)
}

/// `levels` successive bicubic 2x downsamplings.
pub fn bicubic_down(t: &Tensor4, levels: usize) -> Result<Tensor4> {
    let mut cur = t.clone();
    for _ in 0..levels {
        cur = bicubic_down2(&cur)?;
    }
    Ok(cur)
}
