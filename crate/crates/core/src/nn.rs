//! Differentiable layers with hand-written backward passes.
//!
//! Convolutions are lowered to GEMM through im2col / col2im. "Convolution"
//! means cross-correlation (no kernel flip) with zero padding.
//!
//! Weight layouts:
//! - [`ConvKind::Conv`]: `(out_ch, in_ch, k, k)`
//! - [`ConvKind::Transposed`]: `(in_ch, out_ch, k, k)`, i.e. the weight of the
//!   strided convolution this layer is the adjoint of.

use crate::error::{Error, Result};
use crate::tensor::{xavier_init, Rng, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Activations cached by a forward call and consumed by the matching backward.
#[derive(Clone, Debug)]
pub struct ConvTape {
    input: Tensor4,
    out_shape: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

/// Sliding-window geometry between an "image" and its column grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `cols[(c, ky, kx), (gy, gx)] = img[c, gy*s - p + ky, gx*s - p + kx]`, zero outside.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let n_cols = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for gy in 0..self.grid_h {
                        let y = (gy * self.stride + ky) as isize - self.pad as isize;
                        let out = &mut dst[gy * self.grid_w..(gy + 1) * self.grid_w];
                        if y < 0 || y >= self.height as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (gx, o) in out.iter_mut().enumerate() {
                            let x = (gx * self.stride + kx) as isize - self.pad as isize;
                            *o = if x < 0 || x >= self.width as isize {
                                0.0
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters columns back, accumulating into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let n_cols = self.cols();
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for gy in 0..self.grid_h {
                        let y = (gy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        for (gx, v) in src[gy * self.grid_w..(gy + 1) * self.grid_w].iter().enumerate() {
                            let x = (gx * self.stride + kx) as isize - self.pad as isize;
                            if x >= 0 && x < self.width as isize {
                                dst[x as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, either optionally
/// given in transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe exactly
    // the row-major (or transposed row-major) layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl ConvLayer {
    /// Xavier-initialized layer with zero bias.
    pub fn new(
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let shape = match kind {
            ConvKind::Conv => [out_ch, in_ch, kernel, kernel],
            ConvKind::Transposed => [in_ch, out_ch, kernel, kernel],
        };
        let weight = xavier_init(rng, in_ch * kernel * kernel, out_ch * kernel * kernel, shape)?;
        Ok(ConvLayer {
            kind,
            weight,
            bias: vec![0.0; out_ch],
            stride,
            padding,
        })
    }

    /// 3x3 convolution, padding 1.
    pub fn conv3x3(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(ConvKind::Conv, in_ch, out_ch, 3, stride, 1, rng)
    }

    /// 4x4 transposed convolution, stride 2, padding 1: exact 2x upsampling.
    pub fn up4x4(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(ConvKind::Transposed, in_ch, out_ch, 4, 2, 1, rng)
    }

    /// Same geometry, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ConvLayer {
            kind: self.kind,
            weight: Tensor4::zeros(self.weight.shape()),
            bias: vec![0.0; self.bias.len()],
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.kind {
            ConvKind::Conv => self.weight.shape()[1],
            ConvKind::Transposed => self.weight.shape()[0],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            ConvKind::Conv => self.weight.shape()[0],
            ConvKind::Transposed => self.weight.shape()[1],
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        for b in &mut self.bias {
            *b = *b as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }

    /// Spatial output size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel(), self.stride, self.padding);
        match self.kind {
            ConvKind::Conv => {
                if s > 1 && (!h.is_multiple_of(s) || !w.is_multiple_of(s)) {
                    return Err(Error::Indivisible {
                        height: h,
                        width: w,
                        divisor: s,
                    });
                }
                if h + 2 * p < k || w + 2 * p < k {
                    return Err(Error::InvalidShape(format!(
                        "input {h}x{w} smaller than kernel {k}"
                    )));
                }
                Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
            }
            ConvKind::Transposed => {
                let oh = (h.max(1) - 1) * s + k;
                let ow = (w.max(1) - 1) * s + k;
                if h == 0 || w == 0 || oh < 2 * p || ow < 2 * p {
                    return Err(Error::InvalidShape(format!(
                        "transposed conv input {h}x{w} too small"
                    )));
                }
                Ok((oh - 2 * p, ow - 2 * p))
            }
        }
    }

    fn window(&self, x_shape: [usize; 4], out_hw: (usize, usize)) -> Window {
        let (k, s, p) = (self.kernel(), self.stride, self.padding);
        match self.kind {
            // image = input, grid = output
            ConvKind::Conv => Window {
                channels: x_shape[1],
                height: x_shape[2],
                width: x_shape[3],
                kernel: k,
                stride: s,
                pad: p,
                grid_h: out_hw.0,
                grid_w: out_hw.1,
            },
            // image = output, grid = input
            ConvKind::Transposed => Window {
                channels: self.out_channels(),
                height: out_hw.0,
                width: out_hw.1,
                kernel: k,
                stride: s,
                pad: p,
                grid_h: x_shape[2],
                grid_w: x_shape[3],
            },
        }
    }

    fn check_input(&self, x: &Tensor4) -> Result<[usize; 4]> {
        if x.c() != self.in_channels() {
            return Err(Error::InvalidShape(format!(
                "layer expects {} input channels, got {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        let (oh, ow) = self.output_size(x.h(), x.w())?;
        Ok([x.n(), self.out_channels(), oh, ow])
    }

    /// Forward pass without keeping a tape.
    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let out_shape = self.check_input(x)?;
        let [n, out_c, oh, ow] = out_shape;
        let win = self.window(x.shape(), (oh, ow));
        let mut out = Tensor4::zeros(out_shape);
        let mut cols = vec![0.0; win.rows() * win.cols()];
        let in_c = self.in_channels();
        for b in 0..n {
            match self.kind {
                ConvKind::Conv => {
                    win.im2col(x.item(b), &mut cols);
                    gemm(
                        out_c,
                        win.rows(),
                        win.cols(),
                        self.weight.data(),
                        false,
                        &cols,
                        false,
                        0.0,
                        out.item_mut(b),
                    );
                }
                ConvKind::Transposed => {
                    // cols = W^T x, then scatter into the (larger) output image
                    gemm(
                        win.rows(),
                        in_c,
                        win.cols(),
                        self.weight.data(),
                        true,
                        x.item(b),
                        false,
                        0.0,
                        &mut cols,
                    );
                    win.col2im(&cols, out.item_mut(b));
                }
            }
            let hw = oh * ow;
            let item = out.item_mut(b);
            for (o, &bias) in self.bias.iter().enumerate() {
                for v in &mut item[o * hw..(o + 1) * hw] {
                    *v += bias;
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvTape)> {
        let out = self.apply(x)?;
        let tape = ConvTape {
            input: x.clone(),
            out_shape: out.shape(),
        };
        Ok((out, tape))
    }

    /// Accumulates parameter gradients into `acc` and returns the input gradient
    /// when `want_input` is set.
    pub fn backward_accumulate(
        &self,
        tape: &ConvTape,
        grad_out: &Tensor4,
        mut acc: Option<&mut ConvLayer>,
        want_input: bool,
    ) -> Result<Option<Tensor4>> {
        if grad_out.shape() != tape.out_shape {
            return Err(Error::ShapeMismatch {
                op: "conv backward",
                left: tape.out_shape,
                right: grad_out.shape(),
            });
        }
        if let Some(acc) = acc.as_deref() {
            if acc.weight.shape() != self.weight.shape() || acc.bias.len() != self.bias.len() {
                return Err(Error::InvalidShape("gradient accumulator does not match layer".into()));
            }
        }
        let x = &tape.input;
        let [n, out_c, oh, ow] = tape.out_shape;
        let in_c = self.in_channels();
        let win = self.window(x.shape(), (oh, ow));
        let mut cols = vec![0.0; win.rows() * win.cols()];
        let mut grad_x = want_input.then(|| Tensor4::zeros(x.shape()));
        let hw = oh * ow;

        for b in 0..n {
            let g = grad_out.item(b);
            if let Some(acc) = acc.as_deref_mut() {
                for (o, gb) in acc.bias.iter_mut().enumerate() {
                    *gb += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            match self.kind {
                ConvKind::Conv => {
                    if let Some(acc) = acc.as_deref_mut() {
                        win.im2col(x.item(b), &mut cols);
                        // dW += g cols^T
                        gemm(
                            out_c,
                            win.cols(),
                            win.rows(),
                            g,
                            false,
                            &cols,
                            true,
                            1.0,
                            acc.weight.data_mut(),
                        );
                    }
                    if let Some(gx) = grad_x.as_mut() {
                        // dcols = W^T g
                        gemm(
                            win.rows(),
                            out_c,
                            win.cols(),
                            self.weight.data(),
                            true,
                            g,
                            false,
                            0.0,
                            &mut cols,
                        );
                        win.col2im(&cols, gx.item_mut(b));
                    }
                }
                ConvKind::Transposed => {
                    win.im2col(g, &mut cols);
                    if let Some(acc) = acc.as_deref_mut() {
                        // dW += x dcols^T
                        gemm(
                            in_c,
                            win.cols(),
                            win.rows(),
                            x.item(b),
                            false,
                            &cols,
                            true,
                            1.0,
                            acc.weight.data_mut(),
                        );
                    }
                    if let Some(gx) = grad_x.as_mut() {
                        // dx = W dcols
                        gemm(
                            in_c,
                            win.rows(),
                            win.cols(),
                            self.weight.data(),
                            false,
                            &cols,
                            false,
                            0.0,
                            gx.item_mut(b),
                        );
                    }
                }
            }
        }
        Ok(grad_x)
    }

    pub fn backward(&self, tape: &ConvTape, grad_out: &Tensor4) -> Result<ConvGrads> {
        let mut acc = self.zeros_like();
        let input = self
            .backward_accumulate(tape, grad_out, Some(&mut acc), true)?
            .expect("input gradient requested");
        Ok(ConvGrads {
            input,
            weight: acc.weight,
            bias: acc.bias,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReluTape {
    input: Tensor4,
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_forward(x: &Tensor4) -> (Tensor4, ReluTape) {
    (relu(x), ReluTape { input: x.clone() })
}

/// Passes gradient where the input was strictly positive.
pub fn relu_backward(tape: &ReluTape, grad_out: &Tensor4) -> Result<Tensor4> {
    tape.input.ensure_same_shape(grad_out, "relu backward")?;
    let data = tape
        .input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(grad_out.shape(), data)
}

/// Layers applied in order with a ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvLayer>,
}

#[derive(Clone, Debug)]
pub struct StackTape {
    convs: Vec<ConvTape>,
    relus: Vec<ReluTape>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Self {
        ConvStack { layers }
    }

    pub fn zeros_like(&self) -> Self {
        ConvStack {
            layers: self.layers.iter().map(ConvLayer::zeros_like).collect(),
        }
    }

    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let last = self.layers.len().saturating_sub(1);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply(&cur)?;
            if i < last {
                cur = relu(&cur);
            }
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, StackTape)> {
        let last = self.layers.len().saturating_sub(1);
        let mut convs = Vec::with_capacity(self.layers.len());
        let mut relus = Vec::with_capacity(last);
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, tape) = layer.forward(&cur)?;
            convs.push(tape);
            cur = if i < last {
                let (act, rt) = relu_forward(&out);
                relus.push(rt);
                act
            } else {
                out
            };
        }
        Ok((cur, StackTape { convs, relus }))
    }

    pub fn backward_accumulate(
        &self,
        tape: &StackTape,
        grad_out: &Tensor4,
        mut acc: Option<&mut ConvStack>,
        want_input: bool,
    ) -> Result<Option<Tensor4>> {
        if tape.convs.len() != self.layers.len()
            || acc.as_deref().is_some_and(|a| a.layers.len() != self.layers.len())
        {
            return Err(Error::InvalidShape("tape does not match layer stack".into()));
        }
        let mut grad = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < tape.relus.len() {
                grad = relu_backward(&tape.relus[i], &grad)?;
            }
            let need = i > 0 || want_input;
            let layer_acc = acc.as_deref_mut().map(|a| &mut a.layers[i]);
            match self.layers[i].backward_accumulate(&tape.convs[i], &grad, layer_acc, need)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }
}

/// A set of learnable layers visited in a fixed order.
///
/// The order defines the flat parameter vector: for each layer its weight
/// values followed by its bias values.
pub trait Parameters {
    fn layers(&self) -> Vec<&ConvLayer>;
    fn layers_mut(&mut self) -> Vec<&mut ConvLayer>;

    fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::InvalidShape(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut rest = values;
        for layer in self.layers_mut() {
            let (w, tail) = rest.split_at(layer.weight.len());
            layer.weight.data_mut().copy_from_slice(w);
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// `true` for entries of the flat vector that belong to weights (not biases).
    fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend(std::iter::repeat_n(true, layer.weight.len()));
            out.extend(std::iter::repeat_n(false, layer.bias.len()));
        }
        out
    }

    fn round_to_f32(&mut self) {
        for layer in self.layers_mut() {
            layer.round_to_f32();
        }
    }

    fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite())
    }
}

impl Parameters for ConvStack {
    fn layers(&self) -> Vec<&ConvLayer> {
        self.layers.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.layers.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(layer: &ConvLayer, x: &Tensor4) -> Tensor4 {
        let (oh, ow) = layer.output_size(x.h(), x.w()).unwrap();
        let (k, s, p) = (layer.kernel(), layer.stride as isize, layer.padding as isize);
        Tensor4::from_fn([x.n(), layer.out_channels(), oh, ow], |b, o, y, xo| {
            let mut acc = layer.bias[o];
            for i in 0..x.c() {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = y as isize * s - p + ky as isize;
                        let ix = xo as isize * s - p + kx as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.h() && (ix as usize) < x.w() {
                            acc += layer.weight.at(o, i, ky, kx) * x.at(b, i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn naive_tconv(layer: &ConvLayer, x: &Tensor4) -> Tensor4 {
        let (oh, ow) = layer.output_size(x.h(), x.w()).unwrap();
        let (k, s, p) = (layer.kernel(), layer.stride as isize, layer.padding as isize);
        let mut out = Tensor4::from_fn([x.n(), layer.out_channels(), oh, ow], |_, o, _, _| layer.bias[o]);
        for b in 0..x.n() {
            for i in 0..x.c() {
                for y in 0..x.h() {
                    for xi in 0..x.w() {
                        for o in 0..layer.out_channels() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = y as isize * s - p + ky as isize;
                                    let ox = xi as isize * s - p + kx as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        let idx = out.offset(b, o, oy as usize, ox as usize);
                                        out.data_mut()[idx] +=
                                            layer.weight.at(i, o, ky, kx) * x.at(b, i, y, xi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut layer = ConvLayer::conv3x3(1, 1, 1, &mut Rng::new(0)).unwrap();
        layer.weight = Tensor4::zeros([1, 1, 3, 3]);
        layer.weight.set(0, 0, 1, 1, 1.0);
        let x = Rng::new(1).uniform_tensor([2, 1, 5, 6], -1.0, 1.0);
        assert_eq!(layer.apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut layer = ConvLayer::conv3x3(3, 2, 1, &mut Rng::new(0)).unwrap();
        layer.weight = Tensor4::zeros(layer.weight.shape());
        layer.bias = vec![0.25, -1.5];
        let y = layer.apply(&Rng::new(1).uniform_tensor([1, 3, 4, 4], -1.0, 1.0)).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.25));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        for stride in [1, 2] {
            let mut layer = ConvLayer::conv3x3(3, 16, stride, &mut rng).unwrap();
            layer.bias = (0..16).map(|i| i as f64 * 0.1 - 0.8).collect();
            let x = rng.uniform_tensor([1, 3, 6, 6], -1.0, 1.0);
            let fast = layer.apply(&x).unwrap();
            let slow = naive_conv(&layer, &x);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
        let layer = ConvLayer::conv3x3(3, 16, 1, &mut rng).unwrap();
        let x = rng.uniform_tensor([1, 3, 5, 5], -1.0, 1.0);
        assert!(layer.apply(&x).unwrap().max_abs_diff(&naive_conv(&layer, &x)).unwrap() < 1e-12);
    }

    #[test]
    fn tconv_matches_loop_oracle_and_doubles() {
        let mut rng = Rng::new(3);
        let mut layer = ConvLayer::up4x4(3, 5, &mut rng).unwrap();
        layer.bias = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let x = rng.uniform_tensor([2, 3, 4, 3], -1.0, 1.0);
        let y = layer.apply(&x).unwrap();
        assert_eq!(y.shape(), [2, 5, 8, 6]);
        assert!(y.max_abs_diff(&naive_tconv(&layer, &x)).unwrap() < 1e-12);

        let single = ConvLayer::up4x4(1, 1, &mut rng).unwrap();
        assert_eq!(single.apply(&Tensor4::zeros([1, 1, 4, 4])).unwrap().shape(), [1, 1, 8, 8]);
    }

    #[test]
    fn stride2_rejects_odd_input() {
        let layer = ConvLayer::conv3x3(1, 1, 2, &mut Rng::new(0)).unwrap();
        assert!(layer.apply(&Tensor4::zeros([1, 1, 5, 4])).is_err());
        assert_eq!(layer.apply(&Tensor4::zeros([1, 1, 6, 4])).unwrap().shape(), [1, 1, 3, 2]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let layer = ConvLayer::conv3x3(3, 4, 1, &mut Rng::new(0)).unwrap();
        assert!(layer.apply(&Tensor4::zeros([1, 2, 4, 4])).is_err());
        let (_, tape) = layer.forward(&Tensor4::zeros([1, 3, 4, 4])).unwrap();
        assert!(layer.backward(&tape, &Tensor4::zeros([1, 4, 2, 2])).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let layer = ConvLayer::conv3x3(2, 3, 1, &mut rng).unwrap();
        let (y, tape) = layer.forward(&rng.uniform_tensor([1, 2, 4, 4], -1.0, 1.0)).unwrap();
        let g = layer.backward(&tape, &Tensor4::zeros(y.shape())).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let mut layer = ConvLayer::conv3x3(1, 1, 1, &mut Rng::new(0)).unwrap();
        layer.weight = Tensor4::zeros([1, 1, 3, 3]);
        layer.weight.set(0, 0, 1, 1, 1.0);
        let (_, tape) = layer.forward(&Tensor4::full([1, 1, 1, 1], 0.3)).unwrap();
        let g = Tensor4::full([1, 1, 1, 1], 2.5);
        assert_eq!(layer.backward(&tape, &g).unwrap().input, g);
    }

    #[test]
    fn bias_grad_sums_over_batch_and_space() {
        let mut rng = Rng::new(5);
        let layer = ConvLayer::conv3x3(2, 3, 1, &mut rng).unwrap();
        let (y, tape) = layer.forward(&rng.uniform_tensor([2, 2, 3, 3], -1.0, 1.0)).unwrap();
        let g = rng.uniform_tensor(y.shape(), -1.0, 1.0);
        let grads = layer.backward(&tape, &g).unwrap();
        for o in 0..3 {
            let expect: f64 = (0..2).map(|b| g.plane(b, o).iter().sum::<f64>()).sum();
            assert!((grads.bias[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_rules() {
        let x = Tensor4::from_vec([1, 1, 1, 4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let (y, tape) = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = relu_backward(&tape, &Tensor4::full([1, 1, 1, 4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
        let pos = Tensor4::from_vec([1, 1, 1, 2], vec![0.0, 3.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn symmetric_kernel_commutes_with_horizontal_flip() {
        let mut rng = Rng::new(6);
        let mut layer = ConvLayer::conv3x3(2, 3, 1, &mut rng).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                for ky in 0..3 {
                    let v = layer.weight.at(o, i, ky, 0);
                    layer.weight.set(o, i, ky, 2, v);
                }
            }
        }
        let x = rng.uniform_tensor([1, 2, 5, 7], -1.0, 1.0);
        let a = layer.apply(&x.flip_horizontal()).unwrap();
        let b = layer.apply(&x).unwrap().flip_horizontal();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
