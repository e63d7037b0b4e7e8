//! The Laplacian-pyramid-like autoencoder.
//!
//! Encoder: an approximation branch (stride-2 first layer) produces the
//! half-size image `I_c`; a detail branch sees `I` concatenated with the
//! nearest-upsampled `I_c` and produces the full-size detail `I_d`.
//!
//! Decoder: `I' = I_d + phi(I_c)` where `phi` is a 4x4 stride-2 transposed
//! convolution followed by three 3x3 convolutions.
//!
//! Hidden layers have 16 channels and a ReLU; the last layer of each branch
//! and of `phi` is linear because detail images are signed.

use std::path::Path;

use crate::container::{self, NamedTensor, MAGIC_LPAE};
use crate::error::{Error, Result};
use crate::losses::{self, LpaeLossTerms, LpaeLossWeights};
use crate::nn::{ConvLayer, ConvStack, Parameters, StackTape};
use crate::pyramid::{bicubic_down2, check_divisible, PyramidDecomposition};
use crate::tensor::{Rng, Tensor4};

pub const IMAGE_CHANNELS: usize = 3;
pub const HIDDEN_CHANNELS: usize = 16;

/// Total learnable scalars of [`LpaeParams`].
pub const LPAE_PARAM_COUNT: usize = 17_337;

#[derive(Clone, Debug, PartialEq)]
pub struct LpaeParams {
    pub approx: ConvStack,
    pub detail: ConvStack,
    pub decoder: ConvStack,
}

/// One forward pass of the single-level autoencoder.
#[derive(Clone, Debug)]
pub struct LpaeOutput {
    pub approx: Tensor4,
    pub detail: Tensor4,
    pub prediction: Tensor4,
    pub recon: Tensor4,
}

/// Tapes of a full single-level forward pass, for [`LpaeParams::backward`].
pub struct LpaeTape {
    approx: StackTape,
    detail: StackTape,
    decoder: StackTape,
}

/// Tape of [`LpaeParams::decode_pyramid_forward`].
pub struct DecodeTape {
    levels: Vec<StackTape>,
}

impl LpaeParams {
    /// Xavier-initialized parameters, rounded to `f32` storage precision.
    pub fn init(rng: &mut Rng) -> Result<Self> {
        let (c, f) = (IMAGE_CHANNELS, HIDDEN_CHANNELS);
        let approx = ConvStack::new(vec![
            ConvLayer::conv3x3(c, f, 2, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, c, 1, rng)?,
        ]);
        let detail = ConvStack::new(vec![
            ConvLayer::conv3x3(2 * c, f, 1, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, c, 1, rng)?,
        ]);
        let decoder = ConvStack::new(vec![
            ConvLayer::up4x4(c, f, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, f, 1, rng)?,
            ConvLayer::conv3x3(f, c, 1, rng)?,
        ]);
        let mut params = LpaeParams {
            approx,
            detail,
            decoder,
        };
        params.round_to_f32();
        Ok(params)
    }

    pub fn from_seed(seed: u64) -> Result<Self> {
        Self::init(&mut Rng::new(seed))
    }

    pub fn zeros_like(&self) -> Self {
        LpaeParams {
            approx: self.approx.zeros_like(),
            detail: self.detail.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    pub fn named_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = Vec::new();
        for (prefix, stack) in [("approx", &self.approx), ("detail", &self.detail), ("decoder", &self.decoder)] {
            for (i, layer) in stack.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}"), layer));
            }
        }
        out
    }

    fn check_image(image: &Tensor4) -> Result<()> {
        if image.c() != IMAGE_CHANNELS {
            return Err(Error::InvalidShape(format!(
                "expected {IMAGE_CHANNELS}-channel images, got {:?}",
                image.shape()
            )));
        }
        check_divisible(image.h(), image.w(), 1)
    }

    /// `I -> (I_c, I_d)`.
    pub fn encode(&self, image: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        Self::check_image(image)?;
        let approx = self.approx.apply(image)?;
        let joined = Tensor4::concat_channels(image, &approx.nearest_up2())?;
        let detail = self.detail.apply(&joined)?;
        Ok((approx, detail))
    }

    /// `phi(I_c)`: the full-size prediction from the approximation.
    pub fn predict(&self, approx: &Tensor4) -> Result<Tensor4> {
        self.decoder.apply(approx)
    }

    /// `I' = I_d + phi(I_c)`.
    pub fn decode(&self, approx: &Tensor4, detail: &Tensor4) -> Result<Tensor4> {
        check_level_pair(approx, detail)?;
        detail.add(&self.predict(approx)?)
    }

    pub fn forward(&self, image: &Tensor4) -> Result<LpaeOutput> {
        let (approx, detail) = self.encode(image)?;
        let prediction = self.predict(&approx)?;
        let recon = detail.add(&prediction)?;
        Ok(LpaeOutput {
            approx,
            detail,
            prediction,
            recon,
        })
    }

    /// Applies [`LpaeParams::encode`] recursively to successive approximations.
    pub fn encode_pyramid(&self, image: &Tensor4, levels: usize) -> Result<PyramidDecomposition> {
        if levels == 0 {
            return Err(Error::InvalidShape("pyramid needs at least one level".into()));
        }
        check_divisible(image.h(), image.w(), levels)?;
        let mut details = Vec::with_capacity(levels);
        let mut current = image.clone();
        for _ in 0..levels {
            let (approx, detail) = self.encode(&current)?;
            details.push(detail);
            current = approx;
        }
        Ok(PyramidDecomposition {
            details,
            coarsest: current,
        })
    }

    /// Folds [`LpaeParams::decode`] from the coarsest level outward.
    pub fn decode_pyramid(&self, pyramid: &PyramidDecomposition) -> Result<Tensor4> {
        pyramid.validate()?;
        let mut current = pyramid.coarsest.clone();
        for detail in pyramid.details.iter().rev() {
            current = detail.add(&self.predict(&current)?)?;
        }
        Ok(current)
    }

    pub fn decode_pyramid_forward(&self, pyramid: &PyramidDecomposition) -> Result<(Tensor4, DecodeTape)> {
        pyramid.validate()?;
        let mut current = pyramid.coarsest.clone();
        let mut levels = Vec::with_capacity(pyramid.levels());
        for detail in pyramid.details.iter().rev() {
            let (pred, tape) = self.decoder.forward(&current)?;
            levels.push(tape);
            current = detail.add(&pred)?;
        }
        levels.reverse();
        Ok((current, DecodeTape { levels }))
    }

    /// Gradient of a loss on the decoded image with respect to every pyramid
    /// component; decoder gradients are accumulated into `acc` when given.
    pub fn decode_pyramid_backward(
        &self,
        tape: &DecodeTape,
        grad_out: &Tensor4,
        mut acc: Option<&mut ConvStack>,
    ) -> Result<PyramidDecomposition> {
        let mut details = Vec::with_capacity(tape.levels.len());
        let mut grad = grad_out.clone();
        for level in &tape.levels {
            details.push(grad.clone());
            grad = self
                .decoder
                .backward_accumulate(level, &grad, acc.as_deref_mut(), true)?
                .expect("input gradient requested");
        }
        Ok(PyramidDecomposition {
            details,
            coarsest: grad,
        })
    }

    /// Forward pass keeping every activation needed by [`LpaeParams::backward`].
    pub fn forward_with_tape(&self, image: &Tensor4) -> Result<(LpaeOutput, LpaeTape)> {
        Self::check_image(image)?;
        let (approx, approx_tape) = self.approx.forward(image)?;
        let joined = Tensor4::concat_channels(image, &approx.nearest_up2())?;
        let (detail, detail_tape) = self.detail.forward(&joined)?;
        let (prediction, decoder_tape) = self.decoder.forward(&approx)?;
        let recon = detail.add(&prediction)?;
        Ok((
            LpaeOutput {
                approx,
                detail,
                prediction,
                recon,
            },
            LpaeTape {
                approx: approx_tape,
                detail: detail_tape,
                decoder: decoder_tape,
            },
        ))
    }

    /// Backpropagates gradients given on `I_c`, `I_d` and `I'` into parameter gradients.
    pub fn backward(
        &self,
        tape: &LpaeTape,
        grad_approx: &Tensor4,
        grad_detail: &Tensor4,
        grad_recon: &Tensor4,
    ) -> Result<LpaeParams> {
        let mut grads = self.zeros_like();
        let mut g_approx = self
            .decoder
            .backward_accumulate(&tape.decoder, grad_recon, Some(&mut grads.decoder), true)?
            .expect("input gradient requested");
        let g_detail = grad_detail.add(grad_recon)?;
        let g_joined = self
            .detail
            .backward_accumulate(&tape.detail, &g_detail, Some(&mut grads.detail), true)?
            .expect("input gradient requested");
        let (_, g_up) = g_joined.split_channels(IMAGE_CHANNELS)?;
        g_approx.add_assign(&g_up.nearest_up2_backward()?)?;
        g_approx.add_assign(grad_approx)?;
        self.approx
            .backward_accumulate(&tape.approx, &g_approx, Some(&mut grads.approx), false)?;
        Ok(grads)
    }

    /// Loss terms for a batch, with the bicubic half-size image as energy target.
    pub fn loss_terms(&self, image: &Tensor4) -> Result<(LpaeLossTerms, LpaeOutput)> {
        let out = self.forward(image)?;
        let terms = loss_terms(image, &out)?;
        Ok((terms, out))
    }

    /// Loss terms and the gradient of `weights`-weighted total with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        image: &Tensor4,
        weights: &LpaeLossWeights,
    ) -> Result<(LpaeLossTerms, LpaeParams, LpaeOutput)> {
        let (out, tape) = self.forward_with_tape(image)?;
        let target = bicubic_down2(image)?;
        let (l_r, g_r) = losses::reconstruction(image, &out.recon)?;
        let (l_e, g_e) = losses::energy(&out.approx, &target)?;
        let (l_s, g_s) = losses::sparsity(&out.detail)?;
        let grads = self.backward(
            &tape,
            &g_e.scale(weights.beta),
            &g_s.scale(weights.gamma),
            &g_r.scale(weights.alpha),
        )?;
        let terms = LpaeLossTerms {
            reconstruction: l_r,
            energy: l_e,
            sparsity: l_s,
        };
        Ok((terms, grads, out))
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        layers_to_tensors(self.named_layers())
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let mut params = Self::from_seed(0)?;
        let names: Vec<String> = params.named_layers().into_iter().map(|(n, _)| n).collect();
        fill_layers(names.iter().map(String::as_str).zip(params.layers_mut()), tensors)?;
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(MAGIC_LPAE, &self.to_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, MAGIC_LPAE, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&container::load(path, MAGIC_LPAE)?)
    }
}

impl Parameters for LpaeParams {
    fn layers(&self) -> Vec<&ConvLayer> {
        self.approx
            .layers
            .iter()
            .chain(&self.detail.layers)
            .chain(&self.decoder.layers)
            .collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.approx
            .layers
            .iter_mut()
            .chain(&mut self.detail.layers)
            .chain(&mut self.decoder.layers)
            .collect()
    }
}

pub fn loss_terms(image: &Tensor4, out: &LpaeOutput) -> Result<LpaeLossTerms> {
    let target = bicubic_down2(image)?;
    Ok(LpaeLossTerms {
        reconstruction: losses::reconstruction(image, &out.recon)?.0,
        energy: losses::energy(&out.approx, &target)?.0,
        sparsity: losses::sparsity(&out.detail)?.0,
    })
}

/// `l_total` of a finished forward pass.
pub fn loss_lpae_total(image: &Tensor4, out: &LpaeOutput, weights: &LpaeLossWeights) -> Result<f64> {
    Ok(loss_terms(image, out)?.total(weights))
}

fn check_level_pair(approx: &Tensor4, detail: &Tensor4) -> Result<()> {
    let (a, d) = (approx.shape(), detail.shape());
    if a[0] != d[0] || a[1] != d[1] || d[2] != 2 * a[2] || d[3] != 2 * a[3] {
        return Err(Error::ShapeMismatch {
            op: "decode (detail must be twice the approximation size)",
            left: a,
            right: d,
        });
    }
    Ok(())
}

/// `name.weight` / `name.bias` records for each layer.
pub(crate) fn layers_to_tensors(layers: Vec<(String, &ConvLayer)>) -> Vec<NamedTensor> {
    let mut out = Vec::with_capacity(2 * layers.len());
    for (name, layer) in layers {
        out.push(NamedTensor::from_tensor(format!("{name}.weight"), &layer.weight));
        out.push(NamedTensor::new(
            format!("{name}.bias"),
            vec![layer.bias.len()],
            layer.bias.clone(),
        ));
    }
    out
}

/// Copies records into layers whose geometry is already known, checking the
/// name and shape table exactly.
pub(crate) fn fill_layers<'a>(
    layers: impl Iterator<Item = (&'a str, &'a mut ConvLayer)>,
    tensors: &[NamedTensor],
) -> Result<()> {
    let mut records = tensors.iter();
    let mut expected = 0;
    for (name, layer) in layers {
        expected += 2;
        let w = records
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}.weight")))?;
        let b = records
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {name}.bias")))?;
        let want_w = format!("{name}.weight");
        let want_b = format!("{name}.bias");
        if w.name != want_w || w.dims != layer.weight.shape() {
            return Err(Error::Checkpoint(format!(
                "expected {want_w} {:?}, found {} {:?}",
                layer.weight.shape(),
                w.name,
                w.dims
            )));
        }
        if b.name != want_b || b.dims != [layer.bias.len()] {
            return Err(Error::Checkpoint(format!(
                "expected {want_b} [{}], found {} {:?}",
                layer.bias.len(),
                b.name,
                b.dims
            )));
        }
        layer.weight = w.to_tensor()?;
        layer.bias = b.values.clone();
    }
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} tensors, found {}",
            tensors.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params() -> LpaeParams {
        let mut p = LpaeParams::from_seed(1).unwrap();
        for layer in p.layers_mut() {
            *layer = layer.zeros_like();
        }
        p
    }

    #[test]
    fn parameter_count() {
        let p = LpaeParams::from_seed(0).unwrap();
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let expect = conv(3, 16, 3) + 2 * conv(16, 16, 3) + conv(16, 3, 3)
            + conv(6, 16, 3) + 2 * conv(16, 16, 3) + conv(16, 3, 3)
            + conv(3, 16, 4) + 2 * conv(16, 16, 3) + conv(16, 3, 3);
        assert_eq!(expect, LPAE_PARAM_COUNT);
        assert_eq!(p.param_count(), LPAE_PARAM_COUNT);
    }

    #[test]
    fn encode_shapes() {
        let p = LpaeParams::from_seed(2).unwrap();
        let img = Rng::new(3).uniform_tensor([1, 3, 64, 64], 0.0, 1.0);
        let (c, d) = p.encode(&img).unwrap();
        assert_eq!(c.shape(), [1, 3, 32, 32]);
        assert_eq!(d.shape(), [1, 3, 64, 64]);
        assert_eq!(p.decode(&c, &d).unwrap().shape(), img.shape());
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let p = LpaeParams::from_seed(2).unwrap();
        assert!(p.encode(&Tensor4::zeros([1, 3, 7, 8])).is_err());
        assert!(p.encode(&Tensor4::zeros([1, 1, 8, 8])).is_err());
        assert!(p
            .decode(&Tensor4::zeros([1, 3, 4, 4]), &Tensor4::zeros([1, 3, 6, 8]))
            .is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = zero_params();
        let img = Rng::new(4).uniform_tensor([2, 3, 8, 8], 0.0, 1.0);
        let (c, d) = p.encode(&img).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let img = Rng::new(5).uniform_tensor([1, 3, 16, 16], 0.0, 1.0);
        let a = LpaeParams::from_seed(9).unwrap().encode(&img).unwrap();
        let b = LpaeParams::from_seed(9).unwrap().encode(&img).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn zero_approx_and_bias_decodes_to_detail() {
        let mut p = LpaeParams::from_seed(6).unwrap();
        for layer in &mut p.decoder.layers {
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let d = Rng::new(7).uniform_tensor([1, 3, 8, 8], -1.0, 1.0);
        assert_eq!(p.decode(&Tensor4::zeros([1, 3, 4, 4]), &d).unwrap(), d);
    }

    #[test]
    fn detail_is_an_additive_skip() {
        let p = LpaeParams::from_seed(8).unwrap();
        let mut rng = Rng::new(9);
        let c = rng.uniform_tensor([1, 3, 4, 4], 0.0, 1.0);
        let d = rng.uniform_tensor([1, 3, 8, 8], -0.1, 0.1);
        let base = p.decode(&c, &d).unwrap();
        let mut d2 = d.clone();
        let i = d2.offset(0, 1, 3, 5);
        d2.data_mut()[i] += 0.25;
        let moved = p.decode(&c, &d2).unwrap();
        let delta = moved.sub(&base).unwrap();
        for (j, v) in delta.data().iter().enumerate() {
            if j == i {
                assert!((v - 0.25).abs() < 1e-15);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn recon_minus_detail_is_prediction() {
        let p = LpaeParams::from_seed(10).unwrap();
        let img = Rng::new(11).uniform_tensor([2, 3, 16, 16], 0.0, 1.0);
        let out = p.forward(&img).unwrap();
        assert_eq!(out.recon, out.detail.add(&out.prediction).unwrap());
        assert_eq!(out.prediction, p.predict(&out.approx).unwrap());
    }

    #[test]
    fn pyramid_shapes_and_single_level() {
        let p = LpaeParams::from_seed(12).unwrap();
        let img = Rng::new(13).uniform_tensor([1, 3, 64, 64], 0.0, 1.0);
        let pyr = p.encode_pyramid(&img, 3).unwrap();
        let sizes: Vec<_> = pyr.details.iter().map(|d| d.h()).collect();
        assert_eq!(sizes, vec![64, 32, 16]);
        assert_eq!(pyr.coarsest.h(), 8);

        let one = p.encode_pyramid(&img, 1).unwrap();
        let (c, d) = p.encode(&img).unwrap();
        assert_eq!(one.coarsest, c);
        assert_eq!(one.details[0], d);
        assert_eq!(p.decode_pyramid(&one).unwrap(), p.decode(&c, &d).unwrap());

        assert!(matches!(
            p.encode_pyramid(&Tensor4::zeros([1, 3, 24, 24]), 4),
            Err(Error::Indivisible { divisor: 16, .. })
        ));
    }

    #[test]
    fn decode_pyramid_matches_loop_of_single_levels() {
        let p = LpaeParams::from_seed(14).unwrap();
        let img = Rng::new(15).uniform_tensor([1, 3, 32, 32], 0.0, 1.0);
        let pyr = p.encode_pyramid(&img, 3).unwrap();
        let mut cur = pyr.coarsest.clone();
        for k in (0..3).rev() {
            cur = p.decode(&cur, &pyr.details[k]).unwrap();
        }
        assert_eq!(p.decode_pyramid(&pyr).unwrap(), cur);
        let (taped, _) = p.decode_pyramid_forward(&pyr).unwrap();
        assert_eq!(taped, cur);
    }

    #[test]
    fn zero_details_decode_to_iterated_prediction() {
        let p = LpaeParams::from_seed(16).unwrap();
        let z = Rng::new(17).uniform_tensor([1, 3, 4, 4], 0.0, 1.0);
        let pyr = PyramidDecomposition {
            details: vec![Tensor4::zeros([1, 3, 16, 16]), Tensor4::zeros([1, 3, 8, 8])],
            coarsest: z.clone(),
        };
        let expect = p.predict(&p.predict(&z).unwrap()).unwrap();
        assert_eq!(p.decode_pyramid(&pyr).unwrap(), expect);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.lpae");
        let p = LpaeParams::from_seed(7).unwrap();
        p.save(&path).unwrap();
        let q = LpaeParams::load(&path).unwrap();
        assert_eq!(p, q);
        let img = Rng::new(1).uniform_tensor([1, 3, 16, 16], 0.0, 1.0);
        assert_eq!(p.forward(&img).unwrap().recon, q.forward(&img).unwrap().recon);
        assert_eq!(q.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_shape_table_is_enforced() {
        let p = LpaeParams::from_seed(7).unwrap();
        let mut tensors = p.to_tensors();
        tensors[2].dims = vec![1, 16, 16, 9];
        assert!(LpaeParams::from_tensors(&tensors).is_err());
        let mut tensors = p.to_tensors();
        tensors.swap(0, 1);
        assert!(LpaeParams::from_tensors(&tensors).is_err());
        let mut tensors = p.to_tensors();
        tensors.pop();
        assert!(LpaeParams::from_tensors(&tensors).is_err());
    }
}
