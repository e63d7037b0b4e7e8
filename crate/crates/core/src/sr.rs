//! Pyramid super-resolution.
//!
//! A small embedding network maps a low-resolution image to a predicted
//! pyramid (one approximation at input size, one detail per level), and the
//! autoencoder's decoder folds that pyramid into an image `2^K` times larger.
//!
//! ```text
//! stem:    conv 3->C, ReLU
//! body:    B residual blocks  h <- h + conv(ReLU(conv(h)))
//! approx:  conv C->3                                   (input size)
//! detail k (k = 1 finest .. K):
//!          (K-k+1) x [4x4 stride-2 transposed conv C->C, ReLU], conv C->3
//! ```
//!
//! Training targets are the autoencoder's own pyramid of the high-resolution
//! crop, and the network input is that pyramid's coarsest approximation.

use std::path::Path;

use crate::container::{self, NamedTensor, MAGIC_LPSR};
use crate::error::{Error, Result};
use crate::image_io;
use crate::losses::{self, LpsrLoss, LpsrLossWeights};
use crate::model::{self, LpaeParams, IMAGE_CHANNELS};
use crate::nn::{relu_backward, relu_forward, ConvLayer, ConvStack, ConvTape, Parameters, ReluTape, StackTape};
use crate::optim::{Optimizer, TrainConfig};
use crate::pyramid::{bicubic_up, check_divisible, PyramidDecomposition};
use crate::tensor::{Rng, Tensor4};

pub const MAX_LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub stem: ConvLayer,
    pub blocks: Vec<ConvStack>,
    pub approx_head: ConvLayer,
    /// Finest level first; head `k` (0-based) has `levels - k` upsamplers.
    pub detail_heads: Vec<ConvStack>,
}

/// Pyramid depth, decoder policy and loss weights of a super-resolution run.
#[derive(Clone, Debug, PartialEq)]
pub struct SrConfig {
    pub levels: usize,
    pub freeze_decoder: bool,
    pub weights: LpsrLossWeights,
}

impl SrConfig {
    pub fn new(levels: usize) -> Result<Self> {
        check_levels(levels)?;
        Ok(SrConfig {
            levels,
            freeze_decoder: true,
            weights: LpsrLossWeights::for_levels(levels),
        })
    }

    pub fn from_train(cfg: &TrainConfig) -> Result<Self> {
        let levels = cfg.sr_levels();
        check_levels(levels)?;
        Ok(SrConfig {
            levels,
            freeze_decoder: cfg.sr_freeze_decoder,
            weights: LpsrLossWeights {
                gamma: cfg.sr_gamma,
                delta: cfg.sr_delta,
                lambdas: cfg
                    .sr_lambdas
                    .clone()
                    .unwrap_or_else(|| LpsrLossWeights::for_levels(levels).lambdas),
            },
        })
    }

    pub fn scale(&self) -> usize {
        1 << self.levels
    }
}

fn check_levels(levels: usize) -> Result<()> {
    if levels == 0 || levels > MAX_LEVELS {
        return Err(Error::Config(format!(
            "super-resolution needs 1..={MAX_LEVELS} levels (scale 2, 4 or 8), got {levels}"
        )));
    }
    Ok(())
}

pub struct EmbedTape {
    stem: ConvTape,
    stem_relu: ReluTape,
    blocks: Vec<StackTape>,
    approx: ConvTape,
    details: Vec<StackTape>,
}

impl EmbedParams {
    pub fn init(levels: usize, channels: usize, blocks: usize, rng: &mut Rng) -> Result<Self> {
        check_levels(levels)?;
        if channels == 0 {
            return Err(Error::Config("embedding needs at least one channel".into()));
        }
        let c = IMAGE_CHANNELS;
        let stem = ConvLayer::conv3x3(c, channels, 1, rng)?;
        let blocks = (0..blocks)
            .map(|_| {
                Ok(ConvStack::new(vec![
                    ConvLayer::conv3x3(channels, channels, 1, rng)?,
                    ConvLayer::conv3x3(channels, channels, 1, rng)?,
                ]))
            })
            .collect::<Result<Vec<_>>>()?;
        let approx_head = ConvLayer::conv3x3(channels, c, 1, rng)?;
        let mut detail_heads = Vec::with_capacity(levels);
        for k in 0..levels {
            let mut layers = Vec::with_capacity(levels - k + 1);
            for _ in 0..levels - k {
                layers.push(ConvLayer::up4x4(channels, channels, rng)?);
            }
            layers.push(ConvLayer::conv3x3(channels, c, 1, rng)?);
            detail_heads.push(ConvStack::new(layers));
        }
        let mut params = EmbedParams {
            stem,
            blocks,
            approx_head,
            detail_heads,
        };
        params.round_to_f32();
        Ok(params)
    }

    pub fn from_config(cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        Self::init(cfg.sr_levels(), cfg.sr_channels, cfg.sr_blocks, rng)
    }

    pub fn levels(&self) -> usize {
        self.detail_heads.len()
    }

    pub fn channels(&self) -> usize {
        self.stem.out_channels()
    }

    pub fn zeros_like(&self) -> Self {
        EmbedParams {
            stem: self.stem.zeros_like(),
            blocks: self.blocks.iter().map(ConvStack::zeros_like).collect(),
            approx_head: self.approx_head.zeros_like(),
            detail_heads: self.detail_heads.iter().map(ConvStack::zeros_like).collect(),
        }
    }

    pub fn named_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, layer) in block.layers.iter().enumerate() {
                out.push((format!("block{b}.{i}"), layer));
            }
        }
        out.push(("approx_head".to_string(), &self.approx_head));
        for (k, head) in self.detail_heads.iter().enumerate() {
            for (i, layer) in head.layers.iter().enumerate() {
                out.push((format!("detail{}.{i}", k + 1), layer));
            }
        }
        out
    }

    /// Predicted pyramid for a batch of low-resolution images.
    pub fn predict(&self, lr: &Tensor4) -> Result<PyramidDecomposition> {
        Ok(self.forward(lr)?.0)
    }

    pub fn forward(&self, lr: &Tensor4) -> Result<(PyramidDecomposition, EmbedTape)> {
        if lr.c() != IMAGE_CHANNELS {
            return Err(Error::InvalidShape(format!(
                "expected {IMAGE_CHANNELS}-channel input, got {:?}",
                lr.shape()
            )));
        }
        let (s, stem) = self.stem.forward(lr)?;
        let (mut h, stem_relu) = relu_forward(&s);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (r, tape) = block.forward(&h)?;
            h.add_assign(&r)?;
            blocks.push(tape);
        }
        let (coarsest, approx) = self.approx_head.forward(&h)?;
        let mut details = Vec::with_capacity(self.levels());
        let mut detail_tapes = Vec::with_capacity(self.levels());
        for head in &self.detail_heads {
            let (d, tape) = head.forward(&h)?;
            details.push(d);
            detail_tapes.push(tape);
        }
        Ok((
            PyramidDecomposition { details, coarsest },
            EmbedTape {
                stem,
                stem_relu,
                blocks,
                approx,
                details: detail_tapes,
            },
        ))
    }

    /// Parameter gradients from gradients on every predicted component.
    pub fn backward(&self, tape: &EmbedTape, grad: &PyramidDecomposition) -> Result<EmbedParams> {
        if grad.levels() != self.levels() {
            return Err(Error::InvalidShape(format!(
                "{} gradient levels for {} heads",
                grad.levels(),
                self.levels()
            )));
        }
        let mut acc = self.zeros_like();
        let mut g_h = self
            .approx_head
            .backward_accumulate(&tape.approx, &grad.coarsest, Some(&mut acc.approx_head), true)?
            .expect("input gradient requested");
        for (k, head) in self.detail_heads.iter().enumerate() {
            let g = head
                .backward_accumulate(&tape.details[k], &grad.details[k], Some(&mut acc.detail_heads[k]), true)?
                .expect("input gradient requested");
            g_h.add_assign(&g)?;
        }
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let g = block
                .backward_accumulate(&tape.blocks[b], &g_h, Some(&mut acc.blocks[b]), true)?
                .expect("input gradient requested");
            g_h.add_assign(&g)?;
        }
        let g_s = relu_backward(&tape.stem_relu, &g_h)?;
        self.stem
            .backward_accumulate(&tape.stem, &g_s, Some(&mut acc.stem), false)?;
        Ok(acc)
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        model::layers_to_tensors(self.named_layers())
    }

    /// Rebuilds the network, inferring width, depth and level count from the record names.
    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let stem = tensors
            .iter()
            .find(|t| t.name == "stem.weight")
            .ok_or_else(|| Error::Checkpoint("missing stem.weight".into()))?;
        let channels = *stem
            .dims
            .first()
            .ok_or_else(|| Error::Checkpoint("stem.weight has no dims".into()))?;
        let blocks = tensors
            .iter()
            .filter(|t| t.name.starts_with("block") && t.name.ends_with(".0.weight"))
            .count();
        let levels = tensors
            .iter()
            .filter(|t| t.name.starts_with("detail") && t.name.ends_with(".0.weight"))
            .count();
        check_levels(levels).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = Self::init(levels, channels, blocks, &mut Rng::new(0))?;
        let names: Vec<String> = params.named_layers().into_iter().map(|(n, _)| n).collect();
        model::fill_layers(names.iter().map(String::as_str).zip(params.layers_mut()), tensors)?;
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(MAGIC_LPSR, &self.to_tensors())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::save(path, MAGIC_LPSR, &self.to_tensors())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&container::load(path, MAGIC_LPSR)?)
    }
}

impl Parameters for EmbedParams {
    fn layers(&self) -> Vec<&ConvLayer> {
        let mut out = vec![&self.stem];
        out.extend(self.blocks.iter().flat_map(|b| &b.layers));
        out.push(&self.approx_head);
        out.extend(self.detail_heads.iter().flat_map(|h| &h.layers));
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        let mut out = vec![&mut self.stem];
        out.extend(self.blocks.iter_mut().flat_map(|b| &mut b.layers));
        out.push(&mut self.approx_head);
        out.extend(self.detail_heads.iter_mut().flat_map(|h| &mut h.layers));
        out
    }
}

/// Upscales `lr` by `2^levels`: returns the image and the predicted pyramid.
pub fn sr_forward(
    embed: &EmbedParams,
    lpae: &LpaeParams,
    lr: &Tensor4,
    levels: usize,
) -> Result<(Tensor4, PyramidDecomposition)> {
    if levels != embed.levels() {
        return Err(Error::Config(format!(
            "embedding predicts {} levels, {levels} requested",
            embed.levels()
        )));
    }
    let preds = embed.predict(lr)?;
    let image = lpae.decode_pyramid(&preds)?;
    Ok((image, preds))
}

/// Per-term values of one super-resolution step.
#[derive(Clone, Debug, PartialEq)]
pub struct SrStepReport {
    pub total: f64,
    pub reconstruction: f64,
    pub approx_l1: f64,
    pub detail_l1: Vec<f64>,
}

impl From<&LpsrLoss> for SrStepReport {
    fn from(l: &LpsrLoss) -> Self {
        SrStepReport {
            total: l.total,
            reconstruction: l.reconstruction,
            approx_l1: l.approx_l1,
            detail_l1: l.detail_l1.clone(),
        }
    }
}

/// Gradients of one super-resolution loss evaluation.
pub struct SrGrads {
    pub embed: EmbedParams,
    /// Decoder gradients; present only when the decoder is trainable.
    pub decoder: Option<ConvStack>,
}

/// Targets, input, loss and gradients for a high-resolution batch.
pub fn sr_loss_and_grad(
    embed: &EmbedParams,
    lpae: &LpaeParams,
    hr: &Tensor4,
    cfg: &SrConfig,
) -> Result<(SrStepReport, SrGrads)> {
    check_divisible(hr.h(), hr.w(), cfg.levels)?;
    let target = lpae.encode_pyramid(hr, cfg.levels)?;
    let lr = target.coarsest.clone();
    let (preds, embed_tape) = embed.forward(&lr)?;
    let (recon, decode_tape) = lpae.decode_pyramid_forward(&preds)?;
    let loss = losses::lpsr(&preds, &target, hr, &recon, &cfg.weights)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("super-resolution loss".into()));
    }
    let mut decoder = (!cfg.freeze_decoder).then(|| lpae.decoder.zeros_like());
    let through = lpae.decode_pyramid_backward(&decode_tape, &loss.grad_recon, decoder.as_mut())?;
    let grad_pred = loss.grad_pred.add(&through)?;
    let embed_grads = embed.backward(&embed_tape, &grad_pred)?;
    Ok((
        SrStepReport::from(&loss),
        SrGrads {
            embed: embed_grads,
            decoder,
        },
    ))
}

/// Owns the optimizers of a super-resolution run.
pub struct SrTrainer {
    pub cfg: SrConfig,
    embed_opt: Optimizer,
    decoder_opt: Option<Optimizer>,
}

impl SrTrainer {
    pub fn new(train: &TrainConfig, cfg: SrConfig, embed: &EmbedParams, lpae: &LpaeParams) -> Self {
        let decoder_opt = (!cfg.freeze_decoder).then(|| Optimizer::new(train, &lpae.decoder));
        SrTrainer {
            cfg,
            embed_opt: Optimizer::new(train, embed),
            decoder_opt,
        }
    }

    /// One update. With a frozen decoder `lpae` is left untouched.
    pub fn step(
        &mut self,
        embed: &mut EmbedParams,
        lpae: &mut LpaeParams,
        hr: &Tensor4,
        lr: f64,
    ) -> Result<SrStepReport> {
        let (report, grads) = sr_loss_and_grad(embed, lpae, hr, &self.cfg)?;
        self.embed_opt.step(embed, &grads.embed, lr)?;
        if let (Some(opt), Some(g)) = (self.decoder_opt.as_mut(), grads.decoder.as_ref()) {
            opt.step(&mut lpae.decoder, g, lr)?;
        }
        Ok(report)
    }
}

/// Center crop to the largest size divisible by `2^levels`.
pub fn center_crop_to_multiple(image: &Tensor4, levels: usize) -> Result<Tensor4> {
    let m = 1usize << levels;
    let (h, w) = (image.h() / m * m, image.w() / m * m);
    if h == 0 || w == 0 {
        return Err(Error::Indivisible {
            height: image.h(),
            width: image.w(),
            divisor: m,
        });
    }
    image.crop((image.h() - h) / 2, (image.w() - w) / 2, h, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrOutput {
    pub sr: Tensor4,
    pub bicubic: Tensor4,
}

/// Upscales a low-resolution image of any size, with the bicubic baseline.
pub fn upscale(embed: &EmbedParams, lpae: &LpaeParams, lr: &Tensor4) -> Result<SrOutput> {
    let levels = embed.levels();
    let (sr, _) = sr_forward(embed, lpae, lr, levels)?;
    Ok(SrOutput {
        sr,
        bicubic: bicubic_up(lr, levels)?,
    })
}

/// Low-resolution input used for held-out evaluation of a high-resolution
/// image: the autoencoder's coarsest approximation, as in training.
pub fn evaluation_input(lpae: &LpaeParams, hr: &Tensor4, levels: usize) -> Result<Tensor4> {
    Ok(lpae.encode_pyramid(hr, levels)?.coarsest)
}

/// Reads an image, upscales it and writes the result and the bicubic
/// baseline (both quantized to 8 bits).
pub fn super_resolve(
    embed: &EmbedParams,
    lpae: &LpaeParams,
    image_path: impl AsRef<Path>,
    levels: usize,
    out_path: impl AsRef<Path>,
    baseline_path: impl AsRef<Path>,
) -> Result<SrOutput> {
    if levels != embed.levels() {
        return Err(Error::Config(format!(
            "embedding predicts {} levels, {levels} requested",
            embed.levels()
        )));
    }
    let lr = image_io::load_image(image_path)?;
    let out = upscale(embed, lpae, &lr)?;
    image_io::save_image(&out.sr, out_path)?;
    image_io::save_image(&out.bicubic, baseline_path)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_heads(embed: &mut EmbedParams) {
        let zero = |l: &mut ConvLayer| {
            l.weight.data_mut().fill(0.0);
            l.bias.fill(0.0);
        };
        zero(&mut embed.approx_head);
        for head in &mut embed.detail_heads {
            head.layers.iter_mut().for_each(zero);
        }
    }

    fn zero_decoder_bias(lpae: &mut LpaeParams) {
        for l in &mut lpae.decoder.layers {
            l.bias.fill(0.0);
        }
    }

    #[test]
    fn shapes_for_each_depth() {
        let lpae = LpaeParams::from_seed(1).unwrap();
        let mut rng = Rng::new(2);
        for levels in 1..=2 {
            let embed = EmbedParams::init(levels, 8, 1, &mut rng).unwrap();
            let lr = rng.uniform_tensor([1, 3, 8, 8], 0.0, 1.0);
            let (sr, preds) = sr_forward(&embed, &lpae, &lr, levels).unwrap();
            let s = 8 << levels;
            assert_eq!(sr.shape(), [1, 3, s, s]);
            assert_eq!(preds.coarsest.shape(), [1, 3, 8, 8]);
            let hr = rng.uniform_tensor([1, 3, s, s], 0.0, 1.0);
            let target = lpae.encode_pyramid(&hr, levels).unwrap();
            for (p, t) in preds.details.iter().zip(&target.details) {
                assert_eq!(p.shape(), t.shape());
            }
            assert!(sr_forward(&embed, &lpae, &lr, levels + 1).is_err());
        }
    }

    #[test]
    fn zeroed_heads_give_zero_output() {
        let mut lpae = LpaeParams::from_seed(3).unwrap();
        zero_decoder_bias(&mut lpae);
        let mut embed = EmbedParams::init(2, 8, 2, &mut Rng::new(4)).unwrap();
        zero_heads(&mut embed);
        let lr = Rng::new(5).uniform_tensor([2, 3, 4, 4], 0.0, 1.0);
        let (sr, preds) = sr_forward(&embed, &lpae, &lr, 2).unwrap();
        assert!(preds.coarsest.data().iter().all(|&v| v == 0.0));
        assert!(preds.details.iter().all(|d| d.data().iter().all(|&v| v == 0.0)));
        assert!(sr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_infers_geometry() {
        let embed = EmbedParams::init(3, 6, 2, &mut Rng::new(6)).unwrap();
        let bytes = embed.to_bytes().unwrap();
        let back = EmbedParams::from_tensors(&container::decode(&bytes, MAGIC_LPSR).unwrap()).unwrap();
        assert_eq!(back, embed);
        assert_eq!((back.levels(), back.channels(), back.blocks.len()), (3, 6, 2));
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(container::decode(&bytes, container::MAGIC_LPAE).is_err());
    }

    #[test]
    fn frozen_decoder_is_bit_identical() {
        let mut lpae = LpaeParams::from_seed(7).unwrap();
        let before = lpae.clone();
        let train = TrainConfig::default();
        let cfg = SrConfig::new(1).unwrap();
        let mut rng = Rng::new(8);
        let mut embed = EmbedParams::init(1, 8, 1, &mut rng).unwrap();
        let embed_before = embed.clone();
        let mut trainer = SrTrainer::new(&train, cfg, &embed, &lpae);
        for _ in 0..3 {
            let hr = rng.uniform_tensor([2, 3, 8, 8], 0.0, 1.0);
            let r = trainer.step(&mut embed, &mut lpae, &hr, 1e-3).unwrap();
            assert!(r.total.is_finite() && r.total > 0.0);
        }
        assert_eq!(lpae, before);
        assert_ne!(embed, embed_before);
    }

    #[test]
    fn unfrozen_decoder_moves() {
        let mut lpae = LpaeParams::from_seed(9).unwrap();
        let before = lpae.clone();
        let mut cfg = SrConfig::new(1).unwrap();
        cfg.freeze_decoder = false;
        let mut rng = Rng::new(10);
        let mut embed = EmbedParams::init(1, 4, 1, &mut rng).unwrap();
        let mut trainer = SrTrainer::new(&TrainConfig::default(), cfg, &embed, &lpae);
        let hr = rng.uniform_tensor([1, 3, 8, 8], 0.0, 1.0);
        trainer.step(&mut embed, &mut lpae, &hr, 1e-3).unwrap();
        assert_ne!(lpae.decoder, before.decoder);
        assert_eq!(lpae.approx, before.approx);
        assert_eq!(lpae.detail, before.detail);
    }

    #[test]
    fn center_crop_rule() {
        let t = Tensor4::zeros([1, 3, 37, 42]);
        assert_eq!(center_crop_to_multiple(&t, 2).unwrap().shape(), [1, 3, 36, 40]);
        assert!(center_crop_to_multiple(&Tensor4::zeros([1, 3, 3, 8]), 2).is_err());
    }

    #[test]
    fn level_bounds() {
        assert!(SrConfig::new(0).is_err());
        assert!(SrConfig::new(4).is_err());
        assert_eq!(SrConfig::new(3).unwrap().scale(), 8);
        let t = TrainConfig {
            sr_scale: 4,
            ..TrainConfig::default()
        };
        let c = SrConfig::from_train(&t).unwrap();
        assert_eq!(c.weights.lambdas, vec![0.8, 1.2]);
    }
}
