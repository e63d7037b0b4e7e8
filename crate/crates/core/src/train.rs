//! Training loops for the autoencoder and the super-resolution embedding.
//!
//! Both loops sample random crops, step once per batch and report one log
//! row per epoch (`steps_per_epoch` batches). Held-out metrics are computed
//! on fixed crops every `eval_every` epochs and after the last step.

use crate::analysis::psnr;
use crate::error::{Error, Result};
use crate::image_io::{sample_batch, SampleConfig};
use crate::losses::LpaeLossTerms;
use crate::model::LpaeParams;
use crate::optim::{Optimizer, TrainConfig};
use crate::pyramid::{bicubic_down2, bicubic_up, bicubic_up2, check_divisible};
use crate::sr::{evaluation_input, sr_forward, EmbedParams, SrConfig, SrTrainer};
use crate::tensor::{Rng, Tensor4};

/// Center crops of `size x size` from every image, stacked into one batch.
pub fn holdout_batch(images: &[Tensor4], size: usize) -> Result<Tensor4> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let crops = images
        .iter()
        .map(|img| {
            if img.h() < size || img.w() < size {
                return Err(Error::InvalidShape(format!(
                    "held-out image {}x{} smaller than crop {size}",
                    img.h(),
                    img.w()
                )));
            }
            img.select(0).crop((img.h() - size) / 2, (img.w() - size) / 2, size, size)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor4::stack(&crops)
}

fn sample_config(cfg: &TrainConfig) -> SampleConfig {
    SampleConfig {
        crop_size: cfg.crop_size,
        flip_h: cfg.flip_h,
        flip_v: cfg.flip_v,
        batch: cfg.batch,
    }
}

fn should_eval(cfg: &TrainConfig, epoch: usize, last: bool) -> bool {
    last || (epoch + 1).is_multiple_of(cfg.eval_every)
}

/// Held-out quality of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpaeEval {
    /// Reconstruction vs original.
    pub psnr: f64,
    /// Bicubic down-then-up vs original.
    pub bicubic_psnr: f64,
    /// Approximation vs bicubic half-size image.
    pub approx_psnr: f64,
    /// `mean(I_d^2)`.
    pub detail_energy: f64,
    pub total: f64,
}

pub fn evaluate_lpae(params: &LpaeParams, images: &Tensor4, cfg: &TrainConfig) -> Result<LpaeEval> {
    let (terms, out) = params.loss_terms(images)?;
    let down = bicubic_down2(images)?;
    Ok(LpaeEval {
        psnr: psnr(&out.recon, images, 1.0)?,
        bicubic_psnr: psnr(&bicubic_up2(&down)?, images, 1.0)?,
        approx_psnr: psnr(&out.approx, &down, 1.0)?,
        detail_energy: terms.sparsity,
        total: terms.total(&cfg.loss),
    })
}

/// One row of the autoencoder log: training terms averaged over the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LpaeEpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub terms: LpaeLossTerms,
    pub total: f64,
    pub eval: Option<LpaeEval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpaeRun {
    pub epochs: Vec<LpaeEpochLog>,
    /// `l_total` of the first training batch, before any update.
    pub initial_loss: f64,
    pub initial_eval: Option<LpaeEval>,
    pub final_eval: Option<LpaeEval>,
}

impl LpaeRun {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.total)
    }
}

/// Trains `params` in place for `cfg.steps` batches.
pub fn train_lpae(
    params: &mut LpaeParams,
    corpus: &[Tensor4],
    holdout: Option<&Tensor4>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&LpaeEpochLog),
) -> Result<LpaeRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_divisible(cfg.crop_size, cfg.crop_size, 1)?;
    let sampling = sample_config(cfg);
    let per_epoch = cfg.steps_per_epoch(corpus.len());
    let mut opt = Optimizer::new(cfg, params);
    let initial_eval = holdout.map(|h| evaluate_lpae(params, h, cfg)).transpose()?;
    let mut run = LpaeRun {
        epochs: Vec::new(),
        initial_loss: f64::NAN,
        initial_eval,
        final_eval: None,
    };
    let mut sum = LpaeLossTerms::default();
    let mut in_epoch = 0;
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let lr = cfg.lr_at(epoch);
        let batch = sample_batch(corpus, &sampling, rng)?;
        let (terms, grads, _) = params.loss_and_grad(&batch, &cfg.loss)?;
        let total = terms.total(&cfg.loss);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if step == 0 {
            run.initial_loss = total;
        }
        opt.step(params, &grads, lr)?;
        sum.reconstruction += terms.reconstruction;
        sum.energy += terms.energy;
        sum.sparsity += terms.sparsity;
        in_epoch += 1;
        let last = step + 1 == cfg.steps;
        if (step + 1) % per_epoch == 0 || last {
            let k = in_epoch as f64;
            let terms = LpaeLossTerms {
                reconstruction: sum.reconstruction / k,
                energy: sum.energy / k,
                sparsity: sum.sparsity / k,
            };
            let eval = match holdout {
                Some(h) if should_eval(cfg, epoch, last) => Some(evaluate_lpae(params, h, cfg)?),
                _ => None,
            };
            let log = LpaeEpochLog {
                epoch,
                step: step + 1,
                lr,
                terms,
                total: terms.total(&cfg.loss),
                eval,
            };
            on_epoch(&log);
            if last {
                run.final_eval = eval;
            }
            run.epochs.push(log);
            sum = LpaeLossTerms::default();
            in_epoch = 0;
        }
    }
    Ok(run)
}

/// Held-out quality of super-resolution against the bicubic baseline on the same input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrEval {
    pub psnr: f64,
    pub bicubic_psnr: f64,
}

pub fn evaluate_sr(embed: &EmbedParams, lpae: &LpaeParams, hr: &Tensor4) -> Result<SrEval> {
    let levels = embed.levels();
    let lr = evaluation_input(lpae, hr, levels)?;
    let (sr, _) = sr_forward(embed, lpae, &lr, levels)?;
    Ok(SrEval {
        psnr: psnr(&sr, hr, 1.0)?,
        bicubic_psnr: psnr(&bicubic_up(&lr, levels)?, hr, 1.0)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrEpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub reconstruction: f64,
    pub approx_l1: f64,
    pub detail_l1: Vec<f64>,
    pub eval: Option<SrEval>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrRun {
    pub epochs: Vec<SrEpochLog>,
    pub initial_loss: f64,
    pub initial_eval: Option<SrEval>,
    pub final_eval: Option<SrEval>,
}

impl SrRun {
    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.total)
    }
}

/// Trains the embedding (and the decoder if not frozen) for `cfg.steps` batches.
pub fn train_sr(
    embed: &mut EmbedParams,
    lpae: &mut LpaeParams,
    corpus: &[Tensor4],
    holdout: Option<&Tensor4>,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&SrEpochLog),
) -> Result<SrRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sr_cfg = SrConfig::from_train(cfg)?;
    if embed.levels() != sr_cfg.levels {
        return Err(Error::Config(format!(
            "embedding has {} levels but sr_scale asks for {}",
            embed.levels(),
            sr_cfg.levels
        )));
    }
    check_divisible(cfg.crop_size, cfg.crop_size, sr_cfg.levels)?;
    let levels = sr_cfg.levels;
    let sampling = sample_config(cfg);
    let per_epoch = cfg.steps_per_epoch(corpus.len());
    let mut trainer = SrTrainer::new(cfg, sr_cfg, embed, lpae);
    let initial_eval = holdout.map(|h| evaluate_sr(embed, lpae, h)).transpose()?;
    let mut run = SrRun {
        epochs: Vec::new(),
        initial_loss: f64::NAN,
        initial_eval,
        final_eval: None,
    };
    let (mut total, mut rec, mut approx) = (0.0, 0.0, 0.0);
    let mut detail = vec![0.0; levels];
    let mut in_epoch = 0;
    for step in 0..cfg.steps {
        let epoch = step / per_epoch;
        let lr = cfg.lr_at(epoch);
        let batch = sample_batch(corpus, &sampling, rng)?;
        let r = trainer.step(embed, lpae, &batch, lr)?;
        if step == 0 {
            run.initial_loss = r.total;
        }
        total += r.total;
        rec += r.reconstruction;
        approx += r.approx_l1;
        detail.iter_mut().zip(&r.detail_l1).for_each(|(a, b)| *a += b);
        in_epoch += 1;
        let last = step + 1 == cfg.steps;
        if (step + 1) % per_epoch == 0 || last {
            let k = in_epoch as f64;
            let eval = match holdout {
                Some(h) if should_eval(cfg, epoch, last) => Some(evaluate_sr(embed, lpae, h)?),
                _ => None,
            };
            let log = SrEpochLog {
                epoch,
                step: step + 1,
                lr,
                total: total / k,
                reconstruction: rec / k,
                approx_l1: approx / k,
                detail_l1: detail.iter().map(|d| d / k).collect(),
                eval,
            };
            on_epoch(&log);
            if last {
                run.final_eval = eval;
            }
            run.epochs.push(log);
            (total, rec, approx) = (0.0, 0.0, 0.0);
            detail.fill(0.0);
            in_epoch = 0;
        }
    }
    Ok(run)
}
