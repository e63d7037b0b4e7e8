//! Loss terms and their gradients.
//!
//! Every norm is normalized by the element count of its argument, so each
//! term is a mean over all `n*c*h*w` entries. The L1 subgradient at zero is 0.

use crate::error::{Error, Result};
use crate::pyramid::PyramidDecomposition;
use crate::tensor::Tensor4;

/// Weights of the autoencoder objective `alpha*l_r + beta*l_e + gamma*l_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpaeLossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LpaeLossWeights {
    fn default() -> Self {
        LpaeLossWeights {
            alpha: 1.0,
            beta: 0.8,
            gamma: 1.0,
        }
    }
}

impl LpaeLossWeights {
    pub fn scaled(&self, s: f64) -> Self {
        LpaeLossWeights {
            alpha: self.alpha * s,
            beta: self.beta * s,
            gamma: self.gamma * s,
        }
    }
}

/// Individual autoencoder loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LpaeLossTerms {
    pub reconstruction: f64,
    pub energy: f64,
    pub sparsity: f64,
}

impl LpaeLossTerms {
    pub fn total(&self, w: &LpaeLossWeights) -> f64 {
        w.alpha * self.reconstruction + w.beta * self.energy + w.gamma * self.sparsity
    }
}

/// Weights of the super-resolution objective `gamma*l_rec + delta*l_p`.
///
/// `lambdas[i]` weighs the detail term of pyramid level `i + 1` (finest first).
#[derive(Clone, Debug, PartialEq)]
pub struct LpsrLossWeights {
    pub gamma: f64,
    pub delta: f64,
    pub lambdas: Vec<f64>,
}

impl LpsrLossWeights {
    /// Defaults for a `levels`-deep pyramid: `gamma = 1`, `delta = 10`,
    /// `lambda = 0.8, 1.2, 1.6, ...`.
    pub fn for_levels(levels: usize) -> Self {
        LpsrLossWeights {
            gamma: 1.0,
            delta: 10.0,
            lambdas: (0..levels).map(|i| (8 + 4 * i) as f64 / 10.0).collect(),
        }
    }
}

fn count(t: &Tensor4, op: &'static str) -> Result<f64> {
    if t.is_empty() {
        return Err(Error::Empty(op));
    }
    Ok(t.len() as f64)
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn mean_abs_error(target: &Tensor4, pred: &Tensor4) -> Result<(f64, Tensor4)> {
    pred.ensure_same_shape(target, "l1 loss")?;
    let n = count(pred, "l1 loss")?;
    let mut sum = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, Tensor4::from_vec(pred.shape(), grad)?))
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mean_sq_error(target: &Tensor4, pred: &Tensor4) -> Result<(f64, Tensor4)> {
    pred.ensure_same_shape(target, "l2 loss")?;
    let n = count(pred, "l2 loss")?;
    let mut sum = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, Tensor4::from_vec(pred.shape(), grad)?))
}

/// `l_r = mean|I - I'|`, gradient with respect to the reconstruction `I'`.
pub fn reconstruction(original: &Tensor4, recon: &Tensor4) -> Result<(f64, Tensor4)> {
    mean_abs_error(original, recon)
}

/// `l_e = mean (I_c - I_down)^2`, gradient with respect to `I_c`.
pub fn energy(approx: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    mean_sq_error(target, approx)
}

/// `l_s = mean I_d^2`, gradient with respect to `I_d`.
pub fn sparsity(detail: &Tensor4) -> Result<(f64, Tensor4)> {
    let n = count(detail, "sparsity loss")?;
    let value = detail.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((value, detail.scale(2.0 / n)))
}

/// Value and gradients of the super-resolution objective.
#[derive(Clone, Debug)]
pub struct LpsrLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub approx_l1: f64,
    pub detail_l1: Vec<f64>,
    /// Gradient with respect to the predicted pyramid (details and coarsest).
    pub grad_pred: PyramidDecomposition,
    /// Gradient with respect to the reconstruction `I'`.
    pub grad_recon: Tensor4,
}

impl LpsrLoss {
    pub fn pyramid(&self, w: &LpsrLossWeights) -> f64 {
        pyramid_term(self.approx_l1, &self.detail_l1, w)
    }
}

fn pyramid_term(approx_l1: f64, detail_l1: &[f64], w: &LpsrLossWeights) -> f64 {
    approx_l1
        + w.lambdas
            .iter()
            .zip(detail_l1)
            .map(|(l, d)| l * d)
            .sum::<f64>()
}

/// `gamma * l_rec + delta * (l1(I_c) + sum_i lambda_i * l1(I_d_i))` from precomputed terms.
pub fn lpsr_total(reconstruction: f64, approx_l1: f64, detail_l1: &[f64], w: &LpsrLossWeights) -> Result<f64> {
    if detail_l1.len() != w.lambdas.len() {
        return Err(Error::InvalidShape(format!(
            "{} detail levels but {} lambdas",
            detail_l1.len(),
            w.lambdas.len()
        )));
    }
    Ok(w.gamma * reconstruction + w.delta * pyramid_term(approx_l1, detail_l1, w))
}

pub fn lpsr(
    pred: &PyramidDecomposition,
    target: &PyramidDecomposition,
    original: &Tensor4,
    recon: &Tensor4,
    w: &LpsrLossWeights,
) -> Result<LpsrLoss> {
    if pred.levels() != target.levels() {
        return Err(Error::InvalidShape(format!(
            "predicted {} levels, target has {}",
            pred.levels(),
            target.levels()
        )));
    }
    if w.lambdas.len() != pred.levels() {
        return Err(Error::InvalidShape(format!(
            "{} lambdas for {} levels",
            w.lambdas.len(),
            pred.levels()
        )));
    }
    let (rec, g_rec) = mean_abs_error(original, recon)?;
    let (approx_l1, g_approx) = mean_abs_error(&target.coarsest, &pred.coarsest)?;
    let mut detail_l1 = Vec::with_capacity(pred.levels());
    let mut detail_grads = Vec::with_capacity(pred.levels());
    for ((p, t), lambda) in pred.details.iter().zip(&target.details).zip(&w.lambdas) {
        let (v, g) = mean_abs_error(t, p)?;
        detail_l1.push(v);
        detail_grads.push(g.scale(w.delta * lambda));
    }
    let total = lpsr_total(rec, approx_l1, &detail_l1, w)?;
    Ok(LpsrLoss {
        total,
        reconstruction: rec,
        approx_l1,
        detail_l1,
        grad_pred: PyramidDecomposition {
            details: detail_grads,
            coarsest: g_approx.scale(w.delta),
        },
        grad_recon: g_rec.scale(w.gamma),
    })
}
