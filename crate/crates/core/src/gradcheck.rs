//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::losses::{self, LpsrLossWeights};
use crate::model::LpaeParams;
use crate::nn::{relu_backward, relu_forward, ConvLayer, ConvStack, Parameters};
use crate::pyramid::PyramidDecomposition;
use crate::sr::{self, EmbedParams, SrConfig};
use crate::tensor::{Rng, Tensor4};

pub const EPSILON: f64 = 1e-5;

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index with the largest error.
    pub worst: Option<usize>,
}

impl CheckReport {
    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = Some(index);
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// `count` distinct indices below `len`, or all of them when `count >= len`.
pub fn sample_indices(rng: &mut Rng, len: usize, count: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if count >= len {
        return all;
    }
    for i in 0..count {
        let j = i + rng.below(len - i);
        all.swap(i, j);
    }
    all.truncate(count);
    all.sort_unstable();
    all
}

/// Compares `analytic` (the gradient of `f` at `x`) with central differences.
pub fn check_tensor(
    x: &Tensor4,
    analytic: &Tensor4,
    indices: &[usize],
    mut f: impl FnMut(&Tensor4) -> Result<f64>,
) -> Result<CheckReport> {
    x.ensure_same_shape(analytic, "gradient check")?;
    let mut report = CheckReport::default();
    let mut probe = x.clone();
    for &i in indices {
        let x0 = x.data()[i];
        probe.data_mut()[i] = x0 + EPSILON;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - EPSILON;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        report.record(i, analytic.data()[i], (up - down) / (2.0 * EPSILON));
    }
    Ok(report)
}

/// Same as [`check_tensor`] over the flat parameter vector of `params`.
pub fn check_params<P: Parameters + Clone>(
    params: &P,
    analytic: &P,
    indices: &[usize],
    mut f: impl FnMut(&P) -> Result<f64>,
) -> Result<CheckReport> {
    let flat = params.flatten();
    let grads = analytic.flatten();
    let mut probe = params.clone();
    let mut values = flat.clone();
    let mut report = CheckReport::default();
    for &i in indices {
        values[i] = flat[i] + EPSILON;
        probe.assign_flat(&values)?;
        let up = f(&probe)?;
        values[i] = flat[i] - EPSILON;
        probe.assign_flat(&values)?;
        let down = f(&probe)?;
        values[i] = flat[i];
        report.record(i, grads[i], (up - down) / (2.0 * EPSILON));
    }
    Ok(report)
}

/// One named check of [`suite`] with its pass threshold.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: CheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn dot(a: &Tensor4, b: &Tensor4) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Pushes values at least `margin` away from zero, so kinks and L1 ties stay
/// out of reach of the finite-difference step.
fn away_from_zero(t: &Tensor4, margin: f64) -> Tensor4 {
    t.map(|v| if v.abs() < margin { v + 2.0 * margin * v.signum().max(0.0) - margin } else { v })
}

fn all(len: usize) -> Vec<usize> {
    (0..len).collect()
}

/// Checks the probe `<stack(x), r>` with respect to the input and every parameter.
fn check_stack(name: &str, stack: &ConvStack, x: &Tensor4, rng: &mut Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let (y, tape) = stack.forward(x)?;
    let r = rng.uniform_tensor(y.shape(), -1.0, 1.0);
    let mut acc = stack.zeros_like();
    let gx = stack
        .backward_accumulate(&tape, &r, Some(&mut acc), true)?
        .expect("input gradient requested");
    let input = check_tensor(x, &gx, &all(x.len()), |t| Ok(dot(&stack.apply(t)?, &r)))?;
    out.push(SuiteEntry {
        name: format!("{name}: input"),
        report: input,
        tolerance: LAYER_TOLERANCE,
    });
    let params = check_params(stack, &acc, &all(stack.param_count()), |p| Ok(dot(&p.apply(x)?, &r)))?;
    out.push(SuiteEntry {
        name: format!("{name}: parameters"),
        report: params,
        tolerance: LAYER_TOLERANCE,
    });
    Ok(())
}

fn layer_checks(rng: &mut Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let x = rng.uniform_tensor([2, 3, 8, 8], -1.0, 1.0);
    let with_bias = |mut l: ConvLayer, rng: &mut Rng| {
        l.bias.iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
        l
    };
    let conv1 = with_bias(ConvLayer::conv3x3(3, 4, 1, rng)?, rng);
    check_stack("conv 3x3 stride 1", &ConvStack::new(vec![conv1]), &x, rng, out)?;
    let conv2 = with_bias(ConvLayer::conv3x3(3, 4, 2, rng)?, rng);
    check_stack("conv 3x3 stride 2", &ConvStack::new(vec![conv2]), &x, rng, out)?;
    let small = rng.uniform_tensor([2, 3, 4, 4], -1.0, 1.0);
    let up = with_bias(ConvLayer::up4x4(3, 4, rng)?, rng);
    check_stack("transposed conv 4x4 stride 2", &ConvStack::new(vec![up]), &small, rng, out)?;
    let stack = ConvStack::new(vec![
        with_bias(ConvLayer::conv3x3(3, 4, 2, rng)?, rng),
        with_bias(ConvLayer::up4x4(4, 4, rng)?, rng),
        with_bias(ConvLayer::conv3x3(4, 3, 1, rng)?, rng),
    ]);
    check_stack("conv stack with ReLU", &stack, &x, rng, out)?;

    let xr = away_from_zero(&x, 0.01);
    let r = rng.uniform_tensor(x.shape(), -1.0, 1.0);
    let (_, tape) = relu_forward(&xr);
    let g = relu_backward(&tape, &r)?;
    out.push(SuiteEntry {
        name: "relu".into(),
        report: check_tensor(&xr, &g, &all(x.len()), |t| Ok(dot(&relu_forward(t).0, &r)))?,
        tolerance: LAYER_TOLERANCE,
    });

    let r = rng.uniform_tensor([2, 3, 16, 16], -1.0, 1.0);
    let g = r.nearest_up2_backward()?;
    out.push(SuiteEntry {
        name: "nearest 2x upsampling".into(),
        report: check_tensor(&x, &g, &all(x.len()), |t| Ok(dot(&t.nearest_up2(), &r)))?,
        tolerance: LAYER_TOLERANCE,
    });
    Ok(())
}

fn loss_checks(rng: &mut Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let shape = [2, 3, 8, 8];
    let target = rng.uniform_tensor(shape, 0.0, 1.0);
    let offset = away_from_zero(&rng.uniform_tensor(shape, -0.3, 0.3), 0.01);
    let pred = target.add(&offset)?;
    let n = target.len();
    let mut push = |name: &str, report| {
        out.push(SuiteEntry {
            name: name.into(),
            report,
            tolerance: LAYER_TOLERANCE,
        })
    };
    let (_, g) = losses::reconstruction(&target, &pred)?;
    push(
        "reconstruction loss (L1)",
        check_tensor(&pred, &g, &all(n), |p| Ok(losses::reconstruction(&target, p)?.0))?,
    );
    let (_, g) = losses::energy(&pred, &target)?;
    push(
        "energy loss (MSE)",
        check_tensor(&pred, &g, &all(n), |p| Ok(losses::energy(p, &target)?.0))?,
    );
    let (_, g) = losses::sparsity(&offset)?;
    push(
        "sparsity loss",
        check_tensor(&offset, &g, &all(n), |d| Ok(losses::sparsity(d)?.0))?,
    );

    // Two-level pyramid loss: every prediction and the reconstruction.
    let w = LpsrLossWeights::for_levels(2);
    let mk = |rng: &mut Rng, s: [usize; 4]| rng.uniform_tensor(s, 0.0, 1.0);
    let tgt = PyramidDecomposition {
        details: vec![mk(rng, [1, 3, 8, 8]), mk(rng, [1, 3, 4, 4])],
        coarsest: mk(rng, [1, 3, 2, 2]),
    };
    let shift = |rng: &mut Rng, t: &Tensor4| -> Result<Tensor4> {
        t.add(&away_from_zero(&rng.uniform_tensor(t.shape(), -0.2, 0.2), 0.01))
    };
    let pred = PyramidDecomposition {
        details: vec![shift(rng, &tgt.details[0])?, shift(rng, &tgt.details[1])?],
        coarsest: shift(rng, &tgt.coarsest)?,
    };
    let hr = mk(rng, [1, 3, 8, 8]);
    let recon = shift(rng, &hr)?;
    let l = losses::lpsr(&pred, &tgt, &hr, &recon, &w)?;
    let total = |p: &PyramidDecomposition, r: &Tensor4| -> Result<f64> { Ok(losses::lpsr(p, &tgt, &hr, r, &w)?.total) };
    for k in 0..2 {
        let report = check_tensor(&pred.details[k], &l.grad_pred.details[k], &all(pred.details[k].len()), |t| {
            let mut p = pred.clone();
            p.details[k] = t.clone();
            total(&p, &recon)
        })?;
        push(&format!("pyramid loss: detail level {}", k + 1), report);
    }
    let report = check_tensor(&pred.coarsest, &l.grad_pred.coarsest, &all(pred.coarsest.len()), |t| {
        let mut p = pred.clone();
        p.coarsest = t.clone();
        total(&p, &recon)
    })?;
    push("pyramid loss: approximation", report);
    push(
        "pyramid loss: reconstruction",
        check_tensor(&recon, &l.grad_recon, &all(recon.len()), |r| total(&pred, r))?,
    );
    Ok(())
}

fn end_to_end_checks(rng: &mut Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let mut params = LpaeParams::init(rng)?;
    for l in params.layers_mut() {
        l.bias.iter_mut().for_each(|b| *b = rng.uniform(-0.1, 0.1));
    }
    let image = rng.uniform_tensor([1, 3, 8, 8], 0.0, 1.0);
    let weights = losses::LpaeLossWeights::default();
    let (_, grads, _) = params.loss_and_grad(&image, &weights)?;
    let idx = sample_indices(rng, params.param_count(), 400);
    let report = check_params(&params, &grads, &idx, |p| Ok(p.loss_terms(&image)?.0.total(&weights)))?;
    out.push(SuiteEntry {
        name: "autoencoder l_total, 8x8 input".into(),
        report,
        tolerance: END_TO_END_TOLERANCE,
    });

    let embed = EmbedParams::init(1, 8, 1, rng)?;
    let hr = rng.uniform_tensor([1, 3, 16, 16], 0.0, 1.0);
    let cfg = SrConfig::new(1)?;
    let (_, g) = sr::sr_loss_and_grad(&embed, &params, &hr, &cfg)?;
    let idx = sample_indices(rng, embed.param_count(), 10);
    let report = check_params(&embed, &g.embed, &idx, |e| Ok(sr::sr_loss_and_grad(e, &params, &hr, &cfg)?.0.total))?;
    out.push(SuiteEntry {
        name: "super-resolution embedding, 16x16 input".into(),
        report,
        tolerance: END_TO_END_TOLERANCE,
    });
    Ok(())
}

/// Every layer, every loss and both end-to-end objectives against central differences.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    layer_checks(&mut rng, &mut out)?;
    loss_checks(&mut rng, &mut out)?;
    end_to_end_checks(&mut rng, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_passes_and_wrong_one_fails() {
        let x = Rng::new(1).uniform_tensor([1, 1, 2, 3], -1.0, 1.0);
        let f = |t: &Tensor4| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let good = x.map(|v| 3.0 * v * v);
        let all: Vec<usize> = (0..x.len()).collect();
        assert!(check_tensor(&x, &good, &all, f).unwrap().passes(1e-6));
        let bad = x.map(|v| 2.0 * v * v);
        assert!(!check_tensor(&x, &bad, &all, f).unwrap().passes(1e-2));
    }

    #[test]
    fn sampled_indices_are_distinct() {
        let mut rng = Rng::new(2);
        let s = sample_indices(&mut rng, 100, 10);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_indices(&mut rng, 3, 10), vec![0, 1, 2]);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 0.5), 0.5);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
