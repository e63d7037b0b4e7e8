//! Image quality metrics and the multiply-count cost model of conv nets.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Layer table of the standard VGG16 at 224x224.
pub const VGG16_SPEC: &str = include_str!("../data/vgg16.spec");
/// Layer table of ResNet-50 at 224x224.
pub const RESNET50_SPEC: &str = include_str!("../data/resnet50.spec");

/// `10 log10(peak^2 / mse)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::Empty("psnr"));
    }
    Ok(psnr_of_mse(mse(a.data(), b.data()), peak))
}

pub fn psnr_of_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Two decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one plane over all valid window positions, dynamic range 1.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |f: fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

fn check_ssim_input(a: &Tensor4, b: &Tensor4) -> Result<()> {
    a.ensure_same_shape(b, "ssim")?;
    if a.h() < SSIM_WINDOW || a.w() < SSIM_WINDOW || a.n() == 0 || a.c() == 0 {
        return Err(Error::InvalidShape(format!(
            "ssim needs spatial size at least {SSIM_WINDOW}, got {:?}",
            a.shape()
        )));
    }
    Ok(())
}

/// Per-channel SSIM averaged over the batch.
pub fn ssim_per_channel(a: &Tensor4, b: &Tensor4) -> Result<Vec<f64>> {
    check_ssim_input(a, b)?;
    let mut out = vec![0.0; a.c()];
    for n in 0..a.n() {
        for (c, v) in out.iter_mut().enumerate() {
            *v += ssim_plane(a.plane(n, c), b.plane(n, c), a.h(), a.w());
        }
    }
    out.iter_mut().for_each(|v| *v /= a.n() as f64);
    Ok(out)
}

/// Mean local SSIM, 11x11 Gaussian window (sigma 1.5), channels averaged.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    let per = ssim_per_channel(a, b)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuality {
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    /// `None` when the images are smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub per_channel: Vec<ChannelQuality>,
}

impl QualityReport {
    /// PSNR at peak 1 plus SSIM where the size allows it.
    pub fn compare(a: &Tensor4, b: &Tensor4) -> Result<Self> {
        let psnr_db = psnr(a, b, 1.0)?;
        let big_enough = a.h() >= SSIM_WINDOW && a.w() >= SSIM_WINDOW;
        let ssims = if big_enough { Some(ssim_per_channel(a, b)?) } else { None };
        let mut per_channel = Vec::with_capacity(a.c());
        for c in 0..a.c() {
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for n in 0..a.n() {
                x.extend_from_slice(a.plane(n, c));
                y.extend_from_slice(b.plane(n, c));
            }
            per_channel.push(ChannelQuality {
                psnr_db: psnr_of_mse(mse(&x, &y), 1.0),
                ssim: ssims.as_ref().map_or(f64::NAN, |s| s[c]),
            });
        }
        let ssim = ssims.map(|s| s.iter().sum::<f64>() / s.len() as f64);
        Ok(QualityReport {
            psnr_db,
            ssim,
            per_channel,
        })
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PSNR: {}", format_db(self.psnr_db))?;
        match self.ssim {
            Some(s) => write!(f, ", SSIM: {s:.4}"),
            None => write!(f, ", SSIM: n/a"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_ch: u64,
        kernel: u64,
        out_ch: u64,
        out_hw: u64,
    },
    Fc {
        inputs: u64,
        outputs: u64,
    },
}

impl LayerSpec {
    /// Multiplications: `in * k^2 * out * m^2` for convolutions, `in * out` for dense layers.
    pub fn complexity(&self) -> u64 {
        match *self {
            LayerSpec::Conv {
                in_ch,
                kernel,
                out_ch,
                out_hw,
            } => in_ch * kernel * kernel * out_ch * out_hw * out_hw,
            LayerSpec::Fc { inputs, outputs } => inputs * outputs,
        }
    }
}

/// Ordered layer table of a network, independent of weights.
///
/// Text format, one entry per line, `#` comments:
///
/// ```text
/// conv in_ch kernel out_ch out_hw
/// fc in out
/// branch ch        # next conv reads a ch-channel tensor (parallel path)
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels: Option<u64> = None;
        let mut features: Option<u64> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |reason: String| Error::NetSpec { line, reason };
            let mut parts = content.split_whitespace();
            let kind = parts.next().unwrap_or_default();
            let nums = parts
                .map(|p| {
                    p.parse::<u64>()
                        .ok()
                        .filter(|&v| v > 0)
                        .ok_or_else(|| err(format!("{p:?} is not a positive integer")))
                })
                .collect::<Result<Vec<_>>>()?;
            let arity = |n: usize| -> Result<()> {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(err(format!("{kind} takes {n} numbers, got {}", nums.len())))
                }
            };
            match kind {
                "conv" => {
                    arity(4)?;
                    if let Some(c) = channels.filter(|&c| c != nums[0]) {
                        return Err(err(format!("conv reads {} channels but {c} are available", nums[0])));
                    }
                    channels = Some(nums[2]);
                    layers.push(LayerSpec::Conv {
                        in_ch: nums[0],
                        kernel: nums[1],
                        out_ch: nums[2],
                        out_hw: nums[3],
                    });
                }
                "fc" => {
                    arity(2)?;
                    if let Some(f) = features.filter(|&f| f != nums[0]) {
                        return Err(err(format!("fc reads {} features but {f} are available", nums[0])));
                    }
                    features = Some(nums[1]);
                    layers.push(LayerSpec::Fc {
                        inputs: nums[0],
                        outputs: nums[1],
                    });
                }
                "branch" => {
                    arity(1)?;
                    channels = Some(nums[0]);
                }
                other => return Err(err(format!("unknown layer kind {other:?}"))),
            }
        }
        Ok(NetSpec { layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn vgg16() -> Self {
        Self::parse(VGG16_SPEC).expect("bundled spec parses")
    }

    pub fn resnet50() -> Self {
        Self::parse(RESNET50_SPEC).expect("bundled spec parses")
    }

    pub fn complexity(&self) -> u64 {
        complexity(self)
    }

    pub fn concat(&self, other: &NetSpec) -> NetSpec {
        NetSpec {
            layers: self.layers.iter().chain(&other.layers).copied().collect(),
        }
    }
}

/// Total multiplications of all layers.
pub fn complexity(spec: &NetSpec) -> u64 {
    spec.layers.iter().map(LayerSpec::complexity).sum()
}

/// Floating-point operations, counting a multiply-add as two.
pub fn flops(spec: &NetSpec) -> u64 {
    2 * complexity(spec)
}

/// `basic / connected`.
pub fn acceleration_rate(basic: f64, connected: f64) -> Result<f64> {
    if connected.is_nan() || basic.is_nan() || connected <= 0.0 || basic < 0.0 {
        return Err(Error::InvalidShape(format!(
            "acceleration rate needs positive costs, got {basic} / {connected}"
        )));
    }
    Ok(basic / connected)
}

/// Cost of the two branches that replace a network, as fractions of its cost.
///
/// The approximation branch runs the full network at half resolution (1/4);
/// the detail branch runs at full resolution with both channel counts scaled
/// by `detail_channel_ratio`, which scales every term quadratically.
pub fn lpae_branch_fractions(detail_channel_ratio: f64) -> (f64, f64) {
    (0.25, detail_channel_ratio * detail_channel_ratio)
}

/// Default quarter-width detail branch: `(1/4, 1/16)`.
pub fn default_branch_fractions() -> (f64, f64) {
    lpae_branch_fractions(0.25)
}

/// Acceleration of a network whose cost is the given fractions of the original.
pub fn fractional_rate(approx_fraction: f64, detail_fraction: f64) -> Result<f64> {
    acceleration_rate(1.0, approx_fraction + detail_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor4::zeros([1, 3, 4, 4]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor4::full([1, 3, 4, 4], 1.0 / 255.0);
        assert!((psnr(&a, &b, 1.0).unwrap() - 48.1308).abs() < 1e-4);
        assert!((psnr_of_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(48.1308036086791), "48.13");
    }

    #[test]
    fn psnr_scale_consistent_and_symmetric() {
        let mut rng = Rng::new(1);
        let a = rng.uniform_tensor([1, 3, 8, 8], 0.0, 1.0);
        let b = rng.uniform_tensor([1, 3, 8, 8], 0.0, 1.0);
        let p = psnr(&a, &b, 1.0).unwrap();
        assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
        let q = psnr(&a.scale(3.0), &b.scale(3.0), 3.0).unwrap();
        assert!((p - q).abs() < 1e-12);
        assert!(psnr_of_mse(0.1, 1.0) < psnr_of_mse(0.01, 1.0));
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let mut rng = Rng::new(2);
        let a = rng.uniform_tensor([1, 3, 16, 16], 0.0, 1.0);
        let b = rng.uniform_tensor([1, 3, 16, 16], 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let binary = a.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let inverted = binary.map(|v| 1.0 - v);
        assert!(ssim(&binary, &inverted).unwrap() < 0.0);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(ssim(&Tensor4::zeros([1, 1, 10, 12]), &Tensor4::zeros([1, 1, 10, 12])).is_err());
    }

    #[test]
    fn quality_report_display() {
        let a = Tensor4::full([1, 3, 12, 12], 0.3);
        let r = QualityReport::compare(&a, &a).unwrap();
        assert_eq!(r.to_string(), "PSNR: inf, SSIM: 1.0000");
        assert_eq!(r.per_channel.len(), 3);
        let small = QualityReport::compare(&Tensor4::zeros([1, 3, 4, 4]), &Tensor4::zeros([1, 3, 4, 4])).unwrap();
        assert_eq!(small.ssim, None);
    }

    #[test]
    fn single_conv_complexity() {
        let spec = NetSpec::parse("conv 3 3 16 32\n").unwrap();
        assert_eq!(complexity(&spec), 442_368);
        assert_eq!(complexity(&NetSpec::parse("# nothing\n\n").unwrap()), 0);
    }

    #[test]
    fn complexity_is_additive() {
        let a = NetSpec::parse("conv 3 3 16 32\nconv 16 3 16 32").unwrap();
        let b = NetSpec::parse("fc 100 10").unwrap();
        assert_eq!(a.concat(&b).complexity(), a.complexity() + b.complexity());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = NetSpec::parse("conv 3 3 16 32\nconv 8 3 16 32").unwrap_err();
        assert!(matches!(e, Error::NetSpec { line: 2, .. }));
        assert!(NetSpec::parse("pool 2").is_err());
        assert!(NetSpec::parse("conv 3 3 0 32").is_err());
        assert!(NetSpec::parse("fc 3").is_err());
        assert!(NetSpec::parse("fc 10 20\nfc 30 5").is_err());
        assert!(NetSpec::parse("conv 3 3 16 32\nbranch 3\nconv 3 1 16 32").is_ok());
    }

    #[test]
    fn bundled_specs() {
        let vgg = complexity(&NetSpec::vgg16()) as f64;
        assert!((vgg / 15.47e9 - 1.0).abs() < 0.01);
        assert!((flops(&NetSpec::vgg16()) as f64 / 31.02e9 - 1.0).abs() < 0.01);
        let resnet = complexity(&NetSpec::resnet50()) as f64;
        assert!((resnet / 4.06e9 - 1.0).abs() < 0.05);
    }

    #[test]
    fn branch_fractions_and_rates() {
        let (a, d) = default_branch_fractions();
        assert_eq!((a, d), (0.25, 0.0625));
        assert_eq!(a + d, 5.0 / 16.0);
        assert_eq!(fractional_rate(a, d).unwrap(), 3.2);
        assert_eq!(lpae_branch_fractions(0.5).1, 0.25);
        assert!((fractional_rate(0.25, 1.0 / 64.0).unwrap() - 3.76).abs() < 0.005);
        assert!((acceleration_rate(15.47, 5.48).unwrap() - 2.82).abs() < 0.01);
        assert_eq!(acceleration_rate(7.0, 7.0).unwrap(), 1.0);
        assert!(acceleration_rate(1.0, 0.0).is_err());
    }
}
