//! Parameter updates, learning-rate schedules and training configuration.
//!
//! SGD uses the heavy-ball form on the decayed gradient:
//!
//! ```text
//! v <- momentum * v + (g + weight_decay * p)     (decay on weights only)
//! p <- p - lr * v
//! ```
//!
//! Adam is the standard bias-corrected variant without weight decay.

use std::fmt::Write as _;
use std::path::Path;

use crate::container::{self, NamedTensor, MAGIC_OPTIM};
use crate::error::{Error, Result};
use crate::losses::LpaeLossWeights;
use crate::nn::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// `lr0 * factor^(floor(epoch / every_n_epochs))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub every_n_epochs: usize,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, lr0: f64, epoch: usize) -> f64 {
        let drops = epoch / self.every_n_epochs.max(1);
        lr0 * self.factor.powi(drops as i32)
    }
}

/// Everything a training run needs besides data and initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub schedule: StepSchedule,
    pub batch: usize,
    pub steps: usize,
    /// Held-out evaluation period in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
    pub loss: LpaeLossWeights,
    /// Super-resolution settings; ignored by autoencoder training.
    pub sr_scale: usize,
    pub sr_freeze_decoder: bool,
    pub sr_gamma: f64,
    pub sr_delta: f64,
    /// Per-level detail weights; `None` means the defaults for the pyramid depth.
    pub sr_lambdas: Option<Vec<f64>>,
    pub sr_channels: usize,
    pub sr_blocks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            schedule: StepSchedule {
                every_n_epochs: 50,
                factor: 0.5,
            },
            batch: 4,
            steps: 1000,
            eval_every: 1,
            seed: 1,
            crop_size: 64,
            flip_h: true,
            flip_v: true,
            loss: LpaeLossWeights::default(),
            sr_scale: 2,
            sr_freeze_decoder: true,
            sr_gamma: 1.0,
            sr_delta: 10.0,
            sr_lambdas: None,
            sr_channels: 32,
            sr_blocks: 3,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "optimizer" => {
                self.optimizer = match v {
                    "sgd_momentum" | "sgd" => OptimizerKind::SgdMomentum,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
                }
            }
            "lr0" => self.lr0 = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_epsilon" => self.adam_epsilon = parse_num(key, v)?,
            "schedule_every" => self.schedule.every_n_epochs = parse_num(key, v)?,
            "schedule_factor" => self.schedule.factor = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "crop_size" => self.crop_size = parse_num(key, v)?,
            "flip_h" => self.flip_h = parse_bool(key, v)?,
            "flip_v" => self.flip_v = parse_bool(key, v)?,
            "alpha" => self.loss.alpha = parse_num(key, v)?,
            "beta" => self.loss.beta = parse_num(key, v)?,
            "gamma" => self.loss.gamma = parse_num(key, v)?,
            "sr_scale" => self.sr_scale = parse_num(key, v)?,
            "sr_freeze_decoder" => self.sr_freeze_decoder = parse_bool(key, v)?,
            "sr_gamma" => self.sr_gamma = parse_num(key, v)?,
            "sr_delta" => self.sr_delta = parse_num(key, v)?,
            "sr_lambdas" => {
                self.sr_lambdas = Some(
                    v.split(',')
                        .map(|s| parse_num(key, s.trim()))
                        .collect::<Result<_>>()?,
                )
            }
            "sr_channels" => self.sr_channels = parse_num(key, v)?,
            "sr_blocks" => self.sr_blocks = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) {
            return fail("schedule_factor must be in (0, 1]");
        }
        if self.schedule.every_n_epochs == 0 {
            return fail("schedule_every must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must be in [0, 1)");
        }
        if self.adam_epsilon <= 0.0 {
            return fail("adam_epsilon must be positive");
        }
        if self.batch == 0 || self.crop_size == 0 || self.eval_every == 0 {
            return fail("batch, crop_size and eval_every must be positive");
        }
        if ![self.loss.alpha, self.loss.beta, self.loss.gamma, self.sr_gamma, self.sr_delta]
            .iter()
            .all(|w| *w >= 0.0)
        {
            return fail("loss weights must be non-negative");
        }
        if ![2, 4, 8].contains(&self.sr_scale) {
            return fail("sr_scale must be 2, 4 or 8");
        }
        if let Some(l) = &self.sr_lambdas {
            if l.len() != self.sr_levels() {
                return fail("sr_lambdas needs one weight per pyramid level");
            }
        }
        if self.sr_channels == 0 {
            return fail("sr_channels must be positive");
        }
        Ok(())
    }

    /// Pyramid depth `K` with `scale = 2^K`.
    pub fn sr_levels(&self) -> usize {
        self.sr_scale.trailing_zeros() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule.lr_at(self.lr0, epoch)
    }

    /// Batches per epoch: corpus size over batch, rounded up.
    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch).max(1)
    }

    /// Canonical `key = value` text; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("optimizer", self.optimizer.name().to_string());
        kv("lr0", format!("{:?}", self.lr0));
        kv("momentum", format!("{:?}", self.momentum));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("adam_beta1", format!("{:?}", self.adam_beta1));
        kv("adam_beta2", format!("{:?}", self.adam_beta2));
        kv("adam_epsilon", format!("{:?}", self.adam_epsilon));
        kv("schedule_every", self.schedule.every_n_epochs.to_string());
        kv("schedule_factor", format!("{:?}", self.schedule.factor));
        kv("batch", self.batch.to_string());
        kv("steps", self.steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("seed", self.seed.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("flip_h", self.flip_h.to_string());
        kv("flip_v", self.flip_v.to_string());
        kv("alpha", format!("{:?}", self.loss.alpha));
        kv("beta", format!("{:?}", self.loss.beta));
        kv("gamma", format!("{:?}", self.loss.gamma));
        kv("sr_scale", self.sr_scale.to_string());
        kv("sr_freeze_decoder", self.sr_freeze_decoder.to_string());
        kv("sr_gamma", format!("{:?}", self.sr_gamma));
        kv("sr_delta", format!("{:?}", self.sr_delta));
        if let Some(l) = &self.sr_lambdas {
            kv(
                "sr_lambdas",
                l.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(","),
            );
        }
        kv("sr_channels", self.sr_channels.to_string());
        kv("sr_blocks", self.sr_blocks.to_string());
        s
    }
}

/// Per-parameter optimizer memory in flat-vector order.
///
/// `first` is the SGD velocity or the Adam first moment; `second` is the Adam
/// second moment (unused by SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        OptimState {
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    fn round_to_f32(&mut self) {
        for v in self.first.iter_mut().chain(self.second.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if self.step > 1 << 24 {
            return Err(Error::Checkpoint("step count exceeds f32 precision".into()));
        }
        container::save(
            path,
            MAGIC_OPTIM,
            &[
                NamedTensor::new("step", vec![1], vec![self.step as f64]),
                NamedTensor::new("first", vec![self.first.len()], self.first.clone()),
                NamedTensor::new("second", vec![self.second.len()], self.second.clone()),
            ],
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = container::load(path, MAGIC_OPTIM)?;
        match t.as_slice() {
            [s, f, v] if s.name == "step" && f.name == "first" && v.name == "second" && s.values.len() == 1 => {
                Ok(OptimState {
                    step: s.values[0] as u64,
                    first: f.values.clone(),
                    second: v.values.clone(),
                })
            }
            _ => Err(Error::Checkpoint("malformed optimizer state".into())),
        }
    }
}

fn check_step(params: &[f64], grads: &[f64], state: &OptimState) -> Result<()> {
    if params.len() != grads.len() || state.first.len() != params.len() || state.second.len() != params.len() {
        return Err(Error::InvalidShape(format!(
            "optimizer: {} params, {} grads, state {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    Ok(())
}

/// One SGD-with-momentum update. `decay_mask[i]` selects entries that receive weight decay.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    decay_mask: &[bool],
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_step(params, grads, state)?;
    if decay_mask.len() != params.len() {
        return Err(Error::InvalidShape("decay mask length".into()));
    }
    for i in 0..params.len() {
        let decay = if decay_mask[i] { weight_decay * params[i] } else { 0.0 };
        let v = momentum * state.first[i] + grads[i] + decay;
        state.first[i] = v;
        params[i] -= lr * v;
    }
    state.step += 1;
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) -> Result<()> {
    check_step(params, grads, state)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        let m = beta1 * state.first[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second[i] + (1.0 - beta2) * g * g;
        state.first[i] = m;
        state.second[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + epsilon);
    }
    Ok(())
}

/// Optimizer bound to one parameter set.
///
/// After every update both parameters and state are rounded to `f32`, the
/// storage precision of checkpoints, so saving never loses information.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub state: OptimState,
    decay_mask: Vec<bool>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &impl Parameters) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            epsilon: cfg.adam_epsilon,
            state: OptimState::new(params.param_count()),
            decay_mask: params.weight_mask(),
        }
    }

    pub fn step(&mut self, params: &mut impl Parameters, grads: &impl Parameters, lr: f64) -> Result<()> {
        let mut flat = params.flatten();
        let g = grads.flatten();
        match self.kind {
            OptimizerKind::SgdMomentum => sgd_step(
                &mut flat,
                &g,
                &self.decay_mask,
                &mut self.state,
                lr,
                self.momentum,
                self.weight_decay,
            )?,
            OptimizerKind::Adam => adam_step(
                &mut flat,
                &g,
                &mut self.state,
                lr,
                self.beta1,
                self.beta2,
                self.epsilon,
            )?,
        }
        params.assign_flat(&flat)?;
        params.round_to_f32();
        self.state.round_to_f32();
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = StepSchedule {
            every_n_epochs: 10,
            factor: 0.1,
        };
        assert_eq!(s.lr_at(0.01, 0), 0.01);
        assert!((s.lr_at(0.01, 10) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(0.01, 9) - 0.01).abs() < 1e-15);
        let s = StepSchedule {
            every_n_epochs: 50,
            factor: 0.5,
        };
        assert_eq!(s.lr_at(0.001, 100), 0.00025);
    }

    #[test]
    fn plain_sgd_is_gradient_descent() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.1, 0.2, -0.3];
        let mut st = OptimState::new(3);
        sgd_step(&mut p, &g, &[true; 3], &mut st, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.1, 0.5 + 0.15]);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, 2.0];
        let mut st = OptimState::new(2);
        sgd_step(&mut p, &[0.0, 0.0], &[true; 2], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        let mut st = OptimState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        let (p0, g, lr) = (3.0, 0.25, 0.1);
        let mut p = vec![p0];
        let mut st = OptimState::new(1);
        for _ in 0..2 {
            sgd_step(&mut p, &[g], &[true], &mut st, lr, 0.9, 0.0).unwrap();
        }
        // v1 = g, v2 = 1.9 g
        let expect = p0 - lr * g * (1.0 + 1.9);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((st.first[0] - 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_skips_masked_entries() {
        let mut p = vec![2.0, 2.0];
        let mut st = OptimState::new(2);
        sgd_step(&mut p, &[0.0, 0.0], &[true, false], &mut st, 1.0, 0.0, 0.5).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3, -5.0, 1e-3] {
            let mut p = vec![1.0];
            let mut st = OptimState::new(1);
            adam_step(&mut p, &[g], &mut st, 0.01, 0.9, 0.999, 1e-12).unwrap();
            // m_hat = g, v_hat = g^2 after bias correction
            assert!(((1.0 - p[0]) - 0.01 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_is_sign_equivariant() {
        let g = vec![0.3, -0.1, 2.0];
        let mut a = vec![0.0; 3];
        let mut b = vec![0.0; 3];
        let (mut sa, mut sb) = (OptimState::new(3), OptimState::new(3));
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        for _ in 0..3 {
            adam_step(&mut a, &g, &mut sa, 0.01, 0.9, 0.999, 1e-8).unwrap();
            adam_step(&mut b, &neg, &mut sb, 0.01, 0.9, 0.999, 1e-8).unwrap();
        }
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = vec![1.0];
        let mut st = OptimState::new(1);
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], &[true], &mut st, 0.1, 0.9, 0.0),
            Err(Error::NonFinite(_))
        ));
        assert!(adam_step(&mut p, &[f64::INFINITY], &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        // f(p) = |p|^2, grad = 2p. With lr 0.05 and momentum 0.2 the heavy-ball
        // recurrence has real positive roots, so there is no overshoot.
        let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
        let mut p = vec![1.0, -0.5, 0.25];
        let mut st = OptimState::new(3);
        let mut prev = f(&p);
        for _ in 0..50 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            sgd_step(&mut p, &g, &[true; 3], &mut st, 0.05, 0.2, 0.0).unwrap();
            let cur = f(&p);
            assert!(cur < prev);
            prev = cur;
        }
        let mut p = vec![1.0, -0.5, 0.25];
        let mut st = OptimState::new(3);
        let mut prev = f(&p);
        for _ in 0..20 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut p, &g, &mut st, 0.005, 0.9, 0.999, 1e-8).unwrap();
            let cur = f(&p);
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn config_parse_and_roundtrip() {
        let cfg = TrainConfig::parse(
            "# desk run\noptimizer = sgd_momentum\nlr0 = 0.01\nschedule_every = 10\nschedule_factor = 0.1\nbatch=8\nflip_v = false\nsr_scale = 4\nsr_lambdas = 0.8, 1.2\n",
        )
        .unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(cfg.batch, 8);
        assert!(!cfg.flip_v);
        assert_eq!(cfg.sr_levels(), 2);
        assert!((cfg.lr_at(10) - 0.001).abs() < 1e-15);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_rejects_bad_input() {
        assert!(TrainConfig::parse("learning_rate = 0.1").unwrap_err().to_string().contains("unknown key"));
        assert!(TrainConfig::parse("lr0 = -1").is_err());
        assert!(TrainConfig::parse("momentum = 1.0").is_err());
        assert!(TrainConfig::parse("schedule_factor = 1.5").is_err());
        assert!(TrainConfig::parse("sr_scale = 3").is_err());
        assert!(TrainConfig::parse("sr_lambdas = 1,2,3").is_err());
        assert!(TrainConfig::parse("batch").is_err());
        assert!(TrainConfig::parse("flip_h = maybe").is_err());
    }

    #[test]
    fn state_roundtrips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.lpos");
        let mut st = OptimState::new(4);
        let mut p = vec![0.1, 0.2, 0.3, 0.4];
        adam_step(&mut p, &[0.5, -0.25, 1.0, 0.0], &mut st, 0.01, 0.9, 0.999, 1e-8).unwrap();
        st.round_to_f32();
        st.save(&path).unwrap();
        assert_eq!(OptimState::load(&path).unwrap(), st);
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.steps_per_epoch(8), 2);
        assert_eq!(cfg.steps_per_epoch(9), 3);
        assert_eq!(cfg.steps_per_epoch(1), 1);
    }
}
