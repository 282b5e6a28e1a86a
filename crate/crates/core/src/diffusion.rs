//! Diffusion mathematics.
//!
//! `alpha_bar[t]` is the cumulative signal-retention coefficient: a level-`t`
//! sample is `sqrt(alpha_bar[t])·x0 + sqrt(1 − alpha_bar[t])·ε`. Level 0 is the
//! clean image (`alpha_bar[0] = 1`). All arithmetic is carried out in `f64`
//! and rounded once to `f32`, so every function here is bit-reproducible.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Offset of the cosine schedule, as in improved DDPM.
const COSINE_OFFSET: f64 = 0.008;
/// Terminal value of the cosine schedule; the curve is mapped affinely onto
/// `[COSINE_FLOOR, 1]` so that the last level keeps a faint signal.
pub const COSINE_FLOOR: f64 = 1e-3;
const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    /// Explicit coefficient table, used by tests and tools.
    Custom,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
            Self::Custom => "custom",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds one of the named schedules with `steps` training levels.
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let alpha_bar = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    let c = libm::cos(x * std::f64::consts::FRAC_PI_2);
                    c * c
                };
                let f0 = f(0);
                (0..=steps)
                    .map(|t| if t == 0 { 1.0 } else { COSINE_FLOOR + (1.0 - COSINE_FLOOR) * (f(t) / f0) })
                    .collect()
            }
            ScheduleKind::Linear => {
                let mut acc = 1.0;
                let mut out = Vec::with_capacity(steps + 1);
                out.push(1.0);
                for t in 1..=steps {
                    acc *= 1.0 - linear_beta(t, steps);
                    out.push(acc);
                }
                out
            }
            ScheduleKind::Custom => return Err(Error::config("custom schedules are built with from_alpha_bar")),
        };
        let schedule = Self { kind, alpha_bar };
        debug_assert!(schedule.validate(true).is_ok());
        Ok(schedule)
    }

    /// Wraps an explicit coefficient table. Flat segments are permitted;
    /// `alpha_bar[0]` must be exactly one and every value in `(0, 1]`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let schedule = Self { kind: ScheduleKind::Custom, alpha_bar };
        schedule.validate(false)?;
        Ok(schedule)
    }

    fn validate(&self, strict: bool) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab.len() < 2 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if ab[0] != 1.0 {
            return Err(Error::config("alpha_bar[0] must be exactly 1"));
        }
        for (t, w) in ab.windows(2).enumerate() {
            let (prev, next) = (w[0], w[1]);
            if !(next > 0.0 && next <= 1.0 && next.is_finite()) {
                return Err(Error::config(format!("alpha_bar[{}] = {next} outside (0, 1]", t + 1)));
            }
            if next > prev || (strict && next == prev) {
                return Err(Error::config(format!("alpha_bar not decreasing at level {}", t + 1)));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training levels `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_level(&self, t: usize, what: &str) -> Result<()> {
        if t > self.steps() {
            return Err(Error::contract(format!("{what}: level {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }
}

/// Per-step beta of the linear schedule, `t` in `1..=steps`.
fn linear_beta(t: usize, steps: usize) -> f64 {
    if steps == 1 {
        return LINEAR_BETA_START;
    }
    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * (t - 1) as f64 / (steps - 1) as f64
}

pub fn build_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::build(steps, kind)
}

/// `steps + 1` increasing levels `0 = τ0 < τ1 < … < τS = T`, uniformly spaced.
pub fn inference_levels(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let total = schedule.steps();
    if steps == 0 || steps > total {
        return Err(Error::config(format!("inference steps {steps} must be in [1, {total}]")));
    }
    Ok((0..=steps).map(|i| i * total / steps).collect())
}

fn combine(a: &ImageTensor, b: &ImageTensor, what: &str, wa: f64, wb: f64) -> Result<ImageTensor> {
    a.zip_with(b, what, |x, y| (wa * x as f64 + wb * y as f64) as f32)
}

/// Samples level `t` of the forward process with the given noise.
pub fn forward_diffuse(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    x0.ensure_same_shape(eps, "forward_diffuse")?;
    schedule.check_level(t, "forward_diffuse")?;
    let ab = schedule.alpha_bar(t);
    if ab == 1.0 {
        return Ok(x0.clone());
    }
    combine(x0, eps, "forward_diffuse", ab.sqrt(), (1.0 - ab).sqrt())
}

/// Deterministic (η = 0) DDIM update from level `t` to `t_prev ≤ t`.
pub fn ddim_step(
    z_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    z_t.ensure_same_shape(eps_hat, "ddim_step")?;
    schedule.check_level(t, "ddim_step")?;
    if t_prev > t {
        return Err(Error::contract(format!("ddim_step: t_prev {t_prev} > t {t}")));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let (sa_t, sn_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sn_p) = (ab_p.sqrt(), (1.0 - ab_p).sqrt());
    z_t.zip_with(eps_hat, "ddim_step", |z, e| {
        let (z, e) = (z as f64, e as f64);
        let x0 = (z - sn_t * e) / sa_t;
        (sa_p * x0 + sn_p * e) as f32
    })
}

/// Classifier-free guidance: `ε_u + scale·(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &ImageTensor, eps_cond: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    eps_uncond.ensure_same_shape(eps_cond, "cfg_combine")?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("cfg_combine: scale {scale} must be >= 0")));
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_with(eps_cond, "cfg_combine", |u, c| {
        let (u, c) = (u as f64, c as f64);
        (u + scale * (c - u)) as f32
    })
}

/// One-step forward kernel from level `t − 1` to level `t`.
pub fn renoise_step(
    z_prev: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    if t == 0 {
        return Err(Error::contract("renoise_step: nothing to re-noise to at level 0"));
    }
    renoise_between(z_prev, t - 1, t, schedule, eps)
}

/// Forward kernel from level `from` to level `to ≥ from`:
/// `sqrt(r)·z + sqrt(1 − r)·ε` with `r = alpha_bar[to] / alpha_bar[from]`.
pub fn renoise_between(
    z: &ImageTensor,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    z.ensure_same_shape(eps, "renoise")?;
    schedule.check_level(to, "renoise")?;
    if from > to {
        return Err(Error::contract(format!("renoise: from {from} > to {to}")));
    }
    let r = schedule.alpha_bar(to) / schedule.alpha_bar(from);
    if r == 1.0 {
        return Ok(z.clone());
    }
    combine(z, eps, "renoise", r.sqrt(), (1.0 - r).sqrt())
}

/// Mean squared error between predicted and true noise.
pub fn ddpm_loss(eps_hat: &ImageTensor, eps: &ImageTensor) -> Result<f64> {
    eps_hat.ensure_same_shape(eps, "ddpm_loss")?;
    if eps.is_empty() {
        return Err(Error::contract("ddpm_loss: empty tensors"));
    }
    let sum: f64 = eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / eps.len() as f64)
}
