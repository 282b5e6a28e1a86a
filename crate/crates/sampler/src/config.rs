use streetscape_core::diffusion::NoiseSchedule;
use streetscape_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// DDIM levels between `T` and 0.
    pub steps: usize,
    pub cfg_scale: f64,
    /// Extra passes per level (Resample); 0 disables it.
    pub resample: usize,
    pub warp_init: bool,
    /// Window size K; `K / 2` frames are carried over between windows.
    pub context: usize,
    pub control_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 7.5, resample: 10, warp_init: true, context: 2, control_scale: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    /// Frames carried over (and generated) per autoregressive step.
    pub fn condition_count(&self) -> usize {
        self.context / 2
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::config(format!("sampler steps {} must be in [1, {}]", self.steps, schedule.steps())));
        }
        if ![2, 4].contains(&self.context) {
            return Err(Error::config(format!("context {} not in {{2, 4}}", self.context)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::config(format!("cfg scale {} must be finite and >= 0", self.cfg_scale)));
        }
        if !self.control_scale.is_finite() {
            return Err(Error::config("control scale must be finite"));
        }
        Ok(())
    }

    /// Model evaluations per autoregressive step.
    pub fn calls_per_step(&self) -> usize {
        self.steps * (self.resample + 1) * 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use streetscape_core::ScheduleKind;

    #[test]
    fn validation() {
        let s = NoiseSchedule::build(1000, ScheduleKind::Cosine).unwrap();
        assert!(SamplerConfig::default().validate(&s).is_ok());
        assert_eq!(SamplerConfig::default().calls_per_step(), 50 * 11 * 2);
        for bad in [
            SamplerConfig { steps: 1001, ..Default::default() },
            SamplerConfig { steps: 0, ..Default::default() },
            SamplerConfig { context: 3, ..Default::default() },
            SamplerConfig { cfg_scale: -1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(&s), Err(Error::Config(_))));
        }
    }
}
