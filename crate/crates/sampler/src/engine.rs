use std::cell::Cell;

use candle_core::DType;
use streetscape_core::diffusion::{cfg_combine, ddim_step, inference_levels, renoise_between, NoiseSchedule};
use streetscape_core::{derive_seed, Error, ImageTensor, NoiseRng, Result, StyleToken};
use streetscape_model::condition::control_frame;
use streetscape_model::net::{backend, stack_windows, unstack_windows, Backbone};
use streetscape_model::{BackboneConfig, ModelWeights};
use streetscape_scene::world::yaw_delta;
use streetscape_scene::{render_gbuffer, CameraPose, GBuffer, SceneLayout};

use crate::config::SamplerConfig;
use crate::imputation::{impute_latent, warp_init};

const TAG_WINDOW: u64 = 0x57;
const TAG_INIT: u64 = 1;
const TAG_WARP: u64 = 2;
const TAG_IMPUTE: u64 = 3;
const TAG_RESAMPLE: u64 = 4;

/// A generated sequence plus the bookkeeping needed to audit it.
#[derive(Clone, Debug, PartialEq)]
pub struct StreetscapeRun {
    pub frames: Vec<ImageTensor>,
    pub cameras: Vec<CameraPose>,
    /// Autoregressive step that produced each frame; the first window is 0.
    pub steps: Vec<usize>,
    /// Known-slot outputs that differed from the frame they were conditioned
    /// on; `None` for runs that do not impute.
    pub known_mismatches: Option<usize>,
    pub model_calls: usize,
}

/// A trained denoiser bound to a sampler configuration.
pub struct Sampler {
    net: Backbone,
    model: BackboneConfig,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    levels: Vec<usize>,
    calls: Cell<usize>,
}

impl Sampler {
    pub fn new(weights: &ModelWeights, config: SamplerConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate(&schedule)?;
        if config.context != weights.config.frames {
            return Err(Error::config(format!(
                "sampler context {} does not match the model's window of {} frames",
                config.context, weights.config.frames
            )));
        }
        let levels = inference_levels(&schedule, config.steps)?;
        Ok(Self {
            net: Backbone::new(weights, &[], DType::F32)?,
            model: weights.config.clone(),
            config,
            schedule,
            levels,
            calls: Cell::new(0),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Model evaluations so far (each CFG branch counts once).
    pub fn model_calls(&self) -> usize {
        self.calls.get()
    }

    pub fn reset_model_calls(&self) {
        self.calls.set(0);
    }

    fn window_seed(&self, window: u64) -> u64 {
        derive_seed(self.config.seed, &[TAG_WINDOW, window])
    }

    fn check_style(&self, style: StyleToken) -> Result<()> {
        if style.id() > self.model.num_styles {
            return Err(Error::contract(format!("style {} outside [0, {}]", style.id(), self.model.num_styles)));
        }
        Ok(())
    }

    fn check_window(&self, gbuffers: &[GBuffer], cams: Option<&[CameraPose]>) -> Result<()> {
        let k = self.config.context;
        if gbuffers.len() != k || cams.is_some_and(|c| c.len() != k) {
            return Err(Error::config(format!("a window needs exactly {k} G-buffers and cameras")));
        }
        let s = self.model.image_size;
        for g in gbuffers {
            if (g.width(), g.height()) != (s, s) {
                return Err(Error::config(format!(
                    "G-buffer is {}x{}, the model works at {s}x{s}",
                    g.width(),
                    g.height()
                )));
            }
        }
        Ok(())
    }

    fn require_variant(&self, rgb: bool) -> Result<()> {
        if self.model.rgb_control != rgb {
            return Err(Error::config(if rgb {
                "RGB-control generation needs weights trained as the rgbctl variant"
            } else {
                "imputation-based generation needs weights without RGB control"
            }));
        }
        Ok(())
    }

    /// Control-branch inputs; `rgb[j]` is the condition frame of slot `j`
    /// (black when absent) and is ignored by models without RGB control.
    fn controls(&self, gbuffers: &[GBuffer], rgb: &[Option<&ImageTensor>]) -> Result<Vec<ImageTensor>> {
        gbuffers
            .iter()
            .enumerate()
            .map(|(j, g)| {
                let img = if self.model.rgb_control { rgb.get(j).copied().flatten() } else { None };
                control_frame(&g.to_tensor(), img, self.model.rgb_control)
            })
            .collect()
    }

    /// Guided noise estimate for every slot of a window.
    fn guided_eps(
        &self,
        z: &[ImageTensor],
        t: usize,
        control: &[ImageTensor],
        style: StyleToken,
    ) -> Result<Vec<ImageTensor>> {
        let x = stack_windows(&[z], DType::F32)?;
        let ctrl = stack_windows(&[control], DType::F32)?;
        let branch = |s: StyleToken| -> Result<Vec<ImageTensor>> {
            let y =
                self.net.forward(&x, &[t], &[s.id()], Some(&ctrl), self.config.control_scale, true).map_err(backend)?;
            self.calls.set(self.calls.get() + 1);
            Ok(unstack_windows(&y)?.remove(0))
        };
        let cond = branch(style)?;
        let uncond = branch(StyleToken::null(self.model.num_styles))?;
        uncond.iter().zip(&cond).map(|(u, c)| cfg_combine(u, c, self.config.cfg_scale)).collect()
    }

    fn noise(&self, rng: &mut NoiseRng) -> ImageTensor {
        let s = self.model.image_size;
        rng.normal_tensor(self.model.image_channels, s, s)
    }

    /// Plain DDIM loop over all slots from the given terminal latents.
    fn denoise(&self, mut z: Vec<ImageTensor>, control: &[ImageTensor], style: StyleToken) -> Result<Vec<ImageTensor>> {
        for i in (1..self.levels.len()).rev() {
            let (t, tp) = (self.levels[i], self.levels[i - 1]);
            let eps = self.guided_eps(&z, t, control, style)?;
            z = z.iter().zip(&eps).map(|(zi, e)| ddim_step(zi, e, t, tp, &self.schedule)).collect::<Result<_>>()?;
        }
        Ok(z.iter().map(ImageTensor::clamp_photo).collect())
    }

    /// Seed-derived level-`T` latents of a parallel window.
    pub fn terminal_noise(&self, window: u64) -> Vec<ImageTensor> {
        let mut rng = NoiseRng::derived(self.window_seed(window), &[TAG_INIT]);
        (0..self.config.context).map(|_| self.noise(&mut rng)).collect()
    }

    fn parallel_from_controls(
        &self,
        control: &[ImageTensor],
        style: StyleToken,
        window: u64,
    ) -> Result<Vec<ImageTensor>> {
        self.denoise(self.terminal_noise(window), control, style)
    }

    /// Denoises a whole window jointly from seed-derived noise.
    pub fn parallel_denoise(&self, gbuffers: &[GBuffer], style: StyleToken, window: u64) -> Result<Vec<ImageTensor>> {
        self.check_style(style)?;
        self.check_window(gbuffers, None)?;
        let control = self.controls(gbuffers, &[])?;
        self.parallel_from_controls(&control, style, window)
    }

    /// Temporal imputation over one window. `known[j]` pins slot `j`; `init`
    /// holds level-`T` latents for every slot (known slots are overwritten).
    /// Returns all slots; known slots equal their inputs exactly.
    fn impute_window(
        &self,
        known: &[Option<&ImageTensor>],
        init: Vec<ImageTensor>,
        control: &[ImageTensor],
        style: StyleToken,
        seed: u64,
    ) -> Result<Vec<ImageTensor>> {
        let mut imp = NoiseRng::derived(seed, &[TAG_IMPUTE]);
        let mut res = NoiseRng::derived(seed, &[TAG_RESAMPLE]);
        let mut z = init;
        for i in (1..self.levels.len()).rev() {
            let (t, tp) = (self.levels[i], self.levels[i - 1]);
            for round in 0..=self.config.resample {
                for (j, k) in known.iter().enumerate() {
                    if let Some(frame) = k {
                        z[j] = impute_latent(frame, t, &self.schedule, &mut imp)?;
                    }
                }
                let eps = self.guided_eps(&z, t, control, style)?;
                let next: Vec<ImageTensor> =
                    z.iter().zip(&eps).map(|(zi, e)| ddim_step(zi, e, t, tp, &self.schedule)).collect::<Result<_>>()?;
                if round < self.config.resample {
                    for (j, zn) in next.iter().enumerate() {
                        if known[j].is_none() {
                            let eps = self.noise(&mut res);
                            z[j] = renoise_between(zn, tp, t, &self.schedule, &eps)?;
                        }
                    }
                } else {
                    z = next;
                }
            }
        }
        for (j, k) in known.iter().enumerate() {
            if let Some(frame) = k {
                z[j] = impute_latent(frame, 0, &self.schedule, &mut imp)?;
            }
        }
        Ok(z.iter().map(ImageTensor::clamp_photo).collect())
    }

    /// Level-`T` latents for a window: warped sources for generated slots
    /// (`sources[j] = Some(slot)`) when WarpInit is on, pure noise otherwise.
    fn initial_latents(
        &self,
        window: &[Option<&ImageTensor>],
        sources: &[Option<usize>],
        gbuffers: &[GBuffer],
        cams: &[CameraPose],
        seed: u64,
    ) -> Result<Vec<ImageTensor>> {
        let mut init_rng = NoiseRng::derived(seed, &[TAG_INIT]);
        let mut z: Vec<ImageTensor> = (0..window.len()).map(|_| self.noise(&mut init_rng)).collect();
        if self.config.warp_init {
            let mut warp_rng = NoiseRng::derived(seed, &[TAG_WARP]);
            for (g, src) in sources.iter().enumerate() {
                let Some(s) = *src else { continue };
                let frame = window[s].ok_or_else(|| Error::contract("warp source slot is not known"))?;
                z[g] = warp_init(
                    std::slice::from_ref(frame),
                    &gbuffers[s..=s],
                    &cams[s..=s],
                    &cams[g..=g],
                    &self.schedule,
                    &mut warp_rng,
                )?
                .remove(0);
            }
        }
        Ok(z)
    }

    /// One autoregressive window with the first `known.len()` slots pinned.
    /// Generated slot `g` is warp-initialized from slot `g − (K − k)`.
    pub fn generate_window(
        &self,
        known: &[ImageTensor],
        gbuffers: &[GBuffer],
        cams: &[CameraPose],
        style: StyleToken,
        window: u64,
    ) -> Result<Vec<ImageTensor>> {
        self.require_variant(false)?;
        self.check_style(style)?;
        self.check_window(gbuffers, Some(cams))?;
        let k_total = self.config.context;
        let k = known.len();
        if k == 0 || k >= k_total {
            return Err(Error::config(format!(
                "a window of {k_total} needs between 1 and {} known frames",
                k_total - 1
            )));
        }
        let slots: Vec<Option<&ImageTensor>> = (0..k_total).map(|j| known.get(j)).collect();
        let sources: Vec<Option<usize>> = (0..k_total).map(|g| (g >= k).then(|| g - (k_total - k))).collect();
        let seed = self.window_seed(window);
        let init = self.initial_latents(&slots, &sources, gbuffers, cams, seed)?;
        let control = self.controls(gbuffers, &[])?;
        self.impute_window(&slots, init, &control, style, seed)
    }

    /// The next `K/2` frames given the last `K/2` emitted ones.
    pub fn generate_next(
        &self,
        known: &[ImageTensor],
        gbuffers: &[GBuffer],
        cams: &[CameraPose],
        style: StyleToken,
        window: u64,
    ) -> Result<Vec<ImageTensor>> {
        let m = self.config.condition_count();
        if known.len() != m {
            return Err(Error::config(format!("generate_next needs {m} known frames, got {}", known.len())));
        }
        Ok(self.generate_window(known, gbuffers, cams, style, window)?.split_off(m))
    }

    fn render_all(layout: &SceneLayout, trajectory: &[CameraPose]) -> Result<Vec<GBuffer>> {
        trajectory.iter().map(|c| render_gbuffer(layout, c)).collect()
    }

    fn check_length(&self, n: usize) -> Result<()> {
        if n < self.config.context {
            return Err(Error::config(format!(
                "trajectory has {n} frames, fewer than the window size K = {}",
                self.config.context
            )));
        }
        Ok(())
    }

    /// Full sequence along `trajectory`: one parallel window, then windows
    /// sliding by `K/2`. When fewer than `K/2` frames remain, the last window
    /// pins more slots so it still ends on the final pose.
    pub fn generate_streetscape(
        &self,
        layout: &SceneLayout,
        trajectory: &[CameraPose],
        style: StyleToken,
    ) -> Result<StreetscapeRun> {
        self.require_variant(false)?;
        self.check_length(trajectory.len())?;
        let calls0 = self.model_calls();
        let gbufs = Self::render_all(layout, trajectory)?;
        let (n, k_total, m) = (trajectory.len(), self.config.context, self.config.condition_count());
        let mut frames = self.parallel_denoise(&gbufs[..k_total], style, 0)?;
        let mut steps = vec![0; k_total];
        let mut mismatches = 0;
        let mut w = 1;
        while frames.len() < n {
            let r = m.min(n - frames.len());
            let k = k_total - r;
            let start = frames.len() - k;
            let end = start + k_total;
            let out =
                self.generate_window(&frames[start..], &gbufs[start..end], &trajectory[start..end], style, w as u64)?;
            mismatches += (0..k).filter(|&j| !out[j].bit_eq(&frames[start + j])).count();
            frames.extend(out.into_iter().skip(k));
            steps.resize(frames.len(), w);
            w += 1;
        }
        Ok(StreetscapeRun {
            frames,
            cameras: trajectory.to_vec(),
            steps,
            known_mismatches: Some(mismatches),
            model_calls: self.model_calls() - calls0,
        })
    }

    /// The two in-between frames of a 4-frame window whose first and last
    /// slots are given.
    pub fn interpolate_window(
        &self,
        first: &ImageTensor,
        last: &ImageTensor,
        gbuffers: &[GBuffer],
        cams: &[CameraPose],
        style: StyleToken,
        window: u64,
    ) -> Result<Vec<ImageTensor>> {
        let out = self.interpolate_slots(first, last, gbuffers, cams, style, window)?;
        Ok(out[1..3].to_vec())
    }

    /// Like [`Sampler::interpolate_window`] but returns all four slots.
    pub fn interpolate_slots(
        &self,
        first: &ImageTensor,
        last: &ImageTensor,
        gbuffers: &[GBuffer],
        cams: &[CameraPose],
        style: StyleToken,
        window: u64,
    ) -> Result<Vec<ImageTensor>> {
        if self.config.context != 4 {
            return Err(Error::config("interpolation needs a K = 4 model"));
        }
        self.require_variant(false)?;
        self.check_style(style)?;
        self.check_window(gbuffers, Some(cams))?;
        let slots = [Some(first), None, None, Some(last)];
        let sources = [None, Some(0), Some(3), None];
        let seed = self.window_seed(window);
        let init = self.initial_latents(&slots, &sources, gbuffers, cams, seed)?;
        let control = self.controls(gbuffers, &[])?;
        self.impute_window(&slots, init, &control, style, seed)
    }

    /// Inserts two frames between every consecutive pair: `n` keyframes
    /// become `3n − 2` frames.
    pub fn interpolate_sequence(
        &self,
        layout: &SceneLayout,
        frames: &[ImageTensor],
        cams: &[CameraPose],
        style: StyleToken,
    ) -> Result<(Vec<ImageTensor>, Vec<CameraPose>)> {
        if frames.len() != cams.len() || frames.len() < 2 {
            return Err(Error::config("interpolation needs at least two keyframes with cameras"));
        }
        let mut out_frames = vec![frames[0].clone()];
        let mut out_cams = vec![cams[0]];
        for i in 0..frames.len() - 1 {
            let (a, b) = (cams[i], cams[i + 1]);
            let window = [a, lerp_pose(&a, &b, 1.0 / 3.0), lerp_pose(&a, &b, 2.0 / 3.0), b];
            let gbufs = Self::render_all(layout, &window)?;
            let mid = self.interpolate_window(&frames[i], &frames[i + 1], &gbufs, &window, style, i as u64)?;
            out_frames.extend(mid);
            out_frames.push(frames[i + 1].clone());
            out_cams.extend_from_slice(&window[1..]);
        }
        Ok((out_frames, out_cams))
    }

    /// Baseline without imputation: the condition frames enter through the
    /// control branch as RGB, generated slots see a black image.
    pub fn generate_rgb_control(
        &self,
        layout: &SceneLayout,
        trajectory: &[CameraPose],
        style: StyleToken,
    ) -> Result<StreetscapeRun> {
        self.require_variant(true)?;
        self.check_style(style)?;
        self.check_length(trajectory.len())?;
        let calls0 = self.model_calls();
        let gbufs = Self::render_all(layout, trajectory)?;
        let (n, k_total, m) = (trajectory.len(), self.config.context, self.config.condition_count());
        let control = self.controls(&gbufs[..k_total], &[])?;
        let mut frames = self.parallel_from_controls(&control, style, 0)?;
        let mut steps = vec![0; k_total];
        let mut w = 1;
        while frames.len() < n {
            let r = m.min(n - frames.len());
            let k = k_total - r;
            let start = frames.len() - k;
            let rgb: Vec<Option<&ImageTensor>> =
                (0..k_total).map(|j| frames.get(start + j).filter(|_| j < k)).collect();
            let control = self.controls(&gbufs[start..start + k_total], &rgb)?;
            let out = self.parallel_from_controls(&control, style, w as u64)?;
            frames.extend(out.into_iter().skip(k));
            steps.resize(frames.len(), w);
            w += 1;
        }
        Ok(StreetscapeRun {
            frames,
            cameras: trajectory.to_vec(),
            steps,
            known_mismatches: None,
            model_calls: self.model_calls() - calls0,
        })
    }

    /// Control-branch input the RGB-control path builds for a window whose
    /// first `known.len()` slots are conditioned; exposed for wiring checks.
    pub fn rgb_control_inputs(&self, known: &[ImageTensor], gbuffers: &[GBuffer]) -> Result<Vec<ImageTensor>> {
        self.require_variant(true)?;
        let rgb: Vec<Option<&ImageTensor>> = (0..gbuffers.len()).map(|j| known.get(j)).collect();
        self.controls(gbuffers, &rgb)
    }
}

/// Pose at fraction `s` of the way from `a` to `b` (shortest yaw turn).
pub fn lerp_pose(a: &CameraPose, b: &CameraPose, s: f64) -> CameraPose {
    CameraPose::new(
        a.position + (b.position - a.position) * s,
        a.yaw + yaw_delta(a.yaw, b.yaw) * s,
        a.pitch + (b.pitch - a.pitch) * s,
        a.intrinsics,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use streetscape_core::ScheduleKind;
    use streetscape_model::init_backbone;
    use streetscape_scene::{CellClass, Intrinsics};

    fn sampler(warp: bool) -> Sampler {
        let w = init_backbone(&BackboneConfig::probe(), 1).unwrap();
        let cfg = SamplerConfig { steps: 2, resample: 0, warp_init: warp, ..Default::default() };
        Sampler::new(&w, cfg, NoiseSchedule::build(1000, ScheduleKind::Cosine).unwrap()).unwrap()
    }

    #[test]
    fn warp_init_flag_controls_generated_latents() {
        let layout = SceneLayout::filled(16, 16, 1.0, CellClass::Road).unwrap();
        let cam = CameraPose::new(Vector3::new(8.0, 8.0, 2.0), 0.0, -0.6, Intrinsics::new(60.0, 8, 8));
        let next = CameraPose::new(Vector3::new(8.5, 8.0, 2.0), 0.0, -0.6, Intrinsics::new(60.0, 8, 8));
        let cams = [cam, next];
        let gbufs = [render_gbuffer(&layout, &cam).unwrap(), render_gbuffer(&layout, &next).unwrap()];
        let frame = ImageTensor::filled(3, 8, 8, 0.5);
        let slots = [Some(&frame), None];
        let sources = [None, Some(0)];
        let (off, on) = (sampler(false), sampler(true));
        let pure = off.initial_latents(&slots, &sources, &gbufs, &cams, 5).unwrap();
        let mut rng = NoiseRng::derived(5, &[TAG_INIT]);
        for z in &pure {
            assert!(z.bit_eq(&off.noise(&mut rng)));
        }
        let warped = on.initial_latents(&slots, &sources, &gbufs, &cams, 5).unwrap();
        assert!(warped[0].bit_eq(&pure[0]));
        assert!(!warped[1].bit_eq(&pure[1]));
    }
}
