use streetscape_core::diffusion::{forward_diffuse, NoiseSchedule};
use streetscape_core::{Error, ImageTensor, NoiseRng, Result};
use streetscape_scene::{warp_frame, CameraPose, GBuffer};

/// Noised copy of a known frame at level `t`; exactly `frame` at `t = 0`.
pub fn impute_latent(
    frame: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<ImageTensor> {
    let (c, h, w) = frame.shape();
    let eps = rng.normal_tensor(c, h, w);
    forward_diffuse(frame, t, &eps, schedule)
}

/// Initial latents at level `T` for the generated slots: each previous frame
/// is warped into its new camera (holes stay mid-gray) and fully noised.
pub fn warp_init(
    prev_frames: &[ImageTensor],
    gbufs_prev: &[GBuffer],
    cams_prev: &[CameraPose],
    cams_new: &[CameraPose],
    schedule: &NoiseSchedule,
    rng: &mut NoiseRng,
) -> Result<Vec<ImageTensor>> {
    let m = prev_frames.len();
    if gbufs_prev.len() != m || cams_prev.len() != m || cams_new.len() != m {
        return Err(Error::contract(format!(
            "warp_init: {m} frames need as many G-buffers ({}), source ({}) and target ({}) cameras",
            gbufs_prev.len(),
            cams_prev.len(),
            cams_new.len()
        )));
    }
    let t = schedule.steps();
    (0..m)
        .map(|j| {
            let warped = warp_frame(&prev_frames[j], &gbufs_prev[j], &cams_prev[j], &cams_new[j])?;
            impute_latent(&warped.image, t, schedule, rng)
        })
        .collect()
}
