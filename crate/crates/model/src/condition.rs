//! Per-frame inputs of the control branch.

use streetscape_core::{Error, ImageTensor, Result};
use streetscape_scene::GBuffer;

/// Concatenates a G-buffer with an optional condition RGB frame.
///
/// The RGB part is mapped from `[-1, 1]` to `[0, 1]`, so a missing frame
/// (`None`) is an exactly-zero black image.
pub fn control_frame(gbuffer: &ImageTensor, rgb: Option<&ImageTensor>, with_rgb: bool) -> Result<ImageTensor> {
    let (gc, h, w) = gbuffer.shape();
    if !with_rgb {
        if rgb.is_some() {
            return Err(Error::contract("condition RGB given to a model without RGB control"));
        }
        return Ok(gbuffer.clone());
    }
    let mut data = Vec::with_capacity((gc + 3) * h * w);
    data.extend_from_slice(gbuffer.data());
    match rgb {
        Some(img) => {
            if img.shape() != (3, h, w) {
                return Err(Error::contract(format!(
                    "condition RGB has shape {:?}, expected {:?}",
                    img.shape(),
                    (3, h, w)
                )));
            }
            data.extend(img.data().iter().map(|&v| (v + 1.0) * 0.5));
        }
        None => data.extend(std::iter::repeat_n(0.0, 3 * h * w)),
    }
    ImageTensor::new(gc + 3, h, w, data)
}

pub fn gbuffer_frames(gbuffers: &[GBuffer]) -> Vec<ImageTensor> {
    gbuffers.iter().map(GBuffer::to_tensor).collect()
}
