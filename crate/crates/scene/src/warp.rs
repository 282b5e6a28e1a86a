use nalgebra::Vector3;
use streetscape_core::{Error, ImageTensor, Result};

use crate::camera::{relative_pose, CameraPose};
use crate::gbuffer::GBuffer;
use crate::D_NEAR;

/// A forward-warped image and the pixels that received a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub image: ImageTensor,
    pub valid: Vec<bool>,
}

impl Warped {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Forward-splats `image` from `cam_src` into `cam_dst`.
///
/// Every source pixel with positive disparity is unprojected at depth
/// `D_NEAR / disparity`, moved into the destination camera and written to the
/// nearest destination pixel when it is closer than what is already there.
/// Pixels that receive nothing stay `0` (mid-gray) and are marked invalid.
pub fn warp_frame(
    image: &ImageTensor,
    gbuf_src: &GBuffer,
    cam_src: &CameraPose,
    cam_dst: &CameraPose,
) -> Result<Warped> {
    let (channels, h, w) = image.shape();
    let src = cam_src.intrinsics;
    if (gbuf_src.width(), gbuf_src.height()) != (w, h) || (src.width, src.height) != (w, h) {
        return Err(Error::contract(format!(
            "warp_frame: image {w}x{h}, G-buffer {}x{}, camera {}x{} must agree",
            gbuf_src.width(),
            gbuf_src.height(),
            src.width,
            src.height
        )));
    }
    cam_src.validate()?;
    cam_dst.validate()?;
    let dst = cam_dst.intrinsics;
    let (dw, dh) = (dst.width, dst.height);
    let rel = relative_pose(cam_src, cam_dst);
    let (f_src, (cx_src, cy_src)) = (src.focal_px(), src.center());
    let (f_dst, (cx_dst, cy_dst)) = (dst.focal_px(), dst.center());

    let mut out = ImageTensor::zeros(channels, dh, dw);
    let mut zbuf = vec![f64::INFINITY; dw * dh];
    let mut valid = vec![false; dw * dh];
    for y in 0..h {
        for x in 0..w {
            let disparity = gbuf_src.disparity_at(x, y);
            if disparity <= 0.0 {
                continue;
            }
            let depth = D_NEAR / disparity as f64;
            let p_src = Vector3::new(
                (x as f64 + 0.5 - cx_src) / f_src * depth,
                (y as f64 + 0.5 - cy_src) / f_src * depth,
                depth,
            );
            let p = rel.apply(&p_src);
            if p.z <= 1e-6 {
                continue;
            }
            let u = cx_dst + f_dst * p.x / p.z;
            let v = cy_dst + f_dst * p.y / p.z;
            if !(u >= 0.0 && v >= 0.0 && u < dw as f64 && v < dh as f64) {
                continue;
            }
            let (tx, ty) = (u.floor() as usize, v.floor() as usize);
            let i = ty * dw + tx;
            if p.z < zbuf[i] {
                zbuf[i] = p.z;
                valid[i] = true;
                for c in 0..channels {
                    out.set(c, ty, tx, image.get(c, y, x));
                }
            }
        }
    }
    Ok(Warped { image: out, valid })
}

/// PSNR in dB over the masked pixels of images in `[-1, 1]` (peak-to-peak 2).
pub fn masked_psnr(a: &ImageTensor, b: &ImageTensor, mask: &[bool]) -> Option<f64> {
    let (c, h, w) = a.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for k in 0..c {
                let d = a.get(k, y, x) as f64 - b.get(k, y, x) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return None;
    }
    let mse = sum / n as f64;
    Some(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::gbuffer::{render_gbuffer, ScreenClass};
    use crate::layout::{CellClass, SceneLayout};
    use streetscape_core::NoiseRng;

    fn street() -> SceneLayout {
        let mut l = SceneLayout::filled(64, 64, 1.0, CellClass::Road).unwrap();
        for col in 40..50 {
            for row in 10..54 {
                l.set_cell(col, row, CellClass::Building, 12.0);
            }
        }
        l
    }

    #[test]
    fn identity_pose_is_lossless_on_non_sky() {
        let layout = street();
        let cam = CameraPose::new(Vector3::new(30.0, 32.0, 2.0), 0.1, 0.0, Intrinsics::default());
        let g = render_gbuffer(&layout, &cam).unwrap();
        let img = NoiseRng::new(4).normal_tensor(3, 64, 64);
        let warped = warp_frame(&img, &g, &cam, &cam).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let non_sky = g.class_at(x, y) != ScreenClass::Sky;
                assert_eq!(warped.valid[y * 64 + x], non_sky);
                if non_sky {
                    for c in 0..3 {
                        assert_eq!(warped.image.get(c, y, x), img.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn lateral_translation_shifts_by_pinhole_disparity() {
        // A wall at x = 40 filling the view from 10 m away.
        let mut layout = SceneLayout::filled(64, 64, 1.0, CellClass::Road).unwrap();
        for col in 40..64 {
            for row in 0..64 {
                layout.set_cell(col, row, CellClass::Building, 30.0);
            }
        }
        let intr = Intrinsics::new(40.0, 32, 32);
        let src = CameraPose::new(Vector3::new(30.0, 32.0, 10.0), 0.0, 0.0, intr);
        let dx = 0.6;
        // Moving right means moving towards -y for a camera facing +x.
        let dst = CameraPose::new(Vector3::new(30.0, 32.0 - dx, 10.0), 0.0, 0.0, intr);
        let g = render_gbuffer(&layout, &src).unwrap();
        assert!(g.classes().iter().all(|&c| c == ScreenClass::Wall));
        let img = NoiseRng::new(5).normal_tensor(1, 32, 32);
        let warped = warp_frame(&img, &g, &src, &dst).unwrap();
        let shift = (intr.focal_px() * dx / 10.0).round() as usize;
        assert!(shift > 0);
        for y in 0..32 {
            for x in shift..32 {
                assert!(warped.valid[y * 32 + x - shift]);
                assert_eq!(warped.image.get(0, y, x - shift), img.get(0, y, x));
            }
        }
    }

    #[test]
    fn all_sky_gives_empty_mask() {
        let layout = SceneLayout::filled(16, 16, 1.0, CellClass::Road).unwrap();
        let cam = CameraPose::new(Vector3::new(8.0, 8.0, 2.0), 0.0, 0.9, Intrinsics::new(60.0, 16, 16));
        let g = render_gbuffer(&layout, &cam).unwrap();
        let warped = warp_frame(&ImageTensor::zeros(3, 16, 16), &g, &cam, &cam).unwrap();
        assert_eq!(warped.valid_count(), 0);
    }

    #[test]
    fn validity_is_subset_of_positive_disparity_sources() {
        let layout = street();
        let src = CameraPose::new(Vector3::new(30.0, 32.0, 2.0), 0.0, 0.0, Intrinsics::default());
        let dst = CameraPose::new(Vector3::new(31.5, 32.5, 2.0), 0.3, 0.0, Intrinsics::default());
        let g = render_gbuffer(&layout, &src).unwrap();
        let n_src = g.disparity().iter().filter(|&&d| d > 0.0).count();
        let warped = warp_frame(&ImageTensor::zeros(3, 64, 64), &g, &src, &dst).unwrap();
        assert!(warped.valid_count() <= n_src);
        assert!(warped.valid_count() > 0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let layout = street();
        let cam = CameraPose::new(Vector3::new(30.0, 32.0, 2.0), 0.0, 0.0, Intrinsics::default());
        let g = render_gbuffer(&layout, &cam).unwrap();
        assert!(warp_frame(&ImageTensor::zeros(3, 32, 32), &g, &cam, &cam).is_err());
    }
}
